//! Warm-up on a filled delay buffer, masked-MSE scoring, mean-loss
//! thresholding and the clean/noisy split.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{AugmentKind, AugmentPolicy};
use crate::buffers::{LossRecord, Scored};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{backward, Batch, LossKind, Mlp, SgdState};

/// Classes present among the labels of one delay buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    present: Vec<bool>,
}

impl ClassMask {
    pub fn from_labels<I: IntoIterator<Item = usize>>(labels: I, classes: usize) -> Result<Self> {
        let mut present = vec![false; classes];
        for label in labels {
            *present.get_mut(label).ok_or_else(|| {
                Error::Input(format!("label {label} out of range for {classes} classes"))
            })? = true;
        }
        if !present.contains(&true) {
            return Err(Error::Precondition("class mask built from no labels".into()));
        }
        Ok(ClassMask { present })
    }

    pub fn all(classes: usize) -> Self {
        ClassMask {
            present: vec![true; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.present.get(class).copied().unwrap_or(false)
    }

    /// Number of classes present (`c_D`).
    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn weight(&self, class: usize) -> f64 {
        if self.present[class] {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_array(&self) -> Array1<f64> {
        self.present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        WarmupSchedule {
            epochs: 30,
            lr: 0.001,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl WarmupSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("warm-up lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("warm-up batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Stacks sample features into a `[n × d]` matrix.
pub fn feature_matrix<'a, I>(rows: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut flat = Vec::new();
    let mut n = 0;
    for row in rows {
        flat.extend_from_slice(row);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), flat).expect("rows share the feature dimension")
}

/// Mini-batch SGD on cross-entropy against the (noisy) labels. Returns the
/// mean loss of the final epoch, or `None` when no epoch ran.
pub fn warm_up<R: Rng + ?Sized>(
    model: &mut Mlp,
    samples: &[Sample],
    schedule: &WarmupSchedule,
    rng: &mut R,
) -> Result<Option<f64>> {
    schedule.validate()?;
    if schedule.epochs == 0 || samples.is_empty() {
        return Ok(None);
    }
    let classes = model.num_classes();
    let dim = model.input_dim();
    let mut opt = SgdState::new(model, schedule.lr, schedule.momentum, schedule.weight_decay)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last_epoch = 0.0;
    for epoch in 0..schedule.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let x = feature_matrix(chunk.iter().map(|&i| samples[i].features()), dim);
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label()).collect();
            let batch = Batch::from_labels(x, &labels, classes)?;
            let (value, grads) = backward(model, &batch, &LossKind::CrossEntropy)?;
            if !value.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "warm-up loss became {} in epoch {epoch}",
                    value.total
                )));
            }
            opt.step(model, &grads)?;
            total += value.total * chunk.len() as f64;
        }
        last_epoch = total / samples.len() as f64;
    }
    Ok(Some(last_epoch))
}

/// `Σ_j (y_j − m_j·p_j)²`.
pub fn masked_mse(y: &[f64], p: &[f64], mask: &ClassMask) -> Result<f64> {
    if y.len() != p.len() || y.len() != mask.len() {
        return Err(Error::Shape(format!(
            "label {} / prediction {} / mask {} lengths differ",
            y.len(),
            p.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    for j in 0..y.len() {
        let m = mask.weight(j);
        if m == 0.0 && y[j] > 0.0 {
            return Err(Error::Consistency(format!(
                "label mass on class {j}, which the mask excludes"
            )));
        }
        let r = y[j] - m * p[j];
        total += r * r;
    }
    Ok(total)
}

/// The separation threshold: the mean of the losses.
pub fn compute_threshold(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Precondition("threshold of an empty loss list".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub clean: Vec<Scored>,
    pub noisy: Vec<Scored>,
    pub threshold: f64,
    pub mask: Arc<ClassMask>,
}

/// Prediction used for scoring: one clean forward pass, or the average of the
/// clean pass and `views - 1` weakly augmented passes.
pub fn scoring_probabilities<R: Rng + ?Sized>(
    model: &Mlp,
    samples: &[Sample],
    views: usize,
    augment: &AugmentPolicy,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let dim = model.input_dim();
    let x = feature_matrix(samples.iter().map(Sample::features), dim);
    let mut probs = model.predict(x.view(), 1024)?;
    if views > 1 {
        for _ in 1..views {
            let view = augment.batch(
                AugmentKind::Weak,
                samples.iter().map(Sample::features),
                dim,
                rng,
            );
            probs += &model.predict(view.view(), 1024)?;
        }
        probs /= views as f64;
    }
    Ok(probs)
}

/// Scores every sample with the masked MSE and splits at the mean: strictly
/// below the threshold is clean, everything else is noisy. Order is preserved.
pub fn split(samples: Vec<Sample>, probs: &Array2<f64>, mask: Arc<ClassMask>) -> Result<SplitOutcome> {
    if samples.is_empty() {
        return Err(Error::Precondition("cannot split an empty delay buffer".into()));
    }
    if probs.nrows() != samples.len() || probs.ncols() != mask.len() {
        return Err(Error::Shape(format!(
            "{:?} probabilities for {} samples and {} classes",
            probs.dim(),
            samples.len(),
            mask.len()
        )));
    }
    let classes = mask.len();
    let mut losses = Vec::with_capacity(samples.len());
    let mut y = vec![0.0; classes];
    for (s, p) in samples.iter().zip(probs.rows()) {
        y.iter_mut().for_each(|v| *v = 0.0);
        y[s.label()] = 1.0;
        let p = p.as_slice().expect("row-major probabilities");
        losses.push(masked_mse(&y, p, &mask)?);
    }
    let threshold = compute_threshold(&losses)?;
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for (sample, loss) in samples.into_iter().zip(losses) {
        let entry = Scored {
            sample,
            record: LossRecord {
                loss,
                mask: Arc::clone(&mask),
            },
        };
        if loss < threshold {
            clean.push(entry);
        } else {
            noisy.push(entry);
        }
    }
    Ok(SplitOutcome {
        clean,
        noisy,
        threshold,
        mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringOptions {
    /// Number of views averaged when scoring (1 = single clean pass).
    pub views: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions { views: 1 }
    }
}

/// One separation cycle over a delay buffer's contents: mask, warm-up, score, split.
///
/// `extra_warmup` samples (e.g. clean replay) join the warm-up set but are not scored.
pub fn separate<R: Rng + ?Sized>(
    model: &mut Mlp,
    delay: Vec<Sample>,
    extra_warmup: &[Sample],
    schedule: &WarmupSchedule,
    scoring: &ScoringOptions,
    augment: &AugmentPolicy,
    rng: &mut R,
) -> Result<(SplitOutcome, Option<f64>)> {
    let mask = Arc::new(ClassMask::from_labels(
        delay.iter().map(Sample::label),
        model.num_classes(),
    )?);
    let warm_loss = if extra_warmup.is_empty() {
        warm_up(model, &delay, schedule, rng)?
    } else {
        let mut pool = delay.clone();
        pool.extend_from_slice(extra_warmup);
        warm_up(model, &pool, schedule, rng)?
    };
    let probs = scoring_probabilities(model, &delay, scoring.views, augment, rng)?;
    Ok((split(delay, &probs, mask)?, warm_loss))
}
