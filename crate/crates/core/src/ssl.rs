//! Semi-supervised fine-tuning of a copy of the stream model.
//!
//! Per mini-batch: weak views of the labeled and unlabeled samples give the
//! model predictions used for label refinement and pseudo-labels; strong views
//! of both are concatenated, mixed up, and trained on
//! `L_X + λ_U·L_U + λ_r·L_reg`.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::augment::{AugmentKind, AugmentPolicy};
use crate::data::{Sample, Unlabeled};
use crate::error::{Error, Result};
use crate::nn::{self, backward, Batch, CompositeLoss, LossKind, Mlp, RowRole, SgdState};

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Labeled rows per step; unlabeled rows ride along in proportion.
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `w` in `ȳ = w·y + (1 − w)·q`.
    pub refine_weight: f64,
    pub lambda_u: f64,
    pub lambda_r: f64,
    /// Pseudo-label confidence threshold τ.
    pub tau: f64,
    pub mixup_alpha: f64,
    /// Weak views averaged for each refinement / pseudo-label prediction.
    pub weak_views: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            epochs: 60,
            lr: 0.1,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            refine_weight: 0.5,
            lambda_u: 1.0,
            lambda_r: 1.0,
            tau: 0.95,
            mixup_alpha: 4.0,
            weak_views: 1,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lr,
            self.refine_weight,
            self.lambda_u,
            self.lambda_r,
            self.tau,
            self.mixup_alpha,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("fine-tune coefficients must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.refine_weight) {
            return Err(Error::Config(format!(
                "refine weight must lie in [0, 1], got {}",
                self.refine_weight
            )));
        }
        if self.lambda_u < 0.0 || self.lambda_r < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.mixup_alpha <= 0.0 {
            return Err(Error::Config("mixup alpha must be > 0".into()));
        }
        if self.batch_size == 0 || self.weak_views == 0 {
            return Err(Error::Config("batch size and weak views must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("fine-tune lr must be > 0".into()));
        }
        Ok(())
    }
}

/// `w·y + (1 − w)·q`.
pub fn refine_labels(y: &[f64], q: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("refine weight {w} outside [0, 1]")));
    }
    if y.len() != q.len() {
        return Err(Error::Shape(format!("label {} vs prediction {}", y.len(), q.len())));
    }
    Ok(y.iter().zip(q).map(|(&a, &b)| w * a + (1.0 - w) * b).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    /// One-hot argmax when used, the soft prediction otherwise.
    pub target: Vec<f64>,
    pub used: bool,
}

pub fn pseudo_label_from_probs(p: &[f64], tau: f64) -> PseudoLabel {
    let (arg, &max) = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty prediction");
    if max >= tau {
        let mut target = vec![0.0; p.len()];
        target[arg] = 1.0;
        PseudoLabel { target, used: true }
    } else {
        PseudoLabel {
            target: p.to_vec(),
            used: false,
        }
    }
}

pub fn pseudo_label(model: &Mlp, weak: ndarray::ArrayView2<f64>, tau: f64) -> Result<Vec<PseudoLabel>> {
    let probs = model.forward(weak)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| pseudo_label_from_probs(r.as_slice().expect("row-major"), tau))
        .collect())
}

/// Dominant-first mixup: `λ ← max(λ, 1 − λ)`, then the convex blend of features and targets.
pub fn mixup(a: (&[f64], &[f64]), b: (&[f64], &[f64]), lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let lam = lambda.max(1.0 - lambda);
    let blend = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(&u, &v)| lam * u + (1.0 - lam) * v).collect()
    };
    (blend(a.0, b.0), blend(a.1, b.1))
}

/// KL divergence from the uniform prior to the batch-mean prediction.
pub fn reg_loss(mean_pred: &[f64]) -> f64 {
    nn::uniform_prior_kl(mean_pred)
}

pub fn combined_loss(l_x: f64, l_u: f64, l_reg: f64, lambda_u: f64, lambda_r: f64) -> Result<f64> {
    if ![l_x, l_u, l_reg].iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite loss component (L_X={l_x}, L_U={l_u}, L_reg={l_reg})"
        )));
    }
    Ok(l_x + lambda_u * l_u + lambda_r * l_reg)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneStats {
    pub labeled: usize,
    pub unlabeled: usize,
    pub epochs: usize,
    /// Mean components over the final epoch's steps.
    pub supervised_loss: f64,
    pub unsupervised_loss: f64,
    pub reg_loss: f64,
    /// Fraction of unlabeled rows whose pseudo-label passed τ, over the whole event.
    pub acceptance_rate: Option<f64>,
}

fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Average prediction over `views` weak views of `rows`.
fn weak_predictions<'a, R, I>(
    model: &Mlp,
    rows: I,
    views: usize,
    augment: &AugmentPolicy,
    rng: &mut R,
) -> Result<Array2<f64>>
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let dim = model.input_dim();
    let mut acc: Option<Array2<f64>> = None;
    for _ in 0..views {
        let x = augment.batch(AugmentKind::Weak, rows.clone(), dim, rng);
        let p = model.forward(x.view())?;
        acc = Some(match acc {
            Some(sum) => sum + p,
            None => p,
        });
    }
    let mut acc = acc.expect("at least one view");
    acc /= views as f64;
    Ok(acc)
}

/// Trains `Ψ = clone(Θ)` on labeled `S` and unlabeled `U`; `Θ` is untouched.
/// Returns `None` (and logs a warning) when `S` is empty.
pub fn finetune<R: Rng + ?Sized>(
    theta: &Mlp,
    labeled: &[Sample],
    unlabeled: &[Unlabeled],
    cfg: &SslConfig,
    augment: &AugmentPolicy,
    rng: &mut R,
) -> Result<Option<(Mlp, FinetuneStats)>> {
    cfg.validate()?;
    if labeled.is_empty() {
        log::warn!("fine-tune skipped: no labeled samples");
        return Ok(None);
    }
    let classes = theta.num_classes();
    let dim = theta.input_dim();
    let mut psi = theta.clone_params();
    let mut opt = SgdState::new(&psi, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
        .map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;

    let (n_s, n_u) = (labeled.len(), unlabeled.len());
    // Epochs run over S; each step adds a proportional slice of U.
    let steps = n_s.div_ceil(cfg.batch_size).max(1);
    let mut s_order: Vec<usize> = (0..n_s).collect();
    let mut u_order: Vec<usize> = (0..n_u).collect();
    let mut stats = FinetuneStats {
        labeled: n_s,
        unlabeled: n_u,
        epochs: cfg.epochs,
        ..Default::default()
    };
    let (mut accepted, mut offered) = (0usize, 0usize);

    for epoch in 0..cfg.epochs {
        s_order.shuffle(rng);
        u_order.shuffle(rng);
        let mut sums = [0.0f64; 3];
        let mut counted = 0usize;
        for step in 0..steps {
            let s_idx = &s_order[step * n_s / steps..(step + 1) * n_s / steps];
            let u_idx = &u_order[step * n_u / steps..(step + 1) * n_u / steps];
            if s_idx.is_empty() && u_idx.is_empty() {
                continue;
            }
            let s_rows = s_idx.iter().map(|&i| labeled[i].features());
            let u_rows = u_idx.iter().map(|&i| unlabeled[i].features());

            // Targets from weak views (treated as constants).
            let mut targets: Vec<Vec<f64>> = Vec::with_capacity(s_idx.len() + u_idx.len());
            let mut roles: Vec<RowRole> = Vec::with_capacity(s_idx.len() + u_idx.len());
            if !s_idx.is_empty() {
                let q = weak_predictions(&psi, s_rows.clone(), cfg.weak_views, augment, rng)?;
                for (k, &i) in s_idx.iter().enumerate() {
                    let y = one_hot(labeled[i].label(), classes);
                    let qk = q.row(k);
                    targets.push(refine_labels(&y, qk.as_slice().expect("row"), cfg.refine_weight)?);
                    roles.push(RowRole::Labeled);
                }
            }
            if !u_idx.is_empty() {
                let r = weak_predictions(&psi, u_rows.clone(), cfg.weak_views, augment, rng)?;
                for row in r.rows() {
                    let pl = pseudo_label_from_probs(row.as_slice().expect("row"), cfg.tau);
                    offered += 1;
                    accepted += usize::from(pl.used);
                    roles.push(RowRole::Unlabeled { used: pl.used });
                    targets.push(pl.target);
                }
            }

            // Strong views of both sets, then mixup across the concatenation.
            let strong = augment.batch(AugmentKind::Strong, s_rows.chain(u_rows), dim, rng);
            let n = strong.nrows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let lambda: f64 = beta.sample(rng);
            let mut mixed_x = Array2::zeros((n, dim));
            let mut mixed_t = Array2::zeros((n, classes));
            for i in 0..n {
                let j = perm[i];
                let (x, t) = mixup(
                    (strong.row(i).as_slice().expect("row"), &targets[i]),
                    (strong.row(j).as_slice().expect("row"), &targets[j]),
                    lambda,
                );
                mixed_x.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
                mixed_t.row_mut(i).assign(&ndarray::ArrayView1::from(&t));
            }
            let batch = Batch::new(mixed_x, mixed_t)?;
            let kind = LossKind::SslComposite(CompositeLoss {
                roles,
                lambda_u: cfg.lambda_u,
                lambda_r: cfg.lambda_r,
            });
            let (value, grads) = backward(&psi, &batch, &kind)?;
            combined_loss(
                value.supervised,
                value.unsupervised,
                value.regularizer,
                cfg.lambda_u,
                cfg.lambda_r,
            )
            .map_err(|e| Error::Divergence(format!("epoch {epoch} step {step}: {e}")))?;
            opt.step(&mut psi, &grads)?;
            sums[0] += value.supervised;
            sums[1] += value.unsupervised;
            sums[2] += value.regularizer;
            counted += 1;
        }
        if epoch + 1 == cfg.epochs && counted > 0 {
            stats.supervised_loss = sums[0] / counted as f64;
            stats.unsupervised_loss = sums[1] / counted as f64;
            stats.reg_loss = sums[2] / counted as f64;
        }
    }
    stats.acceptance_rate = (offered > 0).then(|| accepted as f64 / offered as f64);
    Ok(Some((psi, stats)))
}

/// Mean prediction across the rows of a probability matrix.
pub fn mean_prediction(probs: &Array2<f64>) -> Vec<f64> {
    probs
        .mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}
