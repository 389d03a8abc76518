//! Dense two-hidden-layer perceptron with exact manual gradients.
//!
//! Everything is `f64`. Layer weights are stored `[out × in]`, batches are
//! row-major `[B × d]`, and every loss is a mean over the batch rows.

use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance used when validating that a target row is a distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTag {
    Theta,
    Psi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || {
            rng.random_range(-limit..=limit)
        });
        Dense {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// The classifier `f(·; Θ)`: input → dense → ReLU → dense → ReLU → dense → softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    tag: ParamTag,
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    /// Input to each layer (`x`, then the post-activation hidden states).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: [usize; 2],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_dims(input_dim, hidden, classes)?;
        let widths = [input_dim, hidden[0], hidden[1], classes];
        let layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            activation: Activation::Relu,
            tag: ParamTag::Theta,
        })
    }

    /// All-zero parameters; its output is uniform for every input.
    pub fn zeros(input_dim: usize, hidden: [usize; 2], classes: usize) -> Result<Self> {
        check_dims(input_dim, hidden, classes)?;
        let widths = [input_dim, hidden[0], hidden[1], classes];
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Mlp {
            layers,
            activation: Activation::Relu,
            tag: ParamTag::Theta,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, tag: ParamTag) -> Result<Self> {
        if layers.len() != 3 {
            return Err(Error::Shape(format!(
                "expected 3 dense layers (two hidden), got {}",
                layers.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {} emits {} values but layer {} expects {}",
                    i,
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
            if !layer.is_finite() {
                return Err(Error::Input(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Mlp {
            layers,
            activation: Activation::Relu,
            tag,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn tag(&self) -> ParamTag {
        self.tag
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn hidden_widths(&self) -> [usize; 2] {
        [self.layers[0].outputs(), self.layers[1].outputs()]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Deep copy used as the fine-tuning model Ψ.
    pub fn clone_params(&self) -> Mlp {
        Mlp {
            layers: self.layers.clone(),
            activation: self.activation,
            tag: ParamTag::Psi,
        }
    }

    /// Mutable access for tests and finite-difference checks.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Row-wise class probabilities for a `[B × d]` feature matrix.
    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(features)?;
        Ok(self.trace(features).probs)
    }

    /// Same as [`Mlp::forward`] but evaluated `chunk` rows at a time.
    pub fn predict(&self, features: ArrayView2<f64>, chunk: usize) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let chunk = chunk.max(1);
        let mut out = Array2::zeros((features.nrows(), self.num_classes()));
        let mut start = 0;
        while start < features.nrows() {
            let end = (start + chunk).min(features.nrows());
            let probs = self.trace(features.slice(s![start..end, ..])).probs;
            out.slice_mut(s![start..end, ..]).assign(&probs);
            start = end;
        }
        Ok(out)
    }

    fn check_input(&self, features: ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::Shape("empty feature matrix".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(())
    }

    fn trace(&self, features: ArrayView2<f64>) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut current = features.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(current);
            if i == last {
                softmax_rows(&mut z);
                return Trace {
                    inputs,
                    pre,
                    probs: z,
                };
            }
            let h = z.mapv(|v| v.max(0.0));
            pre.push(z);
            current = h;
        }
        unreachable!("an Mlp always has an output layer")
    }

    /// Writes the parameters as a plain-text shape header followed by a flat
    /// little-endian `f64` array (each layer: weights row-major, then bias).
    pub fn save<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "mlp-params v1")?;
        writeln!(out, "layers {}", self.layers.len())?;
        for layer in &self.layers {
            writeln!(out, "{} {}", layer.outputs(), layer.inputs())?;
        }
        writeln!(out, "data")?;
        for layer in &self.layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut input: R) -> Result<Mlp> {
        let bad = |msg: &str| Error::Format {
            path: "<mlp params>".into(),
            msg: msg.to_string(),
        };
        let mut line = String::new();
        let mut next_line = |input: &mut R| -> Result<String> {
            line.clear();
            input
                .read_line(&mut line)
                .map_err(|e| Error::io("<mlp params>", e))?;
            Ok(line.trim().to_string())
        };
        if next_line(&mut input)? != "mlp-params v1" {
            return Err(bad("missing header"));
        }
        let count: usize = next_line(&mut input)?
            .strip_prefix("layers ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad layer count"))?;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let text = next_line(&mut input)?;
            let dims: Vec<usize> = text
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad layer shape")))
                .collect::<Result<_>>()?;
            if dims.len() != 2 {
                return Err(bad("bad layer shape"));
            }
            shapes.push((dims[0], dims[1]));
        }
        if next_line(&mut input)? != "data" {
            return Err(bad("missing data marker"));
        }
        let mut layers = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        let mut read_f64 = |input: &mut R| -> Result<f64> {
            input
                .read_exact(&mut buf)
                .map_err(|e| Error::io("<mlp params>", e))?;
            Ok(f64::from_le_bytes(buf))
        };
        for (outputs, inputs) in shapes {
            let mut layer = Dense::zeros(inputs, outputs);
            for v in layer.weight.iter_mut() {
                *v = read_f64(&mut input)?;
            }
            for v in layer.bias.iter_mut() {
                *v = read_f64(&mut input)?;
            }
            layers.push(layer);
        }
        Mlp::from_layers(layers, ParamTag::Theta)
    }
}

fn check_dims(input_dim: usize, hidden: [usize; 2], classes: usize) -> Result<()> {
    if input_dim == 0 || hidden.contains(&0) {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 output classes, got {classes}"
        )));
    }
    Ok(())
}

/// In-place, max-subtracted row softmax.
pub fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Mean over rows of `-Σ_j t_j ln p_j`, with `p` clamped to [`PROB_FLOOR`].
pub fn cross_entropy(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let total: f64 = Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc - t * p.max(PROB_FLOOR).ln());
    Ok(total / pred.nrows() as f64)
}

/// A training batch. Targets are label distributions (one-hot or soft).
#[derive(Clone, Debug)]
pub struct Batch {
    features: Array2<f64>,
    targets: Array2<f64>,
    mask: Option<Array1<f64>>,
}

impl Batch {
    pub fn new(features: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Shape("batch needs at least one row".into()));
        }
        if features.nrows() != targets.nrows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} target rows",
                features.nrows(),
                targets.nrows()
            )));
        }
        for (i, row) in targets.rows().into_iter().enumerate() {
            if row.iter().any(|&t| !t.is_finite() || t < 0.0) {
                return Err(Error::Input(format!("target row {i} has invalid entries")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(Error::Input(format!(
                    "target row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Batch {
            features,
            targets,
            mask: None,
        })
    }

    /// One-hot targets over `classes` outputs.
    pub fn from_labels(features: Array2<f64>, labels: &[usize], classes: usize) -> Result<Self> {
        let mut targets = Array2::zeros((labels.len(), classes));
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Input(format!("label {y} out of range 0..{classes}")));
            }
            targets[[i, y]] = 1.0;
        }
        Batch::new(features, targets)
    }

    pub fn with_mask(mut self, mask: Array1<f64>) -> Result<Self> {
        if mask.len() != self.targets.ncols() {
            return Err(Error::Shape(format!(
                "mask has {} entries, batch has {} classes",
                mask.len(),
                self.targets.ncols()
            )));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Input("mask entries must be 0 or 1".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }

    pub fn mask(&self) -> Option<&Array1<f64>> {
        self.mask.as_ref()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// How a row of a semi-supervised batch enters the composite loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowRole {
    /// Contributes to the supervised term against its (refined) target.
    Labeled,
    /// Contributes to the unsupervised term only if its pseudo-label was accepted.
    Unlabeled { used: bool },
}

/// `L = L_X + λ_U·L_U + λ_r·L_reg` over one mini-batch.
///
/// `L_X` is the mean cross-entropy over labeled rows, `L_U` the cross-entropy
/// summed over accepted unlabeled rows divided by the number of unlabeled rows,
/// and `L_reg` the KL divergence from the uniform prior to the batch-mean
/// prediction. An empty `roles` list marks every row as labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeLoss {
    pub roles: Vec<RowRole>,
    pub lambda_u: f64,
    pub lambda_r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    /// Uses the batch's class mask.
    MaskedMse,
    SslComposite(CompositeLoss),
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "masked_mse" => Ok(LossKind::MaskedMse),
            "ssl_composite" => Ok(LossKind::SslComposite(CompositeLoss {
                roles: Vec::new(),
                lambda_u: 1.0,
                lambda_r: 1.0,
            })),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Loss value and, for the composite loss, its three components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub regularizer: f64,
}

impl LossValue {
    fn plain(total: f64) -> Self {
        LossValue {
            total,
            supervised: total,
            ..Default::default()
        }
    }
}

/// Gradients with the same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }
}

/// Loss of `model` on `batch` without computing gradients.
pub fn loss(model: &Mlp, batch: &Batch, kind: &LossKind) -> Result<LossValue> {
    check_batch(model, batch)?;
    let probs = model.trace(batch.features()).probs;
    let (value, _) = loss_and_logit_grad(&probs, batch, kind, false)?;
    Ok(value)
}

/// Exact gradient of the chosen loss with respect to every parameter.
pub fn backward(model: &Mlp, batch: &Batch, kind: &LossKind) -> Result<(LossValue, Gradients)> {
    check_batch(model, batch)?;
    let trace = model.trace(batch.features());
    let (value, dz) = loss_and_logit_grad(&trace.probs, batch, kind, true)?;
    let mut delta = dz.expect("gradient requested");
    let layers = model.layers();
    let mut grads: Vec<Dense> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let weight = delta.t().dot(&trace.inputs[l]);
        let bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut upstream = delta.dot(&layers[l].weight);
            Zip::from(&mut upstream)
                .and(&trace.pre[l - 1])
                .for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = upstream;
        }
        grads.push(Dense { weight, bias });
    }
    grads.reverse();
    Ok((value, Gradients { layers: grads }))
}

fn check_batch(model: &Mlp, batch: &Batch) -> Result<()> {
    model.check_input(batch.features())?;
    if batch.targets.ncols() != model.num_classes() {
        return Err(Error::Shape(format!(
            "targets have {} classes, model outputs {}",
            batch.targets.ncols(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Loss value and `dL/dz` (gradient w.r.t. the pre-softmax logits).
fn loss_and_logit_grad(
    probs: &Array2<f64>,
    batch: &Batch,
    kind: &LossKind,
    want_grad: bool,
) -> Result<(LossValue, Option<Array2<f64>>)> {
    let targets = batch.targets();
    let rows = probs.nrows() as f64;
    match kind {
        LossKind::CrossEntropy => {
            let value = cross_entropy(probs.view(), targets)?;
            let grad = want_grad.then(|| {
                let mut dz = probs.clone();
                for (mut row, t) in dz.rows_mut().into_iter().zip(targets.rows()) {
                    let mass = t.sum();
                    Zip::from(&mut row).and(&t).for_each(|g, &tj| {
                        *g = (*g * mass - tj) / rows;
                    });
                }
                dz
            });
            Ok((LossValue::plain(value), grad))
        }
        LossKind::MaskedMse => {
            let mask = batch.mask().ok_or_else(|| {
                Error::Config("masked_mse loss requires a class mask on the batch".into())
            })?;
            let mut total = 0.0;
            let mut dp = Array2::zeros(probs.dim());
            for ((p, y), mut g) in probs
                .rows()
                .into_iter()
                .zip(targets.rows())
                .zip(dp.rows_mut())
            {
                for j in 0..p.len() {
                    let r = y[j] - mask[j] * p[j];
                    total += r * r;
                    g[j] = -2.0 * mask[j] * r / rows;
                }
            }
            let grad = want_grad.then(|| softmax_backward(probs, &dp));
            Ok((LossValue::plain(total / rows), grad))
        }
        LossKind::SslComposite(spec) => composite(probs, targets, spec, want_grad),
    }
}

fn composite(
    probs: &Array2<f64>,
    targets: ArrayView2<f64>,
    spec: &CompositeLoss,
    want_grad: bool,
) -> Result<(LossValue, Option<Array2<f64>>)> {
    let n = probs.nrows();
    let classes = probs.ncols();
    let roles: Vec<RowRole> = if spec.roles.is_empty() {
        vec![RowRole::Labeled; n]
    } else if spec.roles.len() == n {
        spec.roles.clone()
    } else {
        return Err(Error::Shape(format!(
            "{} row roles for a batch of {} rows",
            spec.roles.len(),
            n
        )));
    };
    let n_labeled = roles.iter().filter(|r| **r == RowRole::Labeled).count();
    let n_unlabeled = n - n_labeled;

    // Per-row weight on the row's cross-entropy.
    let weights: Vec<f64> = roles
        .iter()
        .map(|r| match r {
            RowRole::Labeled => 1.0 / n_labeled as f64,
            RowRole::Unlabeled { used: true } => 1.0 / n_unlabeled as f64,
            RowRole::Unlabeled { used: false } => 0.0,
        })
        .collect();

    let mut sup = 0.0;
    let mut unsup = 0.0;
    for (i, (p, t)) in probs.rows().into_iter().zip(targets.rows()).enumerate() {
        if weights[i] == 0.0 {
            continue;
        }
        let ce: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&pj, &tj)| -tj * pj.max(PROB_FLOOR).ln())
            .sum();
        match roles[i] {
            RowRole::Labeled => sup += weights[i] * ce,
            RowRole::Unlabeled { .. } => unsup += weights[i] * ce,
        }
    }

    let mean_pred = probs.mean_axis(Axis(0)).expect("non-empty batch");
    let reg = uniform_prior_kl(mean_pred.as_slice().expect("contiguous"));

    let value = LossValue {
        total: sup + spec.lambda_u * unsup + spec.lambda_r * reg,
        supervised: sup,
        unsupervised: unsup,
        regularizer: reg,
    };
    if !want_grad {
        return Ok((value, None));
    }

    let prior = 1.0 / classes as f64;
    let mut dz = Array2::zeros(probs.dim());
    for (i, ((p, t), mut g)) in probs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(dz.rows_mut())
        .enumerate()
    {
        let scale = match roles[i] {
            RowRole::Labeled => weights[i],
            RowRole::Unlabeled { .. } => spec.lambda_u * weights[i],
        };
        if scale != 0.0 {
            let mass = t.sum();
            for j in 0..classes {
                g[j] = scale * (p[j] * mass - t[j]);
            }
        }
    }
    if spec.lambda_r != 0.0 {
        let mut dp = Array2::zeros(probs.dim());
        for mut row in dp.rows_mut() {
            for c in 0..classes {
                if mean_pred[c] > PROB_FLOOR {
                    row[c] = -spec.lambda_r * prior / (n as f64 * mean_pred[c]);
                }
            }
        }
        dz += &softmax_backward(probs, &dp);
    }
    Ok((value, Some(dz)))
}

/// Chain rule through a row softmax: `dz_k = p_k (g_k - Σ_j g_j p_j)`.
fn softmax_backward(probs: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(probs.dim());
    for ((p, g), mut out) in probs
        .rows()
        .into_iter()
        .zip(dp.rows())
        .zip(dz.rows_mut())
    {
        let dot: f64 = p.dot(&g);
        Zip::from(&mut out)
            .and(&p)
            .and(&g)
            .for_each(|o, &pk, &gk| *o = pk * (gk - dot));
    }
    dz
}

/// `Σ_c π_c ln(π_c / mean_pred_c)` with `π_c = 1/c` and `mean_pred` clamped.
pub fn uniform_prior_kl(mean_pred: &[f64]) -> f64 {
    let prior = 1.0 / mean_pred.len() as f64;
    mean_pred
        .iter()
        .map(|&m| prior * (prior / m.max(PROB_FLOOR)).ln())
        .sum()
}

/// SGD with classical momentum and L2 weight decay on weights (not biases).
#[derive(Clone, Debug)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Dense>,
}

impl SgdState {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

    pub fn new(model: &Mlp, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        let velocity = model
            .layers()
            .iter()
            .map(|l| Dense::zeros(l.inputs(), l.outputs()))
            .collect();
        Ok(SgdState {
            lr,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn with_defaults(model: &Mlp, lr: f64) -> Result<Self> {
        SgdState::new(
            model,
            lr,
            Self::DEFAULT_MOMENTUM,
            Self::DEFAULT_WEIGHT_DECAY,
        )
    }

    pub fn velocity(&self) -> &[Dense] {
        &self.velocity
    }

    /// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.layers.len() {
            return Err(Error::Shape("gradient layer count mismatch".into()));
        }
        for (g, p) in grads.layers.iter().zip(&model.layers) {
            if g.weight.dim() != p.weight.dim() || g.bias.dim() != p.bias.dim() {
                return Err(Error::Shape("gradient shape mismatch".into()));
            }
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((param, grad), vel) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
        {
            Zip::from(&mut param.weight)
                .and(&grad.weight)
                .and(&mut vel.weight)
                .for_each(|w, &g, v| {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                });
            Zip::from(&mut param.bias)
                .and(&grad.bias)
                .and(&mut vel.bias)
                .for_each(|b, &g, v| {
                    *v = mu * *v + g;
                    *b -= lr * *v;
                });
        }
        Ok(())
    }
}
