#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use noisycl::buffers::{BufferConfig, BufferSet, LossRecord, ReplayMode, Scored};
use noisycl::data::Sample;
use noisycl::nn::{self, Batch, CompositeLoss, LossKind, Mlp, RowRole};
use noisycl::separation::ClassMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain nested-loop forward pass, independent of the ndarray implementation.
#[allow(clippy::needless_range_loop)]
pub fn scalar_forward(model: &Mlp, x: &[f64]) -> Vec<f64> {
    let layers = model.layers();
    let mut h = x.to_vec();
    for (k, layer) in layers.iter().enumerate() {
        let (out, inp) = layer.weight.dim();
        let mut z = vec![0.0; out];
        for i in 0..out {
            let mut acc = layer.bias[i];
            for j in 0..inp {
                acc += layer.weight[[i, j]] * h[j];
            }
            z[i] = if k + 1 < layers.len() { acc.max(0.0) } else { acc };
        }
        h = z;
    }
    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Smallest |pre-activation| over all hidden units and rows. Central
/// differences are only meaningful when this is well above the step size.
pub fn kink_distance(model: &Mlp, x: ArrayView2<f64>) -> f64 {
    let layers = model.layers();
    let mut closest = f64::INFINITY;
    for row in x.rows() {
        let mut h = row.to_vec();
        for layer in &layers[..layers.len() - 1] {
            let z: Vec<f64> = (0..layer.weight.nrows())
                .map(|i| layer.bias[i] + layer.weight.row(i).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            closest = z.iter().fold(closest, |m, v| m.min(v.abs()));
            h = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    closest
}

/// Random probability vector with every entry ≥ 0.05 / c.
pub fn random_distribution<R: Rng>(c: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// A small random MLP, batch and loss of the requested kind.
pub fn random_problem(seed: u64, kind: &str) -> (Mlp, Batch, LossKind) {
    let mut r = rng(seed);
    let d = r.random_range(1..=8);
    let c = r.random_range(2..=4);
    let h = [r.random_range(2..=6), r.random_range(2..=6)];
    let b = r.random_range(2..=6);
    let mut model = Mlp::new(d, h, c, &mut r).unwrap();
    for layer in model.layers_mut() {
        layer.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    let x = Array2::from_shape_fn((b, d), |_| r.random_range(-1.0..1.0));
    match kind {
        "cross_entropy" => {
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            (model, Batch::from_labels(x, &labels, c).unwrap(), LossKind::CrossEntropy)
        }
        "masked_mse" => {
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            let mut mask = Array1::from_shape_fn(c, |_| f64::from(r.random_bool(0.5)));
            for &l in &labels {
                mask[l] = 1.0;
            }
            let batch = Batch::from_labels(x, &labels, c).unwrap().with_mask(mask).unwrap();
            (model, batch, LossKind::MaskedMse)
        }
        "ssl_composite" => {
            let mut t = Array2::zeros((b, c));
            let mut roles = Vec::with_capacity(b);
            for i in 0..b {
                t.row_mut(i).assign(&Array1::from(random_distribution(c, &mut r)));
                roles.push(match r.random_range(0..3) {
                    0 => RowRole::Labeled,
                    1 => RowRole::Unlabeled { used: true },
                    _ => RowRole::Unlabeled { used: false },
                });
            }
            let kind = LossKind::SslComposite(CompositeLoss {
                roles,
                lambda_u: r.random_range(0.0..2.0),
                lambda_r: r.random_range(0.0..2.0),
            });
            (model, Batch::new(x, t).unwrap(), kind)
        }
        other => panic!("unknown loss kind {other}"),
    }
}

/// Max relative error between analytic and central-difference gradients.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// entries that are numerically zero from dividing round-off by round-off.
pub fn gradient_check(model: &Mlp, batch: &Batch, kind: &LossKind, h: f64, floor: f64) -> f64 {
    let (_, grads) = nn::backward(model, batch, kind).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let f = |m: &Mlp| nn::loss(m, batch, kind).unwrap().total;
    for (li, g) in grads.layers.iter().enumerate() {
        for idx in 0..g.weight.len() {
            let (i, j) = (idx / g.weight.ncols(), idx % g.weight.ncols());
            let orig = probe.layers()[li].weight[[i, j]];
            probe.layers_mut()[li].weight[[i, j]] = orig + h;
            let up = f(&probe);
            probe.layers_mut()[li].weight[[i, j]] = orig - h;
            let down = f(&probe);
            probe.layers_mut()[li].weight[[i, j]] = orig;
            let num = (up - down) / (2.0 * h);
            let a = g.weight[[i, j]];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
        }
        for i in 0..g.bias.len() {
            let orig = probe.layers()[li].bias[i];
            probe.layers_mut()[li].bias[i] = orig + h;
            let up = f(&probe);
            probe.layers_mut()[li].bias[i] = orig - h;
            let down = f(&probe);
            probe.layers_mut()[li].bias[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = g.bias[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
        }
    }
    worst
}

/// Result of streaming random splits through a [`BufferSet`].
pub struct BufferTrial {
    pub ok: bool,
    pub detail: String,
}

fn scored(index: u64, loss: f64, mask: &Arc<ClassMask>) -> Scored {
    Scored {
        sample: Sample::new(vec![index as f64], 0, index),
        record: LossRecord {
            loss,
            mask: Arc::clone(mask),
        },
    }
}

/// Sort-based oracle: indices of the `n` smallest (or largest) losses, ties
/// broken by position.
pub fn oracle_select(losses: &[f64], n: usize, largest: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = losses[a].partial_cmp(&losses[b]).unwrap();
        let ord = if largest { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Streams random splits with random capacities and checks replay intakes
/// against [`oracle_select`] and the exactly-once partition of the stream.
pub fn buffer_trial(seed: u64) -> BufferTrial {
    let mut r = rng(seed);
    let clean_cap = r.random_range(1..=12);
    let noisy_cap = r.random_range(1..=12);
    let cfg = BufferConfig {
        delay_capacity: 8,
        clean_capacity: clean_cap,
        noisy_capacity: noisy_cap,
        clean_intake: r.random_range(0..=clean_cap),
        noisy_intake: r.random_range(0..=noisy_cap),
        replay_mode: ReplayMode::Append,
        replay_cap: None,
    };
    let mask = Arc::new(ClassMask::all(2));
    let mut buffers = BufferSet::new(&cfg).unwrap();
    // Coarse losses make ties common.
    let coarse = r.random_bool(0.5);
    let mut loss_of: BTreeMap<u64, f64> = BTreeMap::new();
    let (mut clean_side, mut noisy_side) = (Vec::new(), Vec::new());
    let (mut flushed_clean, mut flushed_noisy) = (Vec::new(), Vec::new());
    let mut next = 0u64;
    let mut failures = Vec::new();
    for _ in 0..r.random_range(1..=20) {
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        for _ in 0..r.random_range(0..=10) {
            let loss = if coarse {
                r.random_range(0..4) as f64 / 4.0
            } else {
                r.random_range(0.0..1.0)
            };
            loss_of.insert(next, loss);
            if r.random_bool(0.6) {
                clean_side.push(next);
                clean.push(scored(next, loss, &mask));
            } else {
                noisy_side.push(next);
                noisy.push(scored(next, loss, &mask));
            }
            next += 1;
        }
        let report = buffers
            .absorb(clean, noisy, |sets| {
                let labeled: HashSet<u64> = sets.labeled.iter().map(|s| s.stream_index()).collect();
                let unlabeled: HashSet<u64> =
                    sets.unlabeled.iter().map(|u| u.stream_index()).collect();
                if labeled.len() != sets.labeled.len()
                    || unlabeled.len() != sets.unlabeled.len()
                    || !labeled.is_disjoint(&unlabeled)
                {
                    failures.push("S and U overlap or repeat".to_string());
                }
                Ok(())
            })
            .unwrap();
        flushed_clean.extend(report.flushed_clean);
        flushed_noisy.extend(report.flushed_noisy);
    }

    let check_replay = |flushed: &[u64], cap: usize, intake: usize, got: Vec<u64>, largest: bool| {
        let mut expected = Vec::new();
        for group in flushed.chunks(cap) {
            let losses: Vec<f64> = group.iter().map(|i| loss_of[i]).collect();
            let mut pick: Vec<u64> = oracle_select(&losses, intake, largest)
                .into_iter()
                .map(|k| group[k])
                .collect();
            pick.sort_unstable();
            expected.push(pick);
        }
        let mut got_groups = Vec::new();
        for chunk in got.chunks(intake.max(1)) {
            let mut c = chunk.to_vec();
            c.sort_unstable();
            got_groups.push(c);
        }
        if intake == 0 {
            got_groups.clear();
            expected.retain(|g| !g.is_empty());
        }
        (expected == got_groups, expected, got_groups)
    };
    let clean_got: Vec<u64> = buffers.clean_replay.entries().map(|e| e.sample.stream_index()).collect();
    let noisy_got: Vec<u64> = buffers.noisy_replay.entries().map(|e| e.sample.stream_index()).collect();
    let (ok_c, exp_c, got_c) = check_replay(&flushed_clean, clean_cap, cfg.clean_intake, clean_got, false);
    let (ok_n, exp_n, got_n) = check_replay(&flushed_noisy, noisy_cap, cfg.noisy_intake, noisy_got, true);
    if !ok_c {
        failures.push(format!("clean replay {got_c:?} != oracle {exp_c:?}"));
    }
    if !ok_n {
        failures.push(format!("noisy replay {got_n:?} != oracle {exp_n:?}"));
    }

    // Every streamed sample ends up exactly once on its own side.
    let mut clean_seen = flushed_clean.clone();
    clean_seen.extend(buffers.clean.entries().iter().map(|e| e.sample.stream_index()));
    let mut noisy_seen = flushed_noisy.clone();
    noisy_seen.extend(buffers.noisy.entries().iter().map(|e| e.sample.stream_index()));
    clean_seen.sort_unstable();
    noisy_seen.sort_unstable();
    if clean_seen != clean_side {
        failures.push(format!("clean path {clean_seen:?} != split {clean_side:?}"));
    }
    if noisy_seen != noisy_side {
        failures.push(format!("noisy path {noisy_seen:?} != split {noisy_side:?}"));
    }
    if buffers.clean.len() > clean_cap || buffers.noisy.len() > noisy_cap {
        failures.push("buffer over capacity".into());
    }
    BufferTrial {
        ok: failures.is_empty(),
        detail: failures.join("; "),
    }
}

/// Directory holding the MNIST IDX files: `NOISYCL_MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("NOISYCL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
