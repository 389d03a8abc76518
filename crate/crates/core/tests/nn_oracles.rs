mod common;

use approx::assert_abs_diff_eq;
use ndarray::{Array2, Axis};
use noisycl::nn::{self, Batch, LossKind, Mlp, SgdState};
use proptest::prelude::*;
use rand::Rng;

use common::{gradient_check, kink_distance, random_problem, rng, scalar_forward};

#[test]
fn forward_matches_scalar_chain() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let model = Mlp::new(7, [5, 4], 3, &mut r).unwrap();
        let x = Array2::from_shape_fn((4, 7), |_| r.random_range(-2.0..2.0));
        let probs = model.forward(x.view()).unwrap();
        for (row, p) in x.rows().into_iter().zip(probs.rows()) {
            let expected = scalar_forward(&model, row.as_slice().unwrap());
            for (a, b) in p.iter().zip(&expected) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn rows_are_independent() {
    let mut r = rng(5);
    let model = Mlp::new(3, [4, 4], 3, &mut r).unwrap();
    let x = Array2::from_shape_fn((3, 3), |_| r.random_range(-1.0..1.0));
    let full = model.forward(x.view()).unwrap();
    let single = model.forward(x.slice(ndarray::s![1..2, ..])).unwrap();
    assert_eq!(full.row(1), single.row(0));
}

#[test]
fn duplicated_batch_gives_identical_gradient() {
    for kind in ["cross_entropy", "masked_mse"] {
        let (model, batch, loss) = random_problem(11, kind);
        let (_, g1) = nn::backward(&model, &batch, &loss).unwrap();
        let x = ndarray::concatenate(Axis(0), &[batch.features(), batch.features()]).unwrap();
        let t = ndarray::concatenate(Axis(0), &[batch.targets(), batch.targets()]).unwrap();
        let mut doubled = Batch::new(x, t).unwrap();
        if let Some(m) = batch.mask() {
            doubled = doubled.with_mask(m.clone()).unwrap();
        }
        let (_, g2) = nn::backward(&model, &doubled, &loss).unwrap();
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (u, v) in a.weight.iter().zip(&b.weight) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn momentum_unrolls_by_hand() {
    let mut r = rng(2);
    let mut model = Mlp::new(2, [2, 2], 2, &mut r).unwrap();
    let before = model.clone();
    let batch = Batch::from_labels(Array2::from_elem((1, 2), 0.5), &[1], 2).unwrap();
    let (_, grads) = nn::backward(&model, &batch, &LossKind::CrossEntropy).unwrap();
    let mut opt = SgdState::new(&model, 0.1, 0.9, 0.0).unwrap();
    opt.step(&mut model, &grads).unwrap();
    opt.step(&mut model, &grads).unwrap();
    for ((a, b), g) in before.layers().iter().zip(model.layers()).zip(&grads.layers) {
        for ((w0, w1), gw) in a.weight.iter().zip(&b.weight).zip(&g.weight) {
            assert_abs_diff_eq!(w0 - w1, 0.1 * gw * 2.9, epsilon = 1e-12);
        }
    }
}

#[test]
fn save_load_round_trip() {
    let mut r = rng(9);
    let model = Mlp::new(4, [3, 5], 2, &mut r).unwrap();
    let mut bytes = Vec::new();
    model.save(&mut bytes).unwrap();
    let back = Mlp::load(std::io::Cursor::new(bytes)).unwrap();
    assert_eq!(back.layers(), model.layers());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..1_000_000, kind in 0usize..3) {
        let name = ["cross_entropy", "masked_mse", "ssl_composite"][kind];
        let (model, batch, loss) = random_problem(seed, name);
        prop_assume!(kink_distance(&model, batch.features()) > 1e-3);
        let err = gradient_check(&model, &batch, &loss, 1e-5, 1e-7);
        prop_assert!(err <= 1e-4, "{name}: relative error {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut z = Array2::from_shape_vec((3, 4), values).unwrap();
        nn::softmax_rows(&mut z);
        for row in z.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}
