mod common;

use std::collections::VecDeque;
use std::sync::Arc;

use noisycl::buffers::{
    highest_indices, lowest_indices, update_clean_replay, update_noisy_replay, LabeledLossBuffer,
    LossRecord, ReplayBuffer, Scored,
};
use noisycl::data::Sample;
use noisycl::separation::ClassMask;
use proptest::prelude::*;

use common::{buffer_trial, oracle_select};

fn filled(losses: &[f64]) -> LabeledLossBuffer {
    let mask = Arc::new(ClassMask::all(2));
    let mut buf = LabeledLossBuffer::new(losses.len()).unwrap();
    let mut pending: VecDeque<Scored> = losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| Scored {
            sample: Sample::new(vec![0.0], 0, i as u64),
            record: LossRecord {
                loss,
                mask: Arc::clone(&mask),
            },
        })
        .collect();
    buf.fill(&mut pending);
    buf
}

fn replay_indices(r: &ReplayBuffer) -> Vec<u64> {
    r.entries().map(|e| e.sample.stream_index()).collect()
}

#[test]
fn clean_intake_takes_lowest_losses() {
    let c = filled(&[0.01, 0.5, 0.02, 0.9]);
    let mut bc = ReplayBuffer::new(2);
    update_clean_replay(&mut bc, &c);
    let mut got = replay_indices(&bc);
    got.sort_unstable();
    assert_eq!(got, vec![0, 2]);
}

#[test]
fn ties_keep_insertion_order() {
    let c = filled(&[0.3; 5]);
    let mut bc = ReplayBuffer::new(2);
    update_clean_replay(&mut bc, &c);
    assert_eq!(replay_indices(&bc), vec![0, 1]);
}

#[test]
fn noisy_intake_takes_highest_losses() {
    let n = filled(&[0.3, 1.2, 0.4]);
    let mut bn = ReplayBuffer::new(1);
    update_noisy_replay(&mut bn, &n);
    assert_eq!(replay_indices(&bn), vec![1]);
    let mut all = ReplayBuffer::new(3);
    update_noisy_replay(&mut all, &n);
    assert_eq!(all.len(), 3);
}

#[test]
fn randomized_streams_match_oracle() {
    for seed in 0..300 {
        let trial = buffer_trial(seed);
        assert!(trial.ok, "seed {seed}: {}", trial.detail);
    }
}

proptest! {
    #[test]
    fn selection_matches_sort_oracle(
        losses in proptest::collection::vec(0u8..6, 0..40),
        n in 0usize..45,
    ) {
        let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
        let mut low = lowest_indices(&losses, n);
        low.sort_unstable();
        prop_assert_eq!(low, oracle_select(&losses, n, false));
        let mut high = highest_indices(&losses, n);
        high.sort_unstable();
        prop_assert_eq!(high, oracle_select(&losses, n, true));
    }

    #[test]
    fn appended_noisy_losses_dominate_the_rest(
        losses in proptest::collection::vec(0.0f64..5.0, 1..30),
        n in 1usize..30,
    ) {
        let picked = highest_indices(&losses, n);
        let min_in = picked.iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min);
        let max_out = (0..losses.len())
            .filter(|i| !picked.contains(i))
            .map(|i| losses[i])
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_in >= max_out);
    }
}
