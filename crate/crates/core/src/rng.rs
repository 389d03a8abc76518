//! Seed derivation: every random consumer in a run gets its own generator,
//! keyed by the run seed, a purpose tag and an index (cycle or event id), so
//! skipping or adding work in one place never shifts another's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive(seed: u64, tag: &str, index: u64) -> RunRng {
    let key = splitmix64(splitmix64(seed ^ fnv1a(tag)).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(key)
}
