//! Deterministic random streams.
//!
//! Every random draw in training comes from a stream keyed by
//! `(seed, epoch, sequence index, purpose)`, so the outcome does not depend on
//! which worker thread happens to prepare a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SxlRng = ChaCha8Rng;

/// What a derived stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Permutation = 1,
    Dropout = 2,
    Shuffle = 3,
    Init = 4,
    Split = 5,
    Corpus = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, purpose: Purpose, keys: &[u64]) -> SxlRng {
    let mut all = Vec::with_capacity(keys.len() + 1);
    all.push(purpose as u64);
    all.extend_from_slice(keys);
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &all))
}

/// Stream for one sequence encounter during training.
pub fn sequence_stream(seed: u64, epoch: u64, index: u64, purpose: Purpose) -> SxlRng {
    stream(seed, purpose, &[epoch, index])
}
