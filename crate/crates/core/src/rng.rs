//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! keyed by a master seed and a stable label, so runs are reproducible and
//! independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StdRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix64(mix64(master) ^ stream.rotate_left(17))
}

pub fn label_hash(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn stream(master: u64, label: &str) -> StdRng {
    StdRng::seed_from_u64(derive_seed(master, label_hash(label)))
}

pub fn indexed_stream(master: u64, label: &str, index: u64) -> StdRng {
    StdRng::seed_from_u64(derive_seed(derive_seed(master, label_hash(label)), index))
}
