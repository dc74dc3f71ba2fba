//! Deterministic random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from
//! a 64-bit master seed, a component label and an index:
//!
//! ```text
//! key  = splitmix64(master ^ fnv1a64(label))
//! seed = splitmix64(key ^ splitmix64(index))
//! ```
//!
//! Adding a new label never perturbs the streams of existing labels, and
//! replica `i` of a component sees the same stream regardless of how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let key = splitmix64(master ^ fnv1a64(label));
    splitmix64(key ^ splitmix64(index))
}

/// A fresh generator for `(master, label, index)`.
pub fn stream(master: u64, label: &str, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, label, index))
}
