//! Seed derivation and the random number generator used throughout.
//!
//! Every stochastic routine draws from [`AtmRng`], a ChaCha8 stream cipher
//! generator seeded through [`rng_from_seed`]. Sub-seeds for a task at an
//! iteration come from [`derive_seed`]:
//!
//! ```text
//! derive_seed(root, id, k) = splitmix64(root XOR fnv1a64(id_bytes ++ k as u64 little-endian))
//! ```
//!
//! so the stream a task sees never depends on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type AtmRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// The SplitMix64 finalizer (one output step from state `x`).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, id: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(id.len() + 8);
    bytes.extend_from_slice(id.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    splitmix64(root ^ fnv1a64(&bytes))
}

pub fn rng_from_seed(seed: u64) -> AtmRng {
    ChaCha8Rng::seed_from_u64(seed)
}
