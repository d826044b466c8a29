//! Seed derivation and the generator used everywhere.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded through
//! [`derive`]. Child seeds are obtained by mixing a parent seed with a stream
//! tag through the SplitMix64 finalizer, so independent consumers (weight
//! init, shuffling, noise, attack starts) never share a stream and a run is
//! replayed bit-exactly from its root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `stream` under `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Child seed keyed by a string label.
pub fn derive_str(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive(seed, h)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
