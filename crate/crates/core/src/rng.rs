//! Seeding conventions.  Every stochastic component draws from a ChaCha12
//! stream derived from the run seed plus a salt, so runs are reproducible and
//! substreams (init, masking, dropout, batch sampling) stay independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The one RNG type used across the crate.
pub type Rng = ChaCha12Rng;

/// SplitMix64 finalizer; decorrelates `seed ^ salt` into a fresh stream key.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic RNG for `(seed, salt)`.  Distinct salts give independent
/// streams; the same pair always gives the same stream.
pub fn stream(seed: u64, salt: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(mix(seed).wrapping_add(mix(salt.wrapping_mul(0x517c_c1b7_2722_0a95))))
}

/// A deterministic RNG for `(seed, salt, index)` — an indexed family within
/// one salted substream, e.g. per-step masking or per-batch sampling.
pub fn stream_at(seed: u64, salt: u64, index: u64) -> Rng {
    stream(seed, salt.wrapping_add(mix(index.wrapping_add(1)).wrapping_shl(8)))
}

/// Salts for the crate's named substreams.
pub mod salt {
    pub const INIT: u64 = 1;
    pub const MASKING: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const BENCH: u64 = 5;
    pub const CORPUS: u64 = 6;
    /// Input generation for the verification property suite.
    pub const VERIFY: u64 = 7;
}
