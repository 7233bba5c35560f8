//! Seed derivation for reproducible, parallelism-independent randomness.
//!
//! Every unit of work (a slide, an epoch, one sample in a batch) gets its own
//! generator derived from the master seed and a tag path. Work units can then
//! run in any order or in parallel without changing a single drawn value.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; a good 64-bit mixer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a generator from the master seed and a tag path, e.g.
/// `stream(seed, &[STAGE_SYNTH, slide_index])`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed);
    for &t in tags {
        state = mix(state ^ t.wrapping_mul(0xD134_2543_DE82_EF95));
    }
    ChaCha8Rng::seed_from_u64(state)
}

// Stage tags keep unrelated streams apart even for equal indices.
pub const STAGE_SYNTH: u64 = 1;
pub const STAGE_SSL_INIT: u64 = 2;
pub const STAGE_SSL_EPOCH: u64 = 3;
pub const STAGE_SSL_AUGMENT: u64 = 4;
pub const STAGE_SSL_SAMPLE: u64 = 5;
pub const STAGE_MIL_INIT: u64 = 6;
pub const STAGE_MIL_EPOCH: u64 = 7;
pub const STAGE_FOLDS: u64 = 8;
