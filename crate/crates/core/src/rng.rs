//! Seed fan-out.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`]. A run is
//! driven by one global seed; each consumer gets its own generator from
//! [`stream`], keyed by a [`Stream`] purpose and an index (scene number,
//! fold number, epoch). The key is mixed into the 64-bit seed with
//! SplitMix64 and the purpose selects the ChaCha stream id, so two
//! consumers never share a keystream and results are identical on every
//! platform.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream. The discriminant is the ChaCha stream id and
/// is part of the reproducibility contract: do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    FractionField = 1,
    SceneNoise = 2,
    Split = 3,
    Epoch = 4,
    WeightInit = 5,
    Dropout = 6,
    Augment = 7,
    Test = 99,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit sub-seed from a parent seed and an index.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

/// Generator for `purpose` number `index` under the run seed `seed`.
pub fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, index));
    rng.set_stream(purpose as u64);
    rng
}
