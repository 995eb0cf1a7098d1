//! Deterministic seed derivation. Every stochastic component draws from its
//! own stream keyed by a base seed plus a tag path, so parallel work never
//! shares generator state and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base` one at a time.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, tags))
}

// Tags separating the streams of one episode.
pub(crate) const TAG_ARRIVALS: u64 = 0xA001;
pub(crate) const TAG_START: u64 = 0xA002;
pub(crate) const TAG_POLICY: u64 = 0xA003;
pub(crate) const TAG_HISTORY: u64 = 0xA004;
pub(crate) const TAG_LABELS: u64 = 0xA005;
pub(crate) const TAG_TRAIN: u64 = 0xA006;
