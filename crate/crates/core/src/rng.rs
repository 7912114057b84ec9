//! Named random sub-streams derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent random streams. Each consumer draws from its own stream so
/// that, e.g., changing the masking schedule never perturbs initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Masking = 3,
    Codebook = 4,
    Shuffle = 5,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// A stream further split by an integer key (e.g. one per synthetic channel).
pub fn substream(seed: u64, which: Stream, key: u64) -> Rng {
    let mixed = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    stream(mixed, which)
}
