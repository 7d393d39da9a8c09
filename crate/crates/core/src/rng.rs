//! Seeded, splittable randomness.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    FewShot = 2,
    Init = 3,
    Shuffle = 4,
    Dropout = 5,
    Templates = 6,
    Synthetic = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Stream for the `index`-th item within a stream family, e.g. per-epoch
/// shuffles or per-step dropout masks.
pub fn indexed_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}
