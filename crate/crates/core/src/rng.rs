//! Seeded random streams.
//!
//! Every consumer of randomness takes a `(seed, stream)` pair, so results do
//! not depend on call order elsewhere in the program.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a tag and two counters into one stream id.
pub fn stream_id(tag: u16, a: u64, b: u64) -> u64 {
    ((tag as u64) << 48) | ((a & 0xFF_FFFF) << 24) | (b & 0xFF_FFFF)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
