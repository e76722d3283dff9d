//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 generator keyed
//! by a user seed. Independent quantities (one weight matrix, one base point,
//! one perturbation) get their own substream: the generator is seeded with
//! `seed` and then switched to ChaCha stream `stream_id`. Two draws with the
//! same `(seed, stream_id)` are identical on every platform, and adding more
//! draws never changes the values of earlier ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Packs a namespace tag and up to two indices into a stream id.
pub fn stream_id(tag: u16, a: u32, b: u16) -> u64 {
    ((tag as u64) << 48) | ((a as u64) << 16) | b as u64
}

pub fn gaussian_vec(rng: &mut StreamRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
