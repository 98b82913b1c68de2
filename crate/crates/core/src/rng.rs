//! Seeded random streams. Every path or series gets its own ChaCha stream so
//! results do not depend on batch size or scheduling.

use autodiff::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a purpose tag into a seed.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_array<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array {
    Array::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Row `p` filled from `rngs[p]`.
pub fn normal_rows(rngs: &mut [ChaCha8Rng], cols: usize) -> Array {
    let mut out = Array::zeros(rngs.len(), cols);
    for (p, rng) in rngs.iter_mut().enumerate() {
        for j in 0..cols {
            out.set(p, j, rng.sample(StandardNormal));
        }
    }
    out
}
