//! Fixtures shared by the benchmarks.

use casp_core::eval::bench::{BENCH_CHANNELS_16, BENCH_CHANNELS_8};
use casp_core::feature::FeatureMap;
use casp_core::weights::normal_tensor;
use casp_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random descriptor maps of both views at 1/16 and 1/8 for a square image
/// of `size` pixels.
pub struct MatchingInputs {
    pub a16: FeatureMap,
    pub b16: FeatureMap,
    pub a8: FeatureMap,
    pub b8: FeatureMap,
}

impl MatchingInputs {
    pub fn random(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |g: usize, c: usize, stride: usize| {
            FeatureMap::new(normal_tensor(&mut rng, &[g, g, c], 1.0), stride).expect("valid map")
        };
        let (g8, g16) = (size / 8, size / 16);
        Self {
            a16: mk(g16, BENCH_CHANNELS_16, 16),
            b16: mk(g16, BENCH_CHANNELS_16, 16),
            a8: mk(g8, BENCH_CHANNELS_8, 8),
            b8: mk(g8, BENCH_CHANNELS_8, 8),
        }
    }
}

/// Smooth grayscale test pattern shifted by `(dx, dy)` pixels.
pub fn pattern(h: usize, w: usize, dx: f32, dy: f32) -> Tensor {
    Tensor::from_fn(&[h, w, 1], |k| {
        let (x, y) = ((k % w) as f32 - dx, (k / w) as f32 - dy);
        0.5 + 0.2 * (0.31 * x).sin() * (0.23 * y).cos() + 0.15 * (0.11 * x + 0.17 * y).sin()
    })
}
