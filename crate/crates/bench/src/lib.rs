//! Shared input builders for the benchmarks.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lap_core::interpret::InterpretationStack;
use lap_core::lap::KernelSpec;
use lap_core::ConceptMaps;

pub fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, c, h, w), |_| rng.gen_range(-1.0..1.0))
}

pub fn random_scores(n: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((n, h, w), |_| rng.gen_range(0.0..1.0))
}

/// A three-level stack (64 -> 32 -> 16) of single-head probability maps.
pub fn demo_stack(seed: u64) -> InterpretationStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = |dim: usize| {
        let per = Array3::from_shape_fn((1, dim, dim), |_| rng.gen_range(0.0..1.0));
        let agg: Array2<f64> = per.index_axis(ndarray::Axis(0), 0).to_owned();
        ConceptMaps {
            per_concept: per,
            aggregated: agg,
        }
    };
    InterpretationStack {
        layers: vec![
            (level(64), KernelSpec::square(2, 2)),
            (level(32), KernelSpec::square(2, 2)),
            (level(16), KernelSpec::square(1, 1)),
        ],
        input_size: (128, 128),
        decay_alpha: 0.8,
    }
}
