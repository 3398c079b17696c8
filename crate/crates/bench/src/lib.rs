//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsep_core::net::{init_params, Architecture, NetworkParams};
use xsep_core::synthetic;
use xsep_core::train::PatchSample;
use xsep_core::{Filter, Plane};

/// Uniform samples in `[-1, 1)`.
pub fn plane(height: usize, width: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Plane::from_fn(height, width, |_, _| rng.random_range(-1.0..1.0))
}

pub fn filter(size: usize, seed: u64) -> Filter {
    Filter::new(plane(size, size, seed)).expect("odd filter size")
}

/// A synthetic training patch and freshly initialized parameters.
pub fn network_case(arch: Architecture, size: usize, seed: u64) -> (PatchSample, NetworkParams) {
    let scene = synthetic::generate(size, size, seed).expect("scene");
    let g1 = xsep_core::patch::grayscale(&scene.rgb).expect("grayscale");
    (PatchSample { x: scene.mix, rgb: scene.rgb, g1 }, init_params(arch, seed).expect("valid architecture"))
}
