//! Deterministic inputs shared by the benchmarks.

use mace_core::geometry::{project, CameraIntrinsics, Correspondence, RigidPose};
use mace_core::splat::GaussianSplat;
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` splats in front of an identity camera, roughly filling the view.
pub fn splats(n: usize, seed: u64) -> Vec<GaussianSplat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            GaussianSplat {
                center: Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(3.0..5.0)),
                log_scale: Vector3::from_fn(|_, _| rng.random_range(-4.0..-2.5)),
                rotation: q.map(|v| v / norm),
                opacity: rng.random_range(0.2..0.95),
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            }
        })
        .collect()
}

/// Correspondences seen from a known pose, the first `outlier_frac` of
/// them replaced by random scene points.
pub fn pnp_problem(n: usize, outlier_frac: f64, seed: u64) -> (CameraIntrinsics, Vec<Correspondence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::centered(110.0, 128, 128).expect("valid intrinsics");
    let pose = RigidPose::look_at(&Vector3::new(1.0, -6.0, 1.5), &Vector3::zeros(), &Vector3::z()).expect("valid pose");
    let mut cube = || Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let mut corrs = Vec::with_capacity(n);
    while corrs.len() < n {
        let p = cube();
        let pr = project(&pose, &k, &p);
        if pr.valid && k.contains(&pr.pixel) {
            corrs.push(Correspondence::new(pr.pixel, p));
        }
    }
    for c in corrs.iter_mut().take((n as f64 * outlier_frac) as usize) {
        c.scene_point = cube();
    }
    (k, corrs)
}

pub fn image(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
}

pub fn descriptors(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}
