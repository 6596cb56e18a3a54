//! Synthetic benchmark data.

use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Centers of the four-component mixture benchmark.
pub const MIXTURE_CENTERS: [[f64; 2]; 4] = [[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]];
pub const MIXTURE_STD: f64 = 0.3;

/// Equal-weight mixture of four isotropic Gaussians at [`MIXTURE_CENTERS`].
pub fn gaussian_mixture_2d<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let c = MIXTURE_CENTERS[rng.random_range(0..4)];
            vec![
                c[0] + MIXTURE_STD * normal(rng),
                c[1] + MIXTURE_STD * normal(rng),
            ]
        })
        .collect()
}

/// Two interleaved half circles with Gaussian jitter.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let t = PI * rng.random::<f64>();
            let (x, y) = if i % 2 == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            vec![x + noise * normal(rng), y + noise * normal(rng)]
        })
        .collect()
}

/// Two Gaussian classes in `dim` dimensions. Class `c` has mean
/// `±separation/2` along the first axis and a class-specific correlated
/// covariance. Returns samples and labels, classes alternating.
pub fn two_gaussian_classes<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let sign = if label == 0 { -1.0 } else { 1.0 };
        let z: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let x = (0..dim)
            .map(|d| {
                let mean = if d == 0 { sign * separation / 2.0 } else { 0.0 };
                // Each coordinate mixes in its neighbour so the class
                // covariance is not diagonal.
                let mix = 0.5 * z[(d + 1) % dim];
                mean + z[d] + mix
            })
            .collect();
        xs.push(x);
        ys.push(label);
    }
    (xs, ys)
}

/// Synthetic 8×8 "images" in `[0, 1]`: a smooth blob at a random position
/// on a faint random background, flattened row-major.
pub fn blob_images<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let cx = rng.random_range(1.5..6.5);
            let cy = rng.random_range(1.5..6.5);
            let w = rng.random_range(1.0..2.5);
            (0..64)
                .map(|p| {
                    let (r, c) = ((p / 8) as f64, (p % 8) as f64);
                    let d2 = (r - cy).powi(2) + (c - cx).powi(2);
                    let v = (-d2 / (2.0 * w * w)).exp() + 0.05 * rng.random::<f64>();
                    v.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect()
}
