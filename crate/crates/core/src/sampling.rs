//! Gaussian-mixture importance sampling of probing rays (image space) and
//! anchor points (world space), plus the isotropic normal baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{look_at_frame, Camera, Vec3, WORLD_HALF};
use crate::imaging::{SilhouetteImage, VoxelGrid};

/// Standard deviation of the normal-baseline sampler.
pub const BASELINE_STD: f64 = 0.4;

/// Isotropic Gaussian mixture in `D` dimensions: one kernel per
/// positive-weight grid cell, mixture weight proportional to the cell value.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<const D: usize> {
    centers: Vec<[f64; D]>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    sigma: f64,
    lo: [f64; D],
    hi: [f64; D],
}

pub type MixtureSampler2D = GaussianMixture<2>;
pub type MixtureSampler3D = GaussianMixture<3>;

impl<const D: usize> GaussianMixture<D> {
    /// Mixture from `(center, weight)` pairs; non-positive weights are dropped
    /// and samples are clamped into `[lo, hi]`.
    pub fn new(
        components: impl IntoIterator<Item = ([f64; D], f64)>,
        sigma: f64,
        lo: [f64; D],
        hi: [f64; D],
    ) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::Invalid(format!("bandwidth {sigma} must be >= 0")));
        }
        let (centers, raw): (Vec<_>, Vec<_>) = components.into_iter().filter(|(_, w)| *w > 0.0).unzip();
        let total: f64 = raw.iter().sum();
        if centers.is_empty() || !(total > 0.0) || !total.is_finite() {
            return Err(Error::NoContourMass);
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(GaussianMixture {
            centers,
            weights,
            cumulative,
            sigma,
            lo,
            hi,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[[f64; D]] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Draws together with the index of the component each came from.
    pub fn sample_with_components(&self, n: usize, seed: u64) -> Vec<([f64; D], usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let k = self.cumulative.partition_point(|&c| c <= u).min(self.len() - 1);
                let mut x = self.centers[k];
                for (d, v) in x.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = (*v + self.sigma * z).clamp(self.lo[d], self.hi[d]);
                }
                (x, k)
            })
            .collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<[f64; D]> {
        self.sample_with_components(n, seed)
            .into_iter()
            .map(|(x, _)| x)
            .collect()
    }
}

/// One kernel per positive contour pixel, centered on the pixel center.
pub fn build_sampler_2d(contour: &SilhouetteImage, sigma_pix: f64) -> Result<MixtureSampler2D> {
    let w = contour.width;
    let comps = contour
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| ([(i % w) as f64 + 0.5, (i / w) as f64 + 0.5], v));
    GaussianMixture::new(comps, sigma_pix, [0.0, 0.0], [w as f64, contour.height as f64])
}

/// One kernel per positive voxel of the 3D contour map, at the voxel center.
pub fn build_sampler_3d(contour: &VoxelGrid, sigma: f64) -> Result<MixtureSampler3D> {
    let comps = contour
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| (contour.center_of(i).to_array(), v));
    GaussianMixture::new(comps, sigma, [-WORLD_HALF; 3], [WORLD_HALF; 3])
}

pub fn sample_points(sampler: &MixtureSampler3D, n: usize, seed: u64) -> Vec<Vec3> {
    sampler.sample(n, seed).into_iter().map(Vec3::from).collect()
}

pub fn sample_pixels(sampler: &MixtureSampler2D, n: usize, seed: u64) -> Vec<(f64, f64)> {
    sampler.sample(n, seed).into_iter().map(|[u, v]| (u, v)).collect()
}

/// Unclamped `N(0, 0.4^2)` draws per axis.
pub fn normal_baseline_raw(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, BASELINE_STD).expect("valid std");
    (0..n)
        .map(|_| {
            Vec3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            )
        })
        .collect()
}

/// Normal-baseline anchors, clamped to the world box.
pub fn sample_normal_baseline(n: usize, seed: u64) -> Vec<Vec3> {
    normal_baseline_raw(n, seed)
        .into_iter()
        .map(Vec3::clamp_to_world)
        .collect()
}

/// Normal-baseline rays for one view: baseline points projected into the
/// image and clamped to its bounds.
pub fn sample_normal_baseline_pixels(cam: &Camera, n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let frame = look_at_frame(cam)?;
    let (w, h) = (cam.width as f64, cam.height as f64);
    Ok(sample_normal_baseline(n, seed)
        .into_iter()
        .map(|p| {
            let (x, y) = cam.project(&frame, p).unwrap_or((0.5 * w, 0.5 * h));
            (x.clamp(0.0, w), y.clamp(0.0, h))
        })
        .collect())
}
