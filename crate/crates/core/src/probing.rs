//! Ray/anchor probing: candidate search, boundary-aware filtering, max-pool
//! aggregation, and the silhouette loss with its backward pass.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{look_at_frame, ray_box_interval, ray_sphere_intersect, Camera, Ray, Vec3};
use crate::imaging::{bilinear_sample, HullTester, SilhouetteImage};
use crate::par;

/// Which side of the visual hull an anchor lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HullSide {
    Inside,
    Outside,
}

/// Labels at or above this count as inside the silhouette.
pub const LABEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub positions: Vec<Vec3>,
    pub radius: f64,
    pub occupancy: Vec<f64>,
    pub hull_side: Vec<HullSide>,
}

impl AnchorSet {
    /// Anchors with zero occupancy, all labelled inside.
    pub fn new(positions: Vec<Vec3>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Invalid(format!("support radius {radius} must be positive")));
        }
        if let Some(p) = positions.iter().find(|p| !p.in_world()) {
            return Err(Error::Invalid(format!("anchor {p:?} outside the world box")));
        }
        let n = positions.len();
        Ok(AnchorSet {
            positions,
            radius,
            occupancy: vec![0.0; n],
            hull_side: vec![HullSide::Inside; n],
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn label_sides(&mut self, hull: &HullTester) {
        self.hull_side = par::map(&self.positions, |p| {
            if hull.contains(*p) {
                HullSide::Inside
            } else {
                HullSide::Outside
            }
        });
    }

    pub fn set_occupancy(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Invalid(format!(
                "{} occupancy values for {} anchors",
                values.len(),
                self.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ForwardOverflow);
        }
        self.occupancy = values;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRay {
    pub view: usize,
    pub pixel: (f64, f64),
    pub ray: Ray,
    pub label: f64,
}

/// Probing rays of all views plus their candidate lists and predictions.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<ProbeRay>,
    /// Rays drawn per view; the loss normalizer.
    pub rays_per_view: usize,
    pub candidates: Vec<Vec<u32>>,
    pub psi: Vec<f64>,
    pub argmax: Vec<Option<u32>>,
}

impl RayBatch {
    /// Rays through the given continuous pixel positions, one list per view,
    /// labelled by bilinear lookup in that view's silhouette.
    pub fn from_pixels(cams: &[Camera], sils: &[SilhouetteImage], pixels: &[Vec<(f64, f64)>]) -> Result<Self> {
        if cams.len() != sils.len() || cams.len() != pixels.len() {
            return Err(Error::Invalid(
                "views, silhouettes and pixel lists differ in count".into(),
            ));
        }
        let rays_per_view = pixels.first().map_or(0, Vec::len);
        if pixels.iter().any(|p| p.len() != rays_per_view) {
            return Err(Error::Invalid("every view needs the same number of rays".into()));
        }
        let mut rays = Vec::with_capacity(rays_per_view * cams.len());
        for (view, ((cam, sil), pix)) in cams.iter().zip(sils).zip(pixels).enumerate() {
            let frame = look_at_frame(cam)?;
            for &(x, y) in pix {
                rays.push(ProbeRay {
                    view,
                    pixel: (x, y),
                    ray: cam.ray_with_frame(&frame, x, y),
                    label: bilinear_sample(sil, (x, y)),
                });
            }
        }
        Ok(RayBatch {
            rays,
            rays_per_view,
            ..Default::default()
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Candidate search, optionally followed by boundary-aware filtering.
    pub fn find_candidates(&mut self, anchors: &AnchorSet, boundary_aware: bool) {
        let rays: Vec<Ray> = self.rays.iter().map(|r| r.ray).collect();
        let mut lists = intersect(&rays, anchors);
        if boundary_aware {
            for (list, r) in lists.iter_mut().zip(&self.rays) {
                *list = boundary_aware_filter(list, r.label, &anchors.hull_side);
            }
        }
        self.candidates = lists;
    }

    /// Max-pool current anchor occupancies into ψ and record argmaxes.
    pub fn aggregate(&mut self, occupancy: &[f64]) {
        let (psi, argmax) = self.candidates.iter().map(|c| aggregate(c, occupancy)).unzip();
        self.psi = psi;
        self.argmax = argmax;
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("view,pixel_x,pixel_y,label,psi,n_candidates,argmax_index\n");
        for (i, r) in self.rays.iter().enumerate() {
            let argmax = self.argmax.get(i).copied().flatten().map_or(-1, |a| a as i64);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.view,
                r.pixel.0,
                r.pixel.1,
                r.label,
                self.psi.get(i).copied().unwrap_or(0.0),
                self.candidates.get(i).map_or(0, Vec::len),
                argmax
            );
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Uniform grid over the anchors' support spheres.
struct AnchorGrid {
    half: f64,
    cells: usize,
    cell_size: f64,
    start: Vec<u32>,
    items: Vec<u32>,
}

impl AnchorGrid {
    fn build(anchors: &AnchorSet) -> Self {
        let tau = anchors.radius;
        let half = 0.5 + tau * 1.01;
        let cells = ((2.0 * half / (2.0 * tau)).floor() as usize).clamp(1, 128);
        let cell_size = 2.0 * half / cells as f64;
        let pad = tau + 1e-9 * cell_size;
        let range = |lo: f64, hi: f64| {
            let a = (((lo + half) / cell_size).floor().max(0.0) as usize).min(cells - 1);
            let b = (((hi + half) / cell_size).floor().max(0.0) as usize).min(cells - 1);
            a..=b
        };
        let spans: Vec<[std::ops::RangeInclusive<usize>; 3]> = anchors
            .positions
            .iter()
            .map(|p| [0, 1, 2].map(|a| range(p[a] - pad, p[a] + pad)))
            .collect();
        let mut counts = vec![0u32; cells * cells * cells + 1];
        let cell_index = |i: usize, j: usize, k: usize| (k * cells + j) * cells + i;
        for s in &spans {
            for k in s[2].clone() {
                for j in s[1].clone() {
                    for i in s[0].clone() {
                        counts[cell_index(i, j, k) + 1] += 1;
                    }
                }
            }
        }
        for c in 1..counts.len() {
            counts[c] += counts[c - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; *counts.last().unwrap() as usize];
        for (a, s) in spans.iter().enumerate() {
            for k in s[2].clone() {
                for j in s[1].clone() {
                    for i in s[0].clone() {
                        let c = cell_index(i, j, k);
                        items[fill[c] as usize] = a as u32;
                        fill[c] += 1;
                    }
                }
            }
        }
        AnchorGrid {
            half,
            cells,
            cell_size,
            start: counts,
            items,
        }
    }

    fn cell(&self, i: usize, j: usize, k: usize) -> &[u32] {
        let c = (k * self.cells + j) * self.cells + i;
        &self.items[self.start[c] as usize..self.start[c + 1] as usize]
    }

    /// Visit every cell the half-line passes through (3D DDA).
    fn traverse(&self, ray: &Ray, mut visit: impl FnMut(&[u32])) {
        let Some((t0, t1)) = ray_box_interval(ray, self.half) else {
            return;
        };
        let n = self.cells as i64;
        let entry = ray.at(t0);
        let mut idx = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let rel = (entry[a] + self.half) / self.cell_size;
            idx[a] = (rel.floor() as i64).clamp(0, n - 1);
            let d = ray.direction[a];
            if d > 0.0 {
                step[a] = 1;
                let boundary = -self.half + (idx[a] + 1) as f64 * self.cell_size;
                t_max[a] = t0 + (boundary - entry[a]) / d;
                t_delta[a] = self.cell_size / d;
            } else if d < 0.0 {
                step[a] = -1;
                let boundary = -self.half + idx[a] as f64 * self.cell_size;
                t_max[a] = t0 + (boundary - entry[a]) / d;
                t_delta[a] = -self.cell_size / d;
            }
        }
        loop {
            visit(self.cell(idx[0] as usize, idx[1] as usize, idx[2] as usize));
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[a] > t1 {
                return;
            }
            idx[a] += step[a];
            if idx[a] < 0 || idx[a] >= n {
                return;
            }
            t_max[a] += t_delta[a];
        }
    }
}

/// Sorted candidate anchor indices per ray: exactly the anchors whose
/// support sphere the ray hits.
pub fn intersect(rays: &[Ray], anchors: &AnchorSet) -> Vec<Vec<u32>> {
    if anchors.is_empty() {
        return vec![Vec::new(); rays.len()];
    }
    let grid = AnchorGrid::build(anchors);
    par::map(rays, |ray| {
        let mut hits = Vec::new();
        grid.traverse(ray, |cell| {
            for &a in cell {
                if ray_sphere_intersect(ray, anchors.positions[a as usize], anchors.radius).is_some() {
                    hits.push(a);
                }
            }
        });
        hits.sort_unstable();
        hits.dedup();
        hits
    })
}

/// All-pairs reference for [`intersect`].
pub fn intersect_brute_force(rays: &[Ray], anchors: &AnchorSet) -> Vec<Vec<u32>> {
    rays.iter()
        .map(|ray| {
            (0..anchors.len() as u32)
                .filter(|&a| ray_sphere_intersect(ray, anchors.positions[a as usize], anchors.radius).is_some())
                .collect()
        })
        .collect()
}

/// Keep only candidates on the side of the hull that agrees with the label.
pub fn boundary_aware_filter(candidates: &[u32], label: f64, sides: &[HullSide]) -> Vec<u32> {
    let keep = if label >= LABEL_THRESHOLD {
        HullSide::Inside
    } else {
        HullSide::Outside
    };
    candidates
        .iter()
        .copied()
        .filter(|&a| sides[a as usize] == keep)
        .collect()
}

/// Max occupancy over the candidates and the first index attaining it;
/// `(0, None)` when there are none.
pub fn aggregate(candidates: &[u32], occupancy: &[f64]) -> (f64, Option<u32>) {
    let mut best: Option<(f64, u32)> = None;
    for &a in candidates {
        let v = occupancy[a as usize];
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, a));
        }
    }
    best.map_or((0.0, None), |(v, a)| (v, Some(a)))
}

pub fn silhouette_loss(batch: &RayBatch) -> f64 {
    if batch.rays_per_view == 0 {
        return 0.0;
    }
    let sum: f64 = batch
        .rays
        .iter()
        .zip(&batch.psi)
        .map(|(r, p)| (p - r.label).powi(2))
        .sum();
    sum / batch.rays_per_view as f64
}

/// Gradient of the silhouette loss with respect to each anchor occupancy.
pub fn silhouette_loss_backward(batch: &RayBatch, n_anchors: usize) -> Vec<f64> {
    let mut grad = vec![0.0; n_anchors];
    if batch.rays_per_view == 0 {
        return grad;
    }
    let scale = 2.0 / batch.rays_per_view as f64;
    for ((r, p), a) in batch.rays.iter().zip(&batch.psi).zip(&batch.argmax) {
        if let Some(a) = a {
            grad[*a as usize] += scale * (p - r.label);
        }
    }
    grad
}
