//! Occupancy fields: analytic ground-truth shapes and the MLP decoder.
//!
//! The decoder maps `concat(z, p)` through ReLU hidden layers to a single
//! sigmoid output. Parameters live in one flat buffer laid out as
//! `z, W0, b0, W1, b1, ...` with every `W` stored row-major as
//! `out x in`; [`Gradients`] mirrors that layout exactly, which is also the
//! order written to checkpoints.
//!
//! Because `z` is shared by every query point, the first layer is split as
//! `W0 [z; p] = W0_z z + W0_p p`; the `W0_z z` product is computed once per
//! batch.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Vec3, WORLD_HALF};
use crate::par;

mod gradcheck;

pub use gradcheck::{GradCheckReport, GRADCHECK_FLOOR};

/// Anything that maps a point to an occupancy value.
pub trait OccupancyField: Sync {
    fn eval(&self, p: Vec3) -> f64;

    fn eval_batch(&self, points: &[Vec3]) -> Vec<f64> {
        par::map_chunks(points, 1024, |_, c| c.iter().map(|p| self.eval(*p)).collect::<Vec<_>>()).concat()
    }
}

impl<F> OccupancyField for F
where
    F: Fn(Vec3) -> f64 + Sync,
{
    fn eval(&self, p: Vec3) -> f64 {
        self(p)
    }
}

/// Closed-form solid used as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AnalyticShape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Torus {
        center: Vec3,
        major: f64,
        minor: f64,
        axis: Vec3,
    },
    Box {
        min: Vec3,
        max: Vec3,
    },
    Union {
        shapes: Vec<AnalyticShape>,
    },
}

impl AnalyticShape {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        AnalyticShape::Sphere { center, radius }
    }

    pub fn torus(center: Vec3, major: f64, minor: f64, axis: Vec3) -> Self {
        AnalyticShape::Torus {
            center,
            major,
            minor,
            axis,
        }
    }

    pub fn cuboid(min: Vec3, max: Vec3) -> Self {
        AnalyticShape::Box { min, max }
    }

    /// 1 iff `p` is strictly inside.
    pub fn occupancy(&self, p: Vec3) -> u8 {
        self.contains(p) as u8
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match self {
            AnalyticShape::Sphere { center, radius } => (p - *center).norm_squared() < radius * radius,
            AnalyticShape::Torus {
                center,
                major,
                minor,
                axis,
            } => {
                let a = axis.normalized();
                let d = p - *center;
                let h = d.dot(a);
                let radial = (d - a * h).norm();
                (radial - major).powi(2) + h * h < minor * minor
            }
            AnalyticShape::Box { min, max } => (0..3).all(|i| p[i] > min[i] && p[i] < max[i]),
            AnalyticShape::Union { shapes } => shapes.iter().any(|s| s.contains(p)),
        }
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty union.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        match self {
            AnalyticShape::Sphere { center, radius } => {
                let r = Vec3::new(*radius, *radius, *radius);
                Some((*center - r, *center + r))
            }
            AnalyticShape::Torus {
                center,
                major,
                minor,
                axis,
            } => {
                let a = axis.normalized();
                // Extent of the core circle along each world axis plus the tube.
                let ext = Vec3::new(
                    major * (1.0 - a.x * a.x).max(0.0).sqrt() + minor,
                    major * (1.0 - a.y * a.y).max(0.0).sqrt() + minor,
                    major * (1.0 - a.z * a.z).max(0.0).sqrt() + minor,
                );
                Some((*center - ext, *center + ext))
            }
            AnalyticShape::Box { min, max } => Some((*min, *max)),
            AnalyticShape::Union { shapes } => shapes.iter().filter_map(|s| s.bounds()).reduce(|a, b| {
                (
                    Vec3::new(a.0.x.min(b.0.x), a.0.y.min(b.0.y), a.0.z.min(b.0.z)),
                    Vec3::new(a.1.x.max(b.1.x), a.1.y.max(b.1.y), a.1.z.max(b.1.z)),
                )
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        match self {
            AnalyticShape::Sphere { radius, .. } if !(*radius > 0.0) => {
                return bad(format!("sphere radius {radius} must be > 0"))
            }
            AnalyticShape::Torus { major, minor, axis, .. } => {
                if !(*minor > 0.0 && minor < major) {
                    return bad(format!("torus needs 0 < minor < major, got {minor}, {major}"));
                }
                if !(axis.norm() > 0.0) {
                    return bad("torus axis must be nonzero".into());
                }
            }
            AnalyticShape::Box { min, max } if !(0..3).all(|i| min[i] < max[i]) => {
                return bad("box min must be < max componentwise".into())
            }
            AnalyticShape::Union { shapes } => {
                for s in shapes {
                    s.validate()?;
                }
            }
            _ => {}
        }
        if let Some((lo, hi)) = self.bounds() {
            let eps = 1e-12;
            if !(0..3).all(|i| lo[i] >= -WORLD_HALF - eps && hi[i] <= WORLD_HALF + eps) {
                return bad("shape must fit inside [-0.5, 0.5]^3".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let shape: AnalyticShape =
            serde_json::from_str(text).map_err(|e| Error::json("shape spec", locate_shape_error(text, e)))?;
        shape.validate()?;
        Ok(shape)
    }
}

/// Tagged-enum errors carry no position; re-parse the top level against the
/// variant's plain field layout to recover line and column.
fn locate_shape_error(text: &str, err: serde_json::Error) -> serde_json::Error {
    #[derive(Deserialize)]
    #[allow(dead_code)]
    struct SphereFields {
        center: Vec3,
        radius: f64,
    }
    #[derive(Deserialize)]
    #[allow(dead_code)]
    struct TorusFields {
        center: Vec3,
        major: f64,
        minor: f64,
        axis: Vec3,
    }
    #[derive(Deserialize)]
    #[allow(dead_code)]
    struct BoxFields {
        min: Vec3,
        max: Vec3,
    }
    #[derive(Deserialize)]
    #[allow(dead_code)]
    struct UnionFields {
        shapes: Vec<serde::de::IgnoredAny>,
    }
    if err.line() != 0 {
        return err;
    }
    let Ok(value) = serde_json::from_str::<serde_json::Value>(text) else {
        return err;
    };
    let located = match value.get("type").and_then(|t| t.as_str()) {
        Some("sphere") => serde_json::from_str::<SphereFields>(text).err(),
        Some("torus") => serde_json::from_str::<TorusFields>(text).err(),
        Some("box") => serde_json::from_str::<BoxFields>(text).err(),
        Some("union") => serde_json::from_str::<UnionFields>(text).err(),
        _ => None,
    };
    located.filter(|e| e.line() != 0).unwrap_or(err)
}

impl OccupancyField for AnalyticShape {
    fn eval(&self, p: Vec3) -> f64 {
        self.occupancy(p) as f64
    }
}

/// Field with the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub f64);

impl OccupancyField for ConstantField {
    fn eval(&self, _p: Vec3) -> f64 {
        self.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    in_dim: usize,
    out_dim: usize,
    weights: usize,
    biases: usize,
}

/// Fully connected occupancy decoder with a free latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    latent_dim: usize,
    widths: Vec<usize>,
    layers: Vec<LayerSpan>,
    params: Vec<f64>,
}

/// Per-parameter gradient accumulators, laid out like [`MlpField`]'s
/// parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients { values: vec![0.0; len] }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sum a sequence of partial gradients in iteration order.
    pub fn sum_ordered<'a>(len: usize, parts: impl IntoIterator<Item = &'a Gradients>) -> Gradients {
        let mut g = Gradients::zeros(len);
        for p in parts {
            g.add_assign(p);
        }
        g
    }
}

/// Activations retained by [`MlpField::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    points: Vec<Vec3>,
    hidden: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

const MAGIC: &[u8; 4] = b"PFLD";
const CHECKPOINT_VERSION: u32 = 1;

impl MlpField {
    /// Zero-initialized decoder; `widths` lists every layer's output width
    /// and must end in 1.
    pub fn zeros(widths: &[usize], latent_dim: usize) -> Result<Self> {
        if widths.is_empty() || *widths.last().unwrap() != 1 || widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "layer widths {widths:?} must be nonempty, positive, and end in 1"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut offset = latent_dim;
        let mut in_dim = latent_dim + 3;
        for &out_dim in widths {
            let weights = offset;
            let biases = weights + out_dim * in_dim;
            offset = biases + out_dim;
            layers.push(LayerSpan {
                in_dim,
                out_dim,
                weights,
                biases,
            });
            in_dim = out_dim;
        }
        Ok(MlpField {
            latent_dim,
            widths: widths.to_vec(),
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Glorot-uniform weights, zero biases, `z ~ N(0, 0.01)`.
    pub fn init(seed: u64, widths: &[usize], latent_dim: usize) -> Result<Self> {
        let mut f = MlpField::zeros(widths, latent_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        for v in &mut f.params[..latent_dim] {
            *v = normal.sample(&mut rng);
        }
        for l in f.layers.clone() {
            let bound = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            for w in &mut f.params[l.weights..l.biases] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(f)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn latent(&self) -> &[f64] {
        &self.params[..self.latent_dim]
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros(self.params.len())
    }

    fn weights(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.weights..s.biases]
    }

    fn biases(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.biases..s.biases + s.out_dim]
    }

    /// Layer-0 pre-activation shared by all points: `b0 + W0_z z`.
    fn latent_bias(&self) -> Vec<f64> {
        let s = self.layers[0];
        let w = self.weights(0);
        let z = self.latent();
        self.biases(0)
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &w[o * s.in_dim..o * s.in_dim + self.latent_dim];
                b + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Batched forward pass; returns `phi` per point and the activations
    /// needed by [`MlpField::backward`].
    pub fn forward(&self, points: &[Vec3]) -> Result<(Vec<f64>, ForwardCache)> {
        let n = points.len();
        let n_layers = self.layers.len();
        let s0 = self.layers[0];
        let c0 = self.latent_bias();
        let w0 = self.weights(0);

        let mut pre = vec![0.0; n * s0.out_dim];
        for (i, p) in points.iter().enumerate() {
            let row = &mut pre[i * s0.out_dim..(i + 1) * s0.out_dim];
            for (o, v) in row.iter_mut().enumerate() {
                let wp = &w0[o * s0.in_dim + self.latent_dim..(o + 1) * s0.in_dim];
                *v = c0[o] + wp[0] * p.x + wp[1] * p.y + wp[2] * p.z;
            }
        }

        let mut hidden = Vec::with_capacity(n_layers - 1);
        for l in 1..n_layers {
            relu_in_place(&mut pre);
            let s = self.layers[l];
            let mut next = vec![0.0; n * s.out_dim];
            for row in next.chunks_exact_mut(s.out_dim) {
                row.copy_from_slice(self.biases(l));
            }
            // next (n x out) += prev (n x in) * W^T (in x out)
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    s.in_dim,
                    s.out_dim,
                    1.0,
                    pre.as_ptr(),
                    s.in_dim as isize,
                    1,
                    self.weights(l).as_ptr(),
                    1,
                    s.in_dim as isize,
                    1.0,
                    next.as_mut_ptr(),
                    s.out_dim as isize,
                    1,
                );
            }
            hidden.push(std::mem::replace(&mut pre, next));
        }

        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::ForwardOverflow);
        }
        let output: Vec<f64> = pre.iter().map(|&x| sigmoid(x)).collect();
        Ok((
            output.clone(),
            ForwardCache {
                points: points.to_vec(),
                hidden,
                output,
            },
        ))
    }

    /// Reverse-mode gradients of `sum_i dphi[i] * phi_i` with respect to
    /// every weight, bias and the latent code.
    pub fn backward(&self, cache: &ForwardCache, dphi: &[f64]) -> Result<Gradients> {
        let mut g = self.zero_gradients();
        self.backward_into(cache, dphi, &mut g)?;
        Ok(g)
    }

    /// Like [`MlpField::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, dphi: &[f64], grads: &mut Gradients) -> Result<()> {
        let n = cache.points.len();
        if dphi.len() != n {
            return Err(Error::CacheMismatch(format!(
                "{} upstream gradients for a cached batch of {n}",
                dphi.len()
            )));
        }
        if cache.hidden.len() + 1 != self.layers.len() || grads.values.len() != self.params.len() {
            return Err(Error::CacheMismatch(
                "cache or gradient layout does not match this field".into(),
            ));
        }
        for (l, h) in cache.hidden.iter().enumerate() {
            if h.len() != n * self.layers[l].out_dim {
                return Err(Error::CacheMismatch(format!("hidden layer {l} has wrong size")));
            }
        }

        let mut delta: Vec<f64> = cache
            .output
            .iter()
            .zip(dphi)
            .map(|(&phi, &d)| d * phi * (1.0 - phi))
            .collect();

        for l in (1..self.layers.len()).rev() {
            let s = self.layers[l];
            let prev = &cache.hidden[l - 1];

            let gw = &mut grads.values[s.weights..s.biases];
            // dW (out x in) += delta^T (out x n) * prev (n x in)
            unsafe {
                matrixmultiply::dgemm(
                    s.out_dim,
                    n,
                    s.in_dim,
                    1.0,
                    delta.as_ptr(),
                    1,
                    s.out_dim as isize,
                    prev.as_ptr(),
                    s.in_dim as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    s.in_dim as isize,
                    1,
                );
            }
            let gb = &mut grads.values[s.biases..s.biases + s.out_dim];
            for row in delta.chunks_exact(s.out_dim) {
                for (b, d) in gb.iter_mut().zip(row) {
                    *b += d;
                }
            }

            let mut down = vec![0.0; n * s.in_dim];
            // down (n x in) = delta (n x out) * W (out x in)
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    s.out_dim,
                    s.in_dim,
                    1.0,
                    delta.as_ptr(),
                    s.out_dim as isize,
                    1,
                    self.weights(l).as_ptr(),
                    s.in_dim as isize,
                    1,
                    0.0,
                    down.as_mut_ptr(),
                    s.in_dim as isize,
                    1,
                );
            }
            for (d, &a) in down.iter_mut().zip(prev) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = down;
        }

        let s0 = self.layers[0];
        let dz_len = self.latent_dim;
        let mut delta_sum = vec![0.0; s0.out_dim];
        {
            let gw = &mut grads.values[s0.weights..s0.biases];
            for (row, p) in delta.chunks_exact(s0.out_dim).zip(&cache.points) {
                for (o, &d) in row.iter().enumerate() {
                    delta_sum[o] += d;
                    let gp = &mut gw[o * s0.in_dim + dz_len..(o + 1) * s0.in_dim];
                    gp[0] += d * p.x;
                    gp[1] += d * p.y;
                    gp[2] += d * p.z;
                }
            }
        }
        let (head, tail) = grads.values.split_at_mut(s0.weights);
        let gz = &mut head[..dz_len];
        let gw = &mut tail[..s0.biases - s0.weights];
        let w0 = &self.params[s0.weights..s0.biases];
        let z = &self.params[..dz_len];
        for (o, &ds) in delta_sum.iter().enumerate() {
            let row = o * s0.in_dim;
            for j in 0..dz_len {
                gw[row + j] += ds * z[j];
                gz[j] += w0[row + j] * ds;
            }
        }
        let gb = &mut grads.values[s0.biases..s0.biases + s0.out_dim];
        for (b, ds) in gb.iter_mut().zip(&delta_sum) {
            *b += ds;
        }
        Ok(())
    }

    /// Forward pass without retaining activations, chunked and fanned out.
    pub fn try_eval_batch(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let parts = par::map_chunks(points, 512, |_, c| self.forward(c).map(|(phi, _)| phi));
        let mut out = Vec::with_capacity(points.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.widths.len() + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for &w in &self.widths {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::format("checkpoint", path, why);
        let mut cur = bytes.as_slice();
        let mut take = |k: usize| -> Result<&[u8]> {
            if cur.len() < k {
                return Err(bad("truncated"));
            }
            let (h, t) = cur.split_at(k);
            cur = t;
            Ok(h)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n_layers = u32_at(take(4)?);
        if n_layers == 0 || n_layers > 1024 {
            return Err(bad("implausible layer count"));
        }
        let mut widths = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            widths.push(u32_at(take(4)?));
        }
        let latent_dim = u32_at(take(4)?);
        let mut field = MlpField::zeros(&widths, latent_dim).map_err(|e| bad(&e.to_string()))?;
        let body = take(8 * field.params.len())?;
        for (v, b) in field.params.iter_mut().zip(body.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(field)
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl OccupancyField for MlpField {
    fn eval(&self, p: Vec3) -> f64 {
        self.forward(&[p]).map(|(phi, _)| phi[0]).unwrap_or(f64::NAN)
    }

    fn eval_batch(&self, points: &[Vec3]) -> Vec<f64> {
        self.try_eval_batch(points)
            .unwrap_or_else(|_| vec![f64::NAN; points.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_occupancy() {
        let s = AnalyticShape::sphere(Vec3::ZERO, 0.4);
        assert_eq!(s.occupancy(Vec3::ZERO), 1);
        assert_eq!(s.occupancy(Vec3::new(0.5, 0.0, 0.0)), 0);
        let t = AnalyticShape::torus(Vec3::ZERO, 0.3, 0.1, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(t.occupancy(Vec3::new(0.3, 0.0, 0.0)), 1);
        assert_eq!(t.occupancy(Vec3::ZERO), 0);
        let b = AnalyticShape::cuboid(Vec3::ZERO, Vec3::new(0.2, 0.2, 0.2));
        assert_eq!(b.occupancy(Vec3::new(0.1, 0.1, 0.1)), 1);
        assert_eq!(b.occupancy(Vec3::new(0.2, 0.1, 0.1)), 0);
    }

    #[test]
    fn union_is_max_of_members() {
        use rand::Rng;
        let a = AnalyticShape::sphere(Vec3::new(-0.2, 0.0, 0.0), 0.2);
        let b = AnalyticShape::torus(Vec3::new(0.1, 0.0, 0.0), 0.25, 0.08, Vec3::new(0.0, 1.0, 0.0));
        let u = AnalyticShape::Union {
            shapes: vec![a.clone(), b.clone()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            assert_eq!(u.occupancy(p), a.occupancy(p).max(b.occupancy(p)));
        }
        let empty = AnalyticShape::Union { shapes: vec![] };
        assert_eq!(empty.occupancy(Vec3::ZERO), 0);
    }

    #[test]
    fn shape_json_and_validation() {
        let s = AnalyticShape::from_json(r#"{"type":"torus","center":[0,0,0],"major":0.3,"minor":0.1,"axis":[0,1,0]}"#)
            .unwrap();
        assert!(matches!(s, AnalyticShape::Torus { .. }));
        assert!(AnalyticShape::from_json(r#"{"type":"sphere","center":[0,0,0],"radius":0.7}"#).is_err());
        assert!(AnalyticShape::from_json(
            r#"{"type":"torus","center":[0,0,0],"major":0.1,"minor":0.2,"axis":[0,1,0]}"#
        )
        .is_err());
        assert!(AnalyticShape::from_json(r#"{"type":"blob"}"#).is_err());
    }

    #[test]
    fn zero_net_is_one_half() {
        let f = MlpField::zeros(&[16, 8, 1], 4).unwrap();
        let (phi, _) = f.forward(&[Vec3::ZERO, Vec3::new(0.3, -0.2, 0.1)]).unwrap();
        assert_eq!(phi, vec![0.5, 0.5]);
    }

    #[test]
    fn init_contract() {
        let a = MlpField::init(5, &[32, 16, 1], 8).unwrap();
        let b = MlpField::init(5, &[32, 16, 1], 8).unwrap();
        let c = MlpField::init(6, &[32, 16, 1], 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for l in 0..a.layers.len() {
            assert!(a.biases(l).iter().all(|&b| b == 0.0));
            let s = a.layers[l];
            let bound = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
            assert!(a.weights(l).iter().all(|w| w.abs() <= bound));
        }
        assert!(MlpField::init(0, &[], 8).is_err());
        assert!(MlpField::init(0, &[4, 2], 8).is_err());
    }

    #[test]
    fn identical_points_identical_outputs() {
        let f = MlpField::init(1, &[64, 32, 1], 16).unwrap();
        let p = Vec3::new(0.1, 0.2, -0.3);
        let pts: Vec<Vec3> = (0..37)
            .map(|i| {
                if i % 5 == 0 {
                    p
                } else {
                    Vec3::new(i as f64 * 0.01, 0.0, 0.1)
                }
            })
            .collect();
        let (phi, _) = f.forward(&pts).unwrap();
        for i in (0..37).step_by(5) {
            assert_eq!(phi[i], phi[0]);
        }
    }

    #[test]
    fn single_layer_bias_gradient_is_sigmoid_derivative() {
        let mut f = MlpField::zeros(&[1], 0).unwrap();
        f.params_mut().copy_from_slice(&[0.4, -0.3, 0.2, 0.1]);
        let p = Vec3::new(0.5, 0.25, -1.0);
        let (phi, cache) = f.forward(&[p]).unwrap();
        let g = f.backward(&cache, &[1.0]).unwrap();
        let s = phi[0];
        assert!((g.values[3] - s * (1.0 - s)).abs() < 1e-15);
        assert!((g.values[0] - s * (1.0 - s) * 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let f = MlpField::init(2, &[16, 8, 1], 4).unwrap();
        let pts = [Vec3::new(0.1, 0.0, 0.0), Vec3::new(-0.2, 0.3, 0.1)];
        let (_, cache) = f.forward(&pts).unwrap();
        let g = f.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert!(matches!(f.backward(&cache, &[1.0]), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut f = MlpField::zeros(&[1], 0).unwrap();
        f.params_mut()[0] = f64::INFINITY;
        assert!(matches!(
            f.forward(&[Vec3::new(1.0, 0.0, 0.0)]),
            Err(Error::ForwardOverflow)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfld");
        let f = MlpField::init(9, &[8, 4, 1], 3).unwrap();
        f.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PFLD");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 3 * 4 + 4 + 8 * f.num_params());
        assert_eq!(MlpField::load(&path).unwrap(), f);

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(MlpField::load(&path), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, bad).unwrap();
        assert!(MlpField::load(&path).is_err());
    }
}
