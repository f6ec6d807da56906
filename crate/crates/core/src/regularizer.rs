//! Finite-difference normals and the weighted `l_p` normal-consistency loss.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Gradients, MlpField, OccupancyField};
use crate::geom::Vec3;
use crate::par;

/// Gradient magnitudes at or below this give a degenerate normal.
pub const DEGENERATE_GRADIENT: f64 = 1e-12;
/// Floor on `|v|` inside the derivative of `|v|^p` for `p < 1`.
pub const POW_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    /// Neighbor spacing and finite-difference step.
    pub step: f64,
    /// Half-width of the band around 0.5 where points are weighted.
    pub eps: f64,
    pub p: f64,
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            step: 3e-2,
            eps: 0.2,
            p: 0.8,
            lambda: 1e-2,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Invalid(format!("regularizer step {} must be > 0", self.step)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Invalid(format!(
                "regularizer eps {} must be in (0, 0.5)",
                self.eps
            )));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::Invalid(format!("regularizer p {} must be > 0", self.p)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!(
                "regularizer lambda {} must be >= 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `order`-th derivative along `axis` by the symmetric `order + 1` point stencil.
pub fn central_difference<F: OccupancyField + ?Sized>(field: &F, p: Vec3, order: u32, step: f64, axis: usize) -> f64 {
    let e = Vec3::axis(axis);
    let mut sum = 0.0;
    for l in 0..=order {
        let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
        let offset = (order as f64 / 2.0 - l as f64) * step;
        sum += sign * binomial(order, l) * field.eval(p + e * offset);
    }
    sum / step.powi(order as i32)
}

pub fn fd_gradient<F: OccupancyField + ?Sized>(field: &F, p: Vec3, step: f64) -> Vec3 {
    Vec3::new(
        central_difference(field, p, 1, step, 0),
        central_difference(field, p, 1, step, 1),
        central_difference(field, p, 1, step, 2),
    )
}

/// Unit normal from a gradient, `None` when the gradient is degenerate.
pub fn normal_from_gradient(g: Vec3) -> Option<Vec3> {
    let len = g.norm();
    (len > DEGENERATE_GRADIENT && len.is_finite()).then(|| g / len)
}

pub fn surface_normal<F: OccupancyField + ?Sized>(field: &F, p: Vec3, step: f64) -> Option<Vec3> {
    normal_from_gradient(fd_gradient(field, p, step))
}

pub fn importance_weight(value: f64, eps: f64) -> f64 {
    if (value - 0.5).abs() < eps {
        1.0
    } else {
        0.0
    }
}

/// Evaluation points for one anchor in units of half a step, without the
/// anchor itself: the anchor's gradient stencil, the six neighbors, and each
/// neighbor's gradient stencil, deduplicated.
struct Stencil {
    offsets: Vec<[i32; 3]>,
    /// `[axis][0 = minus, 1 = plus]` for the anchor's gradient.
    center_grad: [[usize; 2]; 3],
    /// Neighbor `l` sits at `(-1)^l * step` along axis `l / 2`.
    neighbor: [usize; 6],
    neighbor_grad: [[[usize; 2]; 3]; 6],
}

fn stencil() -> &'static Stencil {
    static STENCIL: OnceLock<Stencil> = OnceLock::new();
    STENCIL.get_or_init(|| {
        let mut offsets: Vec<[i32; 3]> = Vec::new();
        let mut slot = |o: [i32; 3]| match offsets.iter().position(|x| *x == o) {
            Some(i) => i,
            None => {
                offsets.push(o);
                offsets.len() - 1
            }
        };
        let shift = |base: [i32; 3], axis: usize, by: i32| {
            let mut o = base;
            o[axis] += by;
            o
        };
        let grad_at = |base: [i32; 3], slot: &mut dyn FnMut([i32; 3]) -> usize| {
            [0, 1, 2].map(|a| [slot(shift(base, a, -1)), slot(shift(base, a, 1))])
        };
        let center_grad = grad_at([0; 3], &mut slot);
        let neighbor_base: [[i32; 3]; 6] =
            std::array::from_fn(|l| shift([0; 3], l / 2, if l % 2 == 0 { 2 } else { -2 }));
        let neighbor = neighbor_base.map(&mut slot);
        let neighbor_grad = neighbor_base.map(|b| grad_at(b, &mut slot));
        Stencil {
            offsets,
            center_grad,
            neighbor,
            neighbor_grad,
        }
    })
}

/// Number of field evaluations per weighted anchor.
pub fn stencil_size() -> usize {
    stencil().offsets.len()
}

fn stencil_points(anchor: Vec3, step: f64) -> impl Iterator<Item = Vec3> {
    let h = 0.5 * step;
    stencil()
        .offsets
        .iter()
        .map(move |o| anchor + Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64) * h)
}

fn gradient_from(vals: &[f64], idx: &[[usize; 2]; 3], step: f64) -> Vec3 {
    Vec3::new(
        (vals[idx[0][1]] - vals[idx[0][0]]) / step,
        (vals[idx[1][1]] - vals[idx[1][0]]) / step,
        (vals[idx[2][1]] - vals[idx[2][0]]) / step,
    )
}

/// Scatter a gradient w.r.t. the unit normal back onto the stencil values.
fn scatter_normal_grad(normal: Vec3, len: f64, dn: Vec3, idx: &[[usize; 2]; 3], step: f64, dvals: &mut [f64]) {
    let dg = (dn - normal * normal.dot(dn)) / len;
    for a in 0..3 {
        dvals[idx[a][1]] += dg[a] / step;
        dvals[idx[a][0]] -= dg[a] / step;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of `|x|^p`, with `|x|` floored when `p < 1`.
fn pow_derivative(x: f64, p: f64) -> f64 {
    let mag = if p < 1.0 { x.abs().max(POW_FLOOR) } else { x.abs() };
    p * sign(x) * mag.powf(p - 1.0)
}

/// One anchor's weighted mean normal discrepancy given its stencil values.
/// When `dvals` is given, `scale` times the term's gradient is added to it.
fn anchor_term(vals: &[f64], cfg: &RegConfig, scale: f64, mut dvals: Option<&mut [f64]>) -> f64 {
    let st = stencil();
    let g_s = gradient_from(vals, &st.center_grad, cfg.step);
    let Some(n_s) = normal_from_gradient(g_s) else {
        return 0.0;
    };
    let mut terms = [None::<(Vec3, f64)>; 6];
    let mut denom = 0.0;
    for (l, term) in terms.iter_mut().enumerate() {
        if importance_weight(vals[st.neighbor[l]], cfg.eps) == 0.0 {
            continue;
        }
        let g_q = gradient_from(vals, &st.neighbor_grad[l], cfg.step);
        if let Some(n_q) = normal_from_gradient(g_q) {
            *term = Some((n_q, g_q.norm()));
            denom += 1.0;
        }
    }
    if denom == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut dn_s = Vec3::ZERO;
    for (l, term) in terms.iter().enumerate() {
        let Some((n_q, len_q)) = *term else { continue };
        let v = n_s - n_q;
        sum += (0..3).map(|c| v[c].abs().powf(cfg.p)).sum::<f64>();
        if let Some(d) = dvals.as_deref_mut() {
            let dv = v.map(|x| scale / denom * pow_derivative(x, cfg.p));
            dn_s += dv;
            scatter_normal_grad(n_q, len_q, -dv, &st.neighbor_grad[l], cfg.step, d);
        }
    }
    if let Some(d) = dvals {
        scatter_normal_grad(n_s, g_s.norm(), dn_s, &st.center_grad, cfg.step, d);
    }
    sum / denom
}

/// Normal-consistency loss over `anchors` for any field.
pub fn geo_loss<F: OccupancyField + ?Sized>(field: &F, anchors: &[Vec3], cfg: &RegConfig) -> f64 {
    if anchors.is_empty() {
        return 0.0;
    }
    let at_anchor = field.eval_batch(anchors);
    let active: Vec<Vec3> = anchors
        .iter()
        .zip(&at_anchor)
        .filter(|(_, v)| importance_weight(**v, cfg.eps) > 0.0)
        .map(|(a, _)| *a)
        .collect();
    let k = stencil_size();
    let points: Vec<Vec3> = active.iter().flat_map(|a| stencil_points(*a, cfg.step)).collect();
    let vals = field.eval_batch(&points);
    let sum: f64 = vals.chunks(k).map(|v| anchor_term(v, cfg, 0.0, None)).sum();
    sum / anchors.len() as f64
}

/// Gradient of [`geo_loss`] with respect to every stencil value of every
/// anchor, in the order produced by the stencil; zero rows for anchors
/// outside the band.
pub fn geo_loss_stencil_grad<F: OccupancyField + ?Sized>(
    field: &F,
    anchors: &[Vec3],
    cfg: &RegConfig,
) -> (Vec<Vec3>, Vec<f64>) {
    let k = stencil_size();
    let at_anchor = field.eval_batch(anchors);
    let points: Vec<Vec3> = anchors.iter().flat_map(|a| stencil_points(*a, cfg.step)).collect();
    let vals = field.eval_batch(&points);
    let mut grad = vec![0.0; points.len()];
    let scale = 1.0 / anchors.len().max(1) as f64;
    for (j, occ) in at_anchor.iter().enumerate() {
        if importance_weight(*occ, cfg.eps) > 0.0 {
            anchor_term(
                &vals[j * k..(j + 1) * k],
                cfg,
                scale,
                Some(&mut grad[j * k..(j + 1) * k]),
            );
        }
    }
    (points, grad)
}

/// Anchors per parallel work unit; fixed so reductions are thread-count independent.
const GROUP: usize = 128;
/// Anchors per forward/backward pass inside a group.
const BATCH: usize = 32;

/// Loss and parameter gradients for the decoder. `anchor_occupancy` holds
/// the decoder's values at the anchors and selects the weighted ones.
pub fn geo_loss_and_grad(
    mlp: &MlpField,
    anchors: &[Vec3],
    anchor_occupancy: &[f64],
    cfg: &RegConfig,
) -> Result<(f64, Gradients)> {
    if anchors.len() != anchor_occupancy.len() {
        return Err(Error::Invalid("anchor occupancy length mismatch".into()));
    }
    let n_params = mlp.num_params();
    if anchors.is_empty() {
        return Ok((0.0, Gradients::zeros(n_params)));
    }
    let active: Vec<Vec3> = anchors
        .iter()
        .zip(anchor_occupancy)
        .filter(|(_, v)| importance_weight(**v, cfg.eps) > 0.0)
        .map(|(a, _)| *a)
        .collect();
    let scale = 1.0 / anchors.len() as f64;
    let k = stencil_size();
    let parts = par::map_chunks(&active, GROUP, |_, group| -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros(n_params);
        let mut loss = 0.0;
        for batch in group.chunks(BATCH) {
            let points: Vec<Vec3> = batch.iter().flat_map(|a| stencil_points(*a, cfg.step)).collect();
            let (vals, cache) = mlp.forward(&points)?;
            let mut dvals = vec![0.0; vals.len()];
            for (v, d) in vals.chunks(k).zip(dvals.chunks_mut(k)) {
                loss += anchor_term(v, cfg, scale, Some(d));
            }
            mlp.backward_into(&cache, &dvals, &mut grads)?;
        }
        Ok((loss, grads))
    });
    let mut loss = 0.0;
    let mut total = Gradients::zeros(n_params);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss * scale, total))
}
