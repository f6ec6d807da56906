//! Central-difference verification of [`MlpField::backward`].
//!
//! For a scalar `L = sum_i c_i * phi(p_i)` every parameter `theta_k` is
//! perturbed by `+h` and `-h` and `(L+ - L-) / 2h` is compared against the
//! analytic gradient. The perturbed forward passes are evaluated as
//! *differences* from the unperturbed pass: a perturbation enters one layer's
//! pre-activations, and `relu(a + d) - relu(a)` and
//! `sigmoid(a + d) - sigmoid(a)` are formed branch-wise without subtracting
//! two rounded outputs. This is the same finite difference, free of the
//! `eps * |L| / h` cancellation that swamps small components otherwise.

use std::time::Instant;

use super::{MlpField, Vec3};
use crate::error::{Error, Result};

/// Outcome of a full gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_params: usize,
    /// Components with `|numeric| > threshold` that were compared.
    pub n_checked: usize,
    pub max_rel_error: f64,
    /// Flat parameter index of the worst component.
    pub worst_index: usize,
    /// Components whose `+-h` window crosses a ReLU kink; the difference
    /// quotient is not a derivative there, so they are left out of the max.
    pub n_kinks: usize,
    pub seconds: f64,
}

/// Minimum `|numeric|` for a component to enter the relative-error maximum.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

struct Base {
    /// Pre-activations per layer, `n x out`.
    pre: Vec<Vec<f64>>,
    /// Layer inputs per layer, `n x in` (the `concat(z, p)` rows for layer 0).
    input: Vec<Vec<f64>>,
}

fn relu_diff(a: f64, d: f64, kink: &mut bool) -> f64 {
    let b = a + d;
    match (a > 0.0, b > 0.0) {
        (true, true) => d,
        (false, false) => 0.0,
        _ => {
            *kink = true;
            b.max(0.0) - a.max(0.0)
        }
    }
}

fn sigmoid_diff(x: f64, d: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        -e * (-d).exp_m1() / ((1.0 + (-x - d).exp()) * (1.0 + e))
    } else {
        let e = x.exp();
        e * d.exp_m1() / ((1.0 + (x + d).exp()) * (1.0 + e))
    }
}

impl MlpField {
    fn base_pass(&self, points: &[Vec3]) -> Base {
        let n = points.len();
        let mut pre = Vec::new();
        let mut input = Vec::new();
        let mut x: Vec<f64> = Vec::with_capacity(n * self.layers[0].in_dim);
        for p in points {
            x.extend_from_slice(self.latent());
            x.extend_from_slice(&[p.x, p.y, p.z]);
        }
        for (l, s) in self.layers.iter().enumerate() {
            let w = self.weights(l);
            let b = self.biases(l);
            let mut y = vec![0.0; n * s.out_dim];
            for i in 0..n {
                let xi = &x[i * s.in_dim..(i + 1) * s.in_dim];
                for o in 0..s.out_dim {
                    let row = &w[o * s.in_dim..(o + 1) * s.in_dim];
                    y[i * s.out_dim + o] = b[o] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let next: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
            input.push(std::mem::replace(&mut x, next));
            pre.push(y);
        }
        Base { pre, input }
    }

    /// Push dense pre-activation differences `dpre` (rows map to points via
    /// `point_of`) from `layer` to the output; returns per-row output deltas.
    fn propagate(
        &self,
        base: &Base,
        layer: usize,
        mut dpre: Vec<f64>,
        point_of: &[usize],
        kinks: &mut [bool],
    ) -> Vec<f64> {
        let rows = point_of.len();
        let last = self.layers.len() - 1;
        let mut l = layer;
        loop {
            let s = self.layers[l];
            if l == last {
                return (0..rows)
                    .map(|r| sigmoid_diff(base.pre[l][point_of[r]], dpre[r]))
                    .collect();
            }
            let mut dact = vec![0.0; rows * s.out_dim];
            for r in 0..rows {
                let i = point_of[r];
                let base_row = &base.pre[l][i * s.out_dim..(i + 1) * s.out_dim];
                for o in 0..s.out_dim {
                    dact[r * s.out_dim + o] = relu_diff(base_row[o], dpre[r * s.out_dim + o], &mut kinks[r]);
                }
            }
            let next = self.layers[l + 1];
            let mut y = vec![0.0; rows * next.out_dim];
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    next.in_dim,
                    next.out_dim,
                    1.0,
                    dact.as_ptr(),
                    next.in_dim as isize,
                    1,
                    self.weights(l + 1).as_ptr(),
                    1,
                    next.in_dim as isize,
                    0.0,
                    y.as_mut_ptr(),
                    next.out_dim as isize,
                    1,
                );
            }
            dpre = y;
            l += 1;
        }
    }

    /// Propagate single-unit perturbations: each entry is
    /// `(layer, unit, delta per point)` and only that unit's pre-activation
    /// moves. Returns `(dL, kink)` per entry.
    fn unit_deltas(&self, base: &Base, layer: usize, perts: &[(usize, Vec<f64>)], weights: &[f64]) -> Vec<(f64, bool)> {
        let n = weights.len();
        let s = self.layers[layer];
        let last = self.layers.len() - 1;
        let mut kinks = vec![false; perts.len() * n];
        let point_of: Vec<usize> = (0..perts.len() * n).map(|r| r % n).collect();
        let dphi = if layer == last {
            perts
                .iter()
                .flat_map(|(_, d)| (0..n).map(move |i| sigmoid_diff(base.pre[layer][i], d[i])))
                .collect::<Vec<_>>()
        } else {
            let next = self.layers[layer + 1];
            let wn = self.weights(layer + 1);
            let mut dpre = vec![0.0; perts.len() * n * next.out_dim];
            for (p, (unit, d)) in perts.iter().enumerate() {
                for (i, &di) in d.iter().enumerate() {
                    let r = p * n + i;
                    let a = base.pre[layer][i * s.out_dim + unit];
                    let da = relu_diff(a, di, &mut kinks[r]);
                    if da != 0.0 {
                        let row = &mut dpre[r * next.out_dim..(r + 1) * next.out_dim];
                        for (q, v) in row.iter_mut().enumerate() {
                            *v = wn[q * next.in_dim + unit] * da;
                        }
                    }
                }
            }
            self.propagate(base, layer + 1, dpre, &point_of, &mut kinks)
        };
        (0..perts.len())
            .map(|p| {
                let dl = (0..n).map(|i| weights[i] * dphi[p * n + i]).sum();
                let kink = kinks[p * n..(p + 1) * n].iter().any(|&k| k);
                (dl, kink)
            })
            .collect()
    }

    /// Numeric gradient of `sum_i upstream[i] * phi(points[i])` by central
    /// differences with step `h`; second element flags kink crossings.
    pub fn numeric_gradient(&self, points: &[Vec3], upstream: &[f64], h: f64) -> Result<(Vec<f64>, Vec<bool>)> {
        if points.len() != upstream.len() || points.is_empty() {
            return Err(Error::Invalid(
                "gradient check needs one upstream weight per point".into(),
            ));
        }
        let n = points.len();
        let base = self.base_pass(points);
        let mut numeric = vec![0.0; self.params.len()];
        let mut kinked = vec![false; self.params.len()];

        // Latent code: every layer-0 unit moves by h * W0[o, j].
        let s0 = self.layers[0];
        let w0 = self.weights(0);
        for j in 0..self.latent_dim {
            let mut both = [0.0; 2];
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut dpre = vec![0.0; n * s0.out_dim];
                for i in 0..n {
                    for o in 0..s0.out_dim {
                        dpre[i * s0.out_dim + o] = sign * h * w0[o * s0.in_dim + j];
                    }
                }
                let point_of: Vec<usize> = (0..n).collect();
                let mut kinks = vec![false; n];
                let dphi = self.propagate(&base, 0, dpre, &point_of, &mut kinks);
                both[k] = (0..n).map(|i| upstream[i] * dphi[i]).sum();
                kinked[j] |= kinks.iter().any(|&k| k);
            }
            numeric[j] = (both[0] - both[1]) / (2.0 * h);
        }

        // Weights and biases: one unit per perturbation, batched.
        const BLOCK: usize = 96;
        for (l, s) in self.layers.iter().enumerate() {
            let mut jobs: Vec<(usize, usize, Option<usize>)> = Vec::new();
            for o in 0..s.out_dim {
                for k in 0..s.in_dim {
                    jobs.push((s.weights + o * s.in_dim + k, o, Some(k)));
                }
                jobs.push((s.biases + o, o, None));
            }
            for block in jobs.chunks(BLOCK) {
                let mut perts = Vec::with_capacity(2 * block.len());
                for sign in [1.0, -1.0] {
                    for &(_, o, k) in block {
                        let d: Vec<f64> = (0..n)
                            .map(|i| match k {
                                Some(k) => sign * h * base.input[l][i * s.in_dim + k],
                                None => sign * h,
                            })
                            .collect();
                        perts.push((o, d));
                    }
                }
                let res = self.unit_deltas(&base, l, &perts, upstream);
                let m = block.len();
                for (b, &(idx, _, _)) in block.iter().enumerate() {
                    numeric[idx] = (res[b].0 - res[m + b].0) / (2.0 * h);
                    kinked[idx] = res[b].1 || res[m + b].1;
                }
            }
        }
        Ok((numeric, kinked))
    }

    /// Compare analytic and numeric gradients of `sum_i upstream[i] * phi_i`.
    pub fn gradcheck(&self, points: &[Vec3], upstream: &[f64], h: f64) -> Result<GradCheckReport> {
        let start = Instant::now();
        let (_, cache) = self.forward(points)?;
        let analytic = self.backward(&cache, upstream)?;
        let (numeric, kinked) = self.numeric_gradient(points, upstream, h)?;
        let mut report = GradCheckReport {
            n_params: numeric.len(),
            n_checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            n_kinks: kinked.iter().filter(|&&k| k).count(),
            seconds: 0.0,
        };
        for (k, (&a, &num)) in analytic.values.iter().zip(&numeric).enumerate() {
            if num.abs() <= GRADCHECK_FLOOR || kinked[k] {
                continue;
            }
            report.n_checked += 1;
            let rel = (a - num).abs() / a.abs().max(num.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = k;
            }
        }
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}
