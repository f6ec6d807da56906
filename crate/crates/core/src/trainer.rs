//! Adam fitting of the decoder and latent code against the silhouette loss
//! plus the weighted normal-consistency term.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Gradients, MlpField};
use crate::geom::{Camera, Vec3};
use crate::imaging::{contour_weights_2d, contour_weights_3d, visual_hull, HullTester, SilhouetteImage};
use crate::par;
use crate::probing::{silhouette_loss, silhouette_loss_backward, AnchorSet, RayBatch};
use crate::regularizer::{geo_loss, geo_loss_and_grad, RegConfig};
use crate::sampling::{
    build_sampler_2d, build_sampler_3d, sample_normal_baseline, sample_normal_baseline_pixels, sample_pixels,
    sample_points, MixtureSampler2D, MixtureSampler3D,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingScheme {
    Importance,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_anchors: usize,
    pub rays_per_view: usize,
    /// Mixture bandwidth in world units.
    pub sigma: f64,
    /// Anchor support radius.
    pub tau: f64,
    pub reg: RegConfig,
    /// Anchors entering the regularizer each iteration (a prefix of the
    /// i.i.d. anchor draw); `None` uses all of them.
    pub reg_anchors: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Views drawn for each resample period; `None` uses every view.
    pub views_per_iteration: Option<usize>,
    pub resample_every: usize,
    pub sampling: SamplingScheme,
    pub boundary_aware: bool,
    /// Leading fraction of the iterations that run with boundary-aware
    /// filtering when it is enabled.
    pub boundary_aware_fraction: f64,
    pub hidden_widths: Vec<usize>,
    pub latent_dim: usize,
    pub hull_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_anchors: 4000,
            rays_per_view: 1024,
            sigma: 7e-3,
            tau: 3e-2,
            reg: RegConfig::default(),
            reg_anchors: None,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 2000,
            seed: 0,
            views_per_iteration: None,
            resample_every: 50,
            sampling: SamplingScheme::Importance,
            boundary_aware: true,
            boundary_aware_fraction: 1.0,
            hidden_widths: vec![256, 256, 128, 64],
            latent_dim: 128,
            hull_resolution: 64,
        }
    }
}

impl TrainConfig {
    /// Full-scale anchor and ray counts.
    pub fn full_scale() -> Self {
        TrainConfig {
            n_anchors: 16_000,
            rays_per_view: 4096,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_anchors", self.n_anchors),
            ("rays_per_view", self.rays_per_view),
            ("resample_every", self.resample_every),
            ("hull_resolution", self.hull_resolution),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("tau", self.tau),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.boundary_aware_fraction) {
            return Err(Error::Invalid(format!(
                "boundary_aware_fraction must be in [0, 1], got {}",
                self.boundary_aware_fraction
            )));
        }
        if self.views_per_iteration == Some(0) || self.reg_anchors == Some(0) {
            return Err(Error::Invalid(
                "views_per_iteration and reg_anchors must be positive".into(),
            ));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        self.reg.validate()
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = self.hidden_widths.clone();
        w.push(1);
        w
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::json("training config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamParams {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves parameters
/// and state untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || state.first.len() != params.len() {
        return Err(Error::Invalid("optimizer shapes do not match parameters".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            iteration: state.step as usize,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = hp.beta1 * state.first[i] + (1.0 - hp.beta1) * g;
        state.second[i] = hp.beta2 * state.second[i] + (1.0 - hp.beta2) * g * g;
        let m = state.first[i] / c1;
        let v = state.second[i] / c2;
        params[i] -= hp.learning_rate * m / (v.sqrt() + hp.eps);
    }
    Ok(())
}

pub fn total_loss(sil: f64, geo: f64, lambda: f64) -> f64 {
    sil + lambda * geo
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub sil: f64,
    pub geo: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,L_sil,L_geo,L";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.iteration, self.sil, self.geo, self.total)
    }
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Independent stream seed for one resample round and purpose.
fn derive_seed(seed: u64, round: u64, purpose: u64) -> u64 {
    let mut z = seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Points per forward/backward pass when routing silhouette gradients.
const BACKWARD_CHUNK: usize = 256;

/// Stateful fitting loop; [`fit`] runs it to completion.
pub struct Trainer {
    cfg: TrainConfig,
    sils: Vec<SilhouetteImage>,
    cams: Vec<Camera>,
    anchor_sampler: Option<MixtureSampler3D>,
    ray_samplers: Vec<MixtureSampler2D>,
    field: MlpField,
    adam: AdamState,
    anchors: AnchorSet,
    rays: RayBatch,
    iteration: usize,
    history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(sils: &[SilhouetteImage], cams: &[Camera], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if sils.is_empty() || sils.len() != cams.len() {
            return Err(Error::Invalid(format!(
                "{} silhouettes for {} cameras",
                sils.len(),
                cams.len()
            )));
        }
        for (i, s) in sils.iter().enumerate() {
            if s.foreground_fraction() == 0.0 {
                return Err(Error::Invalid(format!("silhouette {i} is empty")));
            }
        }
        for c in cams {
            c.validate()?;
        }
        let (anchor_sampler, ray_samplers) = match cfg.sampling {
            SamplingScheme::Importance => {
                let hull = visual_hull(sils, cams, cfg.hull_resolution)?;
                let anchor = build_sampler_3d(&contour_weights_3d(&hull), cfg.sigma)?;
                let rays = sils
                    .iter()
                    .map(|s| build_sampler_2d(&contour_weights_2d(s), cfg.sigma * s.width as f64))
                    .collect::<Result<Vec<_>>>()?;
                (Some(anchor), rays)
            }
            SamplingScheme::Normal => (None, Vec::new()),
        };
        let field = MlpField::init(cfg.seed, &cfg.layer_widths(), cfg.latent_dim)?;
        let adam = AdamState::new(field.num_params());
        Ok(Trainer {
            cfg,
            sils: sils.to_vec(),
            cams: cams.to_vec(),
            anchor_sampler,
            ray_samplers,
            field,
            adam,
            anchors: AnchorSet::new(Vec::new(), 1.0)?,
            rays: RayBatch::default(),
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn field(&self) -> &MlpField {
        &self.field
    }

    pub fn into_field(self) -> MlpField {
        self.field
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn rays(&self) -> &RayBatch {
        &self.rays
    }

    /// Whether rays drawn at the current iteration use boundary-aware
    /// filtering.
    pub fn boundary_aware_active(&self) -> bool {
        self.cfg.boundary_aware
            && (self.iteration as f64) < self.cfg.boundary_aware_fraction * self.cfg.iterations as f64
    }

    fn resample(&mut self) -> Result<()> {
        let round = (self.iteration / self.cfg.resample_every) as u64;
        let seed = self.cfg.seed;
        let positions = match &self.anchor_sampler {
            Some(s) => sample_points(s, self.cfg.n_anchors, derive_seed(seed, round, 0)),
            None => sample_normal_baseline(self.cfg.n_anchors, derive_seed(seed, round, 0)),
        };
        let mut anchors = AnchorSet::new(positions, self.cfg.tau)?;
        let filtered = self.boundary_aware_active();
        if filtered {
            anchors.label_sides(&HullTester::new(&self.sils, &self.cams)?);
        }

        let n_views = self.cams.len();
        let views: Vec<usize> = match self.cfg.views_per_iteration {
            Some(k) if k < n_views => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, round, 1));
                let mut v = sample_indices(&mut rng, n_views, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n_views).collect(),
        };
        let pixels = views
            .iter()
            .map(|&v| {
                let s = derive_seed(seed, round, 2 + v as u64);
                match self.ray_samplers.get(v) {
                    Some(sampler) => Ok(sample_pixels(sampler, self.cfg.rays_per_view, s)),
                    None => sample_normal_baseline_pixels(&self.cams[v], self.cfg.rays_per_view, s),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let cams: Vec<Camera> = views.iter().map(|&v| self.cams[v]).collect();
        let sils: Vec<SilhouetteImage> = views.iter().map(|&v| self.sils[v].clone()).collect();
        let mut rays = RayBatch::from_pixels(&cams, &sils, &pixels)?;
        for r in &mut rays.rays {
            r.view = views[r.view];
        }
        rays.find_candidates(&anchors, filtered);
        self.anchors = anchors;
        self.rays = rays;
        Ok(())
    }

    /// Gradient of the silhouette loss w.r.t. the parameters, back-propagated
    /// only through anchors that receive a nonzero occupancy gradient.
    fn silhouette_gradients(&self, dphi: &[f64]) -> Result<Gradients> {
        let routed: Vec<(Vec3, f64)> = self
            .anchors
            .positions
            .iter()
            .zip(dphi)
            .filter(|(_, d)| **d != 0.0)
            .map(|(p, d)| (*p, *d))
            .collect();
        let n_params = self.field.num_params();
        let parts = par::map_chunks(&routed, BACKWARD_CHUNK, |_, chunk| -> Result<Gradients> {
            let points: Vec<Vec3> = chunk.iter().map(|(p, _)| *p).collect();
            let upstream: Vec<f64> = chunk.iter().map(|(_, d)| *d).collect();
            let (_, cache) = self.field.forward(&points)?;
            self.field.backward(&cache, &upstream)
        });
        let mut total = Gradients::zeros(n_params);
        for p in parts {
            total.add_assign(&p?);
        }
        Ok(total)
    }

    /// One optimizer iteration; resamples first when the schedule says so.
    pub fn step(&mut self) -> Result<LossRecord> {
        if self.iteration.is_multiple_of(self.cfg.resample_every) {
            self.resample()?;
        }
        let iteration = self.iteration;
        let diverged = || Error::Diverged { iteration };

        let occupancy = self.field.try_eval_batch(&self.anchors.positions)?;
        self.anchors.set_occupancy(occupancy)?;
        self.rays.aggregate(&self.anchors.occupancy);
        let sil = silhouette_loss(&self.rays);
        let dphi = silhouette_loss_backward(&self.rays, self.anchors.len());
        let mut grads = self.silhouette_gradients(&dphi)?;

        let m = self
            .cfg
            .reg_anchors
            .unwrap_or(self.anchors.len())
            .min(self.anchors.len());
        let reg_points = &self.anchors.positions[..m];
        let geo = if self.cfg.reg.lambda > 0.0 {
            let (geo, g) = geo_loss_and_grad(&self.field, reg_points, &self.anchors.occupancy[..m], &self.cfg.reg)?;
            grads.add_scaled(&g, self.cfg.reg.lambda);
            geo
        } else {
            geo_loss(&self.field, reg_points, &self.cfg.reg)
        };
        let total = total_loss(sil, geo, self.cfg.reg.lambda);
        if !total.is_finite() || !grads.is_finite() {
            return Err(diverged());
        }
        let hp = AdamParams {
            learning_rate: self.cfg.learning_rate,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
        };
        adam_step(self.field.params_mut(), &grads.values, &mut self.adam, &hp).map_err(|e| match e {
            Error::Diverged { .. } => diverged(),
            other => other,
        })?;
        let record = LossRecord {
            iteration,
            sil,
            geo,
            total,
        };
        self.history.push(record);
        self.iteration += 1;
        Ok(record)
    }
}

pub struct FitResult {
    pub field: MlpField,
    pub history: Vec<LossRecord>,
}

pub fn fit(sils: &[SilhouetteImage], cams: &[Camera], cfg: TrainConfig) -> Result<FitResult> {
    let mut trainer = Trainer::new(sils, cams, cfg)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    let history = trainer.history().to_vec();
    Ok(FitResult {
        field: trainer.into_field(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![0.3, -0.2];
        let mut st = AdamState::new(2);
        st.first = vec![0.5, 0.5];
        st.second = vec![0.5, 0.5];
        st.step = 3;
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamParams::with_lr(0.1)).unwrap();
        assert!(st.first.iter().all(|m| (*m - 0.45).abs() < 1e-15));
        assert!(st.second.iter().all(|v| *v < 0.5));
        let mut q = vec![0.3, -0.2];
        let mut fresh = AdamState::new(2);
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, &AdamParams::with_lr(0.1)).unwrap();
        assert_eq!(q, vec![0.3, -0.2]);
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &AdamParams::with_lr(0.1)).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut st, &AdamParams::with_lr(0.1));
        assert!(matches!(err, Err(Error::Diverged { .. })));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.3, 5.0, 0.0), 0.3);
        assert!((total_loss(0.3, 2.0, 1e-2) - 0.32).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 1e-2), 0.0);
    }

    #[test]
    fn config_json_roundtrip_and_defaults() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        let partial = TrainConfig::from_json(r#"{"iterations": 10, "reg": {"p": 2.0}}"#).unwrap();
        assert_eq!(partial.iterations, 10);
        assert_eq!(partial.reg.p, 2.0);
        assert_eq!(partial.reg.step, 3e-2);
        assert!(TrainConfig::from_json(r#"{"iterations": 10, "bogus": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"tau": 0}"#).is_err());
        assert_eq!(TrainConfig::full_scale().n_anchors, 16_000);
    }

    #[test]
    fn seeds_are_distinct_per_round_and_purpose() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(2, 0, 0));
        assert_eq!(a, derive_seed(1, 0, 0));
    }
}
