use probefield::field::{MlpField, OccupancyField};
use probefield::geom::{Ray, Vec3};
use probefield::probing::{intersect, silhouette_loss, silhouette_loss_backward, AnchorSet, ProbeRay, RayBatch};
use probefield::regularizer::{geo_loss, geo_loss_and_grad, importance_weight, RegConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_point(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

fn loss_with(batch: &RayBatch, occupancy: &[f64]) -> f64 {
    let mut b = batch.clone();
    b.aggregate(occupancy);
    silhouette_loss(&b)
}

#[test]
fn silhouette_backward_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let positions: Vec<Vec3> = (0..50).map(|_| random_point(&mut rng, 0.3)).collect();
    let mut anchors = AnchorSet::new(positions, 0.12).unwrap();
    let occupancy: Vec<f64> = (0..50).map(|_| rng.random_range(0.01..0.99)).collect();
    anchors.set_occupancy(occupancy.clone()).unwrap();

    let per_view = 10;
    let rays: Vec<ProbeRay> = (0..20)
        .map(|i| {
            let origin = random_point(&mut rng, 0.5).normalized() * 2.0;
            let target = random_point(&mut rng, 0.2);
            ProbeRay {
                view: i / per_view,
                pixel: (0.5, 0.5),
                ray: Ray {
                    origin,
                    direction: (target - origin).normalized(),
                },
                label: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    let plain: Vec<Ray> = rays.iter().map(|r| r.ray).collect();
    let candidates = intersect(&plain, &anchors);
    let mut batch = RayBatch {
        rays,
        rays_per_view: per_view,
        candidates,
        ..Default::default()
    };
    batch.aggregate(&occupancy);
    assert!(batch.argmax.iter().filter(|a| a.is_some()).count() >= 10);
    let analytic = silhouette_loss_backward(&batch, anchors.len());

    let near_tie = |a: usize| {
        batch
            .candidates
            .iter()
            .zip(&batch.psi)
            .any(|(c, psi)| c.contains(&(a as u32)) && occupancy[a] != *psi && (occupancy[a] - psi).abs() < 1e-5)
    };
    let h = 1e-6;
    let mut checked = 0;
    for a in 0..anchors.len() {
        if near_tie(a) {
            continue;
        }
        let mut up = occupancy.clone();
        up[a] += h;
        let mut dn = occupancy.clone();
        dn[a] -= h;
        let numeric = (loss_with(&batch, &up) - loss_with(&batch, &dn)) / (2.0 * h);
        let scale = numeric.abs().max(analytic[a].abs());
        if scale == 0.0 {
            continue;
        }
        assert!(
            (numeric - analytic[a]).abs() / scale < 1e-6,
            "anchor {a}: {numeric} vs {}",
            analytic[a]
        );
        checked += 1;
    }
    assert!(checked >= 5, "{checked}");
}

fn indicator_pattern(field: &MlpField, anchors: &[Vec3], cfg: &RegConfig) -> Vec<bool> {
    let mut points = anchors.to_vec();
    for a in anchors {
        for axis in 0..3 {
            for s in [1.0, -1.0] {
                points.push(*a + Vec3::axis(axis) * (s * cfg.step));
            }
        }
    }
    field
        .eval_batch(&points)
        .iter()
        .map(|v| importance_weight(*v, cfg.eps) > 0.0)
        .collect()
}

#[test]
fn geo_backward_matches_parameter_differences() {
    let mut field = MlpField::init(5, &[16, 16, 1], 4).unwrap();
    // Spread the output so normals vary between neighbors.
    for v in field.params_mut().iter_mut() {
        *v *= 3.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = RegConfig {
        p: 2.0,
        step: 0.05,
        eps: 0.45,
        ..RegConfig::default()
    };
    let anchors: Vec<Vec3> = (0..10).map(|_| random_point(&mut rng, 0.4)).collect();
    let occ = field.eval_batch(&anchors);
    let (loss, grads) = geo_loss_and_grad(&field, &anchors, &occ, &cfg).unwrap();
    assert!((loss - geo_loss(&field, &anchors, &cfg)).abs() < 1e-12);
    assert!(loss > 0.0);
    let base_pattern = indicator_pattern(&field, &anchors, &cfg);

    let h = 1e-6;
    let (mut checked, mut worst) = (0, 0.0f64);
    for i in 0..field.num_params() {
        let orig = field.params()[i];
        field.params_mut()[i] = orig + h;
        let up = geo_loss(&field, &anchors, &cfg);
        let flip_up = indicator_pattern(&field, &anchors, &cfg) != base_pattern;
        field.params_mut()[i] = orig - h;
        let dn = geo_loss(&field, &anchors, &cfg);
        let flip_dn = indicator_pattern(&field, &anchors, &cfg) != base_pattern;
        field.params_mut()[i] = orig;
        if flip_up || flip_dn {
            continue;
        }
        let numeric = (up - dn) / (2.0 * h);
        let analytic = grads.values[i];
        let scale = numeric.abs().max(analytic.abs());
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max((numeric - analytic).abs() / scale);
        checked += 1;
    }
    assert!(checked > field.num_params() / 2, "{checked}");
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[cfg(feature = "parallel")]
#[test]
fn geo_grad_is_thread_count_independent() {
    let field = MlpField::init(2, &[32, 32, 1], 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let anchors: Vec<Vec3> = (0..300).map(|_| random_point(&mut rng, 0.45)).collect();
    let occ = field.eval_batch(&anchors);
    let cfg = RegConfig::default();
    let a = geo_loss_and_grad(&field, &anchors, &occ, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| geo_loss_and_grad(&field, &anchors, &occ, &cfg).unwrap());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}
