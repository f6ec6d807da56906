use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probefield::extract_eval::{marching_cubes, ISO};
use probefield::field::{AnalyticShape, MlpField, OccupancyField};
use probefield::geom::{camera_layout, Vec3, ViewLayout};
use probefield::imaging::render_silhouette;
use probefield::par;
use probefield::probing::{AnchorSet, RayBatch};
use probefield::regularizer::{geo_loss_and_grad, RegConfig};
use probefield::sampling::sample_normal_baseline_pixels;

fn points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            )
        })
        .collect()
}

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn bench_forward(c: &mut Criterion) {
    let field = MlpField::init(0, &[128, 128, 64, 1], 32).unwrap();
    let pts = points(4000, 1);
    let mut g = c.benchmark_group("mlp_forward_4000");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| field.eval_batch(&pts)));
    }
    par::set_sequential(false);
    g.finish();
}

fn bench_geo(c: &mut Criterion) {
    let field = MlpField::init(0, &[128, 128, 64, 1], 32).unwrap();
    let anchors = points(100, 2);
    let occ = field.eval_batch(&anchors);
    let cfg = RegConfig {
        eps: 0.5,
        ..RegConfig::default()
    };
    let mut g = c.benchmark_group("geo_loss_and_grad_100");
    g.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| geo_loss_and_grad(&field, &anchors, &occ, &cfg).unwrap())
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn bench_probing(c: &mut Criterion) {
    let shape = AnalyticShape::sphere(Vec3::ZERO, 0.25);
    let cams = camera_layout(ViewLayout::Ring, 24, 2.0, 64, 64);
    let sils: Vec<_> = cams.iter().map(|c| render_silhouette(&shape, c)).collect();
    let pixels: Vec<_> = cams
        .iter()
        .enumerate()
        .map(|(v, c)| sample_normal_baseline_pixels(c, 1024, v as u64).unwrap())
        .collect();
    let anchors = AnchorSet::new(points(4000, 3), 3e-2).unwrap();
    let base = RayBatch::from_pixels(&cams, &sils, &pixels).unwrap();
    let mut g = c.benchmark_group("find_candidates_24x1024");
    g.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut batch = base.clone();
                batch.find_candidates(&anchors, false);
                batch
            })
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn bench_marching_cubes(c: &mut Criterion) {
    let field = |p: Vec3| 1.0 / (1.0 + (-50.0 * (0.3 - p.norm())).exp());
    let mut g = c.benchmark_group("marching_cubes_64");
    g.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| marching_cubes(&field, 64, ISO).unwrap())
        });
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, bench_forward, bench_geo, bench_probing, bench_marching_cubes);
criterion_main!(benches);
