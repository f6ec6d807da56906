#![allow(dead_code)]

use probefield::field::AnalyticShape;
use probefield::geom::{camera_layout, Camera, Vec3, ViewLayout};
use probefield::imaging::{render_silhouette, SilhouetteImage};
use probefield::trainer::TrainConfig;

/// Small-network config that fits a 24-view 64x64 task in about a minute on
/// one core.
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 1500,
        reg_anchors: Some(100),
        learning_rate: 1e-3,
        hidden_widths: vec![128, 128, 64],
        latent_dim: 32,
        seed,
        ..TrainConfig::default()
    }
}

pub fn torus() -> AnalyticShape {
    AnalyticShape::torus(Vec3::ZERO, 0.3, 0.1, Vec3::new(0.0, 1.0, 0.0))
}

pub fn sphere(radius: f64) -> AnalyticShape {
    AnalyticShape::sphere(Vec3::ZERO, radius)
}

/// 64x64 silhouettes of `shape` from `n` views on the given layout.
pub fn views(shape: &AnalyticShape, n: usize, layout: ViewLayout) -> (Vec<SilhouetteImage>, Vec<Camera>) {
    let cams = camera_layout(layout, n, 2.0, 64, 64);
    let sils = cams.iter().map(|c| render_silhouette(shape, c)).collect();
    (sils, cams)
}
