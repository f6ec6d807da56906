mod common;

use std::path::Path;
use std::process::{Command, Output};

use probefield::cli::{read_silhouettes, silhouette_file_name};
use probefield::geom::read_cameras;

fn probefield(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probefield"))
        .args(args)
        .current_dir(dir)
        .env_remove("PROBEFIELD_SEED")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const SPHERE: &str = r#"{"type": "sphere", "center": [0, 0, 0], "radius": 0.25}"#;
const TORUS: &str = r#"{"type": "torus", "center": [0, 0, 0], "major": 0.3, "minor": 0.1, "axis": [0, 1, 0]}"#;

#[test]
fn gen_writes_one_pgm_per_view() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "sphere.json", SPHERE);
    for n in [24, 1] {
        let out = format!("s{n}");
        let o = probefield(
            &[
                "gen",
                "--shape",
                "sphere.json",
                "--views",
                &n.to_string(),
                "--out",
                &out,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let sils = read_silhouettes(&dir.path().join(&out)).unwrap();
        assert_eq!(sils.len(), n);
        assert!(sils.iter().all(|s| s.width == 64 && s.height == 64));
        assert_eq!(read_cameras(&dir.path().join(&out).join("cams.json")).unwrap().len(), n);
        assert!(dir.path().join(&out).join("manifest.json").exists());
    }
}

#[test]
fn gen_rejects_bad_spec_with_location() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", "{\"type\": \"sphere\",\n \"radius\": \"big\"}");
    let o = probefield(&["gen", "--shape", "bad.json", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line"), "{err}");
}

#[test]
fn torus_seen_from_above_has_a_hole() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "torus.json", TORUS);
    let o = probefield(
        &["gen", "--shape", "torus.json", "--layout", "sphere", "--out", "t"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let cams = read_cameras(&dir.path().join("t/cams.json")).unwrap();
    let top = (0..cams.len())
        .max_by(|&a, &b| {
            let ya = cams[a].position.normalized().y.abs();
            let yb = cams[b].position.normalized().y.abs();
            ya.partial_cmp(&yb).unwrap()
        })
        .unwrap();
    let sil =
        probefield::imaging::SilhouetteImage::read_pgm(&dir.path().join("t").join(silhouette_file_name(top))).unwrap();
    // The image center sees the origin, which lies in the hole; walking out
    // in any direction crosses the ring.
    assert_eq!(sil.get(32, 32), 0.0);
    for (du, dv) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
        let hits = (1..32).any(|k| sil.get((32 + du * k) as usize, (32 + dv * k) as usize) == 1.0);
        assert!(hits, "direction {du},{dv}");
    }
}

#[test]
fn eval_constant_half_matches_sphere_volume() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "sphere.json", SPHERE);
    let o = probefield(
        &[
            "eval",
            "--constant",
            "0.5",
            "--shape",
            "sphere.json",
            "--resolution",
            "64",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let expected = 4.0 / 3.0 * std::f64::consts::PI * 0.25f64.powi(3);
    let iou = report["iou"].as_f64().unwrap();
    assert!((iou - expected).abs() < 0.005, "{iou}");
    for key in ["silhouette_agreement", "n_vertices", "n_faces"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["n_faces"].as_u64(), Some(0));
}

#[test]
fn extract_empty_field_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = probefield(&["extract", "--constant", "0", "--out", "empty.obj"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty iso-surface"));
    let text = std::fs::read_to_string(dir.path().join("empty.obj")).unwrap();
    assert!(text.lines().all(|l| l.starts_with('#')));
}

#[test]
fn gradcheck_passes_on_default_net() {
    let dir = tempfile::tempdir().unwrap();
    let o = probefield(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = probefield(
        &["fit", "--sils", "nowhere", "--cams", "c.json", "--out", "m.pfld"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = probefield(&["eval", "--shape", "s.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

fn gen_sphere_views(dir: &Path, n: usize) {
    write(dir, "sphere.json", SPHERE);
    let o = probefield(
        &["gen", "--shape", "sphere.json", "--views", &n.to_string(), "--out", "s"],
        dir,
    );
    assert_eq!(o.status.code(), Some(0));
    write(
        dir,
        "cfg.json",
        r#"{"iterations": 6, "resample_every": 3, "n_anchors": 500, "rays_per_view": 128,
            "reg_anchors": 20, "hidden_widths": [32, 32], "latent_dim": 8, "learning_rate": 1e-3}"#,
    );
}

#[test]
fn fit_writes_checkpoint_log_rays_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen_sphere_views(dir.path(), 4);
    let o = probefield(
        &[
            "--threads",
            "1",
            "fit",
            "--sils",
            "s",
            "--cams",
            "s/cams.json",
            "--config",
            "cfg.json",
            "--out",
            "m.pfld",
            "--log",
            "l.csv",
            "--dump-rays",
            "r.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("l.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("iter,L_sil,L_geo,L"));
    assert_eq!(lines.count(), 6);
    let rays = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(rays.lines().count(), 1 + 4 * 128);
    let manifest = probefield::cli::RunManifest::read(&dir.path().join("m.pfld.manifest.json")).unwrap();
    assert_eq!(manifest.command, "fit");
    assert_eq!(manifest.config["iterations"], 6);

    // The seed variable overrides the config and changes the result.
    let o = Command::new(env!("CARGO_BIN_EXE_probefield"))
        .args([
            "--threads",
            "1",
            "fit",
            "--sils",
            "s",
            "--cams",
            "s/cams.json",
            "--config",
            "cfg.json",
            "--out",
            "m2.pfld",
        ])
        .current_dir(dir.path())
        .env("PROBEFIELD_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let m2 = probefield::cli::RunManifest::read(&dir.path().join("m2.pfld.manifest.json")).unwrap();
    assert_eq!(m2.seed, Some(9));
    assert_ne!(
        std::fs::read(dir.path().join("m.pfld")).unwrap(),
        std::fs::read(dir.path().join("m2.pfld")).unwrap()
    );
}

#[test]
fn ablate_rows_follow_toggles_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    gen_sphere_views(dir.path(), 4);
    let args = |out: &'static str| {
        vec![
            "--threads",
            "1",
            "ablate",
            "--sils",
            "s",
            "--cams",
            "s/cams.json",
            "--shape",
            "sphere.json",
            "--config",
            "cfg.json",
            "--out",
            out,
            "--sampling",
            "importance,normal",
            "--boundary-aware",
            "true",
            "--reg-lambda",
            "0.01",
            "--reg-p",
            "2",
        ]
    };
    for out in ["a.csv", "b.csv"] {
        let o = probefield(&args(out), dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().nth(1).unwrap().starts_with("importance,"));
    assert!(a.lines().nth(2).unwrap().starts_with("normal,"));
    assert_eq!(a, b);
}
