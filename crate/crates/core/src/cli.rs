//! Command-line front end: data generation, fitting, extraction, evaluation,
//! ablations and gradient checking.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract_eval::{export_obj, marching_cubes, silhouette_agreement, voxel_iou, SampledField, TriMesh, ISO};
use crate::field::{AnalyticShape, ConstantField, MlpField, OccupancyField};
use crate::geom::{camera_layout, read_cameras, write_cameras, Camera, Vec3, ViewLayout};
use crate::imaging::{render_silhouette, SilhouetteImage};
use crate::trainer::{write_loss_csv, LossRecord, SamplingScheme, TrainConfig, Trainer};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "PROBEFIELD_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

/// Lattice resolution used to tabulate learned fields before ray marching.
pub const AGREEMENT_LATTICE: usize = 128;

#[derive(Debug, Parser)]
#[command(name = "probefield", version, about = "Occupancy fields from multi-view silhouettes")]
pub struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic silhouettes of an analytic shape.
    Gen(GenArgs),
    /// Fit an occupancy field to silhouettes.
    Fit(FitArgs),
    /// Extract the 0.5 iso-surface as an OBJ mesh.
    Extract(ExtractArgs),
    /// Score a field against a ground-truth shape.
    Eval(EvalArgs),
    /// Run a matrix of fits with components toggled.
    Ablate(AblateArgs),
    /// Check the decoder backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Ring,
    Sphere,
}

impl From<LayoutArg> for ViewLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Ring => ViewLayout::Ring,
            LayoutArg::Sphere => ViewLayout::Sphere,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Shape description (JSON).
    #[arg(long)]
    pub shape: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, value_enum, default_value_t = LayoutArg::Ring)]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 2.0)]
    pub radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Directory of silhouette PGMs, read in file-name order.
    #[arg(long)]
    pub sils: PathBuf,
    #[arg(long)]
    pub cams: PathBuf,
    /// Training config (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write the final ray batch as CSV.
    #[arg(long)]
    pub dump_rays: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Where a field comes from: a checkpoint or a constant.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct FieldArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use a constant field with this value.
    #[arg(long)]
    pub constant: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    /// Ground-truth shape (JSON).
    #[arg(long)]
    pub shape: PathBuf,
    /// IoU voxel resolution.
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Extraction resolution for the mesh statistics.
    #[arg(long, default_value_t = 64)]
    pub mesh_resolution: usize,
    /// Cameras for the agreement metric; defaults to a 24-view ring.
    #[arg(long)]
    pub cams: Option<PathBuf>,
    /// Ground-truth silhouettes; rendered from the shape when omitted.
    #[arg(long, requires = "cams")]
    pub sils: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub sils: PathBuf,
    #[arg(long)]
    pub cams: PathBuf,
    /// Ground-truth shape for the IoU column.
    #[arg(long)]
    pub shape: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SamplingArg::Importance, SamplingArg::Normal])]
    pub sampling: Vec<SamplingArg>,
    #[arg(long, value_delimiter = ',', default_values_t = [true, false], action = clap::ArgAction::Set)]
    pub boundary_aware: Vec<bool>,
    /// Regularizer weights; defaults to 0 and the config's value.
    #[arg(long, value_delimiter = ',')]
    pub reg_lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 1.0, 2.0])]
    pub reg_p: Vec<f64>,
    /// Stencil spacing override.
    #[arg(long)]
    pub reg_dd: Option<f64>,
    /// Band half-width override.
    #[arg(long)]
    pub reg_eps: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// IoU voxel resolution.
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Importance,
    Normal,
}

impl From<SamplingArg> for SamplingScheme {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Importance => SamplingScheme::Importance,
            SamplingArg::Normal => SamplingScheme::Normal,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub points: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Record of one command invocation, written before any heavy work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs,
            outputs,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            version: version_string(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Manifest path stored next to an output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Invalid(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

pub fn read_shape(path: &Path) -> Result<AnalyticShape> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnalyticShape::from_json(&text)
}

/// Silhouette PGMs of a directory in file-name order.
pub fn read_silhouettes(dir: &Path) -> Result<Vec<SilhouetteImage>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no .pgm files in {}", dir.display())));
    }
    files.iter().map(|p| SilhouetteImage::read_pgm(p)).collect()
}

pub fn silhouette_file_name(view: usize) -> String {
    format!("view_{view:03}.pgm")
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_json(&text)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn config_value(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

enum LoadedField {
    Mlp(MlpField),
    Constant(ConstantField),
}

impl LoadedField {
    fn load(args: &FieldArgs) -> Result<Self> {
        match (&args.model, args.constant) {
            (Some(p), _) => Ok(LoadedField::Mlp(MlpField::load(p)?)),
            (None, Some(c)) if c.is_finite() => Ok(LoadedField::Constant(ConstantField(c))),
            (None, Some(c)) => Err(Error::Invalid(format!("constant field value {c} is not finite"))),
            (None, None) => Err(Error::Invalid("either --model or --constant is required".into())),
        }
    }

    fn as_field(&self) -> &dyn OccupancyField {
        match self {
            LoadedField::Mlp(m) => m,
            LoadedField::Constant(c) => c,
        }
    }

    fn inputs(args: &FieldArgs) -> Vec<PathBuf> {
        args.model.iter().cloned().collect()
    }
}

/// Rendering agreement of any field; learned fields are tabulated first so
/// the per-step ray march stays cheap.
pub fn field_agreement(
    field: &dyn OccupancyField,
    tabulate: bool,
    sils: &[SilhouetteImage],
    cams: &[Camera],
) -> Result<f64> {
    if tabulate {
        let sampled = SampledField::new(field, AGREEMENT_LATTICE)?;
        silhouette_agreement(&sampled, sils, cams)
    } else {
        silhouette_agreement(field, sils, cams)
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    if args.views == 0 || args.resolution == 0 {
        return Err(Error::Invalid("views and resolution must be positive".into()));
    }
    let shape = read_shape(&args.shape)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cams = camera_layout(
        args.layout.into(),
        args.views,
        args.radius,
        args.resolution,
        args.resolution,
    );
    let cams_path = args.out.join("cams.json");
    let mut outputs = vec![cams_path.clone()];
    outputs.extend((0..args.views).map(|v| args.out.join(silhouette_file_name(v))));
    let cfg = serde_json::json!({
        "shape": shape,
        "views": args.views,
        "resolution": args.resolution,
        "layout": format!("{:?}", args.layout).to_lowercase(),
        "radius": args.radius,
    });
    RunManifest::new("gen", cfg, None, vec![args.shape.clone()], outputs).write(&args.out.join("manifest.json"))?;
    write_cameras(&cams_path, &cams)?;
    for (v, cam) in cams.iter().enumerate() {
        render_silhouette(&shape, cam).write_pgm(&args.out.join(silhouette_file_name(v)))?;
    }
    Ok(())
}

/// Outcome of a fit driven from the command line.
pub struct FitOutcome {
    pub field: MlpField,
    pub history: Vec<LossRecord>,
    /// Set when the run stopped on a non-finite gradient; the field then
    /// holds the last finite parameters.
    pub diverged: Option<Error>,
}

/// Run a fit, keeping the last good parameters if it diverges.
pub fn run_fit(sils: &[SilhouetteImage], cams: &[Camera], cfg: TrainConfig) -> Result<(FitOutcome, Trainer)> {
    let mut trainer = Trainer::new(sils, cams, cfg)?;
    let mut diverged = None;
    while !trainer.is_done() {
        match trainer.step() {
            Ok(_) => {}
            Err(e @ Error::Diverged { .. }) => {
                diverged = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let outcome = FitOutcome {
        field: trainer.field().clone(),
        history: trainer.history().to_vec(),
        diverged,
    };
    Ok((outcome, trainer))
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = seed_override()? {
        cfg.seed = s;
    }
    cfg.validate()?;
    let sils = read_silhouettes(&args.sils)?;
    let cams = read_cameras(&args.cams)?;

    let mut inputs = vec![args.sils.clone(), args.cams.clone()];
    inputs.extend(args.config.iter().cloned());
    let mut outputs = vec![args.out.clone()];
    outputs.extend(args.log.iter().cloned());
    outputs.extend(args.dump_rays.iter().cloned());
    RunManifest::new("fit", config_value(&cfg), Some(cfg.seed), inputs, outputs).write(&manifest_path(&args.out))?;

    let (outcome, trainer) = run_fit(&sils, &cams, cfg)?;
    outcome.field.save(&args.out)?;
    if let Some(log) = &args.log {
        write_loss_csv(log, &outcome.history)?;
    }
    if let Some(path) = &args.dump_rays {
        trainer.rays().write_csv(path)?;
    }
    match outcome.diverged {
        Some(e) => Err(e),
        None => {
            if let Some(last) = outcome.history.last() {
                eprintln!(
                    "fit: {} iterations, L_sil {:.6}, L_geo {:.6}, L {:.6}",
                    outcome.history.len(),
                    last.sil,
                    last.geo,
                    last.total
                );
            }
            Ok(())
        }
    }
}

pub fn cmd_extract(args: &ExtractArgs) -> Result<TriMesh> {
    if args.resolution < 2 {
        return Err(Error::Invalid("extraction resolution must be at least 2".into()));
    }
    let field = LoadedField::load(&args.field)?;
    let cfg = serde_json::json!({ "resolution": args.resolution, "constant": args.field.constant });
    RunManifest::new(
        "extract",
        cfg,
        None,
        LoadedField::inputs(&args.field),
        vec![args.out.clone()],
    )
    .write(&manifest_path(&args.out))?;
    let mesh = marching_cubes(field.as_field(), args.resolution, ISO)?;
    if mesh.is_empty() {
        eprintln!("warning: empty iso-surface");
    }
    export_obj(&mesh, &args.out)?;
    Ok(mesh)
}

/// Scores printed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub silhouette_agreement: f64,
    pub n_vertices: usize,
    pub n_faces: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    if args.resolution < 2 || args.mesh_resolution < 2 {
        return Err(Error::Invalid("resolutions must be at least 2".into()));
    }
    let loaded = LoadedField::load(&args.field)?;
    let shape = read_shape(&args.shape)?;
    let cams = match &args.cams {
        Some(p) => read_cameras(p)?,
        None => camera_layout(ViewLayout::Ring, 24, 2.0, 64, 64),
    };
    let sils = match &args.sils {
        Some(dir) => read_silhouettes(dir)?,
        None => cams.iter().map(|c| render_silhouette(&shape, c)).collect(),
    };
    let field = loaded.as_field();
    let iou = voxel_iou(field, &shape, args.resolution)?;
    let agreement = field_agreement(field, matches!(loaded, LoadedField::Mlp(_)), &sils, &cams)?;
    let mesh = marching_cubes(field, args.mesh_resolution, ISO)?;
    Ok(EvalReport {
        iou,
        silhouette_agreement: agreement,
        n_vertices: mesh.vertices.len(),
        n_faces: mesh.triangles.len(),
    })
}

/// One run of the ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub sampling: SamplingScheme,
    pub boundary_aware: bool,
    pub lambda: f64,
    pub p: f64,
    pub seed: u64,
    pub iou: f64,
    pub normal_deviation: Option<f64>,
    pub last: Option<LossRecord>,
}

pub const ABLATION_CSV_HEADER: &str = "sampling,boundary_aware,lambda,p,seed,iou,mean_normal_angle,L_sil,L_geo,L";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let sampling = match self.sampling {
            SamplingScheme::Importance => "importance",
            SamplingScheme::Normal => "normal",
        };
        let angle = self.normal_deviation.map(|a| a.to_string()).unwrap_or_default();
        let (sil, geo, total) = self
            .last
            .map(|r| (r.sil.to_string(), r.geo.to_string(), r.total.to_string()))
            .unwrap_or_default();
        format!(
            "{sampling},{},{},{},{},{},{angle},{sil},{geo},{total}",
            self.boundary_aware, self.lambda, self.p, self.seed, self.iou
        )
    }
}

/// Configs of the ablation matrix in a fixed order.
pub fn ablation_matrix(
    base: &TrainConfig,
    sampling: &[SamplingScheme],
    boundary: &[bool],
    lambdas: &[f64],
    ps: &[f64],
) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for &s in sampling {
        for &b in boundary {
            for &l in lambdas {
                for &p in ps {
                    let mut cfg = base.clone();
                    cfg.sampling = s;
                    cfg.boundary_aware = b;
                    cfg.reg.lambda = l;
                    cfg.reg.p = p;
                    out.push(cfg);
                }
            }
        }
    }
    out
}

/// Fit one config and score it against the ground truth.
pub fn ablation_run(
    sils: &[SilhouetteImage],
    cams: &[Camera],
    shape: &AnalyticShape,
    cfg: &TrainConfig,
    resolution: usize,
) -> Result<AblationRow> {
    let (outcome, _) = run_fit(sils, cams, cfg.clone())?;
    if let Some(e) = outcome.diverged {
        return Err(e);
    }
    let mesh = marching_cubes(&outcome.field, 64, ISO)?;
    Ok(AblationRow {
        sampling: cfg.sampling,
        boundary_aware: cfg.boundary_aware,
        lambda: cfg.reg.lambda,
        p: cfg.reg.p,
        seed: cfg.seed,
        iou: voxel_iou(&outcome.field, shape, resolution)?,
        normal_deviation: mesh.mean_adjacent_normal_angle(),
        last: outcome.history.last().copied(),
    })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut base = load_config(args.config.as_deref())?;
    if let Some(n) = args.iterations {
        base.iterations = n;
    }
    if let Some(s) = args.seed {
        base.seed = s;
    }
    if let Some(s) = seed_override()? {
        base.seed = s;
    }
    if let Some(d) = args.reg_dd {
        base.reg.step = d;
    }
    if let Some(e) = args.reg_eps {
        base.reg.eps = e;
    }
    base.validate()?;
    let lambdas = args.reg_lambda.clone().unwrap_or_else(|| vec![0.0, base.reg.lambda]);
    let sampling: Vec<SamplingScheme> = args.sampling.iter().map(|&s| s.into()).collect();
    let runs = ablation_matrix(&base, &sampling, &args.boundary_aware, &lambdas, &args.reg_p);
    for cfg in &runs {
        cfg.validate()?;
    }
    let sils = read_silhouettes(&args.sils)?;
    let cams = read_cameras(&args.cams)?;
    let shape = read_shape(&args.shape)?;

    let mut inputs = vec![args.sils.clone(), args.cams.clone(), args.shape.clone()];
    inputs.extend(args.config.iter().cloned());
    let matrix = serde_json::json!({
        "base": config_value(&base),
        "sampling": sampling,
        "boundary_aware": args.boundary_aware,
        "lambda": lambdas,
        "p": args.reg_p,
        "resolution": args.resolution,
    });
    RunManifest::new("ablate", matrix, Some(base.seed), inputs, vec![args.out.clone()])
        .write(&manifest_path(&args.out))?;

    let mut rows = Vec::with_capacity(runs.len());
    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for (i, cfg) in runs.iter().enumerate() {
        let row = ablation_run(&sils, &cams, &shape, cfg, args.resolution)?;
        eprintln!("ablate {}/{}: {}", i + 1, runs.len(), row.csv_row());
        let _ = writeln!(csv, "{}", row.csv_row());
        std::fs::write(&args.out, &csv).map_err(|e| Error::io(&args.out, e))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Deterministic probe points for the gradient check.
pub fn gradcheck_points(seed: u64, n: usize) -> Vec<Vec3> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect()
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    if args.points == 0 || !(args.step > 0.0) {
        return Err(Error::Invalid("gradcheck needs points > 0 and step > 0".into()));
    }
    let seed = seed_override()?.unwrap_or(args.seed);
    let cfg = TrainConfig::default();
    let field = MlpField::init(seed, &cfg.layer_widths(), cfg.latent_dim)?;
    let points = gradcheck_points(seed, args.points);
    let upstream = vec![1.0; points.len()];
    let report = field.gradcheck(&points, &upstream, args.step)?;
    println!(
        "max relative error {:.3e} over {} of {} parameters ({} kink crossings skipped) in {:.2}s",
        report.max_rel_error, report.n_checked, report.n_params, report.n_kinks, report.seconds
    );
    Ok(report.max_rel_error < args.tolerance)
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::Invalid("--threads must be positive".into()));
    }
    crate::par::set_sequential(n == 1);
    #[cfg(feature = "parallel")]
    {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Exit code for an error under the 0/1/2 contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_INVALID,
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::Fit(a) => cmd_fit(a)?,
        Command::Extract(a) => {
            cmd_extract(a)?;
        }
        Command::Eval(a) => {
            let report = cmd_eval(a)?;
            let text = serde_json::to_string(&report).map_err(|e| Error::json("eval report", e))?;
            println!("{text}");
        }
        Command::Ablate(a) => {
            cmd_ablate(a)?;
        }
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(EXIT_INVALID);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(
            "fit",
            config_value(&TrainConfig::default()),
            Some(7),
            vec![PathBuf::from("a")],
            vec![PathBuf::from("b.pfld")],
        );
        let path = dir.path().join("m.json");
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        let back: TrainConfig = serde_json::from_value(m.config).unwrap();
        assert_eq!(back, TrainConfig::default());
    }

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(
            manifest_path(Path::new("out/model.pfld")),
            PathBuf::from("out/model.pfld.manifest.json")
        );
    }

    #[test]
    fn ablation_matrix_order_and_size() {
        let base = TrainConfig::default();
        let full = ablation_matrix(
            &base,
            &[SamplingScheme::Importance, SamplingScheme::Normal],
            &[true, false],
            &[0.0, 1e-2],
            &[0.8, 1.0, 2.0],
        );
        assert_eq!(full.len(), 24);
        assert_eq!(full[0].sampling, SamplingScheme::Importance);
        assert_eq!(full[23].sampling, SamplingScheme::Normal);
        assert!(!full[23].boundary_aware);
        assert_eq!(full[23].reg.p, 2.0);
        let two = ablation_matrix(
            &base,
            &[SamplingScheme::Importance, SamplingScheme::Normal],
            &[true],
            &[1e-2],
            &[2.0],
        );
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn parse_errors_exit_one() {
        assert_eq!(run(["probefield", "bogus"]), EXIT_INVALID);
        assert_eq!(run(["probefield", "fit"]), EXIT_INVALID);
        assert_eq!(run(["probefield", "--help"]), EXIT_OK);
    }

    #[test]
    fn ablate_flags_parse() {
        let cli = Cli::try_parse_from([
            "probefield",
            "ablate",
            "--sils",
            "s",
            "--cams",
            "c.json",
            "--shape",
            "t.json",
            "--out",
            "o.csv",
            "--sampling",
            "importance,normal",
            "--boundary-aware",
            "true",
            "--reg-lambda",
            "0.01",
            "--reg-p",
            "2",
        ])
        .unwrap();
        let Command::Ablate(a) = cli.command else { panic!() };
        assert_eq!(a.sampling, vec![SamplingArg::Importance, SamplingArg::Normal]);
        assert_eq!(a.boundary_aware, vec![true]);
        assert_eq!(a.reg_lambda, Some(vec![0.01]));
        assert_eq!(a.reg_p, vec![2.0]);
    }

    #[test]
    fn diverged_maps_to_exit_two() {
        assert_eq!(exit_code(&Error::Diverged { iteration: 3 }), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::NoContourMass), EXIT_INVALID);
    }
}
