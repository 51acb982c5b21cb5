//! Batch subcommands of the `gpreg` binary.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gpreg::eval::{self, CaseReport, EvalConfig, SyntheticSpec, VolumeSpec};
use gpreg::field::warp_volume;
use gpreg::io::{self, CaseInput, ModelBundle, ProjectConfig};
use gpreg::registration::{AffineFit, Registration};
use gpreg::search::{choose_protocol, grid_search, CvResult, GridConfig, SearchGrid};
use gpreg::types::compute_displacements;
use gpreg::variogram::{analyze, fit_variogram_model, EmpiricalVariogram, VariogramAxis, VariogramExport, VariogramFit};
use gpreg::{Axis, GridSpec, KernelFamily, KernelSpec, LandmarkSet, Point3};
use rayon::prelude::*;
use serde::Serialize;

use crate::api::{self, SessionStore};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CliError(pub String);

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError(e.to_string())
    }
}

fn fail(msg: impl Into<String>) -> CliError {
    CliError(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "gpreg", version, about = "Landmark-driven deformable registration with Gaussian-process interpolation")]
pub struct Cli {
    /// Seed for fold shuffles and synthetic data; recorded in every output
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Affine, kernel estimation and GP fit; writes the dense field, uncertainty map and model bundle
    Register(RegisterArgs),
    /// Empirical variograms of the residual displacements and the fitted models
    Variogram(VariogramArgs),
    /// Cross-validated kernel selection over a discrete grid
    Gridsearch(GridsearchArgs),
    /// Landmark-error evaluation of all methods over a directory of cases
    Evaluate(EvaluateArgs),
    /// Serve the active-registration session API over HTTP
    Serve(ServeArgs),
    /// Write seeded synthetic cases for `evaluate` and `register`
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Landmark file (JSON, version 1)
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Project config (JSON); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for model.json, field.raw and uncertainty.raw
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Pre volume (raw float32 + sidecar); its grid becomes the output grid
    #[arg(long)]
    pub volume_pre: Option<PathBuf>,
    /// Post volume (raw float32 + sidecar); warped back onto the pre grid as warped.raw
    #[arg(long)]
    pub volume_post: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    X,
    Y,
    Z,
    All,
}

#[derive(Debug, Args)]
pub struct VariogramArgs {
    /// Landmark file (JSON, version 1)
    #[arg(long, required_unless_present = "bins", conflicts_with = "bins")]
    pub landmarks: Option<PathBuf>,
    /// Fit a model to an empirical variogram (JSON with axis, delta and bins) instead
    #[arg(long)]
    pub bins: Option<PathBuf>,
    /// Displacement axis to analyse
    #[arg(long, value_enum, default_value = "all")]
    pub axis: AxisArg,
    /// Bin half-width in mm (bins are 2*delta wide); automatic when omitted
    #[arg(long)]
    pub delta: Option<f64>,
    /// Project config (JSON) for the remaining variogram settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output JSON path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridsearchArgs {
    /// Landmark file (JSON, version 1)
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Kernel grid (JSON); the default grid is used when omitted
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Output JSON path for the CV result table
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of case files and/or landmark files
    #[arg(long)]
    pub cases: PathBuf,
    /// Output JSON report; the text table is written next to it with a .txt extension
    #[arg(long)]
    pub out: PathBuf,
    /// Project config (JSON); its method list selects the columns
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to listen on
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Directory for exports, relative input paths and shutdown flushes
    #[arg(long, default_value = "gpreg-data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of cases (seeds seed, seed+1, ...)
    #[arg(long, default_value_t = 10)]
    pub cases: u64,
    /// Landmarks per case, training and held-out together (at most 500)
    #[arg(long, default_value_t = 60)]
    pub landmarks: usize,
    /// Fraction of landmarks held out for evaluation
    #[arg(long, default_value_t = eval::DEFAULT_EVAL_FRACTION)]
    pub eval_fraction: f64,
    /// Sill of the deformation kernel (mm^2)
    #[arg(long, default_value_t = 4.0)]
    pub sill: f64,
    /// Effective range of the deformation kernel (mm)
    #[arg(long, default_value_t = 40.0)]
    pub range: f64,
    /// Nugget of the deformation kernel (mm^2)
    #[arg(long, default_value_t = 0.0)]
    pub nugget: f64,
    /// Also write all landmarks of each case as a plain landmark file
    #[arg(long)]
    pub landmark_files: bool,
    /// Also write a pre/post volume pair with this many voxels per axis
    #[arg(long)]
    pub volume_dims: Option<usize>,
    /// Size of the random global affine per case (0 = none, 1 = up to 3 degrees, 3% scale, 3 mm shift)
    #[arg(long, default_value_t = 1.0)]
    pub affine_strength: f64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| fail(format!("cannot configure {n} threads: {e}")))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Register(a) => {
            let summary = register(&a, seed)?;
            print!("{}", summary.render());
        }
        Command::Variogram(a) => variogram(&a)?,
        Command::Gridsearch(a) => gridsearch(&a, seed)?,
        Command::Evaluate(a) => evaluate(&a, seed)?,
        Command::Serve(a) => serve(&a)?,
        Command::Synth(a) => synth(&a, seed.unwrap_or(0))?,
    }
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ProjectConfig, CliError> {
    let mut config = match path {
        Some(p) => io::read_config(p)?,
        None => ProjectConfig::default(),
    };
    if let Some(s) = seed {
        config.cv_seed = s;
    }
    Ok(config)
}

/// What `register` did, for printing and for tests.
#[derive(Debug, Clone, Serialize)]
pub struct RegisterSummary {
    pub landmarks: usize,
    pub protocol: String,
    pub affine_available: bool,
    pub kernel_source: String,
    pub kernel_note: Option<String>,
    pub kernels: [KernelSpec; 3],
    pub grid: GridSpec,
    pub seed: u64,
    pub files: Vec<PathBuf>,
    pub runtime_s: f64,
}

impl RegisterSummary {
    pub fn render(&self) -> String {
        let mut s = format!("landmarks: {}\nprotocol: {}\n", self.landmarks, self.protocol);
        s += &format!("affine: {}\n", if self.affine_available { "fitted" } else { "unavailable" });
        s += &format!("kernel source: {}\n", self.kernel_source);
        if let Some(note) = &self.kernel_note {
            s += &format!("note: {note}\n");
        }
        for (axis, k) in Axis::ALL.iter().zip(&self.kernels) {
            s += &format!("kernel {axis}: {k}\n");
        }
        let d = self.grid.dims;
        s += &format!("grid: {}x{}x{} voxels\nseed: {}\n", d[0], d[1], d[2], self.seed);
        for f in &self.files {
            s += &format!("wrote {}\n", f.display());
        }
        s += &format!("runtime: {:.2} s\n", self.runtime_s);
        s
    }
}

pub fn register(args: &RegisterArgs, seed: Option<u64>) -> Result<RegisterSummary, CliError> {
    let start = Instant::now();
    let landmarks = io::read_landmarks(&args.landmarks)?;
    let config = load_config(args.config.as_deref(), seed)?;
    let pre = args.volume_pre.as_deref().map(io::read_volume).transpose()?;
    let post = args.volume_post.as_deref().map(io::read_volume).transpose()?;
    if let (Some(a), Some(b)) = (&pre, &post) {
        if a.grid != b.grid {
            return Err(fail("pre and post volumes must share one grid"));
        }
    }
    let grid = match pre.as_ref().or(post.as_ref()) {
        Some(v) => v.grid,
        None => config.output_grid(&landmarks).map_err(fail)?,
    };
    let reg = Registration::fit(&landmarks, &config.registration()).map_err(|e| fail(e.to_string()))?;
    let (field, uncertainty) = reg.field_and_uncertainty(&grid);

    let mut files = vec![
        args.out_dir.join("model.json"),
        args.out_dir.join("field.raw"),
        args.out_dir.join("uncertainty.raw"),
    ];
    let mut bundle = ModelBundle::from_registration(&reg, &landmarks);
    bundle.grid = Some(grid);
    bundle.seed = Some(config.cv_seed);
    io::write_model_bundle(&files[0], &bundle)?;
    io::write_field(&files[1], &field)?;
    io::write_uncertainty(&files[2], &uncertainty)?;
    if let Some(post) = &post {
        let warped = warp_volume(post, &field, &reg.affine.transform).map_err(|e| fail(e.to_string()))?;
        let path = args.out_dir.join("warped.raw");
        io::write_volume(&path, &warped.volume)?;
        files.push(path);
    }
    let protocol = choose_protocol(landmarks.len(), config.cv_seed).map(|p| p.to_string()).unwrap_or_else(|_| "n/a".into());
    Ok(RegisterSummary {
        landmarks: landmarks.len(),
        protocol,
        affine_available: reg.affine.available,
        kernel_source: format!("{:?}", reg.kernel.source).to_lowercase(),
        kernel_note: reg.kernel.note.clone(),
        kernels: reg.kernel.kernels.as_array(),
        grid,
        seed: config.cv_seed,
        files,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// `variogram` output for a landmark file.
#[derive(Debug, Serialize)]
pub struct VariogramReport {
    pub landmarks: usize,
    pub affine_available: bool,
    pub axes: Vec<VariogramExport>,
}

/// `variogram --bins` output.
#[derive(Debug, Serialize)]
pub struct BinsFitReport {
    pub input: EmpiricalVariogram,
    pub fit: VariogramFit,
}

fn variogram(args: &VariogramArgs) -> Result<(), CliError> {
    let config = load_config(args.config.as_deref(), None)?;
    let mut settings = config.variogram.clone();
    if let Some(d) = args.delta {
        if !(d.is_finite() && d > 0.0) {
            return Err(fail(format!("--delta must be > 0, got {d}")));
        }
        settings.delta_mm = Some(d);
    }
    if let Some(bins_path) = &args.bins {
        let bytes = std::fs::read(bins_path).map_err(|e| fail(format!("{}: {e}", bins_path.display())))?;
        let input: EmpiricalVariogram =
            serde_json::from_slice(&bytes).map_err(|e| fail(format!("{}: {e}", bins_path.display())))?;
        let fit = fit_variogram_model(&input, &settings.families).map_err(|e| fail(e.to_string()))?;
        let m = &fit.model;
        println!("model: {} c0={:.6} c={:.6} a={:.6} (effective range {:.4} mm)", m.family, m.c0, m.c, m.a, m.effective_range());
        io::write_json(&args.out, &BinsFitReport { input, fit })?;
        return Ok(());
    }
    let path = args.landmarks.as_ref().ok_or_else(|| fail("--landmarks or --bins is required"))?;
    let landmarks = io::read_landmarks(path)?;
    let affine = AffineFit::estimate(&landmarks);
    let obs = compute_displacements(&landmarks, &affine.transform).map_err(|e| fail(e.to_string()))?;
    let axes: Vec<VariogramAxis> = match args.axis {
        AxisArg::X => vec![VariogramAxis::X],
        AxisArg::Y => vec![VariogramAxis::Y],
        AxisArg::Z => vec![VariogramAxis::Z],
        AxisArg::All => vec![VariogramAxis::X, VariogramAxis::Y, VariogramAxis::Z],
    };
    let mut exports = Vec::new();
    for axis in axes {
        let (export, _) = analyze(&obs, axis, &settings).map_err(|e| fail(e.to_string()))?;
        let model = match (&export.model, &export.model_error) {
            (Some(m), _) => format!("{} c0={:.4} c={:.4} a={:.4} range={:.2} mm", m.family, m.c0, m.c, m.a, m.effective_range()),
            (None, Some(e)) => format!("no model ({e})"),
            (None, None) => "no model".into(),
        };
        println!(
            "{}: {} cloud points, {} bins (delta {:.3} mm), {model}",
            serde_json::to_value(axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            export.cloud_points,
            export.bins.len(),
            export.delta
        );
        exports.push(export);
    }
    io::write_json(&args.out, &VariogramReport { landmarks: landmarks.len(), affine_available: affine.available, axes: exports })?;
    Ok(())
}

/// `gridsearch` output.
#[derive(Debug, Serialize)]
pub struct GridsearchReport {
    pub seed: u64,
    #[serde(flatten)]
    pub result: CvResult,
}

fn gridsearch(args: &GridsearchArgs, seed: Option<u64>) -> Result<(), CliError> {
    let landmarks = io::read_landmarks(&args.landmarks)?;
    let grid_config = match &args.grid {
        Some(p) => io::read_grid_config(p)?,
        None => GridConfig::default(),
    };
    let seed = seed.unwrap_or(gpreg::search::DEFAULT_CV_SEED);
    let affine = AffineFit::estimate(&landmarks);
    let obs = compute_displacements(&landmarks, &affine.transform).map_err(|e| fail(e.to_string()))?;
    let grid = SearchGrid::resolve(&grid_config, &obs).map_err(|e| fail(e.to_string()))?;
    let result = grid_search(&grid, &obs, seed).map_err(|e| fail(e.to_string()))?;
    println!("landmarks: {}", landmarks.len());
    println!("protocol: {}", result.protocol);
    println!("candidates: {}", result.candidates.len());
    for (axis, k) in Axis::ALL.iter().zip(result.selected.as_array()) {
        println!("selected {axis}: {k}");
    }
    println!("cv error: {:.4} mm", result.selected_error);
    io::write_json(&args.out, &GridsearchReport { seed, result })?;
    Ok(())
}

/// Runs the protocol over every case file in `dir`, cases in parallel.
pub fn evaluate_dir(dir: &Path, config: &EvalConfig) -> Result<Vec<CaseReport>, CliError> {
    let files = io::list_case_files(dir)?;
    let inputs: Vec<CaseInput> = files.iter().map(|f| io::read_case(f)).collect::<Result<_, _>>()?;
    inputs
        .par_iter()
        .map(|input| match input {
            CaseInput::Synthetic(case) => eval::run_protocol(case, config),
            CaseInput::Landmarks { name, landmarks } => eval::run_protocol_cv(name, landmarks, config),
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(e.to_string()))
}

fn evaluate(args: &EvaluateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let project = load_config(args.config.as_deref(), seed)?;
    let config = EvalConfig { registration: project.registration(), methods: Some(project.methods.clone()) };
    let reports = evaluate_dir(&args.cases, &config)?;
    let text = eval::render_report(&reports);
    print!("{text}");
    for r in &reports {
        if let (Some(b), Some(g)) = (
            r.result(eval::Method::Before).and_then(|m| m.stats()),
            r.result(eval::Method::GridSearchGp).and_then(|m| m.stats()),
        ) {
            println!("{}: {}", r.name, eval::format_transition(&b, &g));
        }
    }
    io::write_json(&args.out, &eval::report_document(&reports))?;
    let txt = args.out.with_extension("txt");
    std::fs::write(&txt, &text).map_err(|e| fail(format!("{}: {e}", txt.display())))?;
    let over: Vec<&str> = reports.iter().filter(|r| !r.within_budget()).map(|r| r.name.as_str()).collect();
    if !over.is_empty() {
        return Err(fail(format!(
            "cases over the {} s budget: {}",
            eval::CASE_TIME_BUDGET.as_secs(),
            over.join(", ")
        )));
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let addr: SocketAddr = args.bind.parse().map_err(|e| fail(format!("invalid --bind address {}: {e}", args.bind)))?;
    std::fs::create_dir_all(&args.data_dir).map_err(|e| fail(format!("{}: {e}", args.data_dir.display())))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| fail(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| fail(e.to_string()))?;
        println!("listening on http://{local}");
        let store = Arc::new(SessionStore::new(&args.data_dir));
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        api::serve(listener, store, shutdown).await.map_err(|e| fail(format!("server error: {e}")))
    })
}

fn synth(args: &SynthArgs, seed: u64) -> Result<(), CliError> {
    let kernel = KernelSpec::with_effective_range(KernelFamily::Gaussian, args.sill, args.range, args.nugget);
    kernel.validate().map_err(|e| fail(e.to_string()))?;
    if !(args.affine_strength.is_finite() && args.affine_strength >= 0.0) {
        return Err(fail(format!("--affine-strength must be >= 0, got {}", args.affine_strength)));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| fail(format!("{}: {e}", args.out_dir.display())))?;
    for i in 0..args.cases {
        let spec = SyntheticSpec {
            seed: seed + i,
            n_landmarks: args.landmarks,
            eval_fraction: args.eval_fraction,
            kernels: Some(gpreg::AxisKernels::uniform(kernel)),
            volume: args.volume_dims.map(|n| VolumeSpec { dims: [n; 3] }),
            affine: eval::random_affine(seed + i, args.affine_strength, Point3::new(50.0, 50.0, 50.0)),
            ..Default::default()
        };
        let case = eval::generate_synthetic_case(&spec).map_err(|e| fail(e.to_string()))?;
        let stem = format!("case-{:03}", spec.seed);
        io::write_case(&args.out_dir.join(format!("{stem}.json")), &case)?;
        if args.landmark_files {
            let all: LandmarkSet = case.all_landmarks();
            io::write_landmarks(&args.out_dir.join("landmarks").join(format!("{stem}.json")), &all)?;
        }
        if let Some(v) = &case.volumes {
            io::write_volume(&args.out_dir.join("volumes").join(format!("{stem}.pre.raw")), &v.pre)?;
            io::write_volume(&args.out_dir.join("volumes").join(format!("{stem}.post.raw")), &v.post)?;
        }
        println!("wrote {stem} ({} training, {} held out)", case.training.len(), case.evaluation.len());
    }
    Ok(())
}
