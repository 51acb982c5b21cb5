//! Landmark-error evaluation of the registration methods, the table report,
//! and the seeded synthetic-case generator used in place of clinical data.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::field::Volume;
use crate::gp::{build_gram, AxisKernels, DisplacementGp, KernelSpec, TpsModel};
use crate::registration::{estimate_kernel, AffineFit, KernelMode, RegistrationConfig};
use crate::search::{choose_protocol, folds, CvProtocol};
use crate::types::{compute_displacements, Axis, GridSpec, LandmarkPair, LandmarkSet, Point3};

/// Largest landmark count the exact Cholesky sampler accepts.
pub const MAX_EXACT_SAMPLES: usize = 500;
/// Hard ceiling on the wall time of one case.
pub const CASE_TIME_BUDGET: Duration = Duration::from_secs(600);
pub const DEFAULT_EVAL_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {predicted} predicted vs {truth} truth points")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("error statistics need at least one point")]
    Empty,
    #[error("exact GP sampling supports at most {limit} points, requested {requested}")]
    TooLarge { requested: usize, limit: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("sampling covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Before,
    Affine,
    ThinPlate,
    VariogramGp,
    GridSearchGp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Before, Method::Affine, Method::ThinPlate, Method::VariogramGp, Method::GridSearchGp];

    pub fn column(self) -> &'static str {
        match self {
            Method::Before => "Before Reg.",
            Method::Affine => "Affine",
            Method::ThinPlate => "Thin-plate",
            Method::VariogramGp => "Variograms",
            Method::GridSearchGp => "GaussianK",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "before" => Ok(Method::Before),
            "affine" => Ok(Method::Affine),
            "thin_plate" | "tps" => Ok(Method::ThinPlate),
            "variogram_gp" | "variogram" => Ok(Method::VariogramGp),
            "grid_search_gp" | "grid" => Ok(Method::GridSearchGp),
            _ => Err(format!("unknown method `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MethodStatus {
    Ok,
    #[serde(rename = "n/a")]
    NotAvailable { reason: String },
}

/// Mean and population standard deviation of Euclidean distances (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Result<Self, EvalError> {
        if errors.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for ErrorStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

/// "3.35±1.22 → 1.97±1.05".
pub fn format_transition(from: &ErrorStats, to: &ErrorStats) -> String {
    format!("{from} → {to}")
}

pub fn landmark_errors(predicted: &[Point3], truth: &[Point3]) -> Result<Vec<f64>, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch { predicted: predicted.len(), truth: truth.len() });
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| p.distance(t)).collect())
}

pub fn mean_euclidean_error(predicted: &[Point3], truth: &[Point3]) -> Result<ErrorStats, EvalError> {
    ErrorStats::from_errors(&landmark_errors(predicted, truth)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    #[serde(flatten)]
    pub status: MethodStatus,
    pub mean_error: Option<f64>,
    pub std_error: Option<f64>,
    /// Per evaluation landmark, in evaluation order.
    pub errors: Vec<f64>,
    /// CV protocol behind the kernel selection (grid search only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<CvProtocol>,
    /// Mean CV error of the selected kernel (grid search only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<AxisKernels>,
}

impl MethodResult {
    fn ok(method: Method, errors: Vec<f64>) -> Self {
        let stats = ErrorStats::from_errors(&errors).ok();
        Self {
            method,
            status: MethodStatus::Ok,
            mean_error: stats.map(|s| s.mean),
            std_error: stats.map(|s| s.std),
            errors,
            protocol: None,
            selection_error: None,
            kernels: None,
        }
    }

    fn not_available(method: Method, reason: impl Into<String>) -> Self {
        Self {
            method,
            status: MethodStatus::NotAvailable { reason: reason.into() },
            mean_error: None,
            std_error: None,
            errors: Vec::new(),
            protocol: None,
            selection_error: None,
            kernels: None,
        }
    }

    pub fn stats(&self) -> Option<ErrorStats> {
        Some(ErrorStats { mean: self.mean_error?, std: self.std_error? })
    }

    pub fn is_ok(&self) -> bool {
        self.status == MethodStatus::Ok
    }
}

/// One evaluated case: a table row plus timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    /// Total landmark count of the case.
    pub landmarks: usize,
    /// Landmarks the methods were fitted on.
    pub training: usize,
    pub evaluation: usize,
    /// How held-out errors were produced: a fixed split, or CV over all landmarks.
    pub split: SplitKind,
    pub results: Vec<MethodResult>,
    /// Wall time per method in seconds, same order as `results`.
    pub runtimes_s: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitKind {
    HeldOut,
    CrossValidation { protocol: CvProtocol },
}

impl CaseReport {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }

    pub fn total_runtime(&self) -> Duration {
        Duration::from_secs_f64(self.runtimes_s.iter().sum())
    }

    pub fn within_budget(&self) -> bool {
        self.total_runtime() < CASE_TIME_BUDGET
    }
}

/// Specification of a seeded synthetic case. Landmarks are uniform in
/// `[origin, origin + extent]`; post points are `A(pre + d(pre))` where each
/// component of `d` is an exact GP draw (kernel nugget = i.i.d. noise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_landmarks: usize,
    pub origin_mm: Point3,
    pub extent_mm: [f64; 3],
    pub affine: AffineTransform,
    /// `None` means no deformation beyond the affine.
    pub kernels: Option<AxisKernels>,
    pub eval_fraction: f64,
    pub volume: Option<VolumeSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_landmarks: 60,
            origin_mm: Point3::ORIGIN,
            extent_mm: [100.0; 3],
            affine: AffineTransform::identity(),
            kernels: Some(AxisKernels::uniform(KernelSpec::with_effective_range(
                crate::gp::KernelFamily::Gaussian,
                4.0,
                40.0,
                0.0,
            ))),
            eval_fraction: DEFAULT_EVAL_FRACTION,
            volume: None,
        }
    }
}

/// Grid for the optional volume pair, covering the landmark box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumePair {
    pub pre: Volume,
    pub post: Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub name: String,
    pub spec: SyntheticSpec,
    pub training: LandmarkSet,
    pub evaluation: LandmarkSet,
    #[serde(skip)]
    pub volumes: Option<VolumePair>,
}

impl SyntheticCase {
    pub fn all_landmarks(&self) -> LandmarkSet {
        self.training.iter().chain(self.evaluation.iter()).copied().collect()
    }
}

/// Draws `n` jointly Gaussian values with covariance `K(points) + nugget·I`.
pub fn sample_gp(kernel: &KernelSpec, points: &[Point3], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EvalError> {
    let n = points.len();
    if n > MAX_EXACT_SAMPLES {
        return Err(EvalError::TooLarge { requested: n, limit: MAX_EXACT_SAMPLES });
    }
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    if kernel.sill == 0.0 && kernel.nugget == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut gram: DMatrix<f64> = build_gram(kernel, points);
    for i in 0..n {
        gram[(i, i)] += kernel.nugget;
    }
    let scale = kernel.sill.max(kernel.nugget);
    let mut jitter = 1e-10 * scale;
    loop {
        let mut m = gram.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok((ch.l() * z).iter().copied().collect());
        }
        jitter *= 10.0;
        if jitter > 1e-4 * scale {
            return Err(EvalError::NotPositiveDefinite);
        }
    }
}

/// A small random global transform: rotation up to `3°·strength` about a
/// random axis through `center`, per-axis scale within `1 ± 0.03·strength`,
/// translation within `±3·strength` mm. `strength = 0` gives the identity.
pub fn random_affine(seed: u64, strength: f64, center: Point3) -> AffineTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAFF1_4E00);
    let axis = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let angle = rng.random_range(-3.0..=3.0f64).to_radians() * strength;
    let rotation = match nalgebra::Unit::try_new(axis, 1e-12) {
        Some(unit) => nalgebra::Rotation3::from_axis_angle(&unit, angle).into_inner(),
        None => nalgebra::Matrix3::identity(),
    };
    let scale = Vector3::from_fn(|_, _| 1.0 + rng.random_range(-0.03..=0.03) * strength);
    let linear = rotation * nalgebra::Matrix3::from_diagonal(&scale);
    let shift = Vector3::from_fn(|_, _| rng.random_range(-3.0..=3.0) * strength);
    let c = center.to_vector();
    AffineTransform::new(linear, c - linear * c + shift)
}

pub fn generate_synthetic_case(spec: &SyntheticSpec) -> Result<SyntheticCase, EvalError> {
    if spec.extent_mm.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(EvalError::InvalidSpec("extents must be finite and positive".into()));
    }
    if !(0.0..1.0).contains(&spec.eval_fraction) {
        return Err(EvalError::InvalidSpec("eval_fraction must be in [0, 1)".into()));
    }
    if spec.n_landmarks > MAX_EXACT_SAMPLES {
        return Err(EvalError::TooLarge { requested: spec.n_landmarks, limit: MAX_EXACT_SAMPLES });
    }
    if let Some(k) = &spec.kernels {
        if k.as_array().iter().any(|s| s.sill < 0.0 || s.nugget < 0.0 || !(s.param > 0.0)) {
            return Err(EvalError::InvalidSpec("kernel parameters out of range".into()));
        }
    }
    if !spec.affine.is_invertible() {
        return Err(EvalError::InvalidSpec("ground-truth affine must be invertible".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_landmarks;
    let o = spec.origin_mm;
    let e = spec.extent_mm;
    let pre: Vec<Point3> = (0..n)
        .map(|_| {
            Point3::new(
                o.x + e[0] * rng.random::<f64>(),
                o.y + e[1] * rng.random::<f64>(),
                o.z + e[2] * rng.random::<f64>(),
            )
        })
        .collect();
    let mut d = vec![Vector3::zeros(); n];
    if let Some(kernels) = &spec.kernels {
        for axis in Axis::ALL {
            for (v, s) in d.iter_mut().zip(sample_gp(kernels.get(axis), &pre, &mut rng)?) {
                v[axis.index()] = s;
            }
        }
    }
    let pairs: Vec<LandmarkPair> = pre
        .iter()
        .zip(&d)
        .enumerate()
        .map(|(i, (p, di))| LandmarkPair::new(i as u64, *p, spec.affine.apply(&p.offset(di))))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_eval = (spec.eval_fraction * n as f64).round() as usize;
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let mut train_idx = train_idx.to_vec();
    let mut eval_idx = eval_idx.to_vec();
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    let all = LandmarkSet::new(pairs);

    let volumes = match &spec.volume {
        Some(v) => Some(synthetic_volumes(spec, v, &all, &d, &mut rng)?),
        None => None,
    };
    Ok(SyntheticCase {
        name: format!("synthetic-{}", spec.seed),
        spec: spec.clone(),
        training: all.select(&train_idx),
        evaluation: all.select(&eval_idx),
        volumes,
    })
}

/// A blob pattern as the pre volume and its image under the ground-truth map
/// as the post volume. The dense ground-truth displacement is the noise-free
/// GP interpolant of the sampled landmark displacements.
fn synthetic_volumes(
    spec: &SyntheticSpec,
    vspec: &VolumeSpec,
    all: &LandmarkSet,
    d: &[Vector3<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<VolumePair, EvalError> {
    let dims = vspec.dims;
    if dims.iter().any(|&n| n == 0) {
        return Err(EvalError::InvalidSpec("volume dims must be positive".into()));
    }
    let spacing: [f64; 3] = std::array::from_fn(|a| spec.extent_mm[a] / dims[a].max(2).saturating_sub(1) as f64);
    let grid = GridSpec::new(spec.origin_mm, spacing, dims).map_err(|e| EvalError::InvalidSpec(e.to_string()))?;
    let blobs: Vec<(Point3, f64, f32)> = (0..24)
        .map(|_| {
            let c = Point3::new(
                spec.origin_mm.x + spec.extent_mm[0] * rng.random::<f64>(),
                spec.origin_mm.y + spec.extent_mm[1] * rng.random::<f64>(),
                spec.origin_mm.z + spec.extent_mm[2] * rng.random::<f64>(),
            );
            (c, rng.random_range(4.0..12.0), rng.random_range(0.3f32..1.0))
        })
        .collect();
    let pattern = |p: &Point3| -> f32 {
        blobs.iter().map(|(c, r, a)| a * (-(p.distance_squared(c)) / (2.0 * r * r)).exp() as f32).sum()
    };
    let pre = Volume::from_fn(grid, |p| pattern(&p));

    let truth = match &spec.kernels {
        Some(k) => {
            let noise_free = AxisKernels::from_array(k.as_array().map(|s| KernelSpec { nugget: 0.0, ..s }));
            let obs: Vec<_> = all
                .iter()
                .zip(d)
                .map(|(p, di)| crate::types::DisplacementObservation::new(p.pre, *di))
                .collect();
            Some(DisplacementGp::fit(&noise_free, &obs).map_err(|e| EvalError::InvalidSpec(e.to_string()))?)
        }
        None => None,
    };
    let inverse = spec.affine.inverse().map_err(|e| EvalError::InvalidSpec(e.to_string()))?;
    // post(y) = pre(x) with y = A(x + d(x)); solve x = A⁻¹y − d(x) by fixed-point iteration.
    let post = Volume::from_fn(grid, |y| {
        let base = inverse.apply(&y);
        let mut x = base;
        if let Some(m) = &truth {
            for _ in 0..8 {
                x = base.offset(&-m.predict_mean_at(&x));
            }
        }
        pattern(&x)
    });
    Ok(VolumePair { pre, post })
}

/// Settings shared by every method of one evaluation run.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub registration: RegistrationConfig,
    pub methods: Option<Vec<Method>>,
}

impl EvalConfig {
    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| Method::ALL.to_vec())
    }
}

struct Prediction {
    points: Vec<Point3>,
    protocol: Option<CvProtocol>,
    selection_error: Option<f64>,
    kernels: Option<AxisKernels>,
}

impl Prediction {
    fn plain(points: Vec<Point3>) -> Self {
        Self { points, protocol: None, selection_error: None, kernels: None }
    }
}

/// Fits one method on `train` and maps the pre points of `eval` into post space.
fn predict(method: Method, train: &LandmarkSet, eval: &LandmarkSet, config: &RegistrationConfig) -> Result<Prediction, String> {
    let pre = eval.pre_points();
    if method == Method::Before {
        return Ok(Prediction::plain(pre));
    }
    let affine = AffineFit::estimate(train);
    if !affine.available {
        return Err(format!("affine unavailable: {}", affine.reason.unwrap_or_default()));
    }
    let a = affine.transform;
    let obs = compute_displacements(train, &a).map_err(|e| e.to_string())?;
    let gp_map = |model: &DisplacementGp| pre.iter().map(|p| a.apply(&p.offset(&model.predict_mean_at(p)))).collect();
    match method {
        Method::Before => unreachable!(),
        Method::Affine => Ok(Prediction::plain(pre.iter().map(|p| a.apply(p)).collect())),
        Method::ThinPlate => {
            let tps = TpsModel::fit(&obs).map_err(|e| e.to_string())?;
            Ok(Prediction::plain(pre.iter().map(|p| a.apply(&p.offset(&tps.predict_at(p)))).collect()))
        }
        Method::VariogramGp => {
            let choice = estimate_kernel(&obs, &KernelMode::Variogram, config).map_err(|e| e.to_string())?;
            let model = DisplacementGp::fit(&choice.kernels, &obs).map_err(|e| e.to_string())?;
            Ok(Prediction { points: gp_map(&model), protocol: None, selection_error: None, kernels: Some(choice.kernels) })
        }
        Method::GridSearchGp => {
            let choice = estimate_kernel(&obs, &KernelMode::Grid, config).map_err(|e| e.to_string())?;
            let model = DisplacementGp::fit(&choice.kernels, &obs).map_err(|e| e.to_string())?;
            let cv = choice.cv.as_ref();
            Ok(Prediction {
                points: gp_map(&model),
                protocol: cv.map(|c| c.protocol),
                selection_error: cv.map(|c| c.selected_error),
                kernels: Some(choice.kernels),
            })
        }
    }
}

fn check_set(set: &LandmarkSet) -> Result<(), EvalError> {
    let report = set.validate();
    if report.is_valid() {
        Ok(())
    } else {
        Err(EvalError::InvalidLandmarks(report.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")))
    }
}

/// Fits each method on the training landmarks of a case and scores it on the
/// held-out landmarks. Fit failures become `n/a` results.
pub fn run_protocol(case: &SyntheticCase, config: &EvalConfig) -> Result<CaseReport, EvalError> {
    check_set(&case.training)?;
    check_set(&case.evaluation)?;
    if case.evaluation.is_empty() {
        return Err(EvalError::Empty);
    }
    let truth = case.evaluation.post_points();
    let mut results = Vec::new();
    let mut runtimes = Vec::new();
    for method in config.methods() {
        let start = Instant::now();
        let result = match predict(method, &case.training, &case.evaluation, &config.registration) {
            Ok(pred) => {
                let mut r = MethodResult::ok(method, landmark_errors(&pred.points, &truth)?);
                r.protocol = pred.protocol;
                r.selection_error = pred.selection_error;
                r.kernels = pred.kernels;
                r
            }
            Err(reason) => MethodResult::not_available(method, reason),
        };
        runtimes.push(start.elapsed().as_secs_f64());
        results.push(result);
    }
    Ok(CaseReport {
        name: case.name.clone(),
        landmarks: case.training.len() + case.evaluation.len(),
        training: case.training.len(),
        evaluation: case.evaluation.len(),
        split: SplitKind::HeldOut,
        results,
        runtimes_s: runtimes,
    })
}

/// For a plain landmark set without separate ground truth: every landmark is
/// held out once under the landmark-count CV rule, and the per-landmark errors
/// are collected in landmark order. A method that fails on any fold is `n/a`.
pub fn run_protocol_cv(name: &str, landmarks: &LandmarkSet, config: &EvalConfig) -> Result<CaseReport, EvalError> {
    check_set(landmarks)?;
    let n = landmarks.len();
    let protocol = choose_protocol(n, config.registration.cv_seed).map_err(|e| EvalError::InvalidLandmarks(e.to_string()))?;
    let fold_sets = folds(n, protocol);
    let truth = landmarks.post_points();
    let mut results = Vec::new();
    let mut runtimes = Vec::new();
    for method in config.methods() {
        let start = Instant::now();
        let mut predicted = vec![Point3::ORIGIN; n];
        let mut failure = None;
        for held in &fold_sets {
            let train_idx: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
            match predict(method, &landmarks.select(&train_idx), &landmarks.select(held), &config.registration) {
                Ok(pred) => {
                    for (&i, p) in held.iter().zip(pred.points) {
                        predicted[i] = p;
                    }
                }
                Err(reason) => {
                    failure = Some(reason);
                    break;
                }
            }
        }
        let result = match failure {
            None => {
                let mut r = MethodResult::ok(method, landmark_errors(&predicted, &truth)?);
                r.protocol = Some(protocol);
                r
            }
            Some(reason) => MethodResult::not_available(method, reason),
        };
        runtimes.push(start.elapsed().as_secs_f64());
        results.push(result);
    }
    Ok(CaseReport {
        name: name.to_string(),
        landmarks: n,
        training: n,
        evaluation: n,
        split: SplitKind::CrossValidation { protocol },
        results,
        runtimes_s: runtimes,
    })
}

const REPORT_COLUMNS: [&str; 7] = ["Case", "Landmarks", "Before Reg.", "Affine", "Thin-plate", "Variograms", "GaussianK"];

fn cell(report: &CaseReport, method: Method) -> String {
    match report.result(method) {
        Some(r) => match (&r.status, r.stats()) {
            (MethodStatus::Ok, Some(s)) => s.to_string(),
            _ => "n/a".to_string(),
        },
        None => "-".to_string(),
    }
}

/// Aligned text table, one row per case. Methods that could not run show
/// `n/a`; methods that were not requested show `-`.
pub fn render_report(reports: &[CaseReport]) -> String {
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.landmarks.to_string(),
                cell(r, Method::Before),
                cell(r, Method::Affine),
                cell(r, Method::ThinPlate),
                cell(r, Method::VariogramGp),
                cell(r, Method::GridSearchGp),
            ]
        })
        .collect();
    let width = |c: usize| {
        rows.iter().map(|r| r[c].chars().count()).chain([REPORT_COLUMNS[c].chars().count()]).max().unwrap_or(0)
    };
    let widths: Vec<usize> = (0..7).map(width).collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, text) in cells.iter().enumerate() {
            if c > 0 {
                s.push_str(" | ");
            }
            let pad = widths[c] - text.chars().count();
            s.push_str(text);
            s.push_str(&" ".repeat(pad));
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    let header: Vec<String> = REPORT_COLUMNS.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for r in &rows {
        let _ = writeln!(out, "{}", line(r));
    }
    out
}

/// Machine-readable form of the same report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub version: u32,
    pub columns: Vec<String>,
    pub cases: Vec<CaseReport>,
}

pub fn report_document(reports: &[CaseReport]) -> ReportDocument {
    ReportDocument { version: 1, columns: REPORT_COLUMNS.iter().map(|s| s.to_string()).collect(), cases: reports.to_vec() }
}
