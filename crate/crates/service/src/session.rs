//! Active-registration sessions.
//!
//! A session holds an immutable [`Snapshot`] behind an `Arc`. Mutations are
//! serialized by a per-session lock, build a complete new snapshot, and swap
//! it in; readers clone the `Arc` and never observe a half-applied edit. The
//! dense field and uncertainty map are computed lazily, once per snapshot, so
//! a stale cache can never be served for a newer revision.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use gpreg::eval::Method;
use gpreg::field::{extract_slice, warp_volume, DenseField, Slice, UncertaintyMap, Volume};
use gpreg::io::{self, ModelBundle, ProjectConfig};
use gpreg::registration::{estimate_kernel, AffineFit, KernelChoice, KernelMode, KernelSource, Registration};
use gpreg::search::{choose_protocol, CvProtocol, CvResult, GridConfig};
use gpreg::types::{LandmarkPair, LandmarkSet, Point3, MIN_AFFINE_PAIRS};
use gpreg::variogram::{VariogramError, VariogramEstimate};
use gpreg::{AxisKernels, GridSpec, KernelSpec, RegistrationError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),
    #[error("pre location duplicates landmark {existing_id}")]
    DuplicateLocation { existing_id: u64 },
    #[error("coordinates must be finite")]
    NonFinite,
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    OutOfRange(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Ineligible(String),
    #[error("{0}")]
    Precondition(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::InsufficientData(_) => "insufficient_data",
            SessionError::InvalidLandmarks(_) => "invalid_landmarks",
            SessionError::DuplicateLocation { .. } => "duplicate_location",
            SessionError::NonFinite => "non_finite",
            SessionError::NotFound(_) => "not_found",
            SessionError::OutOfRange(_) => "out_of_range",
            SessionError::Unavailable(_) => "unavailable",
            SessionError::Ineligible(_) => "ineligible",
            SessionError::Precondition(_) => "precondition_failed",
            SessionError::BadRequest(_) => "bad_request",
            SessionError::Numeric(_) => "numeric_failure",
            SessionError::Io(_) => "io_failure",
        }
    }

    /// Errors caused by the request rather than by the server.
    pub fn is_client_error(&self) -> bool {
        !matches!(self, SessionError::Numeric(_) | SessionError::Io(_))
    }
}

impl From<RegistrationError> for SessionError {
    fn from(e: RegistrationError) -> Self {
        match e {
            RegistrationError::InvalidLandmarks(m) => SessionError::InvalidLandmarks(m),
            RegistrationError::Variogram(VariogramError::BelowThreshold { n, threshold }) => SessionError::Ineligible(format!(
                "below landmark threshold: variogram estimation needs at least {threshold} landmarks, session has {n}"
            )),
            RegistrationError::Variogram(e) => SessionError::Ineligible(e.to_string()),
            other => SessionError::Numeric(other.to_string()),
        }
    }
}

/// Pre and post volumes on the session grid.
#[derive(Clone, Debug, Default)]
pub struct SessionVolumes {
    pub pre: Option<Volume>,
    pub post: Option<Volume>,
}

/// Field, uncertainty and (if a post volume exists) the warped volume of one revision.
pub struct DenseCache {
    pub revision: u64,
    pub field: DenseField,
    pub uncertainty: UncertaintyMap,
    warped: OnceLock<Option<Volume>>,
}

/// One consistent state of a session.
pub struct Snapshot {
    pub revision: u64,
    pub landmarks: LandmarkSet,
    pub registration: Registration,
    pub grid: GridSpec,
    pub volumes: Arc<SessionVolumes>,
    pub config: Arc<ProjectConfig>,
    dense: OnceLock<Arc<DenseCache>>,
}

impl Snapshot {
    fn new(
        revision: u64,
        landmarks: LandmarkSet,
        registration: Registration,
        grid: GridSpec,
        volumes: Arc<SessionVolumes>,
        config: Arc<ProjectConfig>,
    ) -> Self {
        Self { revision, landmarks, registration, grid, volumes, config, dense: OnceLock::new() }
    }

    pub fn dense(&self) -> Arc<DenseCache> {
        self.dense
            .get_or_init(|| {
                let (field, uncertainty) = self.registration.field_and_uncertainty(&self.grid);
                Arc::new(DenseCache { revision: self.revision, field, uncertainty, warped: OnceLock::new() })
            })
            .clone()
    }

    pub fn is_fitted(&self) -> bool {
        self.registration.affine.available
    }

    pub fn summary(&self) -> FitSummary {
        let n = self.landmarks.len();
        let reg = &self.registration;
        let manual_ids: Vec<u64> = self
            .landmarks
            .iter()
            .filter(|p| p.source == gpreg::LandmarkSource::Manual)
            .map(|p| p.id)
            .collect();
        let threshold = self.config.variogram.min_landmarks;
        let affine = Availability::from_affine(&reg.affine);
        let methods = vec![
            MethodAvailability { method: Method::Before, availability: Availability::yes() },
            MethodAvailability { method: Method::Affine, availability: affine.clone() },
            MethodAvailability { method: Method::ThinPlate, availability: affine.clone() },
            MethodAvailability {
                method: Method::VariogramGp,
                availability: if n >= threshold {
                    Availability::yes()
                } else {
                    Availability::no(format!("below landmark threshold ({n} < {threshold})"))
                },
            },
            MethodAvailability {
                method: Method::GridSearchGp,
                availability: if n >= 2 { Availability::yes() } else { Availability::no("needs at least 2 landmarks".into()) },
            },
        ];
        let residuals = self.residuals();
        let mean_residual_mm =
            if residuals.is_empty() { None } else { Some(residuals.iter().map(|r| r.residual_mm).sum::<f64>() / residuals.len() as f64) };
        FitSummary {
            revision: self.revision,
            n_landmarks: n,
            manual_ids,
            protocol: choose_protocol(n, self.config.cv_seed).ok(),
            affine,
            kernel_source: reg.kernel.source,
            kernels: reg.kernel.kernels,
            kernel_note: reg.kernel.note.clone(),
            methods,
            mean_residual_mm,
        }
    }

    /// `‖T(pre) − post‖` per landmark under the current fit.
    pub fn residuals(&self) -> Vec<LandmarkResidual> {
        self.landmarks
            .iter()
            .map(|p| LandmarkResidual {
                pair: *p,
                residual_mm: self.registration.transform_point(&p.pre).distance(&p.post),
            })
            .collect()
    }

    pub fn slice(&self, kind: SliceKind, axis: gpreg::Axis, index: usize) -> Result<SliceFrame, SessionError> {
        let len = self.grid.dims[axis.index()];
        if index >= len {
            return Err(SessionError::OutOfRange(format!("slice index {index} out of range for axis {axis} (size {len})")));
        }
        let take = |f: &dyn Fn(usize) -> f32| {
            extract_slice(&self.grid, axis, index, f).map_err(|e| SessionError::OutOfRange(e.to_string()))
        };
        let slice = match kind {
            SliceKind::PreVolume | SliceKind::PostVolume => {
                let vol = match kind {
                    SliceKind::PreVolume => self.volumes.pre.as_ref(),
                    _ => self.volumes.post.as_ref(),
                };
                let vol = vol.ok_or_else(|| SessionError::Unavailable(format!("{} is not loaded in this session", kind.name())))?;
                take(&|i| vol.data[i])?
            }
            SliceKind::WarpedVolume => {
                let dense = self.dense();
                let warped = dense.warped.get_or_init(|| {
                    let post = self.volumes.post.as_ref()?;
                    warp_volume(post, &dense.field, &self.registration.affine.transform).ok().map(|w| w.volume)
                });
                let vol = warped
                    .as_ref()
                    .ok_or_else(|| SessionError::Unavailable("warped_volume needs a post volume on the session grid".into()))?;
                take(&|i| vol.data[i])?
            }
            SliceKind::Uncertainty => {
                let dense = self.dense();
                take(&|i| dense.uncertainty.trace[i] as f32)?
            }
            SliceKind::FieldMagnitude => {
                let dense = self.dense();
                take(&|i| dense.field.vectors[i].norm() as f32)?
            }
        };
        Ok(SliceFrame::new(kind, self.revision, &self.grid, slice))
    }

    pub fn state(&self, id: &str) -> SessionState {
        SessionState {
            id: id.to_string(),
            revision: self.revision,
            grid: self.grid,
            affine: self.registration.affine.clone(),
            kernel: self.registration.kernel.clone(),
            landmarks: self.residuals(),
            summary: self.summary(),
            volumes: LoadedVolumes { pre: self.volumes.pre.is_some(), post: self.volumes.post.is_some() },
            freeze_affine: self.config.freeze_affine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub available: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Availability {
    fn yes() -> Self {
        Self { available: true, reason: None }
    }

    fn no(reason: String) -> Self {
        Self { available: false, reason: Some(reason) }
    }

    fn from_affine(a: &AffineFit) -> Self {
        Self { available: a.available, reason: a.reason.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAvailability {
    pub method: Method,
    #[serde(flatten)]
    pub availability: Availability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub revision: u64,
    pub n_landmarks: usize,
    pub manual_ids: Vec<u64>,
    /// CV protocol the landmark count implies.
    pub protocol: Option<CvProtocol>,
    pub affine: Availability,
    pub kernel_source: KernelSource,
    pub kernels: AxisKernels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_note: Option<String>,
    pub methods: Vec<MethodAvailability>,
    pub mean_residual_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkResidual {
    #[serde(flatten)]
    pub pair: LandmarkPair,
    pub residual_mm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadedVolumes {
    pub pre: bool,
    pub post: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub revision: u64,
    pub grid: GridSpec,
    pub affine: AffineFit,
    pub kernel: KernelChoice,
    pub landmarks: Vec<LandmarkResidual>,
    pub summary: FitSummary,
    pub volumes: LoadedVolumes,
    pub freeze_affine: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    PreVolume,
    WarpedVolume,
    PostVolume,
    Uncertainty,
    FieldMagnitude,
}

impl SliceKind {
    pub fn name(self) -> &'static str {
        match self {
            SliceKind::PreVolume => "pre_volume",
            SliceKind::WarpedVolume => "warped_volume",
            SliceKind::PostVolume => "post_volume",
            SliceKind::Uncertainty => "uncertainty",
            SliceKind::FieldMagnitude => "field_magnitude",
        }
    }
}

impl std::str::FromStr for SliceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre_volume" => Ok(SliceKind::PreVolume),
            "warped_volume" => Ok(SliceKind::WarpedVolume),
            "post_volume" => Ok(SliceKind::PostVolume),
            "uncertainty" => Ok(SliceKind::Uncertainty),
            "field_magnitude" => Ok(SliceKind::FieldMagnitude),
            _ => Err(format!(
                "unknown slice kind `{s}` (expected pre_volume, warped_volume, post_volume, uncertainty or field_magnitude)"
            )),
        }
    }
}

/// A 2-D float frame plus what a viewer needs to place and scale it.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceFrame {
    pub kind: SliceKind,
    pub revision: u64,
    pub grid: GridSpec,
    pub slice: Slice,
    pub min: f32,
    pub max: f32,
}

impl SliceFrame {
    fn new(kind: SliceKind, revision: u64, grid: &GridSpec, slice: Slice) -> Self {
        let (min, max) = slice.min_max();
        Self { kind, revision, grid: *grid, slice, min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddResponse {
    pub revision: u64,
    pub id: u64,
    /// Posterior variance per axis at the new pre location, before and after the refit.
    pub variance_before: [f64; 3],
    pub variance_after: [f64; 3],
    pub summary: FitSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoveResponse {
    pub revision: u64,
    pub removed: LandmarkPair,
    pub summary: FitSummary,
}

/// Kernel replacement request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum RefitRequest {
    Variogram,
    Grid {
        #[serde(default)]
        grid: Option<GridConfig>,
    },
    /// Either one kernel for all axes or one per axis.
    Manual {
        #[serde(default)]
        kernel: Option<KernelSpec>,
        #[serde(default)]
        kernels: Option<AxisKernels>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitResponse {
    pub revision: u64,
    pub kernels: AxisKernels,
    pub source: KernelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variogram: Option<VariogramEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvResult>,
    pub summary: FitSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub revision: u64,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Everything needed to open a session.
#[derive(Clone, Debug, Default)]
pub struct SessionInputs {
    pub landmarks: LandmarkSet,
    pub config: ProjectConfig,
    pub volumes: SessionVolumes,
}

pub struct Session {
    id: String,
    edit: Mutex<()>,
    current: RwLock<Arc<Snapshot>>,
}

fn check_volumes(volumes: &SessionVolumes) -> Result<Option<GridSpec>, SessionError> {
    match (&volumes.pre, &volumes.post) {
        (Some(a), Some(b)) if a.grid != b.grid => {
            Err(SessionError::BadRequest("pre and post volumes must share one grid".into()))
        }
        (Some(v), _) | (None, Some(v)) => Ok(Some(v.grid)),
        (None, None) => Ok(None),
    }
}

impl Session {
    /// Fits affine, kernels and GPs for a new session (revision 0).
    pub fn create(id: impl Into<String>, inputs: SessionInputs) -> Result<Self, SessionError> {
        let SessionInputs { landmarks, config, volumes } = inputs;
        config.validate().map_err(SessionError::BadRequest)?;
        if landmarks.len() < MIN_AFFINE_PAIRS {
            return Err(SessionError::InsufficientData(format!(
                "a session needs at least {MIN_AFFINE_PAIRS} landmark pairs, got {}",
                landmarks.len()
            )));
        }
        let report = landmarks.validate();
        if !report.is_valid() {
            let msg = report.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            return Err(SessionError::InvalidLandmarks(msg));
        }
        let grid = match check_volumes(&volumes)? {
            Some(g) => g,
            None => config.output_grid(&landmarks).map_err(SessionError::BadRequest)?,
        };
        let registration = Registration::fit(&landmarks, &config.registration())?;
        let snap = Snapshot::new(0, landmarks, registration, grid, Arc::new(volumes), Arc::new(config));
        Ok(Self { id: id.into(), edit: Mutex::new(()), current: RwLock::new(Arc::new(snap)) })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// The latest consistent state.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn commit(&self, snap: Snapshot) -> Arc<Snapshot> {
        let snap = Arc::new(snap);
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = snap.clone();
        snap
    }

    /// Refits with the current kernels, respecting `freeze_affine`.
    fn refit_with(&self, base: &Snapshot, landmarks: LandmarkSet, kernel: KernelChoice) -> Result<Snapshot, SessionError> {
        let frozen = if base.config.freeze_affine && base.registration.affine.available {
            Some(base.registration.affine.transform)
        } else {
            None
        };
        let registration = Registration::refit(&landmarks, kernel, frozen.as_ref())?;
        Ok(Snapshot::new(
            base.revision + 1,
            landmarks,
            registration,
            base.grid,
            base.volumes.clone(),
            base.config.clone(),
        ))
    }

    pub fn add_landmark(&self, pre: Point3, post: Point3) -> Result<AddResponse, SessionError> {
        if !pre.is_finite() || !post.is_finite() {
            return Err(SessionError::NonFinite);
        }
        let _guard = self.edit.lock().unwrap_or_else(|e| e.into_inner());
        let base = self.snapshot();
        if let Some(existing) = base.landmarks.find_pre_location(&pre) {
            return Err(SessionError::DuplicateLocation { existing_id: existing.id });
        }
        let variance_before = base.registration.variance_at(&pre);
        let id = base.landmarks.next_id();
        let mut landmarks = base.landmarks.clone();
        landmarks.pairs.push(LandmarkPair::manual(id, pre, post));
        let next = self.refit_with(&base, landmarks, base.registration.kernel.clone())?;
        let variance_after = next.registration.variance_at(&pre);
        let snap = self.commit(next);
        Ok(AddResponse { revision: snap.revision, id, variance_before, variance_after, summary: snap.summary() })
    }

    pub fn remove_landmark(&self, id: u64) -> Result<RemoveResponse, SessionError> {
        let _guard = self.edit.lock().unwrap_or_else(|e| e.into_inner());
        let base = self.snapshot();
        let pos = base
            .landmarks
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| SessionError::NotFound(format!("landmark {id}")))?;
        let mut landmarks = base.landmarks.clone();
        let removed = landmarks.pairs.remove(pos);
        let next = self.refit_with(&base, landmarks, base.registration.kernel.clone())?;
        let snap = self.commit(next);
        Ok(RemoveResponse { revision: snap.revision, removed, summary: snap.summary() })
    }

    pub fn refit_kernel(&self, request: &RefitRequest) -> Result<RefitResponse, SessionError> {
        let _guard = self.edit.lock().unwrap_or_else(|e| e.into_inner());
        let base = self.snapshot();
        let mut reg_config = base.config.registration();
        let mode = match request {
            RefitRequest::Variogram => KernelMode::Variogram,
            RefitRequest::Grid { grid } => {
                if let Some(g) = grid {
                    io::validate_grid_config(g).map_err(SessionError::BadRequest)?;
                    reg_config.kernel_grid = g.clone();
                }
                KernelMode::Grid
            }
            RefitRequest::Manual { kernel, kernels } => {
                let kernels = match (kernel, kernels) {
                    (Some(k), None) => AxisKernels::uniform(*k),
                    (None, Some(k)) => *k,
                    _ => return Err(SessionError::BadRequest("manual mode takes exactly one of `kernel` or `kernels`".into())),
                };
                kernels.validate().map_err(|e| SessionError::BadRequest(e.to_string()))?;
                KernelMode::Manual { kernels }
            }
        };
        let n = base.landmarks.len();
        if matches!(mode, KernelMode::Grid) && n < 2 {
            return Err(SessionError::Ineligible(format!("grid search needs at least 2 landmarks, session has {n}")));
        }
        let kernel = estimate_kernel(&base.registration.observations, &mode, &reg_config)?;
        let next = self.refit_with(&base, base.landmarks.clone(), kernel)?;
        let snap = self.commit(next);
        let k = &snap.registration.kernel;
        Ok(RefitResponse {
            revision: snap.revision,
            kernels: k.kernels,
            source: k.source,
            variogram: k.variogram.clone(),
            cv: k.cv.clone(),
            summary: snap.summary(),
        })
    }

    /// Writes the model bundle, landmarks, field and uncertainty map of the
    /// current revision into `dir`. Session state is not modified.
    pub fn export(&self, dir: &Path) -> Result<ExportResponse, SessionError> {
        let snap = self.snapshot();
        if !snap.is_fitted() {
            return Err(SessionError::Precondition(format!(
                "session is not fitted: {}",
                snap.registration.affine.reason.clone().unwrap_or_default()
            )));
        }
        let dense = snap.dense();
        let mut bundle = ModelBundle::from_registration(&snap.registration, &snap.landmarks);
        bundle.grid = Some(snap.grid);
        bundle.seed = Some(snap.config.cv_seed);
        let files = [
            dir.join("model.json"),
            dir.join("landmarks.json"),
            dir.join("field.raw"),
            dir.join("uncertainty.raw"),
        ];
        let io_err = |e: io::IoError| SessionError::Io(e.to_string());
        io::write_model_bundle(&files[0], &bundle).map_err(io_err)?;
        io::write_landmarks(&files[1], &snap.landmarks).map_err(io_err)?;
        io::write_field(&files[2], &dense.field).map_err(io_err)?;
        io::write_uncertainty(&files[3], &dense.uncertainty).map_err(io_err)?;
        let mut listed = files.to_vec();
        listed.push(io::sidecar_path(&files[2]));
        listed.push(io::sidecar_path(&files[3]));
        Ok(ExportResponse { revision: snap.revision, dir: dir.to_path_buf(), files: listed })
    }

    /// Persists landmarks and (when fitted) the model bundle; used on shutdown.
    pub fn flush(&self, dir: &Path) -> Result<(), SessionError> {
        let snap = self.snapshot();
        let io_err = |e: io::IoError| SessionError::Io(e.to_string());
        io::write_landmarks(&dir.join("landmarks.json"), &snap.landmarks).map_err(io_err)?;
        io::write_json(&dir.join("state.json"), &snap.state(&self.id)).map_err(io_err)?;
        if snap.is_fitted() {
            let mut bundle = ModelBundle::from_registration(&snap.registration, &snap.landmarks);
            bundle.grid = Some(snap.grid);
            io::write_model_bundle(&dir.join("model.json"), &bundle).map_err(io_err)?;
        }
        Ok(())
    }
}
