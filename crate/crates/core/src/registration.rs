//! The full landmark pipeline: affine pre-alignment, kernel estimation, and
//! per-axis GP fit on the residual displacements.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::affine::{fit_affine, AffineError, AffineTransform};
use crate::field::{generate_dense_field, generate_field_and_uncertainty, DenseField, UncertaintyMap};
use crate::gp::{AxisKernels, DisplacementGp, GpError, KernelSpec};
use crate::search::{grid_search, CvResult, GridConfig, SearchError, SearchGrid, DEFAULT_CV_SEED};
use crate::types::{compute_displacements, DisplacementObservation, GridSpec, LandmarkSet, Point3, MIN_AFFINE_PAIRS};
use crate::variogram::{estimate_kernels, VariogramError, VariogramEstimate, VariogramSettings};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistrationError {
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),
    #[error(transparent)]
    Affine(#[from] AffineError),
    #[error(transparent)]
    Variogram(#[from] VariogramError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// How kernels are chosen when fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum KernelMode {
    /// Variograms when the landmark threshold is met and the fit succeeds, grid search otherwise.
    #[default]
    Auto,
    Variogram,
    Grid,
    Manual { kernels: AxisKernels },
}

/// Where the kernels in use came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSource {
    Variogram,
    Grid,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub kernel_mode: KernelMode,
    pub variogram: VariogramSettings,
    pub kernel_grid: GridConfig,
    pub cv_seed: u64,
    /// Used when there are too few landmarks to estimate anything.
    pub fallback_kernel: KernelSpec,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            kernel_mode: KernelMode::Auto,
            variogram: VariogramSettings::default(),
            kernel_grid: GridConfig::default(),
            cv_seed: DEFAULT_CV_SEED,
            fallback_kernel: KernelSpec::with_effective_range(crate::gp::KernelFamily::Gaussian, 1.0, 20.0, 0.0),
        }
    }
}

/// Kernels plus the diagnostics of whichever estimator produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub kernels: AxisKernels,
    pub source: KernelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variogram: Option<VariogramEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvResult>,
    /// Why an automatic choice fell back to another route.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl KernelChoice {
    pub fn manual(kernels: AxisKernels) -> Self {
        Self { kernels, source: KernelSource::Manual, variogram: None, cv: None, note: None }
    }
}

pub fn estimate_kernel(
    observations: &[DisplacementObservation],
    mode: &KernelMode,
    config: &RegistrationConfig,
) -> Result<KernelChoice, RegistrationError> {
    let grid = |note: Option<String>| -> Result<KernelChoice, RegistrationError> {
        let search_grid = SearchGrid::resolve(&config.kernel_grid, observations)?;
        let cv = grid_search(&search_grid, observations, config.cv_seed)?;
        Ok(KernelChoice { kernels: cv.selected, source: KernelSource::Grid, variogram: None, cv: Some(cv), note })
    };
    match mode {
        KernelMode::Manual { kernels } => {
            kernels.validate()?;
            Ok(KernelChoice::manual(*kernels))
        }
        KernelMode::Variogram => {
            let est = estimate_kernels(observations, &config.variogram)?;
            Ok(KernelChoice { kernels: est.kernels, source: KernelSource::Variogram, variogram: Some(est), cv: None, note: None })
        }
        KernelMode::Grid => grid(None),
        KernelMode::Auto => {
            if observations.len() < 2 {
                let mut c = KernelChoice::manual(AxisKernels::uniform(config.fallback_kernel));
                c.note = Some(format!("{} landmarks: using the fallback kernel", observations.len()));
                return Ok(c);
            }
            match estimate_kernels(observations, &config.variogram) {
                Ok(est) => Ok(KernelChoice {
                    kernels: est.kernels,
                    source: KernelSource::Variogram,
                    variogram: Some(est),
                    cv: None,
                    note: None,
                }),
                Err(e) => grid(Some(format!("variogram route unavailable: {e}"))),
            }
        }
    }
}

/// The affine part of a fit. Below four usable pairs it is unavailable and the
/// identity stands in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub transform: AffineTransform,
    pub available: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl AffineFit {
    pub fn estimate(landmarks: &LandmarkSet) -> Self {
        if landmarks.len() < MIN_AFFINE_PAIRS {
            return Self::unavailable(format!("need >= {MIN_AFFINE_PAIRS} landmark pairs, have {}", landmarks.len()));
        }
        match fit_affine(landmarks) {
            Ok(t) if t.is_invertible() => Self { transform: t, available: true, reason: None },
            Ok(_) => Self::unavailable("fitted affine is singular".into()),
            Err(e) => Self::unavailable(e.to_string()),
        }
    }

    pub fn fixed(transform: AffineTransform) -> Self {
        Self { transform, available: true, reason: None }
    }

    fn unavailable(reason: String) -> Self {
        Self { transform: AffineTransform::identity(), available: false, reason: Some(reason) }
    }
}

/// A fitted pipeline `T(x) = A(x + d(x))`.
#[derive(Clone, Debug)]
pub struct Registration {
    pub affine: AffineFit,
    pub kernel: KernelChoice,
    pub observations: Vec<DisplacementObservation>,
    pub model: DisplacementGp,
}

impl Registration {
    /// Affine, kernel estimation per `config.kernel_mode`, then the GPs.
    pub fn fit(landmarks: &LandmarkSet, config: &RegistrationConfig) -> Result<Self, RegistrationError> {
        let affine = AffineFit::estimate(landmarks);
        let observations = observations_for(landmarks, &affine.transform)?;
        let kernel = estimate_kernel(&observations, &config.kernel_mode, config)?;
        let model = DisplacementGp::fit(&kernel.kernels, &observations)?;
        Ok(Self { affine, kernel, observations, model })
    }

    /// Refits affine and GPs with kernels held fixed.
    pub fn refit(landmarks: &LandmarkSet, kernel: KernelChoice, frozen_affine: Option<&AffineTransform>) -> Result<Self, RegistrationError> {
        let affine = match frozen_affine {
            Some(t) => AffineFit::fixed(*t),
            None => AffineFit::estimate(landmarks),
        };
        let observations = observations_for(landmarks, &affine.transform)?;
        let model = DisplacementGp::fit(&kernel.kernels, &observations)?;
        Ok(Self { affine, kernel, observations, model })
    }

    pub fn kernels(&self) -> AxisKernels {
        self.kernel.kernels
    }

    pub fn displacement_at(&self, p: &Point3) -> Vector3<f64> {
        self.model.predict_mean_at(p)
    }

    pub fn variance_at(&self, p: &Point3) -> [f64; 3] {
        self.model.predict_variance_at(p)
    }

    /// Maps a pre-space point into post space using the GP directly (no grid).
    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.affine.transform.apply(&p.offset(&self.displacement_at(p)))
    }

    pub fn dense_field(&self, grid: &GridSpec) -> DenseField {
        generate_dense_field(&self.model, grid)
    }

    pub fn field_and_uncertainty(&self, grid: &GridSpec) -> (DenseField, UncertaintyMap) {
        generate_field_and_uncertainty(&self.model, grid)
    }
}

fn observations_for(landmarks: &LandmarkSet, affine: &AffineTransform) -> Result<Vec<DisplacementObservation>, RegistrationError> {
    let report = landmarks.validate();
    if !report.is_valid() {
        let msg = report.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(RegistrationError::InvalidLandmarks(msg));
    }
    Ok(compute_displacements(landmarks, affine)?)
}
