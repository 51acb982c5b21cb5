//! On-disk formats: landmark JSON, raw float32 volumes and fields with a JSON
//! sidecar, model bundles, project configs, and evaluation case files.
//!
//! The normative description lives in `docs/formats.md`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::eval::{Method, SyntheticCase};
use crate::field::{DenseField, UncertaintyMap, Volume};
use crate::gp::{AxisKernels, DisplacementGp, KernelSpec};
use crate::registration::{AffineFit, KernelChoice, KernelMode, KernelSource, Registration, RegistrationConfig};
use crate::search::{CvResult, GridConfig, SearchGrid, DEFAULT_CV_SEED};
use crate::types::{compute_displacements, GridSpec, LandmarkPair, LandmarkSet};
use crate::variogram::{VariogramEstimate, VariogramSettings};

pub const FORMAT_VERSION: u32 = 1;
pub const VOXEL_ORDER: &str = "x-fastest";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}, column {column}: {message}")]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { path: PathBuf, found: u64, supported: u32 },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{path}: payload is {actual} bytes, expected {expected}")]
    SizeMismatch { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: missing sidecar header {sidecar}")]
    MissingSidecar { path: PathBuf, sidecar: PathBuf },
}

impl IoError {
    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        IoError::Invalid { path: path.to_path_buf(), message: message.into() }
    }

    fn json(path: &Path, e: serde_json::Error) -> Self {
        IoError::Json { path: path.to_path_buf(), line: e.line(), column: e.column(), message: e.to_string() }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| IoError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// Parses `bytes` as a versioned JSON document of type `T`.
fn parse_versioned<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T, IoError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| IoError::json(path, e))?;
    match value.get("version") {
        Some(v) if v.as_u64() == Some(FORMAT_VERSION as u64) => {}
        Some(v) => {
            return Err(IoError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: v.as_u64().unwrap_or(0),
                supported: FORMAT_VERSION,
            })
        }
        None if value.is_object() => return Err(IoError::invalid(path, "missing field `version`")),
        None => return Err(IoError::invalid(path, "expected a JSON object")),
    }
    // Re-parse from the bytes so that diagnostics carry line and column.
    serde_json::from_slice(bytes).map_err(|e| IoError::json(path, e))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory JSON serialization");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_bytes(path, to_json_pretty(value).as_bytes())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkFile {
    version: u32,
    pairs: Vec<LandmarkPair>,
}

fn check_landmarks(path: &Path, set: &LandmarkSet) -> Result<(), IoError> {
    let report = set.validate();
    if let Some(v) = report.violations.first() {
        return Err(IoError::invalid(path, v.to_string()));
    }
    Ok(())
}

pub fn parse_landmarks(path: &Path, bytes: &[u8]) -> Result<LandmarkSet, IoError> {
    let file: LandmarkFile = parse_versioned(path, bytes)?;
    let set = LandmarkSet::new(file.pairs);
    check_landmarks(path, &set)?;
    Ok(set)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet, IoError> {
    parse_landmarks(path, &read_bytes(path)?)
}

pub fn landmarks_to_json(set: &LandmarkSet) -> String {
    to_json_pretty(&LandmarkFile { version: FORMAT_VERSION, pairs: set.pairs.clone() })
}

pub fn write_landmarks(path: &Path, set: &LandmarkSet) -> Result<(), IoError> {
    write_bytes(path, landmarks_to_json(set).as_bytes())
}

/// Sidecar header of a raw float32 payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    /// 1 = scalar volume, 3 = displacement field, 4 = variances x/y/z plus trace.
    pub components: usize,
    pub order: String,
}

impl RawHeader {
    pub fn for_grid(grid: &GridSpec, components: usize) -> Self {
        Self { dims: grid.dims, spacing_mm: grid.spacing, origin_mm: grid.origin.into(), components, order: VOXEL_ORDER.into() }
    }

    pub fn grid(&self) -> Result<GridSpec, String> {
        GridSpec::new(self.origin_mm.into(), self.spacing_mm, self.dims).map_err(|e| e.to_string())
    }

    /// Payload size in bytes, `None` on overflow.
    pub fn expected_bytes(&self) -> Option<u64> {
        self.dims
            .iter()
            .try_fold(self.components as u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4))
    }
}

/// `volume.raw` → `volume.raw.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_raw(payload: &Path, header: &RawHeader, data: &[f32]) -> Result<(), IoError> {
    let expected = header.expected_bytes().ok_or_else(|| IoError::invalid(payload, "dims overflow"))?;
    if data.len() as u64 * 4 != expected {
        return Err(IoError::SizeMismatch { path: payload.to_path_buf(), expected, actual: data.len() as u64 * 4 });
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(payload, &bytes)?;
    write_json(&sidecar_path(payload), header)
}

pub fn read_raw(payload: &Path) -> Result<(RawHeader, Vec<f32>), IoError> {
    let sidecar = sidecar_path(payload);
    if !sidecar.exists() {
        return Err(IoError::MissingSidecar { path: payload.to_path_buf(), sidecar });
    }
    let header: RawHeader = serde_json::from_slice(&read_bytes(&sidecar)?).map_err(|e| IoError::json(&sidecar, e))?;
    if header.order != VOXEL_ORDER {
        return Err(IoError::invalid(&sidecar, format!("unsupported voxel order `{}`, expected `{VOXEL_ORDER}`", header.order)));
    }
    if !matches!(header.components, 1 | 3 | 4) {
        return Err(IoError::invalid(&sidecar, format!("components must be 1, 3 or 4, got {}", header.components)));
    }
    header.grid().map_err(|e| IoError::invalid(&sidecar, e))?;
    let expected = header.expected_bytes().ok_or_else(|| IoError::invalid(&sidecar, "dims overflow"))?;
    let actual = fs::metadata(payload).map_err(|source| IoError::Io { path: payload.to_path_buf(), source })?.len();
    if actual != expected {
        return Err(IoError::SizeMismatch { path: payload.to_path_buf(), expected, actual });
    }
    let bytes = read_bytes(payload)?;
    if bytes.len() as u64 != expected {
        return Err(IoError::SizeMismatch { path: payload.to_path_buf(), expected, actual: bytes.len() as u64 });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header, data))
}

fn read_components(payload: &Path, components: usize) -> Result<(GridSpec, Vec<f32>), IoError> {
    let (header, data) = read_raw(payload)?;
    if header.components != components {
        return Err(IoError::invalid(
            &sidecar_path(payload),
            format!("expected {components} component(s), header has {}", header.components),
        ));
    }
    let grid = header.grid().map_err(|e| IoError::invalid(payload, e))?;
    Ok((grid, data))
}

pub fn write_volume(payload: &Path, vol: &Volume) -> Result<(), IoError> {
    write_raw(payload, &RawHeader::for_grid(&vol.grid, 1), &vol.data)
}

pub fn read_volume(payload: &Path) -> Result<Volume, IoError> {
    let (grid, data) = read_components(payload, 1)?;
    Ok(Volume { grid, data })
}

/// Displacements are stored as float32 (3 components per voxel).
pub fn write_field(payload: &Path, field: &DenseField) -> Result<(), IoError> {
    let data: Vec<f32> = field.vectors.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect();
    write_raw(payload, &RawHeader::for_grid(&field.grid, 3), &data)
}

pub fn read_field(payload: &Path) -> Result<DenseField, IoError> {
    let (grid, data) = read_components(payload, 3)?;
    let vectors = data.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
    Ok(DenseField { grid, vectors })
}

/// Variances x, y, z and the trace, float32, 4 components per voxel.
pub fn write_uncertainty(payload: &Path, map: &UncertaintyMap) -> Result<(), IoError> {
    let data: Vec<f32> = map
        .variance
        .iter()
        .zip(&map.trace)
        .flat_map(|(v, t)| [v[0] as f32, v[1] as f32, v[2] as f32, *t as f32])
        .collect();
    write_raw(payload, &RawHeader::for_grid(&map.grid, 4), &data)
}

pub fn read_uncertainty(payload: &Path) -> Result<UncertaintyMap, IoError> {
    let (grid, data) = read_components(payload, 4)?;
    let (variance, trace) = data
        .chunks_exact(4)
        .map(|c| ([c[0] as f64, c[1] as f64, c[2] as f64], c[3] as f64))
        .unzip();
    Ok(UncertaintyMap { grid, variance, trace })
}

/// Everything needed to rebuild a fitted registration, plus how its kernels were chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub version: u32,
    pub affine: AffineFit,
    pub kernels: AxisKernels,
    pub kernel_source: KernelSource,
    pub landmarks: Vec<LandmarkPair>,
    /// Absent when kernels did not come from variograms.
    #[serde(default)]
    pub variogram: Option<VariogramEstimate>,
    #[serde(default)]
    pub cv_result: Option<CvResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelBundle {
    pub fn from_registration(reg: &Registration, landmarks: &LandmarkSet) -> Self {
        Self {
            version: FORMAT_VERSION,
            affine: reg.affine.clone(),
            kernels: reg.kernel.kernels,
            kernel_source: reg.kernel.source,
            landmarks: landmarks.pairs.clone(),
            variogram: reg.kernel.variogram.clone(),
            cv_result: reg.kernel.cv.clone(),
            grid: None,
            seed: None,
        }
    }

    pub fn landmark_set(&self) -> LandmarkSet {
        LandmarkSet::new(self.landmarks.clone())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.kernels.validate().map_err(|e| format!("kernels: {e}"))?;
        let t = &self.affine.transform;
        if !t.to_row_major().iter().all(|v| v.is_finite()) || !t.is_invertible() {
            return Err("affine: transform must be finite and invertible".into());
        }
        let report = self.landmark_set().validate();
        if let Some(v) = report.violations.first() {
            return Err(format!("landmarks: {v}"));
        }
        if let Some(g) = &self.grid {
            g.validate().map_err(|e| format!("grid: {e}"))?;
        }
        if let Some(cv) = &self.cv_result {
            if cv.selected_index >= cv.candidates.len() || cv.candidates[cv.selected_index].kernels != cv.selected {
                return Err("cv_result: selected candidate is inconsistent".into());
            }
        }
        Ok(())
    }

    /// Refits the GPs from the stored landmarks, affine and kernels.
    pub fn to_registration(&self) -> Result<Registration, String> {
        let landmarks = self.landmark_set();
        let observations = compute_displacements(&landmarks, &self.affine.transform).map_err(|e| e.to_string())?;
        let model = DisplacementGp::fit(&self.kernels, &observations).map_err(|e| e.to_string())?;
        Ok(Registration {
            affine: self.affine.clone(),
            kernel: KernelChoice {
                kernels: self.kernels,
                source: self.kernel_source,
                variogram: self.variogram.clone(),
                cv: self.cv_result.clone(),
                note: None,
            },
            observations,
            model,
        })
    }
}

pub fn parse_model_bundle(path: &Path, bytes: &[u8]) -> Result<ModelBundle, IoError> {
    let bundle: ModelBundle = parse_versioned(path, bytes)?;
    bundle.validate().map_err(|m| IoError::invalid(path, m))?;
    Ok(bundle)
}

pub fn read_model_bundle(path: &Path) -> Result<ModelBundle, IoError> {
    parse_model_bundle(path, &read_bytes(path)?)
}

pub fn write_model_bundle(path: &Path, bundle: &ModelBundle) -> Result<(), IoError> {
    write_json(path, bundle)
}

/// Project-level settings shared by the CLI and the session service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// Output grid; when absent, a grid covering the landmarks is derived.
    pub grid: Option<GridSpec>,
    pub grid_spacing_mm: f64,
    pub grid_margin_mm: f64,
    pub kernel_mode: KernelMode,
    pub kernel_grid: GridConfig,
    pub variogram: VariogramSettings,
    pub cv_seed: u64,
    pub fallback_kernel: KernelSpec,
    pub methods: Vec<Method>,
    /// Keep the affine fixed during interactive landmark edits.
    pub freeze_affine: bool,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        let reg = RegistrationConfig::default();
        Self {
            grid: None,
            grid_spacing_mm: 1.0,
            grid_margin_mm: 5.0,
            kernel_mode: reg.kernel_mode,
            kernel_grid: reg.kernel_grid,
            variogram: reg.variogram,
            cv_seed: DEFAULT_CV_SEED,
            fallback_kernel: reg.fallback_kernel,
            methods: Method::ALL.to_vec(),
            freeze_affine: false,
        }
    }
}

impl ProjectConfig {
    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            kernel_mode: self.kernel_mode,
            variogram: self.variogram.clone(),
            kernel_grid: self.kernel_grid.clone(),
            cv_seed: self.cv_seed,
            fallback_kernel: self.fallback_kernel,
        }
    }

    /// The configured grid, or one covering `landmarks` at the configured spacing.
    pub fn output_grid(&self, landmarks: &LandmarkSet) -> Result<GridSpec, String> {
        match self.grid {
            Some(g) => Ok(g),
            None => GridSpec::covering(&landmarks.pre_points(), self.grid_spacing_mm, self.grid_margin_mm).map_err(|e| e.to_string()),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(g) = &self.grid {
            g.validate().map_err(|e| format!("grid: {e}"))?;
        }
        if !(self.grid_spacing_mm.is_finite() && self.grid_spacing_mm > 0.0) {
            return Err(format!("grid_spacing_mm must be > 0, got {}", self.grid_spacing_mm));
        }
        if !(self.grid_margin_mm.is_finite() && self.grid_margin_mm >= 0.0) {
            return Err(format!("grid_margin_mm must be >= 0, got {}", self.grid_margin_mm));
        }
        if let KernelMode::Manual { kernels } = &self.kernel_mode {
            kernels.validate().map_err(|e| format!("kernel_mode: {e}"))?;
        }
        validate_grid_config(&self.kernel_grid).map_err(|e| format!("kernel_grid: {e}"))?;
        if let Some(d) = self.variogram.delta_mm {
            if !(d.is_finite() && d > 0.0) {
                return Err(format!("variogram.delta_mm must be > 0, got {d}"));
            }
        }
        if self.variogram.families.is_empty() {
            return Err("variogram.families must not be empty".into());
        }
        self.fallback_kernel.validate().map_err(|e| format!("fallback_kernel: {e}"))?;
        Ok(())
    }
}

/// Checks a kernel grid without data: automatic sills are replaced by 1.
pub fn validate_grid_config(config: &GridConfig) -> Result<(), String> {
    let probe = match config {
        GridConfig::Product(p) if p.sills.is_none() => {
            let mut p = p.clone();
            p.sills = Some(vec![1.0]);
            GridConfig::Product(p)
        }
        other => other.clone(),
    };
    SearchGrid::resolve(&probe, &[]).map(|_| ()).map_err(|e| e.to_string())
}

pub fn parse_config(path: &Path, bytes: &[u8]) -> Result<ProjectConfig, IoError> {
    let config: ProjectConfig = serde_json::from_slice(bytes).map_err(|e| IoError::json(path, e))?;
    config.validate().map_err(|m| IoError::invalid(path, m))?;
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<ProjectConfig, IoError> {
    parse_config(path, &read_bytes(path)?)
}

pub fn read_grid_config(path: &Path) -> Result<GridConfig, IoError> {
    let config: GridConfig = serde_json::from_slice(&read_bytes(path)?).map_err(|e| IoError::json(path, e))?;
    validate_grid_config(&config).map_err(|m| IoError::invalid(path, m))?;
    Ok(config)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    version: u32,
    case: SyntheticCase,
}

/// An input to the evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub enum CaseInput {
    /// Training and held-out landmarks with known ground truth.
    Synthetic(SyntheticCase),
    /// A single landmark set, evaluated by cross-validation.
    Landmarks { name: String, landmarks: LandmarkSet },
}

pub fn write_case(path: &Path, case: &SyntheticCase) -> Result<(), IoError> {
    write_json(path, &CaseFile { version: FORMAT_VERSION, case: case.clone() })
}

/// Reads a case file or, failing that shape, a plain landmark file.
pub fn read_case(path: &Path) -> Result<CaseInput, IoError> {
    let bytes = read_bytes(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| IoError::json(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if value.get("case").is_some() {
        let file: CaseFile = parse_versioned(path, &bytes)?;
        check_landmarks(path, &file.case.training)?;
        check_landmarks(path, &file.case.evaluation)?;
        Ok(CaseInput::Synthetic(file.case))
    } else {
        Ok(CaseInput::Landmarks { name, landmarks: parse_landmarks(path, &bytes)? })
    }
}

/// Case and landmark files (`*.json`, excluding raw sidecars) in `dir`, sorted by name.
pub fn list_case_files(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::Io { path: dir.to_path_buf(), source })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|source| IoError::Io { path: dir.to_path_buf(), source })?.path();
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_file() && name.ends_with(".json") && !name.ends_with(".raw.json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point3;

    fn p(path: &str) -> PathBuf {
        PathBuf::from(path)
    }

    #[test]
    fn landmark_document_shape() {
        let set = LandmarkSet::new(vec![LandmarkPair::new(3, Point3::new(1.0, 2.0, 3.0), Point3::new(1.5, 2.0, 3.25))]);
        let json = landmarks_to_json(&set);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["pairs"][0]["id"], 3);
        assert_eq!(v["pairs"][0]["pre"], serde_json::json!([1.0, 2.0, 3.0]));
        assert_eq!(v["pairs"][0]["source"], "file");
        assert_eq!(parse_landmarks(&p("x.json"), json.as_bytes()).unwrap(), set);
    }

    #[test]
    fn unknown_fields_are_named() {
        let doc = r#"{"version":1,"pairs":[{"id":1,"pre":[0,0,0],"post":[0,0,0],"source":"file","weight":2}]}"#;
        let err = parse_landmarks(&p("l.json"), doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("weight"), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_named() {
        let doc = r#"{"version":1,"pairs":[
            {"id":7,"pre":[0,0,0],"post":[0,0,0],"source":"file"},
            {"id":7,"pre":[1,0,0],"post":[1,0,0],"source":"file"}]}"#;
        let err = parse_landmarks(&p("l.json"), doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains('7'), "{err}");
    }

    #[test]
    fn version_is_enforced() {
        let err = parse_landmarks(&p("l.json"), br#"{"version":2,"pairs":[]}"#).unwrap_err();
        assert!(matches!(err, IoError::UnsupportedVersion { found: 2, .. }));
        let err = parse_landmarks(&p("l.json"), br#"{"pairs":[]}"#).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn raw_header_sizes() {
        let g = GridSpec::new(Point3::ORIGIN, [1.0; 3], [2, 2, 2]).unwrap();
        assert_eq!(RawHeader::for_grid(&g, 1).expected_bytes(), Some(32));
        let huge = RawHeader { dims: [usize::MAX, 2, 2], ..RawHeader::for_grid(&g, 3) };
        assert_eq!(huge.expected_bytes(), None);
        assert_eq!(sidecar_path(Path::new("a/vol.raw")), PathBuf::from("a/vol.raw.json"));
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ProjectConfig::default();
        c.validate().unwrap();
        let back = parse_config(&p("c.json"), to_json_pretty(&c).as_bytes()).unwrap();
        assert_eq!(back, c);
        let partial = parse_config(&p("c.json"), br#"{"cv_seed": 7, "freeze_affine": true}"#).unwrap();
        assert_eq!(partial.cv_seed, 7);
        assert!(partial.freeze_affine);
        assert!(parse_config(&p("c.json"), br#"{"grid_spacing_mm": -1}"#).is_err());
        assert!(parse_config(&p("c.json"), br#"{"bogus": 1}"#).unwrap_err().to_string().contains("bogus"));
    }
}
