//! Discrete kernel search by cross-validation.
//!
//! Sets with fewer than 50 landmarks use leave-one-out; larger sets use
//! 5-fold CV with a seeded shuffle. The score of a candidate is the mean
//! Euclidean error between predicted and observed displacement vectors over
//! all held-out landmarks.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gp::{AxisKernels, DisplacementGp, GpError, KernelFamily, KernelSpec};
use crate::types::{Axis, DisplacementObservation};

/// Landmark count from which k-fold replaces leave-one-out.
pub const LOO_LIMIT: usize = 50;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_CV_SEED: u64 = 0x5EED_CAFE;
/// Floor for the automatic per-axis sill when the displacements have no spread.
const MIN_AUTO_SILL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError {
    #[error("cross-validation needs at least 2 landmarks, got {got}")]
    InsufficientData { got: usize },
    #[error("fold {fold} leaves {train} training landmarks")]
    EmptyTrainingFold { fold: usize, train: usize },
    #[error("kernel search grid is empty")]
    EmptyGrid,
    #[error("every grid candidate failed; first failure: {first}")]
    AllCandidatesFailed { first: String },
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CvProtocol {
    Loo,
    Kfold { k: usize, seed: u64 },
}

impl fmt::Display for CvProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CvProtocol::Loo => f.write_str("LOO"),
            CvProtocol::Kfold { k, .. } => write!(f, "{k}-fold"),
        }
    }
}

/// LOO below [`LOO_LIMIT`] landmarks, otherwise 5-fold seeded with `seed`.
pub fn choose_protocol(n_landmarks: usize, seed: u64) -> Result<CvProtocol, SearchError> {
    if n_landmarks < 2 {
        return Err(SearchError::InsufficientData { got: n_landmarks });
    }
    Ok(if n_landmarks < LOO_LIMIT { CvProtocol::Loo } else { CvProtocol::Kfold { k: DEFAULT_FOLDS, seed } })
}

/// Held-out index sets, one per fold. K-fold shuffles `0..n` with ChaCha8
/// seeded by the protocol seed and deals position `i` to fold `i mod k`.
pub fn folds(n: usize, protocol: CvProtocol) -> Vec<Vec<usize>> {
    match protocol {
        CvProtocol::Loo => (0..n).map(|i| vec![i]).collect(),
        CvProtocol::Kfold { k, seed } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut out = vec![Vec::new(); k.max(1)];
            for (pos, idx) in order.into_iter().enumerate() {
                out[pos % k.max(1)].push(idx);
            }
            for fold in &mut out {
                fold.sort_unstable();
            }
            out
        }
    }
}

/// CV score of one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    /// Mean held-out Euclidean error, mm.
    pub mean_error: f64,
    /// Mean error per fold, mm.
    pub fold_errors: Vec<f64>,
    /// Error per landmark in input order, mm.
    pub landmark_errors: Vec<f64>,
}

/// Cross-validated mean displacement error for one set of axis kernels.
pub fn cv_error(
    kernels: &AxisKernels,
    observations: &[DisplacementObservation],
    protocol: CvProtocol,
) -> Result<CvScore, SearchError> {
    let n = observations.len();
    if n < 2 {
        return Err(SearchError::InsufficientData { got: n });
    }
    let mut landmark_errors = vec![f64::NAN; n];
    let mut fold_errors = Vec::new();
    for (f, held) in folds(n, protocol).iter().enumerate() {
        if held.is_empty() {
            continue;
        }
        let train: Vec<DisplacementObservation> = (0..n)
            .filter(|i| held.binary_search(i).is_err())
            .map(|i| observations[i])
            .collect();
        if train.is_empty() {
            return Err(SearchError::EmptyTrainingFold { fold: f, train: 0 });
        }
        let model = DisplacementGp::fit(kernels, &train)?;
        let mut sum = 0.0;
        for &i in held {
            let o = &observations[i];
            let err = (model.predict_mean_at(&o.location) - o.d).norm();
            landmark_errors[i] = err;
            sum += err;
        }
        fold_errors.push(sum / held.len() as f64);
    }
    let mean_error = landmark_errors.iter().sum::<f64>() / n as f64;
    Ok(CvScore { mean_error, fold_errors, landmark_errors })
}

/// Grid as written in a config or grid file: either an explicit candidate
/// list or a cartesian product. With `sills` absent, each axis uses the
/// empirical variance of its displacement component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Explicit { candidates: Vec<KernelSpec> },
    PerAxis { axis_candidates: Vec<AxisKernels> },
    Product(ProductGrid),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductGrid {
    pub families: Vec<KernelFamily>,
    pub effective_ranges_mm: Vec<f64>,
    #[serde(default)]
    pub sills: Option<Vec<f64>>,
    pub nuggets: Vec<f64>,
}

impl Default for GridConfig {
    /// Gaussian and exponential families, effective ranges 5–80 mm, automatic
    /// sill, nuggets {0, 0.05, 0.25} mm².
    fn default() -> Self {
        GridConfig::Product(ProductGrid {
            families: KernelFamily::ALL.to_vec(),
            effective_ranges_mm: vec![5.0, 10.0, 20.0, 40.0, 80.0],
            sills: None,
            nuggets: vec![0.0, 0.05, 0.25],
        })
    }
}

/// Population variance of one displacement component, floored to stay a valid sill.
pub fn empirical_sill(observations: &[DisplacementObservation], axis: Axis) -> f64 {
    let n = observations.len();
    if n == 0 {
        return 1.0;
    }
    let mean = observations.iter().map(|o| o.component(axis)).sum::<f64>() / n as f64;
    let var = observations.iter().map(|o| (o.component(axis) - mean).powi(2)).sum::<f64>() / n as f64;
    var.max(MIN_AUTO_SILL)
}

/// Concrete candidates in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub candidates: Vec<AxisKernels>,
}

impl SearchGrid {
    pub fn new(candidates: Vec<AxisKernels>) -> Result<Self, SearchError> {
        if candidates.is_empty() {
            return Err(SearchError::EmptyGrid);
        }
        for c in &candidates {
            c.validate()?;
        }
        Ok(Self { candidates })
    }

    pub fn from_kernels(kernels: impl IntoIterator<Item = KernelSpec>) -> Result<Self, SearchError> {
        Self::new(kernels.into_iter().map(AxisKernels::uniform).collect())
    }

    /// Expands a grid config against the data (for automatic sills).
    pub fn resolve(config: &GridConfig, observations: &[DisplacementObservation]) -> Result<Self, SearchError> {
        match config {
            GridConfig::Explicit { candidates } => Self::from_kernels(candidates.iter().copied()),
            GridConfig::PerAxis { axis_candidates } => Self::new(axis_candidates.clone()),
            GridConfig::Product(p) => {
                let auto = Axis::ALL.map(|a| empirical_sill(observations, a));
                let sill_sets: Vec<[f64; 3]> = match &p.sills {
                    Some(s) => s.iter().map(|&v| [v; 3]).collect(),
                    None => vec![auto],
                };
                let mut out = Vec::new();
                for &family in &p.families {
                    for &range in &p.effective_ranges_mm {
                        for sills in &sill_sets {
                            for &nugget in &p.nuggets {
                                let k = |s: f64| KernelSpec::with_effective_range(family, s, range, nugget);
                                out.push(AxisKernels { x: k(sills[0]), y: k(sills[1]), z: k(sills[2]) });
                            }
                        }
                    }
                }
                Self::new(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub kernels: AxisKernels,
    /// `None` when the candidate failed.
    pub mean_error: Option<f64>,
    pub fold_errors: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub protocol: CvProtocol,
    pub n_landmarks: usize,
    pub candidates: Vec<CandidateResult>,
    pub selected_index: usize,
    pub selected: AxisKernels,
    /// Mean CV error of the selected candidate, mm.
    pub selected_error: f64,
}

/// Scores every candidate under the landmark-count protocol and returns the
/// argmin; ties go to the earliest candidate. Failed candidates are recorded
/// and skipped.
pub fn grid_search(grid: &SearchGrid, observations: &[DisplacementObservation], seed: u64) -> Result<CvResult, SearchError> {
    let protocol = choose_protocol(observations.len(), seed)?;
    grid_search_with(grid, observations, protocol)
}

pub fn grid_search_with(
    grid: &SearchGrid,
    observations: &[DisplacementObservation],
    protocol: CvProtocol,
) -> Result<CvResult, SearchError> {
    if grid.candidates.is_empty() {
        return Err(SearchError::EmptyGrid);
    }
    // Indexed collect keeps the reduction independent of completion order.
    let scored: Vec<CandidateResult> = grid
        .candidates
        .par_iter()
        .map(|kernels| match cv_error(kernels, observations, protocol) {
            Ok(score) => CandidateResult {
                kernels: *kernels,
                mean_error: Some(score.mean_error),
                fold_errors: score.fold_errors,
                failure: None,
            },
            Err(e) => CandidateResult { kernels: *kernels, mean_error: None, fold_errors: Vec::new(), failure: Some(e.to_string()) },
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, c) in scored.iter().enumerate() {
        if let Some(e) = c.mean_error.filter(|e| e.is_finite()) {
            if best.is_none_or(|(_, b)| e < b) {
                best = Some((i, e));
            }
        }
    }
    let Some((selected_index, selected_error)) = best else {
        let first = scored.iter().find_map(|c| c.failure.clone()).unwrap_or_else(|| "non-finite error".into());
        return Err(SearchError::AllCandidatesFailed { first });
    };
    Ok(CvResult {
        protocol,
        n_landmarks: observations.len(),
        selected: scored[selected_index].kernels,
        candidates: scored,
        selected_index,
        selected_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point3;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};

    fn smooth_obs(seed: u64, n: usize) -> Vec<DisplacementObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p = Point3::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                let d = Vector3::new(
                    3.0 * (p.x / 30.0).sin(),
                    2.0 * (p.y / 25.0).cos(),
                    1.5 * ((p.x + p.z) / 40.0).sin(),
                );
                DisplacementObservation::new(p, d)
            })
            .collect()
    }

    #[test]
    fn protocol_rule() {
        assert_eq!(choose_protocol(12, 1).unwrap(), CvProtocol::Loo);
        assert_eq!(choose_protocol(49, 1).unwrap(), CvProtocol::Loo);
        assert_eq!(choose_protocol(50, 1).unwrap(), CvProtocol::Kfold { k: 5, seed: 1 });
        assert_eq!(choose_protocol(123, 1).unwrap(), CvProtocol::Kfold { k: 5, seed: 1 });
        assert_eq!(choose_protocol(1, 1), Err(SearchError::InsufficientData { got: 1 }));
    }

    #[test]
    fn kfold_partitions_all_indices_deterministically() {
        let p = CvProtocol::Kfold { k: 5, seed: 42 };
        let f = folds(53, p);
        assert_eq!(f.len(), 5);
        let mut all: Vec<usize> = f.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
        assert!(f.iter().all(|fold| fold.len() == 10 || fold.len() == 11));
        assert_eq!(f, folds(53, p));
        assert_ne!(f, folds(53, CvProtocol::Kfold { k: 5, seed: 43 }));
    }

    #[test]
    fn zero_displacements_give_zero_error() {
        let obs: Vec<_> = smooth_obs(1, 10).into_iter().map(|o| DisplacementObservation { d: Vector3::zeros(), ..o }).collect();
        for k in [KernelSpec::gaussian(1.0, 100.0, 0.0), KernelSpec::exponential(2.0, 3.0, 0.1)] {
            let s = cv_error(&AxisKernels::uniform(k), &obs, CvProtocol::Loo).unwrap();
            assert_eq!(s.mean_error, 0.0);
        }
    }

    #[test]
    fn isolated_landmarks_revert_to_prior() {
        let obs = vec![
            DisplacementObservation::new(Point3::ORIGIN, Vector3::new(3.0, 4.0, 0.0)),
            DisplacementObservation::new(Point3::new(1000.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 2.0)),
        ];
        let s = cv_error(&AxisKernels::uniform(KernelSpec::gaussian(1.0, 10.0, 0.0)), &obs, CvProtocol::Loo).unwrap();
        assert!((s.landmark_errors[0] - 5.0).abs() < 1e-12);
        assert!((s.landmark_errors[1] - 2.0).abs() < 1e-12);
        assert!((s.mean_error - 3.5).abs() < 1e-12);
    }

    #[test]
    fn matched_kernel_beats_short_range_kernel() {
        let obs = smooth_obs(2, 20);
        let matched = KernelSpec::with_effective_range(KernelFamily::Gaussian, 4.0, 40.0, 0.0);
        let mismatched = KernelSpec::with_effective_range(KernelFamily::Gaussian, 4.0, 0.4, 0.0);
        let em = cv_error(&AxisKernels::uniform(matched), &obs, CvProtocol::Loo).unwrap().mean_error;
        let ew = cv_error(&AxisKernels::uniform(mismatched), &obs, CvProtocol::Loo).unwrap().mean_error;
        assert!(em < ew, "{em} vs {ew}");

        let grid = SearchGrid::from_kernels([mismatched, matched]).unwrap();
        let r = grid_search(&grid, &obs, 0).unwrap();
        assert_eq!(r.selected_index, 1);
        assert_eq!(r.protocol, CvProtocol::Loo);
    }

    #[test]
    fn single_candidate_and_duplicate_tie_break() {
        let obs = smooth_obs(3, 12);
        let k = KernelSpec::gaussian(1.0, 300.0, 0.05);
        let r = grid_search(&SearchGrid::from_kernels([k]).unwrap(), &obs, 0).unwrap();
        assert_eq!((r.selected_index, r.selected), (0, AxisKernels::uniform(k)));
        let other = KernelSpec::gaussian(1.0, 2.0, 0.0);
        let r = grid_search(&SearchGrid::from_kernels([other, k, k]).unwrap(), &obs, 0).unwrap();
        assert_eq!(r.selected_index, 1);
    }

    #[test]
    fn selected_is_argmin_and_superset_never_worse() {
        let obs = smooth_obs(4, 30);
        let small = SearchGrid::from_kernels([KernelSpec::gaussian(2.0, 50.0, 0.0), KernelSpec::exponential(2.0, 5.0, 0.0)]).unwrap();
        let big = SearchGrid::resolve(&GridConfig::default(), &obs).unwrap();
        let mut union = small.clone();
        union.candidates.extend(big.candidates);
        let rs = grid_search(&small, &obs, 0).unwrap();
        let ru = grid_search(&union, &obs, 0).unwrap();
        for r in [&rs, &ru] {
            let min = r.candidates.iter().filter_map(|c| c.mean_error).fold(f64::INFINITY, f64::min);
            assert_eq!(r.selected_error, min);
        }
        assert!(ru.selected_error <= rs.selected_error);
    }

    #[test]
    fn loo_is_permutation_invariant() {
        let obs = smooth_obs(5, 15);
        let mut rev = obs.clone();
        rev.reverse();
        let k = AxisKernels::uniform(KernelSpec::gaussian(3.0, 400.0, 0.01));
        let a = cv_error(&k, &obs, CvProtocol::Loo).unwrap().mean_error;
        let b = cv_error(&k, &rev, CvProtocol::Loo).unwrap().mean_error;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn default_grid_uses_per_axis_empirical_sill() {
        let obs = smooth_obs(6, 25);
        let g = SearchGrid::resolve(&GridConfig::default(), &obs).unwrap();
        assert_eq!(g.candidates.len(), 2 * 5 * 3);
        assert!((g.candidates[0].x.sill - empirical_sill(&obs, Axis::X)).abs() < 1e-15);
        assert!((g.candidates[0].y.sill - empirical_sill(&obs, Axis::Y)).abs() < 1e-15);
    }

    #[test]
    fn grid_config_json_forms() {
        let explicit: GridConfig =
            serde_json::from_str(r#"{"candidates":[{"family":"gaussian","sill":1.0,"param":100.0,"nugget":0.0}]}"#).unwrap();
        assert!(matches!(explicit, GridConfig::Explicit { .. }));
        let product: GridConfig =
            serde_json::from_str(r#"{"families":["exponential"],"effective_ranges_mm":[10.0],"nuggets":[0.0]}"#).unwrap();
        assert!(matches!(product, GridConfig::Product(_)));
        assert!(SearchGrid::new(vec![]).is_err());
    }
}
