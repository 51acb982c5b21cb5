//! Empirical variograms of the residual displacements and continuous model
//! fitting, yielding one kernel per axis.
//!
//! A cloud point carries `½ (d_a(x_i) − d_a(x_j))²` for the pair distance
//! `h = ‖x_i − x_j‖`, so the mean over a bin is already the semivariance
//! estimate `1/(2|N|) Σ (Δd)²`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gp::{AxisKernels, KernelFamily, KernelSpec};
use crate::optim::NelderMead;
use crate::types::{Axis, DisplacementObservation};

/// Fits need at least this many non-empty bins (three parameters + 1).
pub const MIN_FIT_BINS: usize = 4;
/// The automatic bin width is shrunk until at least this many bins are filled.
pub const TARGET_BINS: usize = 6;
/// Default landmark count below which the variogram route is not attempted.
pub const DEFAULT_MIN_LANDMARKS: usize = 50;
/// Number of deterministic optimizer starts per family.
const STARTS: usize = 5;
/// Partial sills below this fraction of the total sill count as "no spatial correlation".
const CORRELATION_FLOOR: f64 = 1e-3;
/// Partial sill assigned to an uncorrelated fit, relative to the total sill.
const PARTIAL_SILL_FLOOR: f64 = 1e-9;
const LOG_BOUNDS: (f64, f64) = (-40.0, 12.0);
/// Upper limits in scaled units: partial sill relative to the largest bin,
/// effective range relative to the largest lag. Without them a rising
/// variogram is fitted by a sill far beyond the data.
const MAX_SCALED_SILL: f64 = 10.0;
const MAX_SCALED_RANGE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VariogramError {
    #[error("variogram needs at least 2 observations, got {got}")]
    InsufficientObservations { got: usize },
    #[error("variogram fit needs at least {required} non-empty bins, got {got}")]
    InsufficientBins { got: usize, required: usize },
    #[error("bin half-width must be finite and > 0, got {0}")]
    InvalidDelta(f64),
    #[error("no candidate model families given")]
    NoFamilies,
    #[error("variogram optimizer did not converge; best so far {best}")]
    NotConverged { best: VariogramModel },
    #[error("{n} landmarks is below the variogram landmark threshold of {threshold}")]
    BelowThreshold { n: usize, threshold: usize },
}

/// Which displacement component a variogram describes; `pooled` merges all three clouds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramAxis {
    X,
    Y,
    Z,
    Pooled,
}

impl From<Axis> for VariogramAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::X => VariogramAxis::X,
            Axis::Y => VariogramAxis::Y,
            Axis::Z => VariogramAxis::Z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    /// Pair distance, mm.
    pub h: f64,
    /// Half squared component difference, mm².
    pub gamma: f64,
}

/// All `N(N−1)/2` pairs for one displacement component.
pub fn variogram_cloud(observations: &[DisplacementObservation], axis: Axis) -> Result<Vec<CloudPoint>, VariogramError> {
    let n = observations.len();
    if n < 2 {
        return Err(VariogramError::InsufficientObservations { got: n });
    }
    let mut cloud = Vec::with_capacity(n * (n - 1) / 2);
    for (i, a) in observations.iter().enumerate() {
        for b in &observations[i + 1..] {
            let diff = a.component(axis) - b.component(axis);
            cloud.push(CloudPoint { h: a.location.distance(&b.location), gamma: 0.5 * diff * diff });
        }
    }
    Ok(cloud)
}

/// Concatenation of the three per-axis clouds.
pub fn pooled_cloud(observations: &[DisplacementObservation]) -> Result<Vec<CloudPoint>, VariogramError> {
    let mut out = Vec::new();
    for axis in Axis::ALL {
        out.extend(variogram_cloud(observations, axis)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    #[serde(rename = "h")]
    pub h_mean: f64,
    #[serde(rename = "gamma")]
    pub gamma_hat: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub axis: VariogramAxis,
    /// Bin half-width δ, mm.
    pub delta: f64,
    pub bins: Vec<VariogramBin>,
}

impl EmpiricalVariogram {
    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Groups the cloud into bins `(b·2δ, (b+1)·2δ]`; each bin reports the mean
/// distance and mean semivariance of its members. Empty bins are dropped.
pub fn bin_variogram(cloud: &[CloudPoint], delta: f64, axis: VariogramAxis) -> Result<EmpiricalVariogram, VariogramError> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(VariogramError::InvalidDelta(delta));
    }
    let width = 2.0 * delta;
    let mut groups: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for p in cloud {
        let b = ((p.h / width).ceil() as usize).saturating_sub(1);
        let e = groups.entry(b).or_insert((0.0, 0.0, 0));
        e.0 += p.h;
        e.1 += p.gamma;
        e.2 += 1;
    }
    let bins = groups
        .into_values()
        .map(|(sh, sg, c)| VariogramBin { h_mean: sh / c as f64, gamma_hat: sg / c as f64, count: c })
        .collect();
    Ok(EmpiricalVariogram { axis, delta, bins })
}

/// Fitted variogram `γ(h) = c0 + c·(1 − ρ(h))` with `ρ` gaussian `exp(−h²/a)`
/// or exponential `exp(−h/a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariogramModel {
    pub family: KernelFamily,
    /// Nugget, mm².
    pub c0: f64,
    /// Partial sill (sill − nugget), mm².
    pub c: f64,
    /// Shape parameter: mm² for gaussian, mm for exponential.
    pub a: f64,
    /// Count-weighted squared error against the empirical bins.
    pub fit_error: f64,
}

impl fmt::Display for VariogramModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(c0={:.4}, c={:.4}, a={:.4}, err={:.3e})", self.family, self.c0, self.c, self.a, self.fit_error)
    }
}

impl VariogramModel {
    pub fn new(family: KernelFamily, c0: f64, c: f64, a: f64) -> Self {
        Self { family, c0, c, a, fit_error: 0.0 }
    }

    /// Semivariance at `h > 0`; `γ(0) = 0` by definition, the nugget being the
    /// limit from the right.
    pub fn evaluate(&self, h: f64) -> f64 {
        if h == 0.0 {
            return 0.0;
        }
        self.c0 + self.c * (1.0 - correlation(self.family, h, self.a))
    }

    pub fn sill(&self) -> f64 {
        self.c0 + self.c
    }

    pub fn effective_range(&self) -> f64 {
        effective_range(self)
    }

    pub fn weighted_error(&self, emp: &EmpiricalVariogram) -> f64 {
        emp.bins
            .iter()
            .map(|b| b.count as f64 * (self.evaluate(b.h_mean) - b.gamma_hat).powi(2))
            .sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.c0.is_finite() && self.c0 >= 0.0) {
            return Err(format!("nugget c0 must be >= 0, got {}", self.c0));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(format!("partial sill c must be > 0, got {}", self.c));
        }
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(format!("parameter a must be > 0, got {}", self.a));
        }
        Ok(())
    }
}

fn correlation(family: KernelFamily, h: f64, a: f64) -> f64 {
    match family {
        KernelFamily::Gaussian => (-(h * h) / a).exp(),
        KernelFamily::Exponential => (-h / a).exp(),
    }
}

/// Gaussian: `√(3a)`; exponential: `3a` (distance where 95% of the sill is reached).
pub fn effective_range(model: &VariogramModel) -> f64 {
    model.family.effective_range(model.a)
}

/// Kernel with `k(h) = c·ρ(h)`; the nugget becomes observation noise, so
/// `k(h) + γ(h) = c0 + c` for every `h > 0`.
pub fn model_to_kernel(model: &VariogramModel) -> KernelSpec {
    KernelSpec { family: model.family, sill: model.c, param: model.a, nugget: model.c0 }
}

/// Best model per family and the selected one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariogramFit {
    pub model: VariogramModel,
    pub candidates: Vec<VariogramModel>,
    /// The curve is flat: everything is nugget.
    pub no_spatial_correlation: bool,
}

/// Weighted least squares (`w_b = count_b`) over `(c0, c, a)` for each family,
/// searched in log space from deterministic starts; the family with the
/// smallest weighted error wins, ties going to the earlier family.
pub fn fit_variogram_model(emp: &EmpiricalVariogram, families: &[KernelFamily]) -> Result<VariogramFit, VariogramError> {
    if families.is_empty() {
        return Err(VariogramError::NoFamilies);
    }
    if emp.bins.len() < MIN_FIT_BINS {
        return Err(VariogramError::InsufficientBins { got: emp.bins.len(), required: MIN_FIT_BINS });
    }

    let mut candidates = Vec::with_capacity(families.len());
    let mut any_converged = false;
    for &family in families {
        let (model, converged) = fit_family(emp, family);
        any_converged |= converged;
        candidates.push(model);
    }
    let best = candidates
        .iter()
        .enumerate()
        .fold(0, |best, (i, m)| if m.fit_error < candidates[best].fit_error { i } else { best });
    let mut model = candidates[best];
    if !any_converged {
        return Err(VariogramError::NotConverged { best: model });
    }
    debug_assert!(candidates.iter().all(|c| model.fit_error <= c.fit_error));

    let total = model.c0 + model.c;
    let first_h = emp.bins[0].h_mean;
    let no_spatial_correlation =
        total <= 0.0 || model.c < CORRELATION_FLOOR * total || model.effective_range() < 0.5 * first_h;
    if no_spatial_correlation {
        let weight: f64 = emp.bins.iter().map(|b| b.count as f64).sum();
        let level = emp.bins.iter().map(|b| b.count as f64 * b.gamma_hat).sum::<f64>() / weight;
        model.c0 = level;
        model.c = (PARTIAL_SILL_FLOOR * level).max(f64::MIN_POSITIVE);
        model.fit_error = model.weighted_error(emp);
    }
    Ok(VariogramFit { model, candidates, no_spatial_correlation })
}

fn fit_family(emp: &EmpiricalVariogram, family: KernelFamily) -> (VariogramModel, bool) {
    // Work in units where the largest semivariance and distance are 1.
    let g_scale = emp.bins.iter().map(|b| b.gamma_hat).fold(0.0, f64::max);
    let h_scale = emp.bins.iter().map(|b| b.h_mean).fold(0.0, f64::max);
    if g_scale <= 0.0 {
        // Identically zero semivariance: any tiny-sill model is exact.
        let a = family.param_for_range(h_scale.max(1.0));
        let m = VariogramModel { family, c0: 0.0, c: f64::MIN_POSITIVE, a, fit_error: 0.0 };
        return (m, true);
    }
    let a_scale = match family {
        KernelFamily::Gaussian => h_scale * h_scale,
        KernelFamily::Exponential => h_scale,
    };
    let weight_total: f64 = emp.bins.iter().map(|b| b.count as f64).sum();
    let bins: Vec<(f64, f64, f64)> = emp
        .bins
        .iter()
        .map(|b| (b.h_mean / h_scale, b.gamma_hat / g_scale, b.count as f64 / weight_total))
        .collect();
    let max_a = family.param_for_range(MAX_SCALED_RANGE).ln();
    let unpack = |u: &[f64; 3]| {
        let clamp = |v: f64, hi: f64| v.clamp(LOG_BOUNDS.0, hi);
        (clamp(u[0], LOG_BOUNDS.1).exp(), clamp(u[1], MAX_SCALED_SILL.ln()).exp(), clamp(u[2], max_a).exp())
    };
    let objective = |u: &[f64; 3]| {
        let (c0, c, a) = unpack(u);
        bins.iter()
            .map(|&(h, g, w)| {
                let model = c0 + c * (1.0 - correlation(family, h, a));
                w * (model - g).powi(2)
            })
            .sum::<f64>()
    };

    let first = emp.bins[0].gamma_hat / g_scale;
    let nugget_start = (0.5 * first).max(1e-3);
    let partial_start = (1.0 - nugget_start).max(0.05);
    let optimizer = NelderMead { ftol: 1e-13, fabs: 1e-32, xtol: 1e-13, max_iter: 20_000 };

    let mut best: Option<(f64, [f64; 3], bool)> = None;
    for s in 0..STARTS {
        // Effective ranges spread from 10% to 100% of the largest lag.
        let range = 0.1 + 0.9 * s as f64 / (STARTS - 1) as f64;
        let start = [nugget_start.ln(), partial_start.ln(), family.param_for_range(range).ln()];
        let m = optimizer.minimize_with_restarts(&objective, start, 0.7, 8);
        let better = best.as_ref().is_none_or(|(v, _, _)| m.value < *v);
        if better {
            best = Some((m.value, m.x, m.converged));
        }
    }
    let (_, u, converged) = best.expect("at least one start");
    let (c0, c, a) = unpack(&u);
    let mut model = VariogramModel { family, c0: c0 * g_scale, c: c * g_scale, a: a * a_scale, fit_error: 0.0 };
    if c0 <= LOG_BOUNDS.0.exp() * 1.0001 {
        model.c0 = 0.0;
    }
    model.fit_error = model.weighted_error(emp);
    (model, converged)
}

/// How the automatic variogram route is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariogramSettings {
    /// Bin half-width δ (mm); chosen automatically when absent.
    pub delta_mm: Option<f64>,
    /// Largest pair distance considered (mm); half the largest pair distance when absent.
    pub max_lag_mm: Option<f64>,
    /// The variogram route is refused below this many landmarks.
    pub min_landmarks: usize,
    /// Fit one model to the merged x/y/z clouds instead of one per axis.
    pub pool_axes: bool,
    pub families: Vec<KernelFamily>,
}

impl Default for VariogramSettings {
    fn default() -> Self {
        Self {
            delta_mm: None,
            max_lag_mm: None,
            min_landmarks: DEFAULT_MIN_LANDMARKS,
            pool_axes: false,
            families: KernelFamily::ALL.to_vec(),
        }
    }
}

/// Half the mean nearest-neighbour spacing of the landmark locations.
pub fn default_delta(observations: &[DisplacementObservation]) -> f64 {
    let n = observations.len();
    if n < 2 {
        return 1.0;
    }
    let total: f64 = observations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            observations
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| a.location.distance(&b.location))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    0.5 * total / n as f64
}

fn max_pair_distance(observations: &[DisplacementObservation]) -> f64 {
    let mut max: f64 = 0.0;
    for (i, a) in observations.iter().enumerate() {
        for b in &observations[i + 1..] {
            max = max.max(a.location.distance(&b.location));
        }
    }
    max
}

/// Cloud → lag cut → bins, with δ shrunk as needed to fill at least
/// [`TARGET_BINS`] bins when it was not set explicitly.
pub fn empirical_variogram_from_cloud(
    cloud: &[CloudPoint],
    axis: VariogramAxis,
    delta: Option<f64>,
    auto_delta: f64,
    max_lag: f64,
) -> Result<EmpiricalVariogram, VariogramError> {
    let kept: Vec<CloudPoint> = cloud.iter().copied().filter(|p| p.h <= max_lag).collect();
    if let Some(d) = delta {
        return bin_variogram(&kept, d, axis);
    }
    let mut d = auto_delta;
    let mut emp = bin_variogram(&kept, d, axis)?;
    for _ in 0..40 {
        if emp.bins.len() >= TARGET_BINS {
            break;
        }
        d *= 0.75;
        let next = bin_variogram(&kept, d, axis)?;
        if next.bins.len() == kept.len() {
            emp = next;
            break;
        }
        emp = next;
    }
    Ok(emp)
}

/// Empirical variogram, fitted model, and the data needed to plot both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramExport {
    pub axis: VariogramAxis,
    pub delta: f64,
    pub cloud_points: usize,
    pub bins: Vec<VariogramBin>,
    pub model: Option<VariogramModel>,
    #[serde(default)]
    pub no_spatial_correlation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_error: Option<String>,
}

/// Variogram analysis of one axis (or the pooled clouds). Model-fit failures
/// are reported inside the export rather than as an error.
pub fn analyze(
    observations: &[DisplacementObservation],
    axis: VariogramAxis,
    settings: &VariogramSettings,
) -> Result<(VariogramExport, Result<VariogramFit, VariogramError>), VariogramError> {
    let cloud = match axis {
        VariogramAxis::X => variogram_cloud(observations, Axis::X)?,
        VariogramAxis::Y => variogram_cloud(observations, Axis::Y)?,
        VariogramAxis::Z => variogram_cloud(observations, Axis::Z)?,
        VariogramAxis::Pooled => pooled_cloud(observations)?,
    };
    let max_lag = settings.max_lag_mm.unwrap_or_else(|| 0.5 * max_pair_distance(observations));
    let emp = empirical_variogram_from_cloud(&cloud, axis, settings.delta_mm, default_delta(observations), max_lag)?;
    let fit = fit_variogram_model(&emp, &settings.families);
    let export = VariogramExport {
        axis,
        delta: emp.delta,
        cloud_points: cloud.len(),
        bins: emp.bins.clone(),
        model: fit.as_ref().ok().map(|f| f.model),
        no_spatial_correlation: fit.as_ref().is_ok_and(|f| f.no_spatial_correlation),
        model_error: fit.as_ref().err().map(|e| e.to_string()),
    };
    Ok((export, fit))
}

/// Kernels estimated from variograms, plus the exports behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramEstimate {
    pub kernels: AxisKernels,
    pub exports: Vec<VariogramExport>,
}

/// Per-axis (or pooled) kernels via variogram fitting. Refuses sets smaller
/// than `settings.min_landmarks`.
pub fn estimate_kernels(
    observations: &[DisplacementObservation],
    settings: &VariogramSettings,
) -> Result<VariogramEstimate, VariogramError> {
    let n = observations.len();
    if n < settings.min_landmarks {
        return Err(VariogramError::BelowThreshold { n, threshold: settings.min_landmarks });
    }
    let fit_one = |axis: VariogramAxis| -> Result<(VariogramExport, KernelSpec), VariogramError> {
        let (export, fit) = analyze(observations, axis, settings)?;
        Ok((export, model_to_kernel(&fit?.model)))
    };
    if settings.pool_axes {
        let (export, kernel) = fit_one(VariogramAxis::Pooled)?;
        return Ok(VariogramEstimate { kernels: AxisKernels::uniform(kernel), exports: vec![export] });
    }
    let (ex, kx) = fit_one(VariogramAxis::X)?;
    let (ey, ky) = fit_one(VariogramAxis::Y)?;
    let (ez, kz) = fit_one(VariogramAxis::Z)?;
    Ok(VariogramEstimate { kernels: AxisKernels { x: kx, y: ky, z: kz }, exports: vec![ex, ey, ez] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(p: [f64; 3], d: [f64; 3]) -> DisplacementObservation {
        DisplacementObservation::new(p.into(), Vector3::from(d))
    }

    fn random_obs(seed: u64, n: usize) -> Vec<DisplacementObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                obs(
                    [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)],
                    [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                )
            })
            .collect()
    }

    fn bins_from(model: &VariogramModel, hs: impl Iterator<Item = f64>) -> EmpiricalVariogram {
        EmpiricalVariogram {
            axis: VariogramAxis::X,
            delta: 1.0,
            bins: hs.map(|h| VariogramBin { h_mean: h, gamma_hat: model.evaluate(h), count: 10 }).collect(),
        }
    }

    #[test]
    fn constant_field_gives_zero_cloud() {
        let o: Vec<_> = random_obs(1, 10).into_iter().map(|o| DisplacementObservation { d: Vector3::new(1.0, 2.0, 3.0), ..o }).collect();
        let cloud = variogram_cloud(&o, Axis::Y).unwrap();
        assert_eq!(cloud.len(), 45);
        assert!(cloud.iter().all(|c| c.gamma == 0.0));
        let emp = bin_variogram(&cloud, 5.0, VariogramAxis::Y).unwrap();
        assert!(emp.bins.iter().all(|b| b.gamma_hat == 0.0));
    }

    #[test]
    fn two_landmark_cloud_point() {
        let o = [obs([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]), obs([3.0, 4.0, 0.0], [3.0, 0.0, 0.0])];
        let cloud = variogram_cloud(&o, Axis::X).unwrap();
        assert_eq!(cloud, vec![CloudPoint { h: 5.0, gamma: 2.0 }]);
    }

    #[test]
    fn cloud_size_for_71_landmarks() {
        assert_eq!(variogram_cloud(&random_obs(2, 71), Axis::X).unwrap().len(), 2485);
    }

    #[test]
    fn cloud_needs_two_observations() {
        assert_eq!(
            variogram_cloud(&random_obs(3, 1), Axis::X),
            Err(VariogramError::InsufficientObservations { got: 1 })
        );
    }

    #[test]
    fn identical_cloud_points_share_a_bin() {
        let cloud = vec![CloudPoint { h: 3.0, gamma: 1.0 }; 7];
        let emp = bin_variogram(&cloud, 2.0, VariogramAxis::Z).unwrap();
        assert_eq!(emp.bins, vec![VariogramBin { h_mean: 3.0, gamma_hat: 1.0, count: 7 }]);
    }

    #[test]
    fn bin_boundaries_are_right_closed() {
        let cloud = [CloudPoint { h: 2.0, gamma: 1.0 }, CloudPoint { h: 2.0 + 1e-9, gamma: 3.0 }];
        let emp = bin_variogram(&cloud, 1.0, VariogramAxis::X).unwrap();
        assert_eq!(emp.bins.len(), 2);
        assert_eq!(emp.bins[0].gamma_hat, 1.0);
    }

    #[test]
    fn binning_matches_grouping_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud: Vec<CloudPoint> =
            (0..100).map(|_| CloudPoint { h: rng.random_range(0.01..15.0), gamma: rng.random_range(0.0..4.0) }).collect();
        let emp = bin_variogram(&cloud, 1.0, VariogramAxis::X).unwrap();
        // Oracle: scan each candidate interval and average its members.
        let mut expected = Vec::new();
        for b in 0..10 {
            let (lo, hi) = (b as f64 * 2.0, (b + 1) as f64 * 2.0);
            let members: Vec<_> = cloud.iter().filter(|c| c.h > lo && c.h <= hi).collect();
            if !members.is_empty() {
                let k = members.len() as f64;
                expected.push((members.iter().map(|c| c.h).sum::<f64>() / k, members.iter().map(|c| c.gamma).sum::<f64>() / k, members.len()));
            }
        }
        assert_eq!(emp.bins.len(), expected.len());
        for (b, e) in emp.bins.iter().zip(expected) {
            assert!((b.h_mean - e.0).abs() < 1e-12 && (b.gamma_hat - e.1).abs() < 1e-12);
            assert_eq!(b.count, e.2);
        }
        assert_eq!(emp.total_count(), 100);
    }

    #[test]
    fn invalid_delta_rejected() {
        assert!(bin_variogram(&[], 0.0, VariogramAxis::X).is_err());
        assert!(bin_variogram(&[], f64::NAN, VariogramAxis::X).is_err());
    }

    #[test]
    fn recovers_gaussian_parameters_noise_free() {
        let truth = VariogramModel::new(KernelFamily::Gaussian, 0.1, 1.0, 100.0);
        let emp = bins_from(&truth, (1..=20).map(|i| i as f64 * 2.0));
        let fit = fit_variogram_model(&emp, &KernelFamily::ALL).unwrap();
        let m = fit.model;
        assert_eq!(m.family, KernelFamily::Gaussian);
        assert!(((m.c0 - 0.1) / 0.1).abs() < 1e-4, "{m}");
        assert!(((m.c - 1.0) / 1.0).abs() < 1e-4, "{m}");
        assert!(((m.a - 100.0) / 100.0).abs() < 1e-4, "{m}");
        assert!(!fit.no_spatial_correlation);
    }

    #[test]
    fn exponential_generated_bins_select_exponential() {
        let truth = VariogramModel::new(KernelFamily::Exponential, 0.2, 2.0, 6.0);
        let emp = bins_from(&truth, (1..=15).map(|i| i as f64 * 2.5));
        let fit = fit_variogram_model(&emp, &KernelFamily::ALL).unwrap();
        assert_eq!(fit.model.family, KernelFamily::Exponential);
        let gauss = fit.candidates.iter().find(|c| c.family == KernelFamily::Gaussian).unwrap();
        assert!(fit.model.fit_error < gauss.fit_error);
    }

    #[test]
    fn flat_bins_are_pure_nugget() {
        let emp = EmpiricalVariogram {
            axis: VariogramAxis::X,
            delta: 1.0,
            bins: (1..=8).map(|i| VariogramBin { h_mean: i as f64 * 2.0, gamma_hat: 0.5, count: 5 }).collect(),
        };
        let fit = fit_variogram_model(&emp, &KernelFamily::ALL).unwrap();
        assert!(fit.no_spatial_correlation);
        assert!((fit.model.c0 - 0.5).abs() < 1e-9);
        assert!(fit.model.c > 0.0 && fit.model.c < 1e-6);
    }

    #[test]
    fn linear_bins_keep_range_within_lag_bound() {
        let emp = EmpiricalVariogram {
            axis: VariogramAxis::X,
            delta: 2.5,
            bins: (1..=12).map(|i| VariogramBin { h_mean: 5.0 * i as f64, gamma_hat: 0.1 * i as f64, count: 10 }).collect(),
        };
        let fit = fit_variogram_model(&emp, &[KernelFamily::Gaussian]).unwrap();
        assert!(fit.model.effective_range() <= 2.0 * 60.0 * (1.0 + 1e-9), "{}", fit.model);
        assert!(fit.model.c <= 10.0 * 1.2 * (1.0 + 1e-9), "{}", fit.model);
    }

    #[test]
    fn too_few_bins() {
        let emp = EmpiricalVariogram { axis: VariogramAxis::X, delta: 1.0, bins: vec![VariogramBin { h_mean: 1.0, gamma_hat: 1.0, count: 1 }; 3] };
        assert_eq!(fit_variogram_model(&emp, &KernelFamily::ALL), Err(VariogramError::InsufficientBins { got: 3, required: 4 }));
    }

    #[test]
    fn effective_range_examples() {
        assert!((VariogramModel::new(KernelFamily::Gaussian, 0.0, 1.0, 3.0).effective_range() - 3.0).abs() < 1e-12);
        assert!((VariogramModel::new(KernelFamily::Gaussian, 0.0, 1.0, 100.0).effective_range() - 17.320508075688775).abs() < 1e-12);
        assert!((VariogramModel::new(KernelFamily::Exponential, 0.0, 1.0, 5.0).effective_range() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_identity_with_variogram() {
        for model in [
            VariogramModel::new(KernelFamily::Gaussian, 0.0, 1.0, 100.0),
            VariogramModel::new(KernelFamily::Gaussian, 0.25, 4.0, 30.0),
            VariogramModel::new(KernelFamily::Exponential, 0.1, 2.0, 7.0),
        ] {
            let k = model_to_kernel(&model);
            assert_eq!((k.sill, k.param, k.nugget), (model.c, model.a, model.c0));
            for h in [1e-9, 0.5, 3.0, 20.0, 1e3] {
                assert!((k.covariance(h) + model.evaluate(h) - (model.c0 + model.c)).abs() < 1e-12);
            }
            assert!(k.covariance(1e6) < 1e-12);
            // The jump at 0⁺ is exactly the kernel-side noise variance.
            assert!((model.evaluate(1e-12) - model.evaluate(0.0) - k.nugget).abs() < 1e-12);
        }
        assert_eq!(model_to_kernel(&VariogramModel::new(KernelFamily::Gaussian, 0.0, 1.0, 100.0)).covariance(0.0), 1.0);
    }

    #[test]
    fn threshold_enforced() {
        let err = estimate_kernels(&random_obs(5, 8), &VariogramSettings::default()).unwrap_err();
        assert_eq!(err, VariogramError::BelowThreshold { n: 8, threshold: 50 });
    }

    #[test]
    fn automatic_delta_fills_target_bins() {
        let o = random_obs(6, 60);
        let (export, _) = analyze(&o, VariogramAxis::X, &VariogramSettings::default()).unwrap();
        assert!(export.bins.len() >= TARGET_BINS);
        assert_eq!(export.cloud_points, 60 * 59 / 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn cloud_and_bins_are_shift_and_permutation_invariant(seed in 0u64..100_000, n in 2usize..40, shift in prop::array::uniform3(-10.0f64..10.0)) {
                let o = random_obs(seed, n);
                let shifted: Vec<_> = o.iter().map(|x| DisplacementObservation { d: x.d + Vector3::from(shift), ..*x }).collect();
                let mut reversed = o.clone();
                reversed.reverse();
                for axis in Axis::ALL {
                    let base = bin_variogram(&variogram_cloud(&o, axis).unwrap(), 4.0, axis.into()).unwrap();
                    let s = bin_variogram(&variogram_cloud(&shifted, axis).unwrap(), 4.0, axis.into()).unwrap();
                    let r = bin_variogram(&variogram_cloud(&reversed, axis).unwrap(), 4.0, axis.into()).unwrap();
                    prop_assert_eq!(base.total_count(), n * (n - 1) / 2);
                    prop_assert_eq!(base.bins.len(), s.bins.len());
                    for ((a, b), c) in base.bins.iter().zip(&s.bins).zip(&r.bins) {
                        prop_assert!((a.gamma_hat - b.gamma_hat).abs() < 1e-12 * (1.0 + a.gamma_hat));
                        prop_assert!((a.gamma_hat - c.gamma_hat).abs() < 1e-12 * (1.0 + a.gamma_hat));
                        prop_assert_eq!(a.count, c.count);
                    }
                }
            }
        }
    }

    #[test]
    fn pooled_cloud_is_three_times_larger() {
        let o = random_obs(7, 12);
        assert_eq!(pooled_cloud(&o).unwrap().len(), 3 * 66);
    }
}
