//! Scalar Gaussian-process regression for one displacement component, the
//! three-axis wrapper used for displacement fields, and the thin-plate spline
//! baseline interpolant.
//!
//! Each axis is an independent zero-mean (or constant-mean) GP sharing the
//! landmark locations. The nugget is routed into observation noise: it is added
//! to the diagonal of the training Gram matrix only, never to `k(x, x*)` or to
//! the prior variance at a query point.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix4x3, Vector3};
use serde::{Deserialize, Serialize};

use crate::types::{Axis, DisplacementObservation, Point3};

/// First jitter tried, relative to the sill.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried, relative to the sill.
pub const JITTER_MAX: f64 = 1e-4;
/// Largest query set for which the full posterior covariance is materialized.
pub const MAX_COVARIANCE_POINTS: usize = 4096;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GpError {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("observation {index} is not finite")]
    NonFinite { index: usize },
    #[error("Gram matrix could not be factorized even with jitter {jitter:e} (relative {relative:e} of sill)")]
    IllConditioned { jitter: f64, relative: f64 },
    #[error("{requested} query points exceed the full-covariance limit of {limit}; use predict_variance")]
    TooManyQueryPoints { requested: usize, limit: usize },
    #[error("thin-plate spline needs at least 4 centers, got {got}")]
    TpsInsufficientData { got: usize },
    #[error("thin-plate spline centers are degenerate (polynomial rank {rank} < 4)")]
    TpsRankDeficient { rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `k(h) = sill · exp(−h² / a)`, parameter `a` in mm².
    Gaussian,
    /// `k(h) = sill · exp(−h / ℓ)`, parameter `ℓ` in mm.
    Exponential,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 2] = [KernelFamily::Gaussian, KernelFamily::Exponential];

    /// Distance at which the correlation has dropped to about 5%.
    pub fn effective_range(self, param: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (3.0 * param).sqrt(),
            KernelFamily::Exponential => 3.0 * param,
        }
    }

    /// Inverse of [`KernelFamily::effective_range`].
    pub fn param_for_range(self, range: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => range * range / 3.0,
            KernelFamily::Exponential => range / 3.0,
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelFamily::Gaussian => f.write_str("gaussian"),
            KernelFamily::Exponential => f.write_str("exponential"),
        }
    }
}

/// Stationary isotropic covariance plus nugget (observation noise), all in mm².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sill: f64,
    pub param: f64,
    #[serde(default)]
    pub nugget: f64,
}

impl KernelSpec {
    pub fn gaussian(sill: f64, a: f64, nugget: f64) -> Self {
        Self { family: KernelFamily::Gaussian, sill, param: a, nugget }
    }

    pub fn exponential(sill: f64, length: f64, nugget: f64) -> Self {
        Self { family: KernelFamily::Exponential, sill, param: length, nugget }
    }

    pub fn with_effective_range(family: KernelFamily, sill: f64, range: f64, nugget: f64) -> Self {
        Self { family, sill, param: family.param_for_range(range), nugget }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.sill.is_finite() && self.sill > 0.0) {
            return Err(GpError::InvalidKernel(format!("sill must be > 0, got {}", self.sill)));
        }
        if !(self.param.is_finite() && self.param > 0.0) {
            return Err(GpError::InvalidKernel(format!("param must be > 0, got {}", self.param)));
        }
        if !(self.nugget.is_finite() && self.nugget >= 0.0) {
            return Err(GpError::InvalidKernel(format!("nugget must be >= 0, got {}", self.nugget)));
        }
        Ok(())
    }

    /// Covariance at separation `h`, excluding the nugget.
    #[inline]
    pub fn covariance(&self, h: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => self.sill * (-(h * h) / self.param).exp(),
            KernelFamily::Exponential => self.sill * (-h / self.param).exp(),
        }
    }

    #[inline]
    fn covariance_sq(&self, h2: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => self.sill * (-h2 / self.param).exp(),
            KernelFamily::Exponential => self.sill * (-h2.sqrt() / self.param).exp(),
        }
    }

    pub fn effective_range(&self) -> f64 {
        self.family.effective_range(self.param)
    }

    /// Same kernel with the sill multiplied by `s` (nugget unchanged).
    pub fn scaled(&self, s: f64) -> Self {
        Self { sill: self.sill * s, ..*self }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(sill={:.4} mm², param={:.4}, nugget={:.4} mm², range={:.2} mm)",
            self.family,
            self.sill,
            self.param,
            self.nugget,
            self.effective_range()
        )
    }
}

/// One kernel per displacement axis. Serialized as `{x, y, z}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisKernels {
    pub x: KernelSpec,
    pub y: KernelSpec,
    pub z: KernelSpec,
}

impl AxisKernels {
    pub fn uniform(k: KernelSpec) -> Self {
        Self { x: k, y: k, z: k }
    }

    pub fn from_array(a: [KernelSpec; 3]) -> Self {
        Self { x: a[0], y: a[1], z: a[2] }
    }

    pub fn get(&self, axis: Axis) -> &KernelSpec {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
            Axis::Z => &self.z,
        }
    }

    pub fn as_array(&self) -> [KernelSpec; 3] {
        [self.x, self.y, self.z]
    }

    pub fn validate(&self) -> Result<(), GpError> {
        self.as_array().iter().try_for_each(KernelSpec::validate)
    }
}

/// Posterior mean (mm) and marginal variance (mm²) at one query point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GpPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// `K_ij = k(‖x_i − x_j‖)`, without nugget.
pub fn build_gram(kernel: &KernelSpec, points: &[Point3]) -> DMatrix<f64> {
    let n = points.len();
    let mut gram = DMatrix::zeros(n, n);
    for j in 0..n {
        gram[(j, j)] = kernel.sill;
        for i in j + 1..n {
            let v = kernel.covariance_sq(points[i].distance_squared(&points[j]));
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}

/// A fitted scalar GP for one displacement axis.
#[derive(Clone, Debug)]
pub struct GpAxisModel {
    kernel: KernelSpec,
    locations: Vec<Point3>,
    values: Vec<f64>,
    mean_const: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    /// Row-major packed lower factor; row `i` holds `i + 1` entries.
    packed_lower: Vec<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpAxisModel {
    /// Fits with zero prior mean.
    pub fn fit(kernel: KernelSpec, observations: &[(Point3, f64)]) -> Result<Self, GpError> {
        Self::fit_with_mean(kernel, observations, 0.0)
    }

    /// Factorizes `K + (nugget + jitter)·I` and solves for the weights, escalating
    /// the jitter by ×10 from `1e-10·sill` up to `1e-4·sill` if needed.
    pub fn fit_with_mean(
        kernel: KernelSpec,
        observations: &[(Point3, f64)],
        mean_const: f64,
    ) -> Result<Self, GpError> {
        kernel.validate()?;
        if !mean_const.is_finite() {
            return Err(GpError::InvalidKernel("mean must be finite".into()));
        }
        if let Some(index) = observations.iter().position(|(p, v)| !(p.is_finite() && v.is_finite())) {
            return Err(GpError::NonFinite { index });
        }
        let locations: Vec<Point3> = observations.iter().map(|(p, _)| *p).collect();
        let values: Vec<f64> = observations.iter().map(|(_, v)| *v).collect();
        let n = locations.len();

        if n == 0 {
            return Ok(Self {
                kernel,
                locations,
                values,
                mean_const,
                chol: None,
                packed_lower: Vec::new(),
                alpha: DVector::zeros(0),
                jitter: 0.0,
            });
        }

        let gram = build_gram(&kernel, &locations);
        let mut relative = JITTER_START;
        let chol = loop {
            let jitter = relative * kernel.sill;
            let mut reg = gram.clone();
            for i in 0..n {
                reg[(i, i)] += kernel.nugget + jitter;
            }
            if let Some(c) = Cholesky::new(reg) {
                break c;
            }
            if relative >= JITTER_MAX {
                return Err(GpError::IllConditioned { jitter, relative });
            }
            relative = (relative * 10.0).min(JITTER_MAX);
        };
        let jitter = relative * kernel.sill;

        let centered = DVector::from_iterator(n, values.iter().map(|v| v - mean_const));
        let alpha = chol.solve(&centered);

        let l = chol.l_dirty();
        let mut packed_lower = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                packed_lower.push(l[(i, j)]);
            }
        }

        Ok(Self { kernel, locations, values, mean_const, chol: Some(chol), packed_lower, alpha, jitter })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn locations(&self) -> &[Point3] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean_const(&self) -> f64 {
        self.mean_const
    }

    /// Jitter (mm²) added on top of the nugget in the final factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Lower Cholesky factor of the regularized Gram matrix (`None` with no data).
    pub fn cholesky_factor(&self) -> Option<DMatrix<f64>> {
        self.chol.as_ref().map(|c| c.l())
    }

    /// `K + (nugget + jitter)·I`.
    pub fn regularized_gram(&self) -> DMatrix<f64> {
        let mut g = build_gram(&self.kernel, &self.locations);
        for i in 0..self.len() {
            g[(i, i)] += self.kernel.nugget + self.jitter;
        }
        g
    }

    fn fill_cross_covariance(&self, p: &Point3, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.locations.iter().map(|x| self.kernel.covariance_sq(x.distance_squared(p))));
    }

    fn mean_from(&self, kstar: &[f64]) -> f64 {
        self.mean_const + kstar.iter().zip(self.alpha.iter()).map(|(k, a)| k * a).sum::<f64>()
    }

    /// `k(0) − ‖L⁻¹ k*‖²`; overwrites `kstar` with `L⁻¹ k*`.
    fn variance_from(&self, kstar: &mut [f64]) -> f64 {
        let n = kstar.len();
        let mut sum = 0.0;
        let mut row = 0;
        for i in 0..n {
            let lrow = &self.packed_lower[row..row + i + 1];
            let mut s = kstar[i];
            for (l, v) in lrow[..i].iter().zip(&kstar[..i]) {
                s -= l * v;
            }
            let v = s / lrow[i];
            kstar[i] = v;
            sum += v * v;
            row += i + 1;
        }
        // Rounding can push an exactly-conditioned variance a hair below zero.
        (self.kernel.sill - sum).max(0.0)
    }

    pub fn predict_mean_at(&self, p: &Point3) -> f64 {
        let mut scratch = Vec::with_capacity(self.len());
        self.fill_cross_covariance(p, &mut scratch);
        self.mean_from(&scratch)
    }

    pub fn predict_variance_at(&self, p: &Point3) -> f64 {
        let mut scratch = Vec::with_capacity(self.len());
        self.fill_cross_covariance(p, &mut scratch);
        self.variance_from(&mut scratch)
    }

    /// Mean and variance in one pass, reusing `scratch` across calls.
    pub fn predict_with_scratch(&self, p: &Point3, scratch: &mut Vec<f64>) -> GpPrediction {
        self.fill_cross_covariance(p, scratch);
        let mean = self.mean_from(scratch);
        let variance = self.variance_from(scratch);
        GpPrediction { mean, variance }
    }

    pub fn predict_at(&self, p: &Point3) -> GpPrediction {
        let mut scratch = Vec::with_capacity(self.len());
        self.predict_with_scratch(p, &mut scratch)
    }

    pub fn predict_mean(&self, points: &[Point3]) -> Vec<f64> {
        let mut scratch = Vec::with_capacity(self.len());
        points
            .iter()
            .map(|p| {
                self.fill_cross_covariance(p, &mut scratch);
                self.mean_from(&scratch)
            })
            .collect()
    }

    pub fn predict_variance(&self, points: &[Point3]) -> Vec<f64> {
        let mut scratch = Vec::with_capacity(self.len());
        points
            .iter()
            .map(|p| {
                self.fill_cross_covariance(p, &mut scratch);
                self.variance_from(&mut scratch)
            })
            .collect()
    }

    /// Full posterior covariance `K** − K*ᵀ K_reg⁻¹ K*` over `points`.
    pub fn predict_covariance(&self, points: &[Point3]) -> Result<DMatrix<f64>, GpError> {
        if points.len() > MAX_COVARIANCE_POINTS {
            return Err(GpError::TooManyQueryPoints { requested: points.len(), limit: MAX_COVARIANCE_POINTS });
        }
        let m = points.len();
        let mut cov = build_gram(&self.kernel, points);
        if let Some(chol) = &self.chol {
            let kstar = DMatrix::from_fn(self.len(), m, |i, j| {
                self.kernel.covariance_sq(self.locations[i].distance_squared(&points[j]))
            });
            let v = chol
                .l_dirty()
                .solve_lower_triangular(&kstar)
                .expect("Cholesky factor has a positive diagonal");
            cov -= v.transpose() * v;
        }
        // Restore exact symmetry lost to rounding.
        for i in 0..m {
            for j in i + 1..m {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        Ok(cov)
    }
}

/// Three independent axis GPs over a common landmark set.
#[derive(Clone, Debug)]
pub struct DisplacementGp {
    axes: [GpAxisModel; 3],
}

impl DisplacementGp {
    pub fn fit(kernels: &AxisKernels, observations: &[DisplacementObservation]) -> Result<Self, GpError> {
        let fit_axis = |axis: Axis| {
            let obs: Vec<(Point3, f64)> = observations.iter().map(|o| (o.location, o.component(axis))).collect();
            GpAxisModel::fit(*kernels.get(axis), &obs)
        };
        Ok(Self { axes: [fit_axis(Axis::X)?, fit_axis(Axis::Y)?, fit_axis(Axis::Z)?] })
    }

    /// Zero-data model: prior mean 0 and prior variance `sill` everywhere.
    pub fn prior(kernels: &AxisKernels) -> Result<Self, GpError> {
        Self::fit(kernels, &[])
    }

    pub fn from_axes(axes: [GpAxisModel; 3]) -> Self {
        Self { axes }
    }

    pub fn axis(&self, axis: Axis) -> &GpAxisModel {
        &self.axes[axis.index()]
    }

    pub fn axes(&self) -> &[GpAxisModel; 3] {
        &self.axes
    }

    pub fn kernels(&self) -> AxisKernels {
        AxisKernels::from_array([self.axes[0].kernel, self.axes[1].kernel, self.axes[2].kernel])
    }

    pub fn len(&self) -> usize {
        self.axes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.axes[0].is_empty()
    }

    pub fn predict_mean_at(&self, p: &Point3) -> Vector3<f64> {
        Vector3::new(self.axes[0].predict_mean_at(p), self.axes[1].predict_mean_at(p), self.axes[2].predict_mean_at(p))
    }

    pub fn predict_variance_at(&self, p: &Point3) -> [f64; 3] {
        [
            self.axes[0].predict_variance_at(p),
            self.axes[1].predict_variance_at(p),
            self.axes[2].predict_variance_at(p),
        ]
    }
}

/// Thin-plate spline interpolant with the 3-D biharmonic kernel `U(r) = r`
/// and a linear polynomial part, fitted to all three displacement axes at once.
#[derive(Clone, Debug)]
pub struct TpsModel {
    centers: Vec<Point3>,
    shift: Vector3<f64>,
    /// N × 3 radial weights.
    weights: DMatrix<f64>,
    /// Rows: constant, x, y, z (in shifted coordinates); columns: axes.
    poly: Matrix4x3<f64>,
}

impl TpsModel {
    pub fn fit(observations: &[DisplacementObservation]) -> Result<Self, GpError> {
        let n = observations.len();
        if n < 4 {
            return Err(GpError::TpsInsufficientData { got: n });
        }
        if let Some(index) = observations.iter().position(|o| !(o.location.is_finite() && o.d.iter().all(|v| v.is_finite()))) {
            return Err(GpError::NonFinite { index });
        }
        let centers: Vec<Point3> = observations.iter().map(|o| o.location).collect();
        let shift = centers.iter().fold(Vector3::zeros(), |acc, p| acc + p.to_vector()) / n as f64;
        let local: Vec<Vector3<f64>> = centers.iter().map(|p| p.to_vector() - shift).collect();

        let poly_design = DMatrix::from_fn(n, 4, |r, c| if c == 0 { 1.0 } else { local[r][c - 1] });
        let sv = poly_design.singular_values();
        let rank = sv.iter().filter(|&&s| s > crate::affine::RANK_TOL * sv.max()).count();
        if rank < 4 {
            return Err(GpError::TpsRankDeficient { rank });
        }

        let size = n + 4;
        let mut system = DMatrix::zeros(size, size);
        let mut rhs = DMatrix::zeros(size, 3);
        for i in 0..n {
            for j in 0..n {
                system[(i, j)] = (local[i] - local[j]).norm();
            }
            for c in 0..4 {
                system[(i, n + c)] = poly_design[(i, c)];
                system[(n + c, i)] = poly_design[(i, c)];
            }
            for a in 0..3 {
                rhs[(i, a)] = observations[i].d[a];
            }
        }
        let coef = system
            .full_piv_lu()
            .solve(&rhs)
            .ok_or(GpError::TpsRankDeficient { rank })?;

        let weights = coef.rows(0, n).into_owned();
        let poly = Matrix4x3::from_fn(|r, c| coef[(n + r, c)]);
        Ok(Self { centers, shift, weights, poly })
    }

    pub fn centers(&self) -> &[Point3] {
        &self.centers
    }

    pub fn radial_weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn predict_at(&self, p: &Point3) -> Vector3<f64> {
        let q = p.to_vector() - self.shift;
        let mut out = Vector3::new(self.poly[(0, 0)], self.poly[(0, 1)], self.poly[(0, 2)]);
        for a in 0..3 {
            out[a] += self.poly[(1, a)] * q.x + self.poly[(2, a)] * q.y + self.poly[(3, a)] * q.z;
        }
        for (i, c) in self.centers.iter().enumerate() {
            let r = (c.to_vector() - p.to_vector()).norm();
            for a in 0..3 {
                out[a] += self.weights[(i, a)] * r;
            }
        }
        out
    }

    pub fn predict(&self, points: &[Point3]) -> Vec<Vector3<f64>> {
        points.iter().map(|p| self.predict_at(p)).collect()
    }
}
