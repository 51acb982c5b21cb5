//! Landmark-based affine registration (pre space → post space).

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::types::{LandmarkSet, Point3, MIN_AFFINE_PAIRS};

/// Linear parts with `|det|` below this are treated as non-invertible.
pub const SINGULAR_DET_TOL: f64 = 1e-12;

/// Relative singular-value threshold for the design-matrix rank test.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AffineError {
    #[error("affine fit needs at least {required} landmark pairs, got {got}")]
    InsufficientData { required: usize, got: usize },
    #[error("degenerate landmark configuration: design matrix rank {rank} < {required} (points coplanar or collinear)")]
    RankDeficient { rank: usize, required: usize },
    #[error("affine transform is singular (|det| = {det:e})")]
    Singular { det: f64 },
}

/// `p ↦ linear · p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { linear, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from_vector(&self.apply_vector(&p.to_vector()))
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.linear * v + self.translation
    }

    pub fn determinant(&self) -> f64 {
        self.linear.determinant()
    }

    pub fn is_invertible(&self) -> bool {
        self.determinant().abs() >= SINGULAR_DET_TOL
    }

    pub fn inverse(&self) -> Result<AffineTransform, AffineError> {
        let det = self.determinant();
        if !(det.abs() >= SINGULAR_DET_TOL) {
            return Err(AffineError::Singular { det });
        }
        let inv = self.linear.try_inverse().ok_or(AffineError::Singular { det })?;
        Ok(AffineTransform::new(inv, -(inv * self.translation)))
    }

    /// Row-major 3×4 `[A | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.linear[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(m: &[f64; 12]) -> Self {
        let linear = Matrix3::from_fn(|r, c| m[r * 4 + c]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::new(linear, translation)
    }

    /// Sum of squared residuals `Σ ‖A·pre + t − post‖²`.
    pub fn residual_sum_of_squares(&self, landmarks: &LandmarkSet) -> f64 {
        landmarks
            .iter()
            .map(|p| self.apply(&p.pre).distance_squared(&p.post))
            .sum()
    }
}

impl Serialize for AffineTransform {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = <[f64; 12]>::deserialize(d)?;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom("affine entries must be finite"));
        }
        Ok(Self::from_row_major(&m))
    }
}

/// Ordinary least-squares fit of all twelve affine parameters.
///
/// Pre points are centred before solving so that the translation column does
/// not dominate the conditioning at typical (tens of mm) coordinates.
pub fn fit_affine(landmarks: &LandmarkSet) -> Result<AffineTransform, AffineError> {
    let n = landmarks.len();
    if n < MIN_AFFINE_PAIRS {
        return Err(AffineError::InsufficientData { required: MIN_AFFINE_PAIRS, got: n });
    }

    let centroid = landmarks
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.pre.to_vector())
        / n as f64;

    let design = DMatrix::from_fn(n, 4, |r, c| {
        if c == 3 {
            1.0
        } else {
            landmarks.pairs[r].pre.to_vector()[c] - centroid[c]
        }
    });
    let target = DMatrix::from_fn(n, 3, |r, c| landmarks.pairs[r].post.to_vector()[c]);

    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.max();
    let threshold = RANK_TOL * max_sv;
    let rank = svd.singular_values.iter().filter(|&&s| s > threshold).count();
    if rank < 4 {
        return Err(AffineError::RankDeficient { rank, required: 4 });
    }
    // Rank is full, so the pseudo-inverse solve is the unique LS minimizer.
    let params = svd
        .solve(&target, threshold)
        .map_err(|_| AffineError::RankDeficient { rank, required: 4 })?;

    let linear = Matrix3::from_fn(|r, c| params[(c, r)]);
    let intercept = Vector3::new(params[(3, 0)], params[(3, 1)], params[(3, 2)]);
    Ok(AffineTransform::new(linear, intercept - linear * centroid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::types::LandmarkPair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
            .collect()
    }

    fn landmarks_through(points: &[Point3], f: impl Fn(&Point3) -> Point3) -> LandmarkSet {
        points.iter().enumerate().map(|(i, p)| LandmarkPair::new(i as u64, *p, f(p))).collect()
    }

    fn max_abs_diff(a: &AffineTransform, b: &AffineTransform) -> f64 {
        a.to_row_major()
            .iter()
            .zip(b.to_row_major())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_data_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 8);
        let fit = fit_affine(&landmarks_through(&pts, |p| *p)).unwrap();
        assert!(max_abs_diff(&fit, &AffineTransform::identity()) < 1e-12);
    }

    #[test]
    fn pure_translation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 6);
        let t = Vector3::new(5.0, -3.0, 2.0);
        let fit = fit_affine(&landmarks_through(&pts, |p| p.offset(&t))).unwrap();
        assert!(max_abs_diff(&fit, &AffineTransform::from_translation(t)) < 1e-12);
    }

    #[test]
    fn noisy_shear_scale_recovered_and_matches_normal_equations() {
        let truth = AffineTransform::new(
            Matrix3::new(1.1, 0.2, 0.0, 0.0, 0.9, 0.0, 0.0, 0.0, 1.0),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let noise = Normal::new(0.0, 0.1).unwrap();
        // Working volume centred on the origin so the translation is well determined.
        let pts: Vec<Point3> = random_points(&mut rng, 20).iter().map(|p| p.offset(&Vector3::repeat(-50.0))).collect();
        let set: LandmarkSet = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let q = truth.apply(p);
                let jitter = Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
                LandmarkPair::new(i as u64, *p, q.offset(&jitter))
            })
            .collect();
        let fit = fit_affine(&set).unwrap();
        assert!(max_abs_diff(&fit, &truth) < 0.15, "{}", max_abs_diff(&fit, &truth));

        let pre: Vec<[f64; 3]> = set.iter().map(|p| p.pre.into()).collect();
        let post: Vec<[f64; 3]> = set.iter().map(|p| p.post.into()).collect();
        let expected = oracle::affine_normal_equations(&pre, &post);
        let got = fit.to_row_major();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() <= 1e-8 * e.abs().max(1.0), "{g} vs {e}");
        }
    }

    #[test]
    fn exact_affine_data_is_fit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let linear = Matrix3::from_fn(|r, c| if r == c { 1.0 } else { 0.0 } + rng.random_range(-0.2..0.2));
        let truth = AffineTransform::new(linear, Vector3::new(-4.0, 7.5, 0.3));
        let pts = random_points(&mut rng, 10);
        let set = landmarks_through(&pts, |p| truth.apply(p));
        let fit = fit_affine(&set).unwrap();
        assert!(fit.residual_sum_of_squares(&set).sqrt() < 1e-9);
    }

    #[test]
    fn fewer_than_four_pairs_is_insufficient() {
        let pts = [Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        let err = fit_affine(&landmarks_through(&pts, |p| *p)).unwrap_err();
        assert_eq!(err, AffineError::InsufficientData { required: 4, got: 3 });
    }

    #[test]
    fn coplanar_points_report_rank() {
        let pts: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, (i * i % 7) as f64, 5.0)).collect();
        let err = fit_affine(&landmarks_through(&pts, |p| *p)).unwrap_err();
        assert_eq!(err, AffineError::RankDeficient { rank: 3, required: 4 });
    }

    #[test]
    fn apply_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(AffineTransform::identity().apply(&p), p);
        let t = AffineTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.apply(&Point3::ORIGIN), Point3::new(1.0, 0.0, 0.0));
        let s = AffineTransform::new(Matrix3::identity() * 2.0, Vector3::zeros());
        assert_eq!(s.apply(&Point3::new(1.0, 1.0, 1.0)), Point3::new(2.0, 2.0, 2.0));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(AffineTransform::identity().inverse().unwrap(), AffineTransform::identity());
        let t = Vector3::new(1.0, -2.0, 3.5);
        let inv = AffineTransform::from_translation(t).inverse().unwrap();
        assert_eq!(inv, AffineTransform::from_translation(-t));
    }

    #[test]
    fn inverse_round_trip_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let linear = Matrix3::from_fn(|r, c| if r == c { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
        let a = AffineTransform::new(linear, Vector3::new(12.0, -8.0, 30.0));
        let inv = a.inverse().unwrap();
        for p in random_points(&mut rng, 100) {
            assert!(inv.apply(&a.apply(&p)).distance(&p) < 1e-9);
        }
    }

    #[test]
    fn singular_inverse_is_an_error() {
        let a = AffineTransform::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1e-13, 1.0)), Vector3::zeros());
        assert!(matches!(a.inverse(), Err(AffineError::Singular { .. })));
    }

    #[test]
    fn row_major_layout() {
        let a = AffineTransform::new(
            Matrix3::new(1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 9.0, 10.0, 11.0),
            Vector3::new(4.0, 8.0, 12.0),
        );
        assert_eq!(a.to_row_major(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(AffineTransform::from_row_major(&a.to_row_major()), a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn fit_never_worse_than_identity(seed in 0u64..10_000, n in 4usize..30) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts = random_points(&mut rng, n);
                let set: LandmarkSet = pts.iter().enumerate().map(|(i, p)| {
                    let q = Point3::new(
                        p.x + rng.random_range(-5.0..5.0),
                        p.y * 1.05 + rng.random_range(-5.0..5.0),
                        p.z + rng.random_range(-5.0..5.0),
                    );
                    LandmarkPair::new(i as u64, *p, q)
                }).collect();
                if let Ok(fit) = fit_affine(&set) {
                    let rss = fit.residual_sum_of_squares(&set);
                    let rss_id = AffineTransform::identity().residual_sum_of_squares(&set);
                    prop_assert!(rss <= rss_id * (1.0 + 1e-12) + 1e-12);
                }
            }
        }
    }
}
