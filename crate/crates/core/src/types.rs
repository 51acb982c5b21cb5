//! Shared domain types: points, landmark pairs, displacement observations
//! and the voxel grid used for dense prediction.

use std::collections::HashMap;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::affine::{AffineError, AffineTransform};

/// Two `pre` locations closer than this (mm) are treated as the same point.
pub const DUPLICATE_LOCATION_TOL: f64 = 1e-9;

/// Minimum number of pairs for a 12-parameter affine fit.
pub const MIN_AFFINE_PAIRS: usize = 4;

/// A world coordinate in millimetres. Serialized as `[x, y, z]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        self.distance_squared(other).sqrt()
    }

    pub fn distance_squared(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn offset(&self, d: &Vector3<f64>) -> Point3 {
        Point3::new(self.x + d.x, self.y + d.y, self.z + d.z)
    }

    pub fn axis(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// One of the three displacement components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(format!("unknown axis `{other}` (expected x, y or z)")),
        }
    }
}

/// Where a landmark pair came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkSource {
    /// Loaded from a landmark file (feature matcher output).
    #[default]
    File,
    /// Placed by a user during active registration.
    Manual,
}

/// A corresponding point pair, pre-volume coordinate to post-volume coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkPair {
    pub id: u64,
    pub pre: Point3,
    pub post: Point3,
    #[serde(default)]
    pub source: LandmarkSource,
}

impl LandmarkPair {
    pub fn new(id: u64, pre: Point3, post: Point3) -> Self {
        Self { id, pre, post, source: LandmarkSource::File }
    }

    pub fn manual(id: u64, pre: Point3, post: Point3) -> Self {
        Self { id, pre, post, source: LandmarkSource::Manual }
    }
}

/// An ordered collection of landmark pairs.
///
/// Construction does not enforce the invariants; call [`LandmarkSet::validate`]
/// (the io and session layers do so on every load and edit).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    pub pairs: Vec<LandmarkPair>,
}

/// A single invariant violation found by [`LandmarkSet::validate`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: u64 },
    DuplicateLocation { first: u64, second: u64, distance_mm: f64 },
    NonFinite { id: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate landmark id {id}"),
            Violation::DuplicateLocation { first, second, distance_mm } => write!(
                f,
                "landmarks {first} and {second} share a pre location ({distance_mm:e} mm apart)"
            ),
            Violation::NonFinite { id } => write!(f, "landmark {id} has a non-finite coordinate"),
        }
    }
}

/// Result of validating a landmark set. Notes are advisory and do not make a
/// set invalid.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl LandmarkSet {
    pub fn new(pairs: Vec<LandmarkPair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LandmarkPair> {
        self.pairs.iter()
    }

    pub fn get(&self, id: u64) -> Option<&LandmarkPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// Smallest id not used by any pair.
    pub fn next_id(&self) -> u64 {
        self.pairs.iter().map(|p| p.id + 1).max().unwrap_or(0)
    }

    pub fn pre_points(&self) -> Vec<Point3> {
        self.pairs.iter().map(|p| p.pre).collect()
    }

    pub fn post_points(&self) -> Vec<Point3> {
        self.pairs.iter().map(|p| p.post).collect()
    }

    /// Subset by positional index, preserving order.
    pub fn select(&self, indices: &[usize]) -> LandmarkSet {
        LandmarkSet::new(indices.iter().map(|&i| self.pairs[i]).collect())
    }

    /// Returns the pair whose `pre` lies within the duplicate tolerance of `p`.
    pub fn find_pre_location(&self, p: &Point3) -> Option<&LandmarkPair> {
        self.pairs.iter().find(|q| q.pre.distance(p) < DUPLICATE_LOCATION_TOL)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();

        let mut seen: HashMap<u64, usize> = HashMap::new();
        for pair in &self.pairs {
            if !(pair.pre.is_finite() && pair.post.is_finite()) {
                report.violations.push(Violation::NonFinite { id: pair.id });
            }
            let count = seen.entry(pair.id).or_insert(0);
            *count += 1;
            if *count == 2 {
                report.violations.push(Violation::DuplicateId { id: pair.id });
            }
        }

        // O(N^2) is fine at landmark scale (hundreds).
        for (i, a) in self.pairs.iter().enumerate() {
            for b in &self.pairs[i + 1..] {
                let distance_mm = a.pre.distance(&b.pre);
                if distance_mm < DUPLICATE_LOCATION_TOL {
                    report.violations.push(Violation::DuplicateLocation {
                        first: a.id,
                        second: b.id,
                        distance_mm,
                    });
                }
            }
        }

        if self.pairs.len() < MIN_AFFINE_PAIRS {
            report.notes.push(format!(
                "insufficient for affine: need >= {MIN_AFFINE_PAIRS} non-coplanar pairs, have {}",
                self.pairs.len()
            ));
        }
        report
    }
}

impl FromIterator<LandmarkPair> for LandmarkSet {
    fn from_iter<T: IntoIterator<Item = LandmarkPair>>(iter: T) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a LandmarkSet {
    type Item = &'a LandmarkPair;
    type IntoIter = std::slice::Iter<'a, LandmarkPair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

/// Residual displacement of one landmark after affine pre-alignment, in pre space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplacementObservation {
    pub location: Point3,
    pub d: Vector3<f64>,
}

impl DisplacementObservation {
    pub fn new(location: Point3, d: Vector3<f64>) -> Self {
        Self { location, d }
    }

    pub fn component(&self, axis: Axis) -> f64 {
        self.d[axis.index()]
    }
}

/// Residual displacements `affine⁻¹(post) − pre`, one per pair, located at `pre`.
///
/// The full pre→post map is then `T(x) = affine(x + d(x))`.
pub fn compute_displacements(
    landmarks: &LandmarkSet,
    affine: &AffineTransform,
) -> Result<Vec<DisplacementObservation>, AffineError> {
    let inverse = affine.inverse()?;
    Ok(landmarks
        .iter()
        .map(|pair| {
            let back = inverse.apply(&pair.post);
            DisplacementObservation::new(pair.pre, back.to_vector() - pair.pre.to_vector())
        })
        .collect())
}

/// Regular voxel grid. Voxel `(i, j, k)` is centred at `origin + (i, j, k) * spacing`;
/// linear voxel order is x-fastest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Point3,
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("grid spacing must be finite and > 0, got {0:?}")]
    Spacing([f64; 3]),
    #[error("grid dims must be >= 1 per axis, got {0:?}")]
    Dims([usize; 3]),
    #[error("grid origin must be finite")]
    Origin,
}

impl GridSpec {
    pub fn new(origin: Point3, spacing: [f64; 3], dims: [usize; 3]) -> Result<Self, GridError> {
        let grid = Self { origin, spacing, dims };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(GridError::Spacing(self.spacing));
        }
        if self.dims.contains(&0) {
            return Err(GridError::Dims(self.dims));
        }
        if !self.origin.is_finite() {
            return Err(GridError::Origin);
        }
        Ok(())
    }

    /// Isotropic grid covering the bounding box of `points` plus `margin` mm.
    pub fn covering(points: &[Point3], spacing: f64, margin: f64) -> Result<Self, GridError> {
        if points.is_empty() {
            return GridSpec::new(Point3::ORIGIN, [spacing; 3], [1, 1, 1]);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for (a, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let mut dims = [1usize; 3];
        for a in 0..3 {
            lo[a] -= margin;
            hi[a] += margin;
            dims[a] = ((hi[a] - lo[a]) / spacing).ceil() as usize + 1;
        }
        GridSpec::new(Point3::from(lo), [spacing; 3], dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn ijk(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let rest = index / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        Point3::new(
            self.origin.x + i as f64 * self.spacing[0],
            self.origin.y + j as f64 * self.spacing[1],
            self.origin.z + k as f64 * self.spacing[2],
        )
    }

    pub fn voxel_center_at(&self, index: usize) -> Point3 {
        let [i, j, k] = self.ijk(index);
        self.voxel_center(i, j, k)
    }

    /// Continuous voxel coordinates of a world point.
    pub fn continuous_index(&self, p: &Point3) -> [f64; 3] {
        [
            (p.x - self.origin.x) / self.spacing[0],
            (p.y - self.origin.y) / self.spacing[1],
            (p.z - self.origin.z) / self.spacing[2],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: u64, pre: [f64; 3], post: [f64; 3]) -> LandmarkPair {
        LandmarkPair::new(id, pre.into(), post.into())
    }

    #[test]
    fn identity_affine_gives_zero_displacement_when_post_equals_pre() {
        let set: LandmarkSet = (0..5).map(|i| pair(i, [i as f64, 2.0, -1.0], [i as f64, 2.0, -1.0])).collect();
        let obs = compute_displacements(&set, &AffineTransform::identity()).unwrap();
        assert_eq!(obs.len(), 5);
        assert!(obs.iter().all(|o| o.d == Vector3::zeros()));
    }

    #[test]
    fn identity_affine_direct_subtraction() {
        let set = LandmarkSet::new(vec![pair(7, [9.0, 18.0, 27.0], [10.0, 20.0, 30.0])]);
        let obs = compute_displacements(&set, &AffineTransform::identity()).unwrap();
        assert_eq!(obs[0].d, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(obs[0].location, Point3::new(9.0, 18.0, 27.0));
    }

    #[test]
    fn singular_affine_is_rejected() {
        let set = LandmarkSet::new(vec![pair(0, [0.0; 3], [1.0; 3])]);
        let mut affine = AffineTransform::identity();
        affine.linear[(2, 2)] = 0.0;
        assert!(matches!(compute_displacements(&set, &affine), Err(AffineError::Singular { .. })));
    }

    #[test]
    fn translation_covariance_under_identity() {
        let set: LandmarkSet = (0..6)
            .map(|i| pair(i, [i as f64, (i * i) as f64, 1.0], [i as f64 + 0.5, 3.0, -2.0]))
            .collect();
        let t = Vector3::new(1.25, -3.5, 8.0);
        let shifted: LandmarkSet = set
            .iter()
            .map(|p| LandmarkPair { post: p.post.offset(&t), ..*p })
            .collect();
        let a = compute_displacements(&set, &AffineTransform::identity()).unwrap();
        let b = compute_displacements(&shifted, &AffineTransform::identity()).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((b.d - a.d - t).amax() < 1e-12);
        }
    }

    #[test]
    fn empty_set_is_valid_but_flagged() {
        let report = LandmarkSet::default().validate();
        assert!(report.is_valid());
        assert!(report.notes[0].contains("insufficient for affine"));
    }

    #[test]
    fn duplicate_id_is_a_violation() {
        let set = LandmarkSet::new(vec![pair(3, [0.0; 3], [0.0; 3]), pair(3, [1.0; 3], [1.0; 3])]);
        let report = set.validate();
        assert_eq!(report.violations, vec![Violation::DuplicateId { id: 3 }]);
    }

    #[test]
    fn near_coincident_pre_locations_are_duplicates() {
        let set = LandmarkSet::new(vec![
            pair(0, [10.0, 10.0, 10.0], [0.0; 3]),
            pair(1, [10.0 + 1e-12, 10.0, 10.0], [1.0; 3]),
        ]);
        let report = set.validate();
        assert!(matches!(report.violations[..], [Violation::DuplicateLocation { first: 0, second: 1, .. }]));
    }

    #[test]
    fn non_finite_coordinates_are_violations() {
        let set = LandmarkSet::new(vec![pair(0, [f64::NAN, 0.0, 0.0], [0.0; 3])]);
        assert_eq!(set.validate().violations, vec![Violation::NonFinite { id: 0 }]);
    }

    #[test]
    fn grid_indexing_is_x_fastest() {
        let grid = GridSpec::new(Point3::new(1.0, 2.0, 3.0), [0.5, 1.0, 2.0], [4, 3, 2]).unwrap();
        assert_eq!(grid.len(), 24);
        assert_eq!(grid.linear_index(1, 0, 0), 1);
        assert_eq!(grid.linear_index(0, 1, 0), 4);
        assert_eq!(grid.linear_index(0, 0, 1), 12);
        assert_eq!(grid.ijk(17), [1, 1, 1]);
        assert_eq!(grid.voxel_center_at(17), Point3::new(1.5, 3.0, 5.0));
    }

    #[test]
    fn grid_rejects_bad_spacing_and_dims() {
        assert!(GridSpec::new(Point3::ORIGIN, [1.0, 0.0, 1.0], [1, 1, 1]).is_err());
        assert!(GridSpec::new(Point3::ORIGIN, [1.0; 3], [1, 0, 1]).is_err());
    }
}
