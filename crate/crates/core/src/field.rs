//! Dense displacement fields, voxelwise uncertainty maps, trilinear sampling,
//! volume warping and point transformation.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;

use crate::affine::AffineTransform;
use crate::gp::DisplacementGp;
use crate::types::{Axis, GridSpec, Point3};

/// Voxels evaluated per parallel work item.
pub const CHUNK: usize = 4096;
/// Continuous indices within this distance of an integer are snapped to it, so
/// that sampling exactly at voxel centres reproduces the stored values.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("grid mismatch: expected dims {expected:?}, got {got:?} (origin/spacing must match too)")]
    GridMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("slice index {index} out of range for axis {axis} (size {len})")]
    SliceOutOfRange { axis: Axis, index: usize, len: usize },
    #[error("buffer holds {got} values, grid needs {expected}")]
    Length { expected: usize, got: usize },
}

/// Per-voxel displacement vectors (mm), x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseField {
    pub grid: GridSpec,
    pub vectors: Vec<Vector3<f64>>,
}

impl DenseField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, vectors: vec![Vector3::zeros(); grid.len()] }
    }

    pub fn constant(grid: GridSpec, v: Vector3<f64>) -> Self {
        Self { grid, vectors: vec![v; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(Point3) -> Vector3<f64>) -> Self {
        Self { grid, vectors: (0..grid.len()).map(|i| f(grid.voxel_center_at(i))).collect() }
    }

    /// Trilinear displacement at `p`; `None` outside the grid.
    pub fn sample(&self, p: &Point3) -> Option<Vector3<f64>> {
        let w = trilinear_weights(&self.grid, p)?;
        let mut out = Vector3::zeros();
        for (idx, wt) in w.iter() {
            out += self.vectors[idx] * wt;
        }
        Some(out)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.vectors.iter().map(|v| v.norm()).collect()
    }

    pub fn max_abs_difference(&self, other: &DenseField) -> f64 {
        self.vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

/// Per-voxel posterior variances (mm²) per axis plus their trace.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub grid: GridSpec,
    pub variance: Vec<[f64; 3]>,
    pub trace: Vec<f64>,
}

impl UncertaintyMap {
    pub fn from_variances(grid: GridSpec, variance: Vec<[f64; 3]>) -> Self {
        let trace = variance.iter().map(|v| v[0] + v[1] + v[2]).collect();
        Self { grid, variance, trace }
    }

    /// Voxel with the largest trace.
    pub fn argmax(&self) -> usize {
        self.trace
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.trace[best] { i } else { best })
    }
}

/// Scalar image, 32-bit samples, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: GridSpec, data: Vec<f32>) -> Result<Self, FieldError> {
        if data.len() != grid.len() {
            return Err(FieldError::Length { expected: grid.len(), got: data.len() });
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(Point3) -> f32) -> Self {
        Self { grid, data: (0..grid.len()).map(|i| f(grid.voxel_center_at(i))).collect() }
    }

    pub fn sample(&self, p: &Point3) -> Option<f64> {
        let w = trilinear_weights(&self.grid, p)?;
        Some(w.iter().map(|(idx, wt)| self.data[idx] as f64 * wt).sum())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// The up-to-eight voxels contributing to a trilinear sample; zero weights are dropped.
#[derive(Clone, Copy, Debug)]
pub struct TrilinearWeights {
    entries: [(usize, f64); 8],
    len: usize,
}

impl TrilinearWeights {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries[..self.len].iter().copied()
    }
}

fn axis_weights(u: f64, dim: usize) -> Option<(usize, f64)> {
    let r = u.round();
    let u = if (u - r).abs() < SNAP { r } else { u };
    if !(u >= 0.0 && u <= (dim - 1) as f64) {
        return None;
    }
    let i0 = (u.floor() as usize).min(dim.saturating_sub(2));
    let frac = u - i0 as f64;
    Some((i0, frac))
}

/// Trilinear interpolation weights at world point `p`; `None` outside the grid.
pub fn trilinear_weights(grid: &GridSpec, p: &Point3) -> Option<TrilinearWeights> {
    let u = grid.continuous_index(p);
    let (i0, fx) = axis_weights(u[0], grid.dims[0])?;
    let (j0, fy) = axis_weights(u[1], grid.dims[1])?;
    let (k0, fz) = axis_weights(u[2], grid.dims[2])?;
    let mut out = TrilinearWeights { entries: [(0, 0.0); 8], len: 0 };
    for (dk, wz) in [(0, 1.0 - fz), (1, fz)] {
        for (dj, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    out.entries[out.len] = (grid.linear_index(i0 + di, j0 + dj, k0 + dk), w);
                    out.len += 1;
                }
            }
        }
    }
    Some(out)
}

/// Posterior mean of the three axis GPs at every voxel centre.
pub fn generate_dense_field(model: &DisplacementGp, grid: &GridSpec) -> DenseField {
    let mut vectors = vec![Vector3::zeros(); grid.len()];
    vectors.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let mut scratch = Vec::with_capacity(model.len());
        for (off, out) in chunk.iter_mut().enumerate() {
            let p = grid.voxel_center_at(c * CHUNK + off);
            for axis in Axis::ALL {
                out[axis.index()] = model.axis(axis).predict_with_scratch(&p, &mut scratch).mean;
            }
        }
    });
    DenseField { grid: *grid, vectors }
}

/// Posterior marginal variances of the three axis GPs at every voxel centre.
pub fn generate_uncertainty_map(model: &DisplacementGp, grid: &GridSpec) -> UncertaintyMap {
    generate_field_and_uncertainty(model, grid).1
}

/// Field and uncertainty map in a single pass over the grid.
pub fn generate_field_and_uncertainty(model: &DisplacementGp, grid: &GridSpec) -> (DenseField, UncertaintyMap) {
    let n = grid.len();
    let mut vectors = vec![Vector3::zeros(); n];
    let mut variance = vec![[0.0; 3]; n];
    vectors
        .par_chunks_mut(CHUNK)
        .zip(variance.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (vchunk, schunk))| {
            let mut scratch = Vec::with_capacity(model.len());
            for (off, (v, s)) in vchunk.iter_mut().zip(schunk.iter_mut()).enumerate() {
                let p = grid.voxel_center_at(c * CHUNK + off);
                for axis in Axis::ALL {
                    let pred = model.axis(axis).predict_with_scratch(&p, &mut scratch);
                    v[axis.index()] = pred.mean;
                    s[axis.index()] = pred.variance;
                }
            }
        });
    (DenseField { grid: *grid, vectors }, UncertaintyMap::from_variances(*grid, variance))
}

/// Output of [`warp_volume`]: resampled intensities and which voxels were
/// sampled inside the input (the rest are zero-filled).
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedVolume {
    pub volume: Volume,
    pub valid: Vec<bool>,
}

/// Backward warp: output voxel `x` takes the trilinear value of `vol` at
/// `T(x) = affine(x + d(x))`; samples outside `vol` are 0 and marked invalid.
pub fn warp_volume(vol: &Volume, field: &DenseField, affine: &AffineTransform) -> Result<WarpedVolume, FieldError> {
    if vol.grid != field.grid {
        return Err(FieldError::GridMismatch { expected: vol.grid.dims, got: field.grid.dims });
    }
    let grid = field.grid;
    let n = grid.len();
    let mut data = vec![0f32; n];
    let mut valid = vec![false; n];
    data.par_chunks_mut(CHUNK)
        .zip(valid.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (dchunk, vchunk))| {
            for (off, (d, ok)) in dchunk.iter_mut().zip(vchunk.iter_mut()).enumerate() {
                let i = c * CHUNK + off;
                let x = grid.voxel_center_at(i);
                let target = affine.apply(&x.offset(&field.vectors[i]));
                if let Some(v) = vol.sample(&target) {
                    *d = v as f32;
                    *ok = true;
                }
            }
        });
    Ok(WarpedVolume { volume: Volume { grid, data }, valid })
}

/// Forward map of a pre-space point: `affine(p + d(p))` with `d` sampled
/// trilinearly from the field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransformedPoint {
    pub point: Point3,
    /// `false` when `p` lay outside the field grid and the field term was taken as zero.
    pub inside_field: bool,
}

pub fn transform_point(p: &Point3, field: &DenseField, affine: &AffineTransform) -> TransformedPoint {
    match field.sample(p) {
        Some(d) => TransformedPoint { point: affine.apply(&p.offset(&d)), inside_field: true },
        None => TransformedPoint { point: affine.apply(p), inside_field: false },
    }
}

/// A 2-D cut through a grid. Columns run along the faster of the two remaining
/// axes, rows along the slower; `data` is row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Slice {
    pub axis: Axis,
    pub index: usize,
    /// `[columns, rows]`.
    pub dims: [usize; 2],
    /// Spacing (mm) along columns and rows.
    pub spacing: [f64; 2],
    pub data: Vec<f32>,
}

impl Slice {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// In-plane axes for a slice normal to `axis`: (columns, rows).
pub fn slice_axes(axis: Axis) -> (usize, usize) {
    match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    }
}

pub fn extract_slice(grid: &GridSpec, axis: Axis, index: usize, value: impl Fn(usize) -> f32) -> Result<Slice, FieldError> {
    let len = grid.dims[axis.index()];
    if index >= len {
        return Err(FieldError::SliceOutOfRange { axis, index, len });
    }
    let (ca, ra) = slice_axes(axis);
    let (cols, rows) = (grid.dims[ca], grid.dims[ra]);
    let mut data = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let mut ijk = [0usize; 3];
            ijk[axis.index()] = index;
            ijk[ca] = c;
            ijk[ra] = r;
            data.push(value(grid.linear_index(ijk[0], ijk[1], ijk[2])));
        }
    }
    Ok(Slice { axis, index, dims: [cols, rows], spacing: [grid.spacing[ca], grid.spacing[ra]], data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{AxisKernels, KernelSpec};
    use crate::types::DisplacementObservation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, spacing: f64) -> GridSpec {
        GridSpec::new(Point3::new(-3.0, 2.0, 5.0), [spacing; 3], [n; 3]).unwrap()
    }

    fn model_on(grid: &GridSpec, n: usize, seed: u64) -> (DisplacementGp, Vec<DisplacementObservation>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<_> = (0..n)
            .map(|_| {
                let idx = rng.random_range(0..grid.len());
                DisplacementObservation::new(
                    grid.voxel_center_at(idx),
                    Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                )
            })
            .collect();
        let kernels = AxisKernels::uniform(KernelSpec::gaussian(1.5, 30.0, 0.0));
        (DisplacementGp::fit(&kernels, &obs).unwrap(), obs)
    }

    #[test]
    fn prior_field_is_zero_and_variance_is_sill() {
        let g = grid(4, 2.0);
        let kernels = AxisKernels { x: KernelSpec::gaussian(1.0, 5.0, 0.0), y: KernelSpec::gaussian(2.0, 5.0, 0.0), z: KernelSpec::gaussian(3.0, 5.0, 0.0) };
        let m = DisplacementGp::prior(&kernels).unwrap();
        let (f, u) = generate_field_and_uncertainty(&m, &g);
        assert!(f.vectors.iter().all(|v| *v == Vector3::zeros()));
        assert!(u.variance.iter().all(|v| *v == [1.0, 2.0, 3.0]));
        assert!(u.trace.iter().all(|t| *t == 6.0));
    }

    #[test]
    fn field_and_map_match_pointwise_predictor() {
        let g = grid(8, 1.5);
        let (m, obs) = model_on(&g, 5, 1);
        let field = generate_dense_field(&m, &g);
        let map = generate_uncertainty_map(&m, &g);
        for i in 0..g.len() {
            let p = g.voxel_center_at(i);
            let mean = m.predict_mean_at(&p);
            let var = m.predict_variance_at(&p);
            assert!((field.vectors[i] - mean).amax() <= 1e-12);
            for a in 0..3 {
                assert!((map.variance[i][a] - var[a]).abs() <= 1e-12);
            }
            assert!((map.trace[i] - var.iter().sum::<f64>()).abs() <= 1e-12);
        }
        for o in &obs {
            let idx = (0..g.len()).find(|&i| g.voxel_center_at(i) == o.location).unwrap();
            assert!((field.vectors[idx] - o.d).amax() < 1e-6);
            assert!(map.variance[idx].iter().all(|v| *v <= 1e-8));
        }
    }

    #[test]
    fn adding_a_landmark_never_raises_the_map() {
        let g = grid(8, 2.0);
        let (m, obs) = model_on(&g, 6, 2);
        let before = generate_uncertainty_map(&m, &g);
        let mut more = obs.clone();
        more.push(DisplacementObservation::new(Point3::new(1.3, 7.7, 9.1), Vector3::new(0.5, 0.0, -0.5)));
        let after = generate_uncertainty_map(&DisplacementGp::fit(&m.kernels(), &more).unwrap(), &g);
        for (a, b) in after.variance.iter().zip(&before.variance) {
            for k in 0..3 {
                assert!(a[k] <= b[k] + 1e-10);
            }
        }
    }

    #[test]
    fn zero_field_identity_warp_is_bit_exact() {
        let g = grid(6, 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vol = Volume::new(g, (0..g.len()).map(|_| rng.random_range(-100.0f32..100.0)).collect()).unwrap();
        let out = warp_volume(&vol, &DenseField::zeros(g), &AffineTransform::identity()).unwrap();
        assert_eq!(out.volume, vol);
        assert!(out.valid.iter().all(|v| *v));
    }

    #[test]
    fn integer_translation_is_index_shift_with_zero_fill() {
        let g = GridSpec::new(Point3::ORIGIN, [2.0, 1.0, 0.5], [7, 5, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vol = Volume::new(g, (0..g.len()).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
        let shift = [2i64, -1, 1];
        let field = DenseField::constant(g, Vector3::new(2.0 * 2.0, -1.0, 0.5));
        let out = warp_volume(&vol, &field, &AffineTransform::identity()).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..7 {
                    let src = [i as i64 + shift[0], j as i64 + shift[1], k as i64 + shift[2]];
                    let inside = (0..3).all(|a| src[a] >= 0 && src[a] < g.dims[a] as i64);
                    let expected = if inside {
                        vol.data[g.linear_index(src[0] as usize, src[1] as usize, src[2] as usize)]
                    } else {
                        0.0
                    };
                    let idx = g.linear_index(i, j, k);
                    assert_eq!(out.volume.data[idx], expected);
                    assert_eq!(out.valid[idx], inside);
                }
            }
        }
    }

    #[test]
    fn warp_output_stays_within_input_range() {
        let g = grid(16, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vol = Volume::new(g, (0..g.len()).map(|_| rng.random_range(-3.0f32..7.0)).collect()).unwrap();
        let field = DenseField::from_fn(g, |p| Vector3::new((p.y / 3.0).sin() * 2.3, (p.z / 4.0).cos() * 1.7, (p.x / 5.0).sin()));
        let (lo, hi) = vol.min_max();
        let out = warp_volume(&vol, &field, &AffineTransform::identity()).unwrap();
        for (v, ok) in out.volume.data.iter().zip(&out.valid) {
            if *ok {
                assert!(*v >= lo && *v <= hi);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn warp_rejects_grid_mismatch() {
        let vol = Volume::from_fn(grid(4, 1.0), |_| 1.0);
        assert!(matches!(
            warp_volume(&vol, &DenseField::zeros(grid(5, 1.0)), &AffineTransform::identity()),
            Err(FieldError::GridMismatch { .. })
        ));
    }

    #[test]
    fn transform_point_examples() {
        let g = grid(5, 2.0);
        let p = Point3::new(0.3, 4.1, 9.9);
        let id = AffineTransform::identity();
        assert_eq!(transform_point(&p, &DenseField::zeros(g), &id).point, p);
        let c = transform_point(&p, &DenseField::constant(g, Vector3::new(1.0, 2.0, 3.0)), &id);
        assert!(c.point.distance(&Point3::new(1.3, 6.1, 12.9)) < 1e-12);
        let outside = transform_point(&Point3::new(100.0, 0.0, 0.0), &DenseField::constant(g, Vector3::repeat(1.0)), &id);
        assert!(!outside.inside_field);
        assert_eq!(outside.point, Point3::new(100.0, 0.0, 0.0));
    }

    #[test]
    fn transform_point_is_continuous_across_voxel_faces() {
        let g = grid(6, 1.0);
        let field = DenseField::from_fn(g, |p| Vector3::new((p.x * 0.7).sin(), (p.y * 0.3).cos(), p.z * 0.1));
        let id = AffineTransform::identity();
        let face = g.voxel_center(2, 2, 2);
        for a in 0..3 {
            let mut d = Vector3::zeros();
            d[a] = 1e-6;
            let lo = transform_point(&face.offset(&-d), &field, &id).point;
            let hi = transform_point(&face.offset(&d), &field, &id).point;
            assert!(lo.distance(&hi) < 1e-4);
        }
    }

    #[test]
    fn slices_follow_layout_and_bounds() {
        let g = GridSpec::new(Point3::ORIGIN, [1.0, 2.0, 3.0], [3, 4, 5]).unwrap();
        let s = extract_slice(&g, Axis::Z, 2, |i| i as f32).unwrap();
        assert_eq!(s.dims, [3, 4]);
        assert_eq!(s.spacing, [1.0, 2.0]);
        assert_eq!(s.data[0], g.linear_index(0, 0, 2) as f32);
        assert_eq!(s.data[4], g.linear_index(1, 1, 2) as f32);
        let x = extract_slice(&g, Axis::X, 1, |i| i as f32).unwrap();
        assert_eq!(x.dims, [4, 5]);
        assert!(matches!(extract_slice(&g, Axis::Y, 4, |_| 0.0), Err(FieldError::SliceOutOfRange { len: 4, .. })));
    }
}
