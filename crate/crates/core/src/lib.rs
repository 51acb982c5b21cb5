//! Landmark-driven deformable registration.
//!
//! Sparse corresponding landmarks between two volumes are pre-aligned with a
//! least-squares affine map; the remaining per-landmark displacements are
//! interpolated into a dense field by three independent Gaussian processes,
//! one per axis. The GP posterior variance gives a voxelwise uncertainty map
//! that can guide a user to place further landmarks where the field is least
//! trustworthy.

pub mod affine;
pub mod eval;
pub mod field;
pub mod gp;
pub mod io;
pub mod registration;
pub mod search;
pub mod types;
pub mod variogram;
mod optim;

#[cfg(test)]
mod oracle;

pub use affine::{fit_affine, AffineError, AffineTransform};
pub use field::{
    extract_slice, generate_dense_field, generate_field_and_uncertainty, generate_uncertainty_map, transform_point, warp_volume,
    DenseField, FieldError, Slice, UncertaintyMap, Volume,
};
pub use gp::{AxisKernels, DisplacementGp, GpAxisModel, GpError, GpPrediction, KernelFamily, KernelSpec, TpsModel};
pub use types::{
    compute_displacements, Axis, DisplacementObservation, GridSpec, LandmarkPair, LandmarkSet, LandmarkSource, Point3,
};
pub use search::{choose_protocol, grid_search, CvProtocol, CvResult, GridConfig, SearchError, SearchGrid};
pub use variogram::{estimate_kernels, VariogramSettings};
pub use registration::{KernelChoice, KernelMode, KernelSource, Registration, RegistrationConfig, RegistrationError};
