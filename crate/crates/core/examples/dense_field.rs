//! Full pipeline on a synthetic volume pair: fit, dense field, uncertainty,
//! warp, then write everything in the on-disk formats.
//!
//! cargo run -p gpreg --example dense_field [-- OUT_DIR]

use std::path::PathBuf;

use gpreg::eval::{generate_synthetic_case, random_affine, SyntheticSpec, VolumeSpec};
use gpreg::io::{self, ModelBundle};
use gpreg::{extract_slice, warp_volume, Axis, Point3, Registration, RegistrationConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gpreg-dense-field"));
    std::fs::create_dir_all(&out)?;

    let spec = SyntheticSpec {
        seed: 5,
        n_landmarks: 40,
        affine: random_affine(5, 1.0, Point3::new(50.0, 50.0, 50.0)),
        eval_fraction: 0.0,
        volume: Some(VolumeSpec { dims: [32, 32, 32] }),
        ..Default::default()
    };
    let case = generate_synthetic_case(&spec)?;
    let landmarks = case.all_landmarks();
    let volumes = case.volumes.expect("volume requested");
    let grid = volumes.pre.grid;

    let reg = Registration::fit(&landmarks, &RegistrationConfig::default())?;
    println!("kernels ({:?}): x {}", reg.kernel.source, reg.kernels().x);
    let (field, uncertainty) = reg.field_and_uncertainty(&grid);

    let peak = uncertainty.argmax();
    let peak_at = grid.voxel_center_at(peak);
    println!(
        "most uncertain voxel {peak} at ({:.1}, {:.1}, {:.1}) mm, variance {:?}",
        peak_at.x, peak_at.y, peak_at.z, uncertainty.variance[peak]
    );

    let warped = warp_volume(&volumes.pre, &field, &reg.affine.transform)?;
    let outside = warped.valid.iter().filter(|ok| !**ok).count();
    println!("warped volume: {outside} voxels sampled outside the source");

    let mid = grid.dims[2] / 2;
    let slice = extract_slice(&grid, Axis::Z, mid, |i| field.vectors[i].norm() as f32)?;
    let (lo, hi) = slice.min_max();
    println!("|d| on z-slice {mid}: {lo:.3}..{hi:.3} mm");

    io::write_landmarks(&out.join("landmarks.json"), &landmarks)?;
    io::write_field(&out.join("field.raw"), &field)?;
    io::write_uncertainty(&out.join("uncertainty.raw"), &uncertainty)?;
    io::write_volume(&out.join("warped.raw"), &warped.volume)?;
    io::write_model_bundle(&out.join("model.json"), &ModelBundle::from_registration(&reg, &landmarks))?;

    // The bundle alone is enough to rebuild the same field.
    let reloaded = io::read_model_bundle(&out.join("model.json"))?.to_registration()?;
    let dev = reloaded.dense_field(&grid).max_abs_difference(&field);
    println!("wrote {} (reload deviation {dev:.1e} mm)", out.display());
    Ok(())
}
