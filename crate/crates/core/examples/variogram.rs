//! Empirical variograms and kernel estimation from landmark displacements.
//!
//! cargo run -p gpreg --example variogram

use gpreg::eval::{generate_synthetic_case, SyntheticSpec};
use gpreg::{compute_displacements, estimate_kernels, fit_affine, AxisKernels, KernelFamily, KernelSpec, VariogramSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = KernelSpec::with_effective_range(KernelFamily::Gaussian, 4.0, 25.0, 0.1);
    let spec = SyntheticSpec {
        seed: 3,
        n_landmarks: 150,
        kernels: Some(AxisKernels::uniform(truth)),
        eval_fraction: 0.0,
        ..Default::default()
    };
    let landmarks = generate_synthetic_case(&spec)?.all_landmarks();
    let affine = fit_affine(&landmarks)?;
    let observations = compute_displacements(&landmarks, &affine)?;

    let estimate = estimate_kernels(&observations, &VariogramSettings::default())?;
    println!("generating kernel: {truth}");
    for export in &estimate.exports {
        println!("\naxis {:?}: {} cloud points, bin half-width {:.2} mm", export.axis, export.cloud_points, export.delta);
        for bin in export.bins.iter().take(8) {
            println!("  h = {:>6.2} mm  gamma = {:.3}  (n = {})", bin.h_mean, bin.gamma_hat, bin.count);
        }
        if let Some(m) = &export.model {
            println!("  fitted: {m}, effective range {:.1} mm", m.effective_range());
        }
    }
    println!("\nestimated kernels:");
    println!("  x: {}\n  y: {}\n  z: {}", estimate.kernels.x, estimate.kernels.y, estimate.kernels.z);
    Ok(())
}
