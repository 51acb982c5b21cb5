//! Fits the global affine to a landmark set and reports per-landmark residuals.
//!
//! cargo run -p gpreg --example affine

use gpreg::eval::{generate_synthetic_case, random_affine, SyntheticSpec};
use gpreg::{compute_displacements, fit_affine, Point3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = random_affine(7, 2.0, Point3::new(50.0, 50.0, 50.0));
    let spec = SyntheticSpec { seed: 7, n_landmarks: 30, affine: truth, eval_fraction: 0.0, ..Default::default() };
    let landmarks = generate_synthetic_case(&spec)?.all_landmarks();

    let affine = fit_affine(&landmarks)?;
    println!("true affine   {:?}", truth.to_row_major().map(|v| (v * 1e4).round() / 1e4));
    println!("fitted affine {:?}", affine.to_row_major().map(|v| (v * 1e4).round() / 1e4));
    println!("residual sum of squares: {:.3} mm²", affine.residual_sum_of_squares(&landmarks));

    // What is left after the affine is the non-linear part the GPs model.
    let residuals = compute_displacements(&landmarks, &affine)?;
    for (pair, obs) in landmarks.iter().zip(&residuals).take(5) {
        println!("landmark {:>2}: residual displacement {:>6.3} mm", pair.id, obs.d.norm());
    }
    Ok(())
}
