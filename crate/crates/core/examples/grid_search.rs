//! Kernel selection by cross-validated grid search.
//!
//! cargo run -p gpreg --example grid_search

use gpreg::eval::{generate_synthetic_case, SyntheticSpec};
use gpreg::search::DEFAULT_CV_SEED;
use gpreg::{compute_displacements, fit_affine, grid_search, GridConfig, SearchGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for n in [30, 80] {
        let spec = SyntheticSpec { seed: 11, n_landmarks: n, eval_fraction: 0.0, ..Default::default() };
        let landmarks = generate_synthetic_case(&spec)?.all_landmarks();
        let observations = compute_displacements(&landmarks, &fit_affine(&landmarks)?)?;

        let grid = SearchGrid::resolve(&GridConfig::default(), &observations)?;
        let result = grid_search(&grid, &observations, DEFAULT_CV_SEED)?;
        println!("{n} landmarks, protocol {}, {} candidates", result.protocol, result.candidates.len());

        let mut ranked: Vec<_> = result.candidates.iter().filter_map(|c| Some((c.mean_error?, &c.kernels))).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (error, kernels) in ranked.iter().take(3) {
            println!("  cv error {error:.4} mm  x: {}", kernels.x);
        }
        println!("  selected #{} with error {:.4} mm\n", result.selected_index, result.selected_error);
    }
    Ok(())
}
