//! Runs the evaluation protocol over a batch of synthetic cases and prints the
//! comparison table.
//!
//! cargo run -p gpreg --example evaluation

use gpreg::eval::{self, EvalConfig, SyntheticSpec};
use gpreg::Point3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = EvalConfig::default();
    let mut reports = Vec::new();
    for seed in 0..4 {
        let spec = SyntheticSpec {
            seed,
            n_landmarks: 40 + 30 * seed as usize,
            affine: eval::random_affine(seed, 1.0, Point3::new(50.0, 50.0, 50.0)),
            ..Default::default()
        };
        let case = eval::generate_synthetic_case(&spec)?;
        reports.push(eval::run_protocol(&case, &config)?);
    }
    println!("{}", eval::render_report(&reports));
    let json = gpreg::io::to_json_pretty(&eval::report_document(&reports));
    println!("report document, {} bytes:", json.len());
    println!("{}\n...", json.lines().take(12).collect::<Vec<_>>().join("\n"));
    Ok(())
}
