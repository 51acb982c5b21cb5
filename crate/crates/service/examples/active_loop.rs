//! Uncertainty-guided landmark placement against a simulated expert.
//!
//! The "expert" knows the true deformation of a synthetic case. Each round the
//! session reports its most uncertain voxel, the expert annotates the nearest
//! held-back feature there, and the held-out error is tracked.
//!
//! cargo run -p gpreg-service --example active_loop

use gpreg::eval::{self, SyntheticSpec};
use gpreg::io::ProjectConfig;
use gpreg::{GridSpec, KernelMode, LandmarkPair, Point3};
use gpreg_service::session::{Session, SessionInputs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec {
        seed: 21,
        n_landmarks: 120,
        affine: eval::random_affine(21, 1.0, Point3::new(50.0, 50.0, 50.0)),
        eval_fraction: 0.0,
        ..Default::default()
    };
    let case = eval::generate_synthetic_case(&spec)?;
    let all: Vec<LandmarkPair> = case.all_landmarks().iter().copied().collect();
    // 15 initial landmarks, 70 annotation candidates, 35 held out for scoring.
    let (initial, rest) = all.split_at(15);
    let (pool, held_out) = rest.split_at(70);
    let mut pool = pool.to_vec();

    let config = ProjectConfig {
        grid: Some(GridSpec::new(Point3::ORIGIN, [5.0; 3], [21, 21, 21])?),
        kernel_mode: KernelMode::Grid,
        freeze_affine: true,
        ..Default::default()
    };
    let session = Session::create("demo", SessionInputs { landmarks: initial.iter().copied().collect(), config, volumes: Default::default() })?;

    let held_out_error = |s: &Session| -> f64 {
        let reg = &s.snapshot().registration;
        held_out.iter().map(|p| reg.transform_point(&p.pre).distance(&p.post)).sum::<f64>() / held_out.len() as f64
    };
    println!("round | landmarks | peak trace (mm²) | added at            | held-out error (mm)");
    println!("    0 | {:>9} | {:>16} | {:>19} | {:.3}", initial.len(), "", "", held_out_error(&session));

    for round in 1..=10 {
        let snap = session.snapshot();
        let dense = snap.dense();
        let peak = dense.uncertainty.argmax();
        let at = snap.grid.voxel_center_at(peak);

        let nearest = (0..pool.len()).min_by(|&a, &b| pool[a].pre.distance(&at).total_cmp(&pool[b].pre.distance(&at))).expect("pool not empty");
        let pick = pool.swap_remove(nearest);
        let added = session.add_landmark(pick.pre, pick.post)?;
        println!(
            "{round:>5} | {:>9} | {:>16.3} | {:>19} | {:.3}",
            added.summary.n_landmarks,
            dense.uncertainty.trace[peak],
            format!("({:.0}, {:.0}, {:.0})", pick.pre.x, pick.pre.y, pick.pre.z),
            held_out_error(&session)
        );
    }

    // Undoing the last edit restores the previous revision's field.
    let last = *session.snapshot().summary().manual_ids.last().expect("manual landmarks were added");
    let removed = session.remove_landmark(last)?;
    println!("removed landmark {} -> revision {}", removed.removed.id, removed.revision);
    Ok(())
}
