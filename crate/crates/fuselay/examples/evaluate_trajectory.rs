//! Trajectory evaluation: absolute trajectory error statistics and
//! closed-form alignment between two TUM-format files.
//!
//! ```bash
//! cargo run --release --example evaluate_trajectory -- estimate.tum truth.tum
//! ```
//!
//! Without arguments, a demonstration pair is generated on the fly.

use fuselay::io::TrajectoryRecord;
use fuselay::metrics::{self, AlignDof};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (est, truth) = if args.len() == 2 {
        let est = fuselay::io::read_trajectory(&PathBuf::from(&args[0])).expect("estimate");
        let truth = fuselay::io::read_trajectory(&PathBuf::from(&args[1])).expect("truth");
        (est, truth)
    } else {
        demo_pair()
    };

    let stats = metrics::ate(&est, &truth).expect("overlapping timestamps");
    println!("absolute trajectory error (no alignment):");
    print!("{}", stats.render());

    // For estimators whose frame is arbitrary, evaluate after alignment too.
    for (dof, name) in [
        (AlignDof::Yaw4Dof, "yaw+translation"),
        (AlignDof::Se3, "SE(3)"),
        (AlignDof::Sim3, "Sim(3)"),
    ] {
        match metrics::align_similarity(&est, &truth, dof) {
            Ok(t) => {
                let aligned = t.apply(&est);
                let s = metrics::ate(&aligned, &truth).unwrap();
                println!(
                    "after {name} alignment: mean {:.4}, max {:.4} (scale {:.4})",
                    s.mean, s.max, t.scale
                );
            }
            Err(e) => println!("{name} alignment failed: {e}"),
        }
    }
}

fn demo_pair() -> (Vec<TrajectoryRecord>, Vec<TrajectoryRecord>) {
    use fuselay::geometry::{so3_exp, yaw_quat, Pose};
    use nalgebra::Vector3;
    println!("no files given, using a generated demonstration pair\n");
    let truth: Vec<TrajectoryRecord> = (0..200)
        .map(|k| {
            let t = k as f64 * 0.05;
            TrajectoryRecord {
                t_ns: (t * 1e9) as i64,
                pose: Pose::new(
                    so3_exp(&Vector3::new(0.0, 0.0, 0.2 * t)),
                    Vector3::new(10.0 * (0.2 * t).sin(), 5.0 * t.cos() - 5.0, 1.0),
                ),
            }
        })
        .collect();
    // The "estimate": truth in a frame rotated 10 degrees with a 2 m offset.
    let q = yaw_quat(-(10.0f64.to_radians()));
    let est = truth
        .iter()
        .map(|r| TrajectoryRecord {
            t_ns: r.t_ns,
            pose: Pose::new(
                q * r.pose.rotation,
                q * r.pose.translation + Vector3::new(2.0, -1.0, 0.1),
            ),
        })
        .collect();
    (est, truth)
}
