//! Three-step initialization on a simulated scenario: GNSS-velocity-aided
//! visual odometry, numerical world-frame alignment, and joint VI-GNSS MAP
//! refinement. Prints the per-step scale estimates and the recovered
//! alignment.
//!
//! ```bash
//! cargo run --release --example initialize_alignment
//! ```

use fuselay::config::Config;
use fuselay::geometry::decompose_ypr;
use fuselay::pipeline::{cmd_init, cmd_simulate};

fn main() {
    let dir = std::env::temp_dir().join("fuselay_example_init");
    let _ = std::fs::remove_dir_all(&dir);

    let mut cfg = Config::new();
    cfg.set("trajectory.duration", 20)
        .set(
            "trajectory.waypoints",
            "0,0,1.2,0 ; 24,4,1.2,0 ; 44,16,1.6,0 ; 56,36,1.2,0 ; 60,60,1.2,0",
        )
        .set("noise.seed", 42)
        .set("tracks.landmark_count", 900)
        .set("tracks.corridor_radius", 24)
        .set("calib.t_bg", "0.3,0.0,0.1");

    println!("simulating scenario in {}", dir.display());
    cmd_simulate(&cfg, &dir).expect("simulation");

    match cmd_init(&dir) {
        Ok(report) => {
            println!("\ninitialization report");
            println!("---------------------");
            print!("{}", report.render());
            if let (Some(pre), Some(post), Some(map)) = (
                report.scale_error_pre_ba,
                report.scale_error_post_ba,
                report.scale_error_post_map,
            ) {
                println!(
                    "\nscale error vs truth: pre-BA {pre:.4}%, post-BA {post:.4}%, post-MAP {map:.5}%"
                );
            }
            println!(
                "first-guess attitude: yaw {:.3}°, pitch {:.3}°, roll {:.3}°",
                report.yaw_first_guess.to_degrees(),
                report.pitch_first_guess.to_degrees(),
                report.roll_first_guess.to_degrees()
            );
            let _ = decompose_ypr;
        }
        Err(e) => {
            eprintln!("initialization failed: {e}");
            std::process::exit(3);
        }
    }
}
