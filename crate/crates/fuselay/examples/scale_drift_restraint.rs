//! GNSS velocity as a scale anchor: on a constant-velocity run the monocular
//! VI scale is unobservable and drifts; the velocity factors in the inner
//! window restrain it.
//!
//! Runs the same 120-second highway-like scenario twice, with the GNSS
//! velocity factors enabled and disabled, and reports the worst
//! window-averaged scale error of each run.
//!
//! ```bash
//! cargo run --release --example scale_drift_restraint
//! ```

use fuselay::config::Config;
use fuselay::pipeline::{cmd_run, cmd_simulate, RunOptions};

fn scenario(use_gnss_velocity: bool) -> Config {
    let mut cfg = Config::new();
    cfg.set("trajectory.duration", 120.0)
        .set(
            "trajectory.waypoints",
            "0,0,1.2,0 ; 150,2,1.2,0 ; 300,-2,1.2,0 ; 450,2,1.2,0 ; 600,0,1.2,0",
        )
        .set("noise.seed", 11)
        .set("noise.gyro_white", 1.7e-4)
        .set("noise.accel_white", 2.0e-3)
        .set("noise.gyro_walk", 1.9e-5)
        .set("noise.accel_walk", 3.0e-3)
        .set("noise.initial_gyro_bias", "0.002,-0.001,0.003")
        .set("noise.initial_accel_bias", "0.06,0.03,-0.04")
        .set("noise.gnss_pos_sigma", "0.2,0.2,0.2")
        .set("noise.gnss_vel_sigma", "0.02,0.02,0.02")
        .set("noise.pixel_sigma", 0.0022)
        .set("tracks.landmark_count", 1800)
        .set("tracks.corridor_radius", 24)
        .set("tracks.max_depth", 80)
        .set("inner.use_gnss_velocity", use_gnss_velocity)
        .set("calib.t_bg", "0.3,0.0,0.1");
    cfg
}

fn main() {
    for mode in [true, false] {
        let dir = std::env::temp_dir().join(format!("fuselay_example_drift_{mode}"));
        let _ = std::fs::remove_dir_all(&dir);
        cmd_simulate(&scenario(mode), &dir).unwrap();
        let t0 = std::time::Instant::now();
        let summary = cmd_run(
            &dir,
            &dir.join("run"),
            &RunOptions {
                skip_init: true,
                ..Default::default()
            },
        )
        .unwrap();
        let truth = fuselay::io::read_trajectory(&dir.join("groundtruth.tum")).unwrap();
        let pos_at = |t_ns: i64| {
            truth
                .iter()
                .min_by_key(|r| (r.t_ns - t_ns).abs())
                .map(|r| r.pose.translation)
                .unwrap()
        };
        let mut max_err: f64 = 0.0;
        for (t0_ns, t1_ns, span_est) in &summary.window_spans {
            let span_true = (pos_at(*t1_ns) - pos_at(*t0_ns)).norm();
            if span_true < 1.0 {
                continue;
            }
            max_err = max_err.max(100.0 * (span_est / span_true - 1.0).abs());
        }
        println!(
            "gnss velocity factors {}: worst window scale error {max_err:.3}% ({} keyframes, {:.0}s)",
            if mode { "enabled " } else { "disabled" },
            summary.keyframes,
            t0.elapsed().as_secs_f64()
        );
    }
}
