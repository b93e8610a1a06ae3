//! Huber-bounded influence of a GNSS outlier: a single 30-metre spike in the
//! position stream barely moves the fused trajectory.
//!
//! ```bash
//! cargo run --release --example gnss_outlier_rejection
//! ```

use fuselay::config::Config;
use fuselay::pipeline::{cmd_run, cmd_simulate, RunOptions};
use nalgebra::Vector3;

fn main() {
    let dir = std::env::temp_dir().join("fuselay_example_spike");
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = Config::new();
    cfg.set("trajectory.duration", 30.0)
        .set(
            "trajectory.waypoints",
            "0,0,1.2,0 ; 24,4,1.2,0 ; 44,16,1.6,0 ; 56,36,1.2,0 ; 60,60,1.2,0 ; 56,84,1.4,0 ; 44,104,1.2,0",
        )
        .set("noise.seed", 5)
        .set("noise.gnss_pos_sigma", "0.2,0.2,0.2")
        .set("noise.gnss_vel_sigma", "0.05,0.05,0.05")
        .set("tracks.landmark_count", 900)
        .set("tracks.corridor_radius", 24)
        .set("calib.t_bg", "0.3,0.0,0.1");
    cmd_simulate(&cfg, &dir).unwrap();

    // Corrupt the GNSS sample nearest t = 15 s by 30 m East.
    let gnss_path = dir.join("gnss.csv");
    let mut gnss = fuselay::io::read_gnss(&gnss_path, Vector3::new(0.05, 0.05, 0.05)).unwrap();
    let spike_t = 15_000_000_000i64;
    let idx = gnss
        .iter()
        .enumerate()
        .min_by_key(|(_, s)| (s.t_ns - spike_t).abs())
        .map(|(i, _)| i)
        .unwrap();
    gnss[idx].position.x += 30.0;
    let spike_t_ns = gnss[idx].t_ns;
    fuselay::io::write_gnss(&gnss, &gnss_path).unwrap();
    println!(
        "injected a +30 m East spike at t = {:.2} s",
        spike_t_ns as f64 * 1e-9
    );

    let summary = cmd_run(&dir, &dir.join("run"), &RunOptions::default()).unwrap();
    let truth = fuselay::io::read_trajectory(&dir.join("groundtruth.tum")).unwrap();
    let fused = &summary.fused_trajectory;
    let stats = fuselay::metrics::ate(fused, &truth).unwrap();
    let at_spike = fused
        .iter()
        .min_by_key(|r| (r.t_ns - spike_t_ns).abs())
        .unwrap();
    let g = truth
        .iter()
        .min_by_key(|r| (r.t_ns - at_spike.t_ns).abs())
        .unwrap();
    println!(
        "fused error at the spiked node: {:.3} m; trajectory-wide mean {:.3} m, max {:.3} m",
        (at_spike.pose.translation - g.pose.translation).norm(),
        stats.mean,
        stats.max
    );
}
