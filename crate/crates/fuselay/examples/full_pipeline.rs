//! The whole pipeline end to end: simulate a scenario, initialize, run the
//! two-layer estimator, and evaluate the fused trajectory against ground
//! truth and against raw GNSS.
//!
//! ```bash
//! cargo run --release --example full_pipeline
//! ```

use fuselay::config::Config;
use fuselay::pipeline::{cmd_run, cmd_simulate, RunOptions};

fn main() {
    let dir = std::env::temp_dir().join("fuselay_example_pipeline");
    let _ = std::fs::remove_dir_all(&dir);

    let mut cfg = Config::new();
    cfg.set("trajectory.duration", 20.0)
        .set(
            "trajectory.waypoints",
            "0,0,1.2,0 ; 24,4,1.2,0 ; 44,16,1.6,0 ; 56,36,1.2,0 ; 60,60,1.2,0 ; 56,84,1.4,0 ; 44,104,1.2,0",
        )
        .set("noise.seed", 1)
        .set("tracks.landmark_count", 900)
        .set("tracks.corridor_radius", 24)
        .set("calib.t_bg", "0.3,0.0,0.1");

    let t0 = std::time::Instant::now();
    cmd_simulate(&cfg, &dir).unwrap();
    println!("simulate: {:.2}s", t0.elapsed().as_secs_f64());

    let t1 = std::time::Instant::now();
    let summary = cmd_run(&dir, &dir.join("run"), &RunOptions::default()).unwrap();
    println!(
        "run: {:.2}s ({} keyframes, {:.0} ms/keyframe)",
        t1.elapsed().as_secs_f64(),
        summary.keyframes,
        1000.0 * t1.elapsed().as_secs_f64() / summary.keyframes.max(1) as f64
    );
    if let Some(report) = &summary.init_report {
        println!(
            "init: scale error {:.4}% after the joint refinement",
            report.scale_error_post_map.unwrap_or(f64::NAN)
        );
    }

    let truth = fuselay::io::read_trajectory(&dir.join("groundtruth.tum")).unwrap();
    let fused = fuselay::io::read_trajectory(&dir.join("run/fused_trajectory.tum")).unwrap();
    let stats = fuselay::metrics::ate(&fused, &truth).unwrap();
    println!(
        "fused ATE: mean {:.4} max {:.4} p95 {:.4} over {} poses",
        stats.mean, stats.max, stats.p95, stats.matched
    );

    let inner = fuselay::io::read_trajectory(&dir.join("run/inner_trajectory.tum")).unwrap();
    let istats = fuselay::metrics::ate(&inner, &truth).unwrap();
    println!("inner ATE: mean {:.4} max {:.4}", istats.mean, istats.max);

    // Raw GNSS for reference: it measures the antenna, so compare against
    // the true antenna track.
    let gnss = fuselay::io::read_gnss(
        &dir.join("gnss.csv"),
        nalgebra::Vector3::new(0.05, 0.05, 0.05),
    )
    .unwrap();
    let lever = nalgebra::Vector3::new(0.3, 0.0, 0.1);
    let mut raw = 0.0;
    for s in &gnss {
        let g = truth
            .iter()
            .min_by_key(|t| (t.t_ns - s.t_ns).abs())
            .unwrap();
        raw += (s.position - (g.pose.translation + g.pose.rotation * lever)).norm();
    }
    println!("raw GNSS mean error: {:.4}", raw / gnss.len() as f64);
    println!("\noutputs in {}", dir.join("run").display());
}
