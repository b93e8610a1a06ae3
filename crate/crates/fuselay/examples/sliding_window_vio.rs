//! The inner layer by itself: stream simulated frames through the sliding
//! window, watch the keyframe policy, per-solve costs, and marginalization
//! keep the window bounded.
//!
//! ```bash
//! cargo run --release --example sliding_window_vio
//! ```

use std::collections::BTreeMap;

use fuselay::config::Config;
use fuselay::inner::{FrameInput, InnerConfig, KeyframeDecision, SlidingWindow};
use fuselay::pipeline::{cmd_simulate, load_scenario};
use nalgebra::{Vector2, Vector3};

fn main() {
    let dir = std::env::temp_dir().join("fuselay_example_vio");
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = Config::new();
    cfg.set("trajectory.duration", 12.0)
        .set(
            "trajectory.waypoints",
            "0,0,1.2,0 ; 24,4,1.2,0 ; 44,16,1.6,0 ; 56,36,1.2,0 ; 60,60,1.2,0",
        )
        .set("noise.seed", 9)
        .set("tracks.landmark_count", 900)
        .set("tracks.corridor_radius", 24);
    cmd_simulate(&cfg, &dir).unwrap();
    let scenario = load_scenario(&dir).unwrap();

    let mut obs_by_frame: BTreeMap<usize, Vec<(u64, Vector2<f64>)>> = BTreeMap::new();
    for t in &scenario.tracks {
        for o in &t.observations {
            obs_by_frame
                .entry(o.frame_id)
                .or_default()
                .push((t.id, o.uv));
        }
    }

    let mut window = SlidingWindow::new(InnerConfig {
        t_bc: scenario.calibration.t_bc,
        gravity: scenario.calibration.gravity,
        imu_noise: scenario.calibration.imu_noise,
        ..Default::default()
    });

    // Bootstrap the first two frames from ground truth for a clean start.
    let truth = scenario.ground_truth.as_ref().unwrap();
    let mut prev_t: Option<i64> = None;
    for (frame_id, t_ns) in scenario.frames.iter().take(2) {
        let rec = truth.iter().min_by_key(|r| (r.t_ns - t_ns).abs()).unwrap();
        let idx = truth.partition_point(|r| r.t_ns < rec.t_ns);
        let (lo, hi) = (idx.saturating_sub(1), (idx + 1).min(truth.len() - 1));
        let velocity = (truth[hi].pose.translation - truth[lo].pose.translation)
            / (((truth[hi].t_ns - truth[lo].t_ns) as f64) * 1e-9).max(1e-9);
        let imu_segment: Vec<_> = match prev_t {
            Some(t0) => scenario
                .imu
                .iter()
                .filter(|s| s.t_ns >= t0 && s.t_ns <= *t_ns)
                .copied()
                .collect(),
            None => Vec::new(),
        };
        prev_t = Some(*t_ns);
        window
            .push_initialized_frame(
                FrameInput {
                    frame_id: *frame_id,
                    t_ns: *t_ns,
                    observations: obs_by_frame.get(frame_id).cloned().unwrap_or_default(),
                    imu_segment,
                    gnss_velocity: None,
                },
                fuselay::inner::FrameState {
                    t_ns: *t_ns,
                    position: rec.pose.translation,
                    attitude: rec.pose.rotation,
                    velocity,
                    gyro_bias: Vector3::zeros(),
                    accel_bias: Vector3::zeros(),
                },
            )
            .unwrap();
    }
    window.triangulate_new_landmarks();
    window.install_gauge_prior(0.01, 0.1);

    let mut keyframes = 0;
    let mut discarded = 0;
    for (frame_id, t_ns) in scenario.frames.iter().skip(2) {
        let imu_segment: Vec<_> = scenario
            .imu
            .iter()
            .filter(|s| s.t_ns >= prev_t.unwrap() && s.t_ns <= *t_ns)
            .copied()
            .collect();
        prev_t = Some(*t_ns);
        let decision = window
            .add_frame(FrameInput {
                frame_id: *frame_id,
                t_ns: *t_ns,
                observations: obs_by_frame.get(frame_id).cloned().unwrap_or_default(),
                imu_segment,
                gnss_velocity: fuselay::io::interpolate_gnss(&scenario.gnss, *t_ns, 2.0).ok(),
            })
            .unwrap();
        match decision {
            KeyframeDecision::Keyframe => {
                keyframes += 1;
                let outcome = window.optimize_window().unwrap();
                while window.needs_marginalization() {
                    window.marginalize_oldest().unwrap();
                }
                if keyframes % 20 == 0 {
                    println!(
                        "t={:5.2}s  keyframes {keyframes:3}  window {}  cost {:.3e}  ({} iters)",
                        *t_ns as f64 * 1e-9,
                        window.num_keyframes(),
                        outcome.report.final_cost,
                        outcome.report.iterations
                    );
                }
            }
            KeyframeDecision::Discarded => discarded += 1,
        }
    }

    // Compare the final window states against ground truth.
    let mut worst = 0.0f64;
    for state in window.states() {
        let rec = truth
            .iter()
            .min_by_key(|r| (r.t_ns - state.t_ns).abs())
            .unwrap();
        worst = worst.max((state.position - rec.pose.translation).norm());
    }
    println!(
        "\n{keyframes} keyframes, {discarded} discarded frames, {} records published",
        window.take_published().len()
    );
    println!("worst in-window position error vs truth: {worst:.4} m");
}
