//! Three-step MAP initialization: GNSS-velocity-aided sliding-window visual
//! odometry with metric scale, numerical world-frame alignment, and joint
//! VI-GNSS MAP refinement.

mod align;
mod ba;
mod sfm;

pub use align::{scale_from_gnss_velocity, solve_roll_pitch, solve_yaw, AlignError, ScalePair};
pub use ba::{
    init_ba, vi_gnss_map_init, DisplacementFactor, InitBaOptions, MapInitInput, MapInitOptions,
    MapPreintFactor, MapTranslationFactor,
};
pub use sfm::{pnp, relative_pose_7pt, triangulate, RansacConfig, RelativePose, SfmError};

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::simulator::{FeatureTrack, GnssSample};
use crate::solver::SolverError;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("select_init_pair: {gate} gate rejected every pair")]
    GateFailure { gate: String },
    #[error("structure-from-motion failed: {0}")]
    Sfm(#[from] SfmError),
    #[error("alignment failed: {0}")]
    Align(#[from] AlignError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("MAP refinement diverged (cost {cost:.3e} after {outer_iterations} outer iterations)")]
    Diverged { cost: f64, outer_iterations: usize },
    #[error("preintegration failed: {0}")]
    Preint(#[from] crate::preintegration::PreintError),
    #[error("{0}")]
    Window(String),
}

/// Quality gates for selecting the bootstrap frame pair.
#[derive(Debug, Clone)]
pub struct InitGates {
    pub min_tracked_points: usize,
    /// Mean normalized-plane displacement between the pair.
    pub min_mean_parallax: f64,
    /// Max per-axis GNSS position sigma at both frames.
    pub max_gnss_sigma: f64,
}

impl Default for InitGates {
    fn default() -> Self {
        Self {
            min_tracked_points: 30,
            min_mean_parallax: 0.0175,
            max_gnss_sigma: 1.0,
        }
    }
}

/// One frame of the init window: camera timestamp plus the GNSS sample
/// interpolated at it.
#[derive(Debug, Clone)]
pub struct InitFrame {
    pub frame_id: usize,
    pub t_ns: i64,
    pub gnss: GnssSample,
}

/// Landmark bookkeeping inside the init window.
#[derive(Debug, Clone, Copy)]
pub struct InitLandmark {
    /// Index of the anchor frame within the window.
    pub anchor: usize,
    pub inverse_depth: f64,
}

/// Fixed-length window for initialization. Track observations use
/// window-local frame indices.
#[derive(Debug, Clone)]
pub struct InitWindow {
    pub frames: Vec<InitFrame>,
    pub tracks: Vec<FeatureTrack>,
    /// Camera pose of each frame in the c0 frame; None until estimated.
    pub poses: Vec<Option<Pose>>,
    /// Landmark state per track index.
    pub landmarks: Vec<Option<InitLandmark>>,
    /// Metric scale: world distance = scale · c0 distance.
    pub scale: f64,
}

impl InitWindow {
    /// Assemble a window from global-frame tracks: observations are sliced
    /// to the window and reindexed to window-local frames.
    pub fn build(frames: Vec<InitFrame>, all_tracks: &[FeatureTrack]) -> Self {
        let ids: Vec<usize> = frames.iter().map(|f| f.frame_id).collect();
        let mut tracks = Vec::new();
        for t in all_tracks {
            let obs: Vec<_> = t
                .observations
                .iter()
                .filter_map(|o| {
                    ids.iter().position(|&id| id == o.frame_id).map(|local| {
                        crate::simulator::TrackObservation {
                            frame_id: local,
                            uv: o.uv,
                        }
                    })
                })
                .collect();
            if obs.len() >= 2 {
                tracks.push(FeatureTrack {
                    id: t.id,
                    landmark: t.landmark,
                    observations: obs,
                });
            }
        }
        let n = frames.len();
        let n_tracks = tracks.len();
        Self {
            frames,
            tracks,
            poses: vec![None; n],
            landmarks: vec![None; n_tracks],
            scale: 1.0,
        }
    }

    /// Tracks observed in both frames of a pair, with their pair of
    /// normalized observations.
    pub fn correspondences(
        &self,
        i: usize,
        j: usize,
    ) -> Vec<(usize, nalgebra::Vector2<f64>, nalgebra::Vector2<f64>)> {
        let mut out = Vec::new();
        for (ti, t) in self.tracks.iter().enumerate() {
            let a = t.observations.iter().find(|o| o.frame_id == i);
            let b = t.observations.iter().find(|o| o.frame_id == j);
            if let (Some(a), Some(b)) = (a, b) {
                out.push((ti, a.uv, b.uv));
            }
        }
        out
    }
}

/// Pair-selection gates: returns the earliest frame pair whose common track
/// count, mean parallax and GNSS quality all pass; None when no pair
/// qualifies.
pub fn select_init_pair(window: &InitWindow, gates: &InitGates) -> Option<(usize, usize)> {
    candidate_pairs(window, gates).into_iter().next()
}

/// All gate-passing pairs in selection order (earliest first).
pub fn candidate_pairs(window: &InitWindow, gates: &InitGates) -> Vec<(usize, usize)> {
    let n = window.frames.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if pair_gate_report(window, gates, i, j).is_none() {
                out.push((i, j));
            }
        }
    }
    out
}

/// Name of the first gate the pair fails, or None when it passes all gates.
fn pair_gate_report(
    window: &InitWindow,
    gates: &InitGates,
    i: usize,
    j: usize,
) -> Option<&'static str> {
    let corr = window.correspondences(i, j);
    if corr.len() < gates.min_tracked_points {
        return Some("track-count");
    }
    let mean_parallax =
        corr.iter().map(|(_, a, b)| (a - b).norm()).sum::<f64>() / corr.len() as f64;
    if mean_parallax < gates.min_mean_parallax {
        return Some("parallax");
    }
    let sigma_ok = |s: &GnssSample| s.pos_sigma.amax() <= gates.max_gnss_sigma;
    if !sigma_ok(&window.frames[i].gnss) || !sigma_ok(&window.frames[j].gnss) {
        return Some("gnss-quality");
    }
    None
}

/// Dominant failing gate over all pairs, for reporting.
pub fn dominant_failing_gate(window: &InitWindow, gates: &InitGates) -> String {
    let mut counts = std::collections::BTreeMap::new();
    let n = window.frames.len();
    for i in 0..n {
        for j in i + 1..n {
            if let Some(gate) = pair_gate_report(window, gates, i, j) {
                *counts.entry(gate).or_insert(0usize) += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by_key(|(_, c)| *c)
        .map(|(g, _)| g.to_string())
        .unwrap_or_else(|| "no-pairs".to_string())
}

/// Scale, world rotation, gyro bias and per-frame velocities produced by the
/// three-step initialization. The world correction starts at identity and is
/// refined online by the outer layer.
#[derive(Debug, Clone)]
pub struct WorldAlignment {
    pub scale: f64,
    pub q_w_c0: UnitQuaternion<f64>,
    pub gyro_bias: Vector3<f64>,
    /// World-frame velocity per window frame.
    pub velocities: Vec<Vector3<f64>>,
    pub q_w_w0: UnitQuaternion<f64>,
    /// Position of the c0 origin in the world frame (the ENU origin is the
    /// first GNSS fix, not the first camera).
    pub world_origin: Vector3<f64>,
}

/// Per-step scale estimates, timings and gate decisions.
#[derive(Debug, Clone, Default)]
pub struct InitReport {
    pub pair: Option<(usize, usize)>,
    pub scale_pre_ba: f64,
    pub scale_post_ba: f64,
    pub scale_post_map: f64,
    /// Metric first-to-last camera span implied by each stage's scale; the
    /// VO gauge is arbitrary, so scale accuracy is judged through these.
    pub span_pre_ba: f64,
    pub span_post_ba: f64,
    pub span_post_map: f64,
    /// Timestamps of the two frames the spans are measured between.
    pub span_first_t_ns: i64,
    pub span_last_t_ns: i64,
    /// Span errors in percent against ground truth, when available.
    pub scale_error_pre_ba: Option<f64>,
    pub scale_error_post_ba: Option<f64>,
    pub scale_error_post_map: Option<f64>,
    pub yaw_first_guess: f64,
    pub roll_first_guess: f64,
    pub pitch_first_guess: f64,
    pub t_init: f64,
    pub t_ba: f64,
    pub t_total: f64,
    pub map_outer_iterations: usize,
    pub gate_note: String,
}

/// Everything the three-step initialization needs.
pub struct InitInputs<'a> {
    /// Window-length frames with GNSS interpolated at each camera time.
    pub frames: Vec<InitFrame>,
    /// Feature tracks in global frame ids.
    pub tracks: &'a [FeatureTrack],
    /// IMU stream covering the window.
    pub imu: &'a [crate::simulator::ImuSample],
    pub q_b_c: UnitQuaternion<f64>,
    pub t_b_c: Vector3<f64>,
    pub t_b_g: Vector3<f64>,
    pub gravity: f64,
    pub imu_noise: crate::preintegration::ImuNoise,
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub gates: InitGates,
    pub ransac: RansacConfig,
    pub ba: ba::InitBaOptions,
    pub map: ba::MapInitOptions,
    pub min_triangulation_parallax: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            gates: InitGates::default(),
            ransac: RansacConfig::default(),
            ba: ba::InitBaOptions::default(),
            map: ba::MapInitOptions::default(),
            min_triangulation_parallax: 4e-3,
        }
    }
}

/// Pose every frame of the window by PnP from triangulated landmarks,
/// expanding outward from the bootstrap pair.
fn pose_remaining_frames(
    window: &mut InitWindow,
    pair: (usize, usize),
    min_parallax: f64,
) -> Result<(), InitError> {
    let n = window.frames.len();
    // Triangulate everything visible from currently posed frames.
    let triangulate_pass = |window: &mut InitWindow| {
        let poses: Vec<Pose> = window
            .poses
            .iter()
            .map(|p| p.unwrap_or(Pose::identity()))
            .collect();
        for ti in 0..window.tracks.len() {
            if window.landmarks[ti].is_some() {
                continue;
            }
            let obs: Vec<(usize, nalgebra::Vector2<f64>)> = window.tracks[ti]
                .observations
                .iter()
                .filter(|o| window.poses[o.frame_id].is_some())
                .map(|o| (o.frame_id, o.uv))
                .collect();
            if obs.len() < 2 {
                continue;
            }
            if let Ok(lambda) = triangulate(&poses, &obs, min_parallax) {
                window.landmarks[ti] = Some(InitLandmark {
                    anchor: obs[0].0,
                    inverse_depth: lambda,
                });
            }
        }
    };
    triangulate_pass(window);

    // Frames ordered by distance from the pair.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&k| {
        (k as i64 - pair.0 as i64)
            .abs()
            .min((k as i64 - pair.1 as i64).abs())
    });
    for k in order {
        if window.poses[k].is_some() {
            continue;
        }
        // Gather 3-D points (from anchors) observed in frame k.
        let mut points = Vec::new();
        let mut obs = Vec::new();
        for (ti, track) in window.tracks.iter().enumerate() {
            let Some(lm) = window.landmarks[ti] else {
                continue;
            };
            let Some(anchor_pose) = window.poses[lm.anchor] else {
                continue;
            };
            let Some(o_k) = track.observations.iter().find(|o| o.frame_id == k) else {
                continue;
            };
            let Some(o_a) = track.observations.iter().find(|o| o.frame_id == lm.anchor) else {
                continue;
            };
            let point = anchor_pose
                .transform_point(&(Vector3::new(o_a.uv.x, o_a.uv.y, 1.0) / lm.inverse_depth));
            points.push(point);
            obs.push(o_k.uv);
        }
        if points.len() >= 6 {
            let pose = pnp(&points, &obs)?;
            // Reject frames whose refined pose still reprojects badly; a
            // poisoned pose corrupts every later triangulation.
            let t_cw = pose.inverse();
            let mut rms = 0.0;
            for (pt, uv) in points.iter().zip(obs.iter()) {
                let pc = t_cw.transform_point(pt);
                if pc.z <= 1e-6 {
                    rms = f64::INFINITY;
                    break;
                }
                rms += (nalgebra::Vector2::new(pc.x / pc.z, pc.y / pc.z) - uv).norm_squared();
            }
            rms = (rms / points.len() as f64).sqrt();
            if rms < 0.02 {
                window.poses[k] = Some(pose);
                triangulate_pass(window);
            }
        }
    }
    Ok(())
}

/// Worst sigma-normalized disagreement between scaled visual displacements
/// and the trapezoidal GNSS displacements; None when no pair moves enough
/// to judge. `vel_sigma` is the per-axis GNSS velocity noise.
fn scale_consistency(pairs: &[ScalePair], s: f64, vel_sigma: f64) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for sp in pairs {
        let d_gnss = 0.5 * (sp.v_i + sp.v_j).norm() * sp.dt;
        if d_gnss < 0.02 {
            continue;
        }
        // The yardstick combines velocity noise with a coarse allowance for
        // visual-geometry error; the gate exists to catch catastrophically
        // wrong structure, not percent-level imperfection.
        let sigma_d = (0.5 * std::f64::consts::SQRT_2 * vel_sigma * sp.dt)
            .max(0.05 * d_gnss)
            .max(1e-4);
        let r = (s * sp.vo_displacement - d_gnss).abs() / sigma_d;
        worst = Some(worst.map_or(r, |w: f64| w.max(r)));
    }
    worst
}

/// Unscaled first-to-last camera distance over the posed window frames,
/// with the timestamps of the two endpoint frames.
fn window_span_with_times(window: &InitWindow) -> (f64, i64, i64) {
    let posed: Vec<(usize, &Pose)> = window
        .poses
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
        .collect();
    match (posed.first(), posed.last()) {
        (Some((ka, a)), Some((kb, b))) => (
            (b.translation - a.translation).norm(),
            window.frames[*ka].t_ns,
            window.frames[*kb].t_ns,
        ),
        _ => (0.0, 0, 0),
    }
}

fn window_span(window: &InitWindow) -> f64 {
    window_span_with_times(window).0
}

/// The three-step initialization: GNSS-velocity-aided VO with metric scale,
/// numerical world-frame alignment, and joint VI-GNSS MAP refinement.
pub fn run_initialization(
    inputs: &InitInputs,
    opts: &InitOptions,
) -> Result<(WorldAlignment, InitWindow, InitReport), InitError> {
    let t_start = std::time::Instant::now();
    let mut report = InitReport::default();
    let mut window = InitWindow::build(inputs.frames.clone(), inputs.tracks);
    if window.frames.len() < 2 {
        return Err(InitError::Window(
            "init window needs at least two frames".to_string(),
        ));
    }

    // Step 1a-1c: bootstrap pair, relative pose, PnP chain, metric scale.
    // Noisy tracks can hand the seven-point solver a bad geometry; candidate
    // pairs are tried in gate order until the scaled visual displacements
    // agree with the GNSS velocities.
    let candidates = candidate_pairs(&window, &opts.gates);
    if candidates.is_empty() {
        return Err(InitError::GateFailure {
            gate: dominant_failing_gate(&window, &opts.gates),
        });
    }
    let clean = window.clone();
    let mut chosen: Option<(usize, usize)> = None;
    let mut last_err: Option<InitError> = None;
    for pair in candidates.into_iter().take(6) {
        window = clean.clone();
        let corr = window.correspondences(pair.0, pair.1);
        let pairs: Vec<_> = corr.iter().map(|(_, a, b)| (*a, *b)).collect();
        let rel = match relative_pose_7pt(&pairs, &opts.ransac) {
            Ok(rel) => rel,
            Err(e) => {
                last_err = Some(e.into());
                continue;
            }
        };
        window.poses[pair.0] = Some(Pose::identity());
        window.poses[pair.1] = Some(Pose::new(rel.rotation, rel.translation));
        if let Err(e) = pose_remaining_frames(&mut window, pair, opts.min_triangulation_parallax) {
            last_err = Some(e);
            continue;
        }

        // Re-gauge so frame 0 is the identity (the c0 frame).
        if let Some(first) = window.poses[0] {
            let inv = first.inverse();
            for pose in window.poses.iter_mut() {
                if let Some(p) = pose {
                    *pose = Some(inv.compose(p));
                }
            }
        }

        // Metric scale from GNSS velocity, with a consistency check: the
        // per-pair displacement ratios must agree with one global scale.
        let mut scale_pairs = Vec::new();
        for k in 1..window.frames.len() {
            let (Some(pi), Some(pj)) = (window.poses[k - 1], window.poses[k]) else {
                continue;
            };
            let (gi, gj) = (&window.frames[k - 1].gnss, &window.frames[k].gnss);
            if !gi.velocity_valid || !gj.velocity_valid {
                continue;
            }
            scale_pairs.push(ScalePair {
                v_i: gi.velocity,
                v_j: gj.velocity,
                dt: (window.frames[k].t_ns - window.frames[k - 1].t_ns) as f64 * 1e-9,
                vo_displacement: (pj.translation - pi.translation).norm(),
            });
        }
        let s_ls = match scale_from_gnss_velocity(&scale_pairs) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e.into());
                continue;
            }
        };
        let vel_sigma = window
            .frames
            .iter()
            .map(|f| f.gnss.vel_sigma.amax())
            .fold(0.0f64, f64::max);
        if let Some(ratio) = scale_consistency(&scale_pairs, s_ls, vel_sigma) {
            if ratio > 8.0 {
                last_err = Some(InitError::Window(format!(
                    "pair ({}, {}): visual displacements {ratio:.1} sigma from GNSS velocity",
                    pair.0, pair.1
                )));
                continue;
            }
        }

        // The rough scale comes from the matched pair alone (step 1's
        // closed-form estimate); the bundle adjustment then fuses every
        // pair's velocity information jointly with the geometry.
        let pair_scale = {
            let (pi, pj) = (
                window.poses[pair.0].expect("pair posed"),
                window.poses[pair.1].expect("pair posed"),
            );
            let (gi, gj) = (&window.frames[pair.0].gnss, &window.frames[pair.1].gnss);
            scale_from_gnss_velocity(&[ScalePair {
                v_i: gi.velocity,
                v_j: gj.velocity,
                dt: (window.frames[pair.1].t_ns - window.frames[pair.0].t_ns) as f64 * 1e-9,
                vo_displacement: (pj.translation - pi.translation).norm(),
            }])
            .unwrap_or(s_ls)
        };
        window.scale = pair_scale;

        // Bundle-adjust and re-validate: a consistent window keeps the
        // optimized displacements on one global scale.
        report.scale_pre_ba = window.scale;
        let (span, t0s, t1s) = window_span_with_times(&window);
        report.span_pre_ba = window.scale * span;
        report.span_first_t_ns = t0s;
        report.span_last_t_ns = t1s;
        report.t_init = t_start.elapsed().as_secs_f64();
        if std::env::var("FUSELAY_LOG").is_ok() {
            eprintln!(
                "init: pair {:?} pair-scale {pair_scale:.5} ls-scale {s_ls:.5} span_pre {:.4}",
                pair, report.span_pre_ba
            );
        }
        if let Err(e) = ba::init_ba(&mut window, &opts.ba, &inputs.q_b_c, &inputs.t_b_c) {
            last_err = Some(e);
            continue;
        }
        let mut post_pairs = Vec::new();
        for k in 1..window.frames.len() {
            let (Some(pi), Some(pj)) = (window.poses[k - 1], window.poses[k]) else {
                continue;
            };
            let (gi, gj) = (&window.frames[k - 1].gnss, &window.frames[k].gnss);
            if !gi.velocity_valid || !gj.velocity_valid {
                continue;
            }
            post_pairs.push(ScalePair {
                v_i: gi.velocity,
                v_j: gj.velocity,
                dt: (window.frames[k].t_ns - window.frames[k - 1].t_ns) as f64 * 1e-9,
                vo_displacement: (pj.translation - pi.translation).norm(),
            });
        }
        if let Some(ratio) = scale_consistency(&post_pairs, window.scale, vel_sigma) {
            if ratio > 6.0 {
                last_err = Some(InitError::Window(format!(
                    "pair ({}, {}): bundle-adjusted window stays {ratio:.1} sigma off",
                    pair.0, pair.1
                )));
                continue;
            }
        }
        chosen = Some(pair);
        break;
    }
    let pair = chosen.ok_or_else(|| {
        last_err.unwrap_or(InitError::Window("no usable bootstrap pair".to_string()))
    })?;
    report.pair = Some(pair);
    report.t_init = t_start.elapsed().as_secs_f64();
    report.scale_post_ba = window.scale;
    report.span_post_ba = window.scale * window_span(&window);
    report.t_ba = t_start.elapsed().as_secs_f64() - report.t_init;
    if std::env::var("FUSELAY_LOG").is_ok() {
        eprintln!(
            "init: pair {:?}, scale {:.5} -> {:.5}, span {:.4} -> {:.4}",
            pair, report.scale_pre_ba, window.scale, report.span_pre_ba, report.span_post_ba
        );
    }

    // Step 2: numerical world-frame rotation.
    let posed: Vec<usize> = (0..window.frames.len())
        .filter(|&k| window.poses[k].is_some())
        .collect();
    let cam_positions: Vec<Vector3<f64>> = posed
        .iter()
        .map(|&k| window.poses[k].expect("posed").translation)
        .collect();
    let cam_attitudes: Vec<UnitQuaternion<f64>> = posed
        .iter()
        .map(|&k| window.poses[k].expect("posed").rotation)
        .collect();
    let gnss_positions: Vec<Vector3<f64>> = posed
        .iter()
        .map(|&k| window.frames[k].gnss.position)
        .collect();
    let mut yaw = solve_yaw(
        &cam_positions,
        &cam_attitudes,
        &gnss_positions,
        window.scale,
        &inputs.q_b_c,
        &inputs.t_b_c,
        &inputs.t_b_g,
        &UnitQuaternion::identity(),
    )?;

    // Accelerometer averaged over a short window around each frame, and
    // GNSS-velocity-derived motion acceleration by central differences over
    // a two-frame baseline (adjacent frames amplify velocity noise).
    let body_accels: Vec<Vector3<f64>> = posed
        .iter()
        .map(|&k| {
            let t = window.frames[k].t_ns;
            let idx = inputs.imu.partition_point(|s| s.t_ns < t);
            let lo = idx.saturating_sub(8);
            let hi = (idx + 8).min(inputs.imu.len());
            let slice = &inputs.imu[lo..hi];
            if slice.is_empty() {
                Vector3::zeros()
            } else {
                slice.iter().map(|s| s.accel).sum::<Vector3<f64>>() / slice.len() as f64
            }
        })
        .collect();
    // Differentiation half-width adapted to the velocity noise: wider
    // baselines keep the acceleration estimate's noise near 0.4 m/s² so the
    // gravity direction stays clean.
    let vel_sigma_max = window
        .frames
        .iter()
        .map(|f| f.gnss.vel_sigma.amax())
        .fold(0.0f64, f64::max);
    let frame_dt = if posed.len() >= 2 {
        ((window.frames[posed[1]].t_ns - window.frames[posed[0]].t_ns) as f64 * 1e-9).max(1e-3)
    } else {
        0.05
    };
    let half_width = ((std::f64::consts::SQRT_2 * vel_sigma_max / 0.4 / frame_dt).ceil() as usize)
        .clamp(2, posed.len().saturating_sub(1) / 2);
    let motion_accels: Vec<Vector3<f64>> = (0..posed.len())
        .map(|i| {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width).min(posed.len() - 1);
            if hi == lo {
                return Vector3::zeros();
            }
            let (fl, fh) = (&window.frames[posed[lo]], &window.frames[posed[hi]]);
            let dt = (fh.t_ns - fl.t_ns) as f64 * 1e-9;
            (fh.gnss.velocity - fl.gnss.velocity) / dt.max(1e-9)
        })
        .collect();
    // Endpoint frames only get one-sided (noisier) velocity differences;
    // the gravity solve uses interior frames when enough exist.
    let interior: Vec<usize> = (0..posed.len())
        .filter(|&i| i >= half_width && i + half_width < posed.len())
        .collect();
    let pick = |v: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
        if interior.len() >= 3 {
            interior.iter().map(|&i| v[i]).collect()
        } else {
            v.to_vec()
        }
    };
    let pick_q = |v: &[UnitQuaternion<f64>]| -> Vec<UnitQuaternion<f64>> {
        if interior.len() >= 3 {
            interior.iter().map(|&i| v[i]).collect()
        } else {
            v.to_vec()
        }
    };

    // The yaw-first alignment is biased when c0 is a tilted camera frame;
    // alternating with the gravity solve converges in a few passes.
    let mut roll = 0.0;
    let mut pitch = 0.0;
    for _ in 0..3 {
        (roll, pitch) = solve_roll_pitch(
            &pick(&body_accels),
            &pick_q(&cam_attitudes),
            &pick(&motion_accels),
            &inputs.q_b_c,
            yaw,
            inputs.gravity,
        )?;
        let q_rp = crate::geometry::compose_ypr(&crate::geometry::EulerYPR {
            yaw: 0.0,
            pitch,
            roll,
        });
        yaw = solve_yaw(
            &cam_positions,
            &cam_attitudes,
            &gnss_positions,
            window.scale,
            &inputs.q_b_c,
            &inputs.t_b_c,
            &inputs.t_b_g,
            &q_rp,
        )?;
    }
    report.yaw_first_guess = yaw;
    report.roll_first_guess = roll;
    report.pitch_first_guess = pitch;
    let q_w_c0_guess =
        crate::geometry::compose_ypr(&crate::geometry::EulerYPR { yaw, pitch, roll });

    // Step 3: joint VI-GNSS MAP refinement.
    let mut imu_segments = Vec::new();
    for w in posed.windows(2) {
        let (a, b) = (window.frames[w[0]].t_ns, window.frames[w[1]].t_ns);
        imu_segments.push(
            inputs
                .imu
                .iter()
                .filter(|s| s.t_ns >= a && s.t_ns <= b)
                .copied()
                .collect::<Vec<_>>(),
        );
    }
    let map_input = ba::MapInitInput {
        cam_positions,
        cam_attitudes,
        gnss_positions,
        gnss_pos_sigma: posed
            .iter()
            .map(|&k| window.frames[k].gnss.pos_sigma)
            .collect(),
        times: posed
            .iter()
            .map(|&k| window.frames[k].t_ns as f64 * 1e-9)
            .collect(),
        imu_segments,
        q_b_c: inputs.q_b_c,
        t_b_c: inputs.t_b_c,
        t_b_g: inputs.t_b_g,
        gravity: inputs.gravity,
        imu_noise: inputs.imu_noise,
        initial_scale: window.scale,
        initial_q_w_c0: q_w_c0_guess,
        initial_gyro_bias: Vector3::zeros(),
        // Velocities from the scaled visual geometry (central differences of
        // the body track rotated into the world guess): consistent with the
        // preintegration terms, unlike raw GNSS velocities whose noise would
        // start the MAP far outside the basin of attraction.
        initial_velocities: {
            let body_c0: Vec<Vector3<f64>> = posed
                .iter()
                .map(|&k| {
                    let pose = window.poses[k].expect("posed");
                    let r_b = pose.rotation * inputs.q_b_c.inverse();
                    window.scale * pose.translation - r_b * inputs.t_b_c
                })
                .collect();
            (0..posed.len())
                .map(|i| {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 1).min(posed.len() - 1);
                    if hi == lo {
                        return Vector3::zeros();
                    }
                    let dt = (window.frames[posed[hi]].t_ns - window.frames[posed[lo]].t_ns) as f64
                        * 1e-9;
                    q_w_c0_guess * ((body_c0[hi] - body_c0[lo]) / dt.max(1e-9))
                })
                .collect()
        },
    };
    let (alignment, _map_report, outer_iters) = ba::vi_gnss_map_init(&map_input, &opts.map)?;
    report.span_post_map = alignment.scale * window_span(&window);
    window.scale = alignment.scale;
    report.scale_post_map = alignment.scale;
    report.map_outer_iterations = outer_iters;
    report.t_total = t_start.elapsed().as_secs_f64();
    Ok((alignment, window, report))
}

impl InitReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some((i, j)) = self.pair {
            s.push_str(&format!("init_pair = {i},{j}\n"));
        }
        s.push_str(&format!("scale_pre_ba = {:.6}\n", self.scale_pre_ba));
        s.push_str(&format!("scale_post_ba = {:.6}\n", self.scale_post_ba));
        s.push_str(&format!("scale_post_map = {:.6}\n", self.scale_post_map));
        s.push_str(&format!("span_pre_ba = {:.6}\n", self.span_pre_ba));
        s.push_str(&format!("span_post_ba = {:.6}\n", self.span_post_ba));
        s.push_str(&format!("span_post_map = {:.6}\n", self.span_post_map));
        if let Some(e) = self.scale_error_pre_ba {
            s.push_str(&format!("scale_error_pre_ba_percent = {e:.4}\n"));
        }
        if let Some(e) = self.scale_error_post_ba {
            s.push_str(&format!("scale_error_post_ba_percent = {e:.4}\n"));
        }
        if let Some(e) = self.scale_error_post_map {
            s.push_str(&format!("scale_error_post_map_percent = {e:.4}\n"));
        }
        s.push_str(&format!("yaw_first_guess = {:.6}\n", self.yaw_first_guess));
        s.push_str(&format!(
            "roll_first_guess = {:.6}\n",
            self.roll_first_guess
        ));
        s.push_str(&format!(
            "pitch_first_guess = {:.6}\n",
            self.pitch_first_guess
        ));
        s.push_str(&format!("t_init = {:.3}\n", self.t_init));
        s.push_str(&format!("t_ba = {:.3}\n", self.t_ba));
        s.push_str(&format!("t_tot = {:.3}\n", self.t_total));
        s.push_str(&format!(
            "map_outer_iterations = {}\n",
            self.map_outer_iterations
        ));
        if !self.gate_note.is_empty() {
            s.push_str(&format!("gate_note = {}\n", self.gate_note));
        }
        s
    }
}
