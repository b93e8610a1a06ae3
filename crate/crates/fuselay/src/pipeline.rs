//! Pipeline orchestration: scenario simulation, initialization, full
//! two-layer runs, and evaluation, driven by a flat key-value config.
//!
//! The run loop hosts the two estimation layers. The inner window consumes
//! camera frames in order; keyframe records retire into the outer pose
//! graph through a FIFO, and the outer layer's correction flows back through
//! the window's single-slot mailbox. Everything is drained deterministically
//! before exit, so identical configs and seeds give bit-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::geometry::{compose_quat, so3_exp, Pose};
use crate::initializer::{
    run_initialization, InitError, InitFrame, InitGates, InitInputs, InitOptions, WorldAlignment,
};
use crate::inner::{
    ExtrinsicMode, FrameInput, FrameState, InnerConfig, InnerError, KeyframeDecision,
    KeyframeRecord, SlidingWindow,
};
use crate::io::{self, IoError, TrajectoryRecord};
use crate::metrics::{self, MetricsError};
use crate::outer::{OuterConfig, OuterError, PoseGraph};
use crate::preintegration::ImuNoise;
use crate::simulator::{
    self, forward_camera_extrinsic, FeatureTrack, GnssSample, ImuSample, NoiseSpec, SimError,
    TrackOptions, TrajectorySpec,
};
use crate::solver::SolverError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("initialization failed: {0}")]
    Init(#[from] InitError),
    #[error("inner layer failed: {0}")]
    Inner(#[from] InnerError),
    #[error("outer layer failed: {0}")]
    Outer(#[from] OuterError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Run(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 gate/initialization, 4 solver
    /// divergence, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Sim(_) => 2,
            PipelineError::Init(InitError::Diverged { .. })
            | PipelineError::Init(InitError::Solver(_)) => 4,
            PipelineError::Init(_) => 3,
            PipelineError::Inner(InnerError::Solver(SolverError::NonFiniteResidual { .. })) => 4,
            PipelineError::Inner(_) | PipelineError::Outer(_) | PipelineError::Run(_) => 4,
            PipelineError::Io(_) => 5,
            PipelineError::Metrics(_) => 3,
        }
    }
}

/// Scenario calibration shared by the simulator and the estimator.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub t_bc: Pose,
    pub t_bg: Vector3<f64>,
    pub imu_noise: ImuNoise,
    pub gravity: f64,
}

#[derive(Debug)]
pub struct Scenario {
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    pub tracks: TrackOptions,
    pub calibration: Calibration,
}

/// Build the scenario from config keys (trajectory.*, noise.*, tracks.*,
/// calib.*), with documented defaults for everything except the waypoints.
pub fn scenario_from_config(cfg: &Config) -> Result<Scenario, PipelineError> {
    let trajectory = TrajectorySpec {
        duration: cfg.f64_or("trajectory.duration", 60.0)?,
        waypoints: cfg.waypoints("trajectory.waypoints")?,
        yaw_mode: cfg.yaw_mode_or("trajectory.yaw_mode", simulator::YawMode::FollowPath)?,
        camera_hz: cfg.u64_or("trajectory.camera_hz", 20)? as u32,
        imu_hz: cfg.u64_or("trajectory.imu_hz", 200)? as u32,
        gnss_hz: cfg.u64_or("trajectory.gnss_hz", 20)? as u32,
        gravity: cfg.f64_or("trajectory.gravity", 9.81)?,
    };
    let noise = NoiseSpec {
        gyro_white: cfg.f64_or("noise.gyro_white", 0.0)?,
        accel_white: cfg.f64_or("noise.accel_white", 0.0)?,
        gyro_walk: cfg.f64_or("noise.gyro_walk", 0.0)?,
        accel_walk: cfg.f64_or("noise.accel_walk", 0.0)?,
        initial_gyro_bias: cfg.vec3_or("noise.initial_gyro_bias", Vector3::zeros())?,
        initial_accel_bias: cfg.vec3_or("noise.initial_accel_bias", Vector3::zeros())?,
        gnss_pos_sigma: cfg.vec3_or("noise.gnss_pos_sigma", Vector3::zeros())?,
        gnss_vel_sigma: cfg.vec3_or("noise.gnss_vel_sigma", Vector3::zeros())?,
        gnss_dropouts: cfg.intervals_or("noise.gnss_dropouts")?,
        seed: cfg.u64_or("noise.seed", 0)?,
    };
    let camera_pitch = cfg.f64_or("calib.camera_pitch_deg", 0.0)?.to_radians();
    let t_bc_translation = cfg.vec3_or("calib.t_bc", Vector3::new(0.1, 0.0, 0.05))?;
    let t_bc = Pose::new(
        compose_quat(
            &so3_exp(&Vector3::new(0.0, camera_pitch, 0.0)),
            &forward_camera_extrinsic().rotation,
        ),
        t_bc_translation,
    );
    let calibration = Calibration {
        t_bc,
        t_bg: cfg.vec3_or("calib.t_bg", Vector3::zeros())?,
        imu_noise: ImuNoise {
            gyro_white: noise.gyro_white.max(1e-5),
            accel_white: noise.accel_white.max(1e-4),
            gyro_walk: noise.gyro_walk.max(1e-6),
            accel_walk: noise.accel_walk.max(1e-5),
        },
        gravity: trajectory.gravity,
    };
    let tracks = TrackOptions {
        landmark_count: cfg.u64_or("tracks.landmark_count", 400)? as usize,
        t_bc,
        fov_half_tan: cfg.f64_or("tracks.fov_half_tan", 0.9)?,
        min_depth: cfg.f64_or("tracks.min_depth", 0.5)?,
        max_depth: cfg.f64_or("tracks.max_depth", 60.0)?,
        corridor_radius: cfg.f64_or("tracks.corridor_radius", 18.0)?,
        max_track_length: cfg.u64_or("tracks.max_track_length", 40)? as usize,
        pixel_sigma: cfg.f64_or("noise.pixel_sigma", 0.0)?,
        min_per_frame: cfg.u64_or("tracks.min_per_frame", 8)? as usize,
    };
    Ok(Scenario {
        trajectory,
        noise,
        tracks,
        calibration,
    })
}

fn euler_of(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    crate::geometry::decompose_ypr(q)
        .map(|e| Vector3::new(e.roll, e.pitch, e.yaw))
        .unwrap_or_else(|_| Vector3::zeros())
}

/// Simulate a scenario and write all measurement streams, ground truth and
/// the manifest into `out_dir`.
pub fn cmd_simulate(cfg: &Config, out_dir: &Path) -> Result<(), PipelineError> {
    let scenario = scenario_from_config(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let gt = simulator::generate_trajectory(&scenario.trajectory)?;
    let imu = simulator::synth_imu(&gt, &scenario.noise);
    let gnss = simulator::synth_gnss(&gt, &scenario.noise, &scenario.calibration.t_bg);
    let tracks = simulator::synth_tracks(&gt, scenario.noise.seed, &scenario.tracks)?;

    io::write_imu(&imu, &out_dir.join("imu.csv"))?;
    io::write_gnss(&gnss, &out_dir.join("gnss.csv"))?;
    io::write_tracks(&tracks, &out_dir.join("tracks.csv"))?;
    let frames: Vec<(usize, i64)> = gt
        .camera_frames()
        .map(|(id, state)| (id, state.t_ns))
        .collect();
    io::write_frames(&frames, &out_dir.join("frames.csv"))?;
    let truth: Vec<TrajectoryRecord> = gt
        .states
        .iter()
        .map(|s| TrajectoryRecord {
            t_ns: s.t_ns,
            pose: Pose::new(s.attitude, s.position),
        })
        .collect();
    io::write_trajectory(&truth, &out_dir.join("groundtruth.tum"))?;

    // Manifest: the full scenario config plus provenance keys.
    let mut manifest = cfg.clone();
    let rpy = euler_of(&scenario.calibration.t_bc.rotation);
    manifest
        .set("manifest.seed", scenario.noise.seed)
        .set(
            "manifest.config_hash",
            format!("{:016x}", cfg.content_hash()),
        )
        .set("manifest.camera_hz", scenario.trajectory.camera_hz)
        .set("manifest.imu_hz", scenario.trajectory.imu_hz)
        .set("manifest.gnss_hz", scenario.trajectory.gnss_hz)
        .set("manifest.gravity", scenario.trajectory.gravity)
        .set(
            "manifest.t_bc",
            format!(
                "{},{},{}",
                scenario.calibration.t_bc.translation.x,
                scenario.calibration.t_bc.translation.y,
                scenario.calibration.t_bc.translation.z
            ),
        )
        .set(
            "manifest.t_bc_rpy",
            format!("{},{},{}", rpy.x, rpy.y, rpy.z),
        )
        .set(
            "manifest.t_bg",
            format!(
                "{},{},{}",
                scenario.calibration.t_bg.x,
                scenario.calibration.t_bg.y,
                scenario.calibration.t_bg.z
            ),
        );
    std::fs::write(out_dir.join("manifest.cfg"), manifest.render()).map_err(|source| {
        IoError::Io {
            path: out_dir.join("manifest.cfg").display().to_string(),
            source,
        }
    })?;
    Ok(())
}

/// A scenario directory loaded back into memory.
pub struct LoadedScenario {
    pub manifest: Config,
    pub imu: Vec<ImuSample>,
    pub gnss: Vec<GnssSample>,
    pub tracks: Vec<FeatureTrack>,
    pub frames: Vec<(usize, i64)>,
    pub calibration: Calibration,
    pub ground_truth: Option<Vec<TrajectoryRecord>>,
}

pub fn load_scenario(dir: &Path) -> Result<LoadedScenario, PipelineError> {
    let manifest = Config::load(&dir.join("manifest.cfg"))?;
    let imu = io::read_euroc_imu(&dir.join("imu.csv"))?;
    let vel_sigma = manifest.vec3_or("noise.gnss_vel_sigma", Vector3::new(0.05, 0.05, 0.05))?;
    let gnss = io::read_gnss(&dir.join("gnss.csv"), vel_sigma)?;
    let tracks = io::read_tracks(&dir.join("tracks.csv"))?;
    let frames = io::read_frames(&dir.join("frames.csv"))?;
    let rpy = manifest.vec3_or("manifest.t_bc_rpy", Vector3::zeros())?;
    let t_bc = Pose::new(
        crate::geometry::compose_ypr(&crate::geometry::EulerYPR {
            yaw: rpy.z,
            pitch: rpy.y,
            roll: rpy.x,
        }),
        manifest.vec3_or("manifest.t_bc", Vector3::zeros())?,
    );
    let calibration = Calibration {
        t_bc,
        t_bg: manifest.vec3_or("manifest.t_bg", Vector3::zeros())?,
        imu_noise: ImuNoise {
            gyro_white: manifest.f64_or("noise.gyro_white", 0.0)?.max(1e-5),
            accel_white: manifest.f64_or("noise.accel_white", 0.0)?.max(1e-4),
            gyro_walk: manifest.f64_or("noise.gyro_walk", 0.0)?.max(1e-6),
            accel_walk: manifest.f64_or("noise.accel_walk", 0.0)?.max(1e-5),
        },
        gravity: manifest.f64_or("manifest.gravity", 9.81)?,
    };
    let gt_path = dir.join("groundtruth.tum");
    let ground_truth = gt_path
        .exists()
        .then(|| io::read_trajectory(&gt_path))
        .transpose()?;
    Ok(LoadedScenario {
        manifest,
        imu,
        gnss,
        tracks,
        frames,
        calibration,
        ground_truth,
    })
}

fn init_options_from_config(cfg: &Config) -> Result<InitOptions, PipelineError> {
    let mut opts = InitOptions::default();
    opts.gates = InitGates {
        min_tracked_points: cfg.u64_or("gates.min_tracked_points", 30)? as usize,
        min_mean_parallax: cfg.f64_or("gates.min_mean_parallax", 0.0175)?,
        max_gnss_sigma: cfg.f64_or("gates.max_gnss_sigma", 1.0)?,
    };
    opts.ransac.seed = cfg.u64_or("noise.seed", 0)?;
    // Stage chaining: the MAP starts from the step-1/2 estimates and keeps
    // them as priors at their rough accuracy.
    opts.map.scale_prior_relative_sigma = cfg.f64_or("init.scale_prior_relative", 0.02)?;
    opts.map.gyro_bias_prior_sigma = cfg.f64_or("init.bias_prior", 0.05)?;
    Ok(opts)
}

fn build_init_inputs<'a>(
    scenario: &'a LoadedScenario,
    window_len: usize,
    max_gap: f64,
) -> Result<InitInputs<'a>, PipelineError> {
    let mut frames = Vec::new();
    for (frame_id, t_ns) in scenario.frames.iter().take(window_len) {
        let gnss = io::interpolate_gnss(&scenario.gnss, *t_ns, max_gap)?;
        frames.push(InitFrame {
            frame_id: *frame_id,
            t_ns: *t_ns,
            gnss,
        });
    }
    Ok(InitInputs {
        frames,
        tracks: &scenario.tracks,
        imu: &scenario.imu,
        q_b_c: scenario.calibration.t_bc.rotation,
        t_b_c: scenario.calibration.t_bc.translation,
        t_b_g: scenario.calibration.t_bg,
        gravity: scenario.calibration.gravity,
        imu_noise: scenario.calibration.imu_noise,
    })
}

/// Run the three-step initialization on a scenario directory; writes
/// `init_report.txt` beside the data and returns the report.
pub fn cmd_init(dir: &Path) -> Result<crate::initializer::InitReport, PipelineError> {
    let scenario = load_scenario(dir)?;
    let window_len = scenario.manifest.u64_or("init.window_len", 10)? as usize;
    let max_gap = scenario.manifest.f64_or("run.max_gnss_gap", 2.0)?;
    let opts = init_options_from_config(&scenario.manifest)?;
    let inputs = build_init_inputs(&scenario, window_len, max_gap)?;
    let result = run_initialization(&inputs, &opts);
    let report_text = match &result {
        Ok((_, _, report)) => {
            let mut report = report.clone();
            let (first_t, last_t) = (report.span_first_t_ns, report.span_last_t_ns);
            attach_scale_errors(&mut report, &scenario, first_t, last_t);
            let _ = std::fs::write(dir.join("init_report.txt"), report.render());
            return Ok(report);
        }
        Err(e) => format!("initialization failed: {e}\n"),
    };
    let _ = std::fs::write(dir.join("init_report.txt"), &report_text);
    result
        .map(|(_, _, report)| report)
        .map_err(PipelineError::from)
}

/// Fill in span-based scale errors against ground truth when available.
fn attach_scale_errors(
    report: &mut crate::initializer::InitReport,
    scenario: &LoadedScenario,
    first_t: i64,
    last_t: i64,
) {
    let Some(truth) = &scenario.ground_truth else {
        return;
    };
    let cam_at = |t_ns: i64| -> Option<Vector3<f64>> {
        truth
            .iter()
            .min_by_key(|r| (r.t_ns - t_ns).abs())
            .map(|r| r.pose.translation + r.pose.rotation * scenario.calibration.t_bc.translation)
    };
    let (Some(a), Some(b)) = (cam_at(first_t), cam_at(last_t)) else {
        return;
    };
    let true_span = (b - a).norm();
    if true_span < 1e-6 {
        return;
    }
    report.scale_error_pre_ba = Some(metrics::scale_error(report.span_pre_ba, true_span));
    report.scale_error_post_ba = Some(metrics::scale_error(report.span_post_ba, true_span));
    report.scale_error_post_map = Some(metrics::scale_error(report.span_post_map, true_span));
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Bootstrap from ground truth instead of running initialization.
    pub skip_init: bool,
    /// Force the camera-IMU extrinsic to stay at calibration.
    pub fix_extrinsics: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            skip_init: false,
            fix_extrinsics: true,
        }
    }
}

/// Outputs of a full two-layer run.
pub struct RunSummary {
    pub inner_trajectory: Vec<TrajectoryRecord>,
    pub fused_trajectory: Vec<TrajectoryRecord>,
    pub final_correction: UnitQuaternion<f64>,
    pub final_lever_arm: Vector3<f64>,
    pub final_extrinsic: Pose,
    pub keyframes: usize,
    pub init_report: Option<crate::initializer::InitReport>,
    /// Per window solve: (first keyframe t_ns, last keyframe t_ns,
    /// first-to-last displacement of the window estimate). Scale-drift
    /// diagnostics compare these spans against ground truth.
    pub window_spans: Vec<(i64, i64, f64)>,
}

struct CostLog {
    lines: Vec<String>,
}

impl CostLog {
    fn new() -> Self {
        Self {
            lines: vec![
                "layer,t_ns,iterations,total,marginal_prior,reprojection,preintegration,gnss_velocity,rel_translation,rel_rotation,abs_yaw,gnss_position,gnss_course".to_string(),
            ],
        }
    }

    fn push(&mut self, layer: &str, t_ns: i64, report: &crate::solver::SolveReport) {
        let get = |k: &str| report.class_costs.get(k).copied().unwrap_or(0.0);
        let total: f64 = report.class_costs.values().sum();
        self.lines.push(format!(
            "{layer},{t_ns},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            report.iterations,
            total,
            get("marginal_prior"),
            get("reprojection"),
            get("preintegration"),
            get("gnss_velocity"),
            get("rel_translation"),
            get("rel_rotation"),
            get("abs_yaw"),
            get("gnss_position"),
            get("gnss_course"),
        ));
    }
}

/// Observations grouped per frame id.
fn observations_by_frame(tracks: &[FeatureTrack]) -> BTreeMap<usize, Vec<(u64, Vector2<f64>)>> {
    let mut out: BTreeMap<usize, Vec<(u64, Vector2<f64>)>> = BTreeMap::new();
    for t in tracks {
        for o in &t.observations {
            out.entry(o.frame_id).or_default().push((t.id, o.uv));
        }
    }
    out
}

fn imu_between(imu: &[ImuSample], t0: i64, t1: i64) -> Vec<ImuSample> {
    imu.iter()
        .filter(|s| s.t_ns >= t0 && s.t_ns <= t1)
        .copied()
        .collect()
}

/// Full two-layer run over a scenario directory; writes the inner (w0) and
/// fused (w) trajectories, the per-solve cost log and the final calibration
/// estimates into `out_dir`.
pub fn cmd_run(dir: &Path, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let scenario = load_scenario(dir)?;
    std::fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let manifest = &scenario.manifest;
    let window_len = manifest.u64_or("init.window_len", 10)? as usize;
    let max_gap = manifest.f64_or("run.max_gnss_gap", 2.0)?;
    let obs_by_frame = observations_by_frame(&scenario.tracks);

    // Estimator configuration.
    let estimate_ext =
        !opts.fix_extrinsics && manifest.bool_or("inner.estimate_extrinsics", false)?;
    let inner_cfg = InnerConfig {
        window_size: manifest.u64_or("inner.window_size", 10)? as usize,
        gravity: scenario.calibration.gravity,
        t_bc: ext_initial(manifest, &scenario.calibration)?,
        extrinsic_mode: if estimate_ext {
            ExtrinsicMode::Estimated
        } else {
            ExtrinsicMode::Fixed
        },
        reproj_sigma: manifest.f64_or("inner.reproj_sigma", 1.5 / 460.0)?,
        huber_delta: manifest.f64_or("inner.huber_delta", 1.0)?,
        use_gnss_velocity: manifest.bool_or("inner.use_gnss_velocity", true)?,
        keyframe_parallax: manifest.f64_or("inner.keyframe_parallax", 0.0175)?,
        keyframe_track_ratio: manifest.f64_or("inner.keyframe_track_ratio", 0.6)?,
        min_triangulation_parallax: manifest.f64_or("inner.min_triangulation_parallax", 4e-3)?,
        imu_noise: scenario.calibration.imu_noise,
        max_iterations: manifest.u64_or("inner.max_iterations", 8)? as usize,
        max_landmarks: manifest.u64_or("inner.max_landmarks", 130)? as usize,
    };
    let outer_cfg = OuterConfig {
        horizon: manifest.u64_or("outer.horizon", 200)? as usize,
        solve_every: manifest.u64_or("outer.solve_every", 10)? as usize,
        yaw_only_correction: manifest.bool_or("outer.yaw_only_correction", true)?,
        course_sigma_at_2ms: manifest
            .f64_or("outer.course_sigma_deg_at_2ms", 5.0)?
            .to_radians(),
        rel_translation_sigma: manifest.f64_or("outer.rel_translation_sigma", 0.05)?,
        rel_yaw_sigma: manifest.f64_or("outer.rel_yaw_sigma", 0.01)?,
        abs_yaw_sigma: manifest.f64_or("outer.abs_yaw_sigma", 0.02)?,
        huber_delta: manifest.f64_or("outer.huber_delta", 1.0)?,
        max_iterations: manifest.u64_or("outer.max_iterations", 15)? as usize,
        estimate_lever_arm: manifest.bool_or("outer.estimate_lever_arm", true)?,
        lever_prior_sigma: manifest.f64_or("outer.lever_prior_sigma", 0.1)?,
    };
    // The lever arm starts at its calibration value; estimation refines the
    // directions the trajectory excites.
    let initial_lever = manifest.vec3_or("outer.initial_lever_arm", scenario.calibration.t_bg)?;

    // Bootstrap: three-step initialization, or ground truth when skipped.
    let mut init_report = None;
    let (window_states, bootstrap_frames) = if opts.skip_init {
        bootstrap_from_truth(&scenario, window_len)?
    } else {
        let init_opts = init_options_from_config(manifest)?;
        let inputs = build_init_inputs(&scenario, window_len, max_gap)?;
        let (alignment, init_window, report) = run_initialization(&inputs, &init_opts)?;
        init_report = Some(report.clone());
        let _ = std::fs::write(out_dir.join("init_report.txt"), report.render());
        bootstrap_from_alignment(&scenario, &alignment, &init_window)?
    };

    let mut window = SlidingWindow::new(inner_cfg);
    let mut graph = PoseGraph::new(outer_cfg, initial_lever);
    let mut cost_log = CostLog::new();
    let mut inner_records: Vec<TrajectoryRecord> = Vec::new();
    let mut keyframes = 0usize;
    let mut window_spans: Vec<(i64, i64, f64)> = Vec::new();
    let record_span = |window: &SlidingWindow, spans: &mut Vec<(i64, i64, f64)>| {
        let states = window.states();
        if let (Some(a), Some(b)) = (states.first(), states.last()) {
            spans.push((a.t_ns, b.t_ns, (b.position - a.position).norm()));
        }
    };

    // Seed the window.
    for (input, state) in bootstrap_frames.iter().zip(window_states.iter()) {
        window.push_initialized_frame(input.clone(), *state)?;
    }
    window.triangulate_new_landmarks();
    window.install_gauge_prior(0.01, 0.1);
    let outcome = window.optimize_window()?;
    cost_log.push(
        "inner",
        window_states.last().map(|s| s.t_ns).unwrap_or(0),
        &outcome.report,
    );

    // Stream every frame after the seeded span.
    let mut prev_t = window_states.last().map(|s| s.t_ns).unwrap_or(0);
    let stream_after = prev_t;
    for (frame_id, t_ns) in scenario.frames.iter().filter(|(_, t)| *t > stream_after) {
        let observations = obs_by_frame.get(frame_id).cloned().unwrap_or_default();
        let imu_segment = imu_between(&scenario.imu, prev_t, *t_ns);
        let gnss_velocity = io::interpolate_gnss(&scenario.gnss, *t_ns, max_gap).ok();
        let input = FrameInput {
            frame_id: *frame_id,
            t_ns: *t_ns,
            observations,
            imu_segment,
            gnss_velocity,
        };
        let decision = window.add_frame(input)?;
        prev_t = *t_ns;
        if decision != KeyframeDecision::Keyframe {
            continue;
        }
        keyframes += 1;
        let t_opt = std::time::Instant::now();
        let outcome = window.optimize_window()?;
        let opt_s = t_opt.elapsed().as_secs_f64();
        cost_log.push("inner", *t_ns, &outcome.report);
        record_span(&window, &mut window_spans);
        let t_marg = std::time::Instant::now();
        while window.needs_marginalization() {
            window.marginalize_oldest()?;
        }
        if std::env::var("FUSELAY_LOG").is_ok() {
            eprintln!(
                "kf {frame_id}: solve {:.1} ms ({} iters) marg {:.1} ms",
                1000.0 * opt_s,
                outcome.report.iterations,
                1000.0 * t_marg.elapsed().as_secs_f64()
            );
        }
        for record in window.take_published() {
            push_to_outer(&mut graph, &scenario, &record, max_gap, &mut inner_records)?;
            if graph.due_for_solve() {
                let report = graph.optimize_graph()?;
                cost_log.push("outer", record.t_ns, &report);
                window.apply_world_correction(graph.publish_correction());
            }
        }
    }

    // Drain: retire the remaining window keyframes into the outer layer.
    let remaining = window.states();
    for state in remaining.iter().skip(1) {
        let record = KeyframeRecord {
            frame_id: usize::MAX,
            t_ns: state.t_ns,
            position: state.position,
            attitude: state.attitude,
            velocity: state.velocity,
            pose_cov_diag: nalgebra::DVector::from_element(6, 1e-4),
            gnss_velocity: None,
        };
        push_to_outer(&mut graph, &scenario, &record, max_gap, &mut inner_records)?;
    }
    if graph.num_nodes() >= 2 {
        let report = graph.optimize_graph()?;
        cost_log.push("outer", prev_t, &report);
    }

    let fused = graph.fused_trajectory();
    io::write_trajectory(&inner_records, &out_dir.join("inner_trajectory.tum"))?;
    io::write_trajectory(&fused, &out_dir.join("fused_trajectory.tum"))?;

    // Tidy error-vs-time series for external plotting, when truth exists.
    if let Some(truth) = &scenario.ground_truth {
        let mut lines = vec!["t_ns,fused_error_m".to_string()];
        for r in &fused {
            if let Some(g) = truth.iter().min_by_key(|g| (g.t_ns - r.t_ns).abs()) {
                lines.push(format!(
                    "{},{:.6}",
                    r.t_ns,
                    (r.pose.translation - g.pose.translation).norm()
                ));
            }
        }
        std::fs::write(out_dir.join("error_log.csv"), lines.join("\n") + "\n").map_err(
            |source| IoError::Io {
                path: out_dir.join("error_log.csv").display().to_string(),
                source,
            },
        )?;
    }
    std::fs::write(
        out_dir.join("cost_log.csv"),
        cost_log.lines.join("\n") + "\n",
    )
    .map_err(|source| IoError::Io {
        path: out_dir.join("cost_log.csv").display().to_string(),
        source,
    })?;

    // Final calibration estimates.
    let ext = window.extrinsic();
    let corr = graph.publish_correction();
    let lever = graph.lever_arm();
    let mut calib_out = Config::new();
    let ext_rpy = euler_of(&ext.rotation);
    let corr_rpy = euler_of(&corr);
    calib_out
        .set(
            "estimate.t_bc",
            format!(
                "{},{},{}",
                ext.translation.x, ext.translation.y, ext.translation.z
            ),
        )
        .set(
            "estimate.t_bc_rpy",
            format!("{},{},{}", ext_rpy.x, ext_rpy.y, ext_rpy.z),
        )
        .set(
            "estimate.t_bg",
            format!("{},{},{}", lever.x, lever.y, lever.z),
        )
        .set(
            "estimate.q_w_w0_rpy",
            format!("{},{},{}", corr_rpy.x, corr_rpy.y, corr_rpy.z),
        );
    std::fs::write(
        out_dir.join("calibration_estimates.cfg"),
        calib_out.render(),
    )
    .map_err(|source| IoError::Io {
        path: out_dir
            .join("calibration_estimates.cfg")
            .display()
            .to_string(),
        source,
    })?;

    Ok(RunSummary {
        inner_trajectory: inner_records,
        fused_trajectory: fused,
        final_correction: corr,
        final_lever_arm: lever,
        final_extrinsic: ext,
        keyframes,
        init_report,
        window_spans,
    })
}

fn ext_initial(manifest: &Config, calibration: &Calibration) -> Result<Pose, PipelineError> {
    // Optional perturbation of the extrinsic initial value (for calibration
    // convergence studies).
    let d_rot = manifest.vec3_or("inner.extrinsic_rotation_offset", Vector3::zeros())?;
    let d_trans = manifest.vec3_or("inner.extrinsic_translation_offset", Vector3::zeros())?;
    Ok(Pose::new(
        compose_quat(&calibration.t_bc.rotation, &so3_exp(&d_rot)),
        calibration.t_bc.translation + d_trans,
    ))
}

fn push_to_outer(
    graph: &mut PoseGraph,
    scenario: &LoadedScenario,
    record: &KeyframeRecord,
    max_gap: f64,
    inner_records: &mut Vec<TrajectoryRecord>,
) -> Result<(), PipelineError> {
    inner_records.push(TrajectoryRecord {
        t_ns: record.t_ns,
        pose: Pose::new(record.attitude, record.position),
    });
    let gnss = io::interpolate_gnss(&scenario.gnss, record.t_ns, max_gap).ok();
    graph.add_node(record, gnss)?;
    Ok(())
}

/// Seed window states from the initialization alignment: w0 is the
/// world-as-estimated frame, so the correction starts at identity.
fn bootstrap_from_alignment(
    scenario: &LoadedScenario,
    alignment: &WorldAlignment,
    init_window: &crate::initializer::InitWindow,
) -> Result<(Vec<FrameState>, Vec<FrameInput>), PipelineError> {
    let obs_by_frame = observations_by_frame(&scenario.tracks);
    let t_bc = &scenario.calibration.t_bc;
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    let mut prev_t: Option<i64> = None;
    for (k, frame) in init_window.frames.iter().enumerate() {
        let Some(cam_pose) = init_window.poses[k] else {
            continue;
        };
        // Body pose in w0 from the camera pose in c0 and the alignment.
        let r_c0_b = cam_pose.rotation * t_bc.rotation.inverse();
        let p_c0_b = alignment.scale * cam_pose.translation - r_c0_b * t_bc.translation;
        let attitude = compose_quat(&alignment.q_w_c0, &r_c0_b);
        let position = alignment.q_w_c0 * p_c0_b + alignment.world_origin;
        states.push(FrameState {
            t_ns: frame.t_ns,
            position,
            attitude,
            velocity: alignment.velocities.get(k).copied().unwrap_or_default(),
            gyro_bias: alignment.gyro_bias,
            accel_bias: Vector3::zeros(),
        });
        let imu_segment = match prev_t {
            Some(t0) => imu_between(&scenario.imu, t0, frame.t_ns),
            None => Vec::new(),
        };
        prev_t = Some(frame.t_ns);
        inputs.push(FrameInput {
            frame_id: frame.frame_id,
            t_ns: frame.t_ns,
            observations: obs_by_frame
                .get(&frame.frame_id)
                .cloned()
                .unwrap_or_default(),
            imu_segment,
            gnss_velocity: frame.gnss.velocity_valid.then_some(frame.gnss),
        });
    }
    Ok((states, inputs))
}

/// Ground-truth bootstrap for `--skip-init`: exact states at the first
/// window frames.
fn bootstrap_from_truth(
    scenario: &LoadedScenario,
    window_len: usize,
) -> Result<(Vec<FrameState>, Vec<FrameInput>), PipelineError> {
    let truth = scenario
        .ground_truth
        .as_ref()
        .ok_or_else(|| PipelineError::Run("--skip-init requires groundtruth.tum".to_string()))?;
    let obs_by_frame = observations_by_frame(&scenario.tracks);
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    let mut prev_t: Option<i64> = None;
    for (frame_id, t_ns) in scenario.frames.iter().take(window_len) {
        let rec = truth
            .iter()
            .min_by_key(|r| (r.t_ns - t_ns).abs())
            .ok_or_else(|| PipelineError::Run("empty ground truth".to_string()))?;
        // Velocity by central difference over the truth trajectory.
        let idx = truth.partition_point(|r| r.t_ns < rec.t_ns);
        let lo = idx.saturating_sub(1);
        let hi = (idx + 1).min(truth.len() - 1);
        let velocity = if hi > lo {
            (truth[hi].pose.translation - truth[lo].pose.translation)
                / (((truth[hi].t_ns - truth[lo].t_ns) as f64) * 1e-9).max(1e-9)
        } else {
            Vector3::zeros()
        };
        states.push(FrameState {
            t_ns: *t_ns,
            position: rec.pose.translation,
            attitude: rec.pose.rotation,
            velocity,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        });
        let imu_segment = match prev_t {
            Some(t0) => imu_between(&scenario.imu, t0, *t_ns),
            None => Vec::new(),
        };
        prev_t = Some(*t_ns);
        let gnss_velocity = io::interpolate_gnss(&scenario.gnss, *t_ns, 2.0).ok();
        inputs.push(FrameInput {
            frame_id: *frame_id,
            t_ns: *t_ns,
            observations: obs_by_frame.get(frame_id).cloned().unwrap_or_default(),
            imu_segment,
            gnss_velocity,
        });
    }
    Ok((states, inputs))
}

/// Evaluate a trajectory against ground truth; returns the key-value metrics
/// report.
pub fn cmd_eval(
    trajectory: &Path,
    ground_truth: &Path,
    scale: Option<(f64, f64)>,
) -> Result<String, PipelineError> {
    let est = io::read_trajectory(trajectory)?;
    let truth = io::read_trajectory(ground_truth)?;
    let stats = metrics::ate(&est, &truth)?;
    let mut out = stats.render();
    if let Some((s_est, s_true)) = scale {
        writeln!(
            out,
            "scale_error_percent = {:.4}",
            metrics::scale_error(s_est, s_true)
        )
        .expect("string write");
    }
    writeln!(out, "alignment = none").expect("string write");
    Ok(out)
}
