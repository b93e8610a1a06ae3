//! Tightly-coupled sliding-window bundle adjustment (inner layer): fuses
//! feature-track reprojection, IMU preintegration, GNSS velocity and the
//! marginal prior over a bounded keyframe window in the w0 frame.
//!
//! The window publishes per-keyframe records when keyframes retire and
//! consumes the world-frame correction from the outer layer through a
//! single-slot mailbox read between solves.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{skew, Pose};
use crate::initializer::{triangulate, SfmError};
use crate::preintegration::{preintegrate, ImuNoise, PreintFactor, Preintegration};
use crate::simulator::{GnssSample, ImuSample};
use crate::solver::{
    self, marginalize, BlockId, Factor, Manifold, MarginalPrior, Problem, RobustLoss, SolveOptions,
    SolveReport, SolverError,
};

/// Per-keyframe IMU state: pose, velocity and biases in the w0 frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameState {
    pub t_ns: i64,
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl FrameState {
    pub fn t(&self) -> f64 {
        self.t_ns as f64 * 1e-9
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.attitude, self.position)
    }
}

#[derive(Debug, Error)]
pub enum InnerError {
    #[error("frame timestamp {t_ns} not after the previous frame")]
    NonMonotonicTime { t_ns: i64 },
    #[error("window has fewer than two keyframes")]
    DegenerateWindow,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Preint(#[from] crate::preintegration::PreintError),
}

/// How T_b_c enters the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtrinsicMode {
    Fixed,
    Estimated,
}

#[derive(Debug, Clone)]
pub struct InnerConfig {
    /// Maximum number of keyframes in the window.
    pub window_size: usize,
    pub gravity: f64,
    /// Camera-in-body extrinsic calibration (initial value when estimated).
    pub t_bc: Pose,
    pub extrinsic_mode: ExtrinsicMode,
    /// Reprojection noise in normalized units (≈ pixel noise / focal length).
    pub reproj_sigma: f64,
    pub huber_delta: f64,
    pub use_gnss_velocity: bool,
    /// Keyframe gate: mean normalized parallax against the last keyframe.
    pub keyframe_parallax: f64,
    /// Keyframe gate: tracked-count ratio against the last keyframe.
    pub keyframe_track_ratio: f64,
    pub min_triangulation_parallax: f64,
    pub imu_noise: ImuNoise,
    pub max_iterations: usize,
    /// Cap on landmarks entering one window solve (longest tracks win).
    pub max_landmarks: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            gravity: 9.81,
            t_bc: Pose::identity(),
            extrinsic_mode: ExtrinsicMode::Fixed,
            reproj_sigma: 1.5 / 460.0,
            huber_delta: 1.0,
            use_gnss_velocity: true,
            keyframe_parallax: 0.0175,
            keyframe_track_ratio: 0.6,
            min_triangulation_parallax: 4e-3,
            imu_noise: ImuNoise::default(),
            max_iterations: 8,
            max_landmarks: 130,
        }
    }
}

/// Reprojection of a landmark (inverse depth in its anchor frame) into a
/// target frame. Blocks: `[pose_anchor, pose_target, λ]` with a fixed
/// extrinsic, or `[pose_anchor, pose_target, T_b_c, λ]` when the extrinsic
/// is estimated. With identity extrinsic the poses are camera poses
/// directly.
pub struct ReprojFactor {
    pub anchor_obs: Vector2<f64>,
    pub target_obs: Vector2<f64>,
    pub fixed_extrinsic: Option<Pose>,
}

impl ReprojFactor {
    fn has_extrinsic_block(&self) -> bool {
        self.fixed_extrinsic.is_none()
    }
}

impl Factor for ReprojFactor {
    fn dim(&self) -> usize {
        2
    }

    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let (p_i, q_i) = solver::pose_from_ambient(&values[0].as_view());
        let (p_j, q_j) = solver::pose_from_ambient(&values[1].as_view());
        let (t_bc, q_bc, lambda) = if self.has_extrinsic_block() {
            let (t, q) = solver::pose_from_ambient(&values[2].as_view());
            (t, q, values[3][0])
        } else {
            let e = self.fixed_extrinsic.as_ref().expect("fixed extrinsic");
            (e.translation, e.rotation, values[2][0])
        };

        let r_bc = q_bc.to_rotation_matrix().into_inner();
        let r_bc_t = r_bc.transpose();
        let r_i = q_i.to_rotation_matrix().into_inner();
        let r_j_t = q_j.to_rotation_matrix().into_inner().transpose();

        let f_i = Vector3::new(self.anchor_obs.x, self.anchor_obs.y, 1.0);
        let p_ci = f_i / lambda;
        let p_bi = r_bc * p_ci + t_bc;
        let p_w = r_i * p_bi + p_i;
        let p_bj = r_j_t * (p_w - p_j);
        let p_cj = r_bc_t * (p_bj - t_bc);

        let (x, y, z) = (p_cj.x, p_cj.y, p_cj.z);
        let z_safe = if z.abs() < 1e-9 {
            1e-9_f64.copysign(z)
        } else {
            z
        };
        let r = DVector::from_column_slice(&[
            x / z_safe - self.target_obs.x,
            y / z_safe - self.target_obs.y,
        ]);

        if let Some(jacs) = jacobians {
            let proj = nalgebra::Matrix2x3::new(
                1.0 / z_safe,
                0.0,
                -x / (z_safe * z_safe),
                0.0,
                1.0 / z_safe,
                -y / (z_safe * z_safe),
            );
            let w_to_cj = r_bc_t * r_j_t;

            // pose_i: [δp_i, δθ_i]
            let mut j_pose_i = DMatrix::zeros(2, 6);
            j_pose_i
                .view_mut((0, 0), (2, 3))
                .copy_from(&(proj * w_to_cj));
            j_pose_i
                .view_mut((0, 3), (2, 3))
                .copy_from(&(proj * (-(w_to_cj * r_i * skew(&p_bi)))));
            jacs[0].copy_from(&j_pose_i);

            // pose_j: [δp_j, δθ_j]
            let mut j_pose_j = DMatrix::zeros(2, 6);
            j_pose_j
                .view_mut((0, 0), (2, 3))
                .copy_from(&(proj * (-w_to_cj)));
            j_pose_j
                .view_mut((0, 3), (2, 3))
                .copy_from(&(proj * r_bc_t * skew(&p_bj)));
            jacs[1].copy_from(&j_pose_j);

            let d_lambda = w_to_cj * r_i * r_bc * (-f_i / (lambda * lambda));
            if self.has_extrinsic_block() {
                let mut j_ext = DMatrix::zeros(2, 6);
                j_ext
                    .view_mut((0, 0), (2, 3))
                    .copy_from(&(proj * (r_bc_t * (r_j_t * r_i - Matrix3::identity()))));
                let rot_part = skew(&p_cj) - r_bc_t * r_j_t * r_i * r_bc * skew(&p_ci);
                j_ext.view_mut((0, 3), (2, 3)).copy_from(&(proj * rot_part));
                jacs[2].copy_from(&j_ext);
                jacs[3].copy_from(&DMatrix::from_column_slice(
                    2,
                    1,
                    (proj * d_lambda).as_slice(),
                ));
            } else {
                jacs[2].copy_from(&DMatrix::from_column_slice(
                    2,
                    1,
                    (proj * d_lambda).as_slice(),
                ));
            }
        }
        r
    }
}

/// GNSS velocity residual: the w0-frame state velocity rotated by the world
/// correction minus the measured world velocity. Block: `[speed_bias]`.
pub struct VelocityFactor {
    pub measured: Vector3<f64>,
    pub correction: UnitQuaternion<f64>,
}

impl Factor for VelocityFactor {
    fn dim(&self) -> usize {
        3
    }

    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let v = Vector3::new(values[0][0], values[0][1], values[0][2]);
        let rot = self.correction.to_rotation_matrix().into_inner();
        let r = rot * v - self.measured;
        if let Some(jacs) = jacobians {
            jacs[0].fill(0.0);
            jacs[0].view_mut((0, 0), (3, 3)).copy_from(&rot);
        }
        DVector::from_column_slice(r.as_slice())
    }
}

/// What a marginal-prior slot refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKey {
    Pose(usize),
    SpeedBias(usize),
    Extrinsic,
}

/// One frame fed into the window.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame_id: usize,
    pub t_ns: i64,
    /// (track id, normalized observation) visible in this frame.
    pub observations: Vec<(u64, Vector2<f64>)>,
    /// Raw IMU covering [previous frame, this frame]; empty for the first.
    pub imu_segment: Vec<ImuSample>,
    pub gnss_velocity: Option<GnssSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeDecision {
    Keyframe,
    Discarded,
}

struct Keyframe {
    frame_id: usize,
    state: FrameState,
    observations: BTreeMap<u64, Vector2<f64>>,
    /// Preintegration from the previous keyframe (None for the window head).
    preint: Option<Preintegration>,
    /// Raw samples behind `preint`, for re-preintegration on bias updates.
    imu_segment: Vec<ImuSample>,
    gnss_velocity: Option<GnssSample>,
}

struct LandmarkEntry {
    anchor_frame: usize,
    inverse_depth: Option<f64>,
    observations: BTreeMap<usize, Vector2<f64>>,
}

/// Keyframe record published to the outer layer and trajectory writer.
#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub frame_id: usize,
    pub t_ns: i64,
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    /// Diagonal of the marginal covariance of [δp, δθ] at retirement.
    pub pose_cov_diag: DVector<f64>,
    pub gnss_velocity: Option<GnssSample>,
}

#[derive(Debug, Clone)]
pub struct WindowSolveOutcome {
    pub report: SolveReport,
    pub dropped_landmarks: usize,
    pub retriangulated: usize,
}

pub struct SlidingWindow {
    pub config: InnerConfig,
    frames: Vec<Keyframe>,
    landmarks: BTreeMap<u64, LandmarkEntry>,
    extrinsic: Pose,
    prior: Option<(MarginalPrior, Vec<PriorKey>)>,
    /// Single-slot mailbox: world correction applied between solves.
    correction_mailbox: Option<UnitQuaternion<f64>>,
    correction: UnitQuaternion<f64>,
    /// Preintegration chain for discarded (non-key) frames.
    pending_imu: Vec<ImuSample>,
    published: Vec<KeyframeRecord>,
}

impl SlidingWindow {
    pub fn new(config: InnerConfig) -> Self {
        let extrinsic = config.t_bc;
        Self {
            config,
            frames: Vec::new(),
            landmarks: BTreeMap::new(),
            extrinsic,
            prior: None,
            correction_mailbox: None,
            correction: UnitQuaternion::identity(),
            pending_imu: Vec::new(),
            published: Vec::new(),
        }
    }

    pub fn num_keyframes(&self) -> usize {
        self.frames.len()
    }

    pub fn states(&self) -> Vec<FrameState> {
        self.frames.iter().map(|f| f.state).collect()
    }

    pub fn extrinsic(&self) -> Pose {
        self.extrinsic
    }

    pub fn world_correction(&self) -> UnitQuaternion<f64> {
        self.correction
    }

    /// Drain keyframe records published since the last call.
    pub fn take_published(&mut self) -> Vec<KeyframeRecord> {
        std::mem::take(&mut self.published)
    }

    /// Deposit a new world correction; it takes effect before the next solve.
    pub fn apply_world_correction(&mut self, q_w_w0: UnitQuaternion<f64>) {
        self.correction_mailbox = Some(q_w_w0);
    }

    /// Seed a keyframe with a known state (initialization bootstrap).
    pub fn push_initialized_frame(
        &mut self,
        input: FrameInput,
        state: FrameState,
    ) -> Result<(), InnerError> {
        if let Some(last) = self.frames.last() {
            if input.t_ns <= last.state.t_ns {
                return Err(InnerError::NonMonotonicTime { t_ns: input.t_ns });
            }
        }
        let preint = if self.frames.is_empty() {
            None
        } else {
            let prev = self.frames.last().expect("nonempty");
            Some(preintegrate(
                &input.imu_segment,
                prev.state.gyro_bias,
                prev.state.accel_bias,
                self.config.imu_noise,
            )?)
        };
        self.insert_keyframe(input, state, preint);
        Ok(())
    }

    /// Gauge prior on the first keyframe: pins w0 position and yaw strongly,
    /// roll/pitch weakly (gravity owns them), and regularizes velocity and
    /// biases around the initialization values.
    pub fn install_gauge_prior(&mut self, bg_sigma: f64, ba_sigma: f64) {
        let f = &self.frames[0];
        let pose_lin = solver::pose_to_ambient(&f.state.position, &f.state.attitude);
        let sb_lin = sb_ambient(&f.state);
        let sigmas = [
            0.01, 0.01, 0.01, // position (gauge)
            0.05, 0.05, 0.001, // rotation: roll/pitch loose, yaw pinned
            0.1, 0.1, 0.1, // velocity
            bg_sigma, bg_sigma, bg_sigma, ba_sigma, ba_sigma, ba_sigma,
        ];
        let mut h = DMatrix::zeros(15, 15);
        for (i, s) in sigmas.iter().enumerate() {
            h[(i, i)] = 1.0 / (s * s);
        }
        let prior = MarginalPrior::from_information(
            vec![
                (Manifold::Pose3, pose_lin),
                (Manifold::Euclidean(9), sb_lin),
            ],
            &h,
            &DVector::zeros(15),
        );
        let keys = vec![PriorKey::Pose(f.frame_id), PriorKey::SpeedBias(f.frame_id)];
        self.prior = Some((prior, keys));
    }

    /// Register a landmark with a known anchor and inverse depth (bootstrap).
    pub fn seed_landmark(&mut self, track_id: u64, anchor_frame: usize, inverse_depth: f64) {
        if let Some(entry) = self.landmarks.get_mut(&track_id) {
            entry.anchor_frame = anchor_frame;
            entry.inverse_depth = Some(inverse_depth);
        }
    }

    fn insert_keyframe(
        &mut self,
        input: FrameInput,
        state: FrameState,
        preint: Option<Preintegration>,
    ) {
        let mut obs_map = BTreeMap::new();
        for (id, uv) in &input.observations {
            obs_map.insert(*id, *uv);
            let entry = self.landmarks.entry(*id).or_insert_with(|| LandmarkEntry {
                anchor_frame: input.frame_id,
                inverse_depth: None,
                observations: BTreeMap::new(),
            });
            entry.observations.insert(input.frame_id, *uv);
        }
        self.frames.push(Keyframe {
            frame_id: input.frame_id,
            state,
            observations: obs_map,
            preint,
            imu_segment: input.imu_segment,
            gnss_velocity: input.gnss_velocity,
        });
    }

    /// Append a frame: keyframe by parallax/track-count policy against the
    /// last keyframe, with state predicted by IMU propagation. Non-keyframes
    /// are discarded and their IMU chained into the next segment.
    pub fn add_frame(&mut self, input: FrameInput) -> Result<KeyframeDecision, InnerError> {
        let Some(last) = self.frames.last() else {
            // First frame: always a keyframe, state at origin.
            let state = FrameState {
                t_ns: input.t_ns,
                position: Vector3::zeros(),
                attitude: UnitQuaternion::identity(),
                velocity: Vector3::zeros(),
                gyro_bias: Vector3::zeros(),
                accel_bias: Vector3::zeros(),
            };
            self.insert_keyframe(input, state, None);
            return Ok(KeyframeDecision::Keyframe);
        };
        if input.t_ns <= last.state.t_ns {
            return Err(InnerError::NonMonotonicTime { t_ns: input.t_ns });
        }

        // Chain any pending (discarded-frame) IMU with this segment.
        let mut segment = std::mem::take(&mut self.pending_imu);
        if segment.is_empty() {
            segment = input.imu_segment.clone();
        } else {
            let start = segment.last().map(|s| s.t_ns).unwrap_or(i64::MIN);
            segment.extend(input.imu_segment.iter().filter(|s| s.t_ns > start));
        }

        // Keyframe policy against the last keyframe.
        let mut shared = 0usize;
        let mut parallax_sum = 0.0;
        for (id, uv) in &input.observations {
            if let Some(prev_uv) = last.observations.get(id) {
                shared += 1;
                parallax_sum += (uv - prev_uv).norm();
            }
        }
        let mean_parallax = if shared > 0 {
            parallax_sum / shared as f64
        } else {
            f64::INFINITY
        };
        let tracked_ratio = shared as f64 / last.observations.len().max(1) as f64;
        let is_keyframe = mean_parallax >= self.config.keyframe_parallax
            || tracked_ratio < self.config.keyframe_track_ratio;

        if !is_keyframe {
            self.pending_imu = segment;
            return Ok(KeyframeDecision::Discarded);
        }

        let preint = preintegrate(
            &segment,
            last.state.gyro_bias,
            last.state.accel_bias,
            self.config.imu_noise,
        )?;
        let state = preint.propagate(&last.state, self.config.gravity);
        let state = FrameState {
            t_ns: input.t_ns,
            ..state
        };
        self.insert_keyframe(
            FrameInput {
                imu_segment: segment,
                ..input
            },
            state,
            Some(preint),
        );
        self.triangulate_new_landmarks();
        Ok(KeyframeDecision::Keyframe)
    }

    fn camera_pose(&self, state: &FrameState) -> Pose {
        state.pose().compose(&self.extrinsic)
    }

    fn frame_index(&self, frame_id: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.frame_id == frame_id)
    }

    /// Triangulate landmarks with two or more in-window observations and no
    /// depth yet.
    pub fn triangulate_new_landmarks(&mut self) {
        let cam_poses: Vec<Pose> = self
            .frames
            .iter()
            .map(|f| self.camera_pose(&f.state))
            .collect();
        let in_window: Vec<usize> = self.frames.iter().map(|f| f.frame_id).collect();
        for entry in self.landmarks.values_mut() {
            if entry.inverse_depth.is_some() {
                continue;
            }
            let obs: Vec<(usize, Vector2<f64>)> = entry
                .observations
                .iter()
                .filter_map(|(fid, uv)| in_window.iter().position(|&w| w == *fid).map(|k| (k, *uv)))
                .collect();
            if obs.len() < 2 {
                continue;
            }
            match triangulate(&cam_poses, &obs, self.config.min_triangulation_parallax) {
                Ok(lambda) => {
                    entry.anchor_frame = in_window[obs[0].0];
                    entry.inverse_depth = Some(lambda);
                }
                Err(SfmError::LowParallax { .. }) => {}
                Err(_) => {}
            }
        }
    }

    /// Landmarks usable in the optimization: anchored in-window with depth
    /// and at least two in-window observations; capped at `max_landmarks`
    /// with the most-observed tracks winning (ties by id for determinism).
    fn active_landmarks(&self) -> Vec<u64> {
        let mut scored: Vec<(usize, u64)> = self
            .landmarks
            .iter()
            .filter_map(|(id, e)| {
                if e.inverse_depth.is_none() || self.frame_index(e.anchor_frame).is_none() {
                    return None;
                }
                let obs = e
                    .observations
                    .keys()
                    .filter(|fid| self.frame_index(**fid).is_some())
                    .count();
                (obs >= 2).then_some((obs, *id))
            })
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(self.config.max_landmarks);
        let mut ids: Vec<u64> = scored.into_iter().map(|(_, id)| id).collect();
        ids.sort_unstable();
        ids
    }

    /// Minimize prior + Σρ(reprojection) + Σ preintegration + Σρ(GNSS
    /// velocity); updates states, biases, landmark depths and (optionally)
    /// the extrinsic in place.
    pub fn optimize_window(&mut self) -> Result<WindowSolveOutcome, InnerError> {
        if self.frames.len() < 2 {
            return Err(InnerError::DegenerateWindow);
        }
        if let Some(q) = self.correction_mailbox.take() {
            self.correction = q;
        }
        let (mut problem, index) = self.build_problem(false);
        let report = solver::solve(
            &mut problem,
            &SolveOptions {
                max_iterations: self.config.max_iterations,
                cost_tolerance: 1e-6,
                ..Default::default()
            },
        )?;
        self.read_back(&problem, &index);

        // Re-preintegrate segments whose linearization bias drifted too far.
        for k in 1..self.frames.len() {
            let prev_state = self.frames[k - 1].state;
            let frame = &mut self.frames[k];
            if let Some(p) = &frame.preint {
                let dbg = (prev_state.gyro_bias - p.lin_gyro_bias).norm();
                let dba = (prev_state.accel_bias - p.lin_accel_bias).norm();
                if (dbg > 0.01 || dba > 0.1) && frame.imu_segment.len() >= 2 {
                    frame.preint = Some(preintegrate(
                        &frame.imu_segment,
                        prev_state.gyro_bias,
                        prev_state.accel_bias,
                        self.config.imu_noise,
                    )?);
                }
            }
        }

        // Positive-depth enforcement: re-triangulate violators, drop failures.
        let mut dropped = 0usize;
        let mut retriangulated = 0usize;
        let cam_poses: Vec<Pose> = self
            .frames
            .iter()
            .map(|f| self.camera_pose(&f.state))
            .collect();
        let in_window: Vec<usize> = self.frames.iter().map(|f| f.frame_id).collect();
        let ids: Vec<u64> = self.landmarks.keys().copied().collect();
        for id in ids {
            let entry = self.landmarks.get_mut(&id).expect("landmark exists");
            let Some(lambda) = entry.inverse_depth else {
                continue;
            };
            if lambda > 1e-6 {
                continue;
            }
            let obs: Vec<(usize, Vector2<f64>)> = entry
                .observations
                .iter()
                .filter_map(|(fid, uv)| in_window.iter().position(|&w| w == *fid).map(|k| (k, *uv)))
                .collect();
            match triangulate(&cam_poses, &obs, self.config.min_triangulation_parallax) {
                Ok(l) if l > 1e-6 => {
                    entry.anchor_frame = in_window[obs[0].0];
                    entry.inverse_depth = Some(l);
                    retriangulated += 1;
                }
                _ => {
                    self.landmarks.remove(&id);
                    dropped += 1;
                }
            }
        }

        Ok(WindowSolveOutcome {
            report,
            dropped_landmarks: dropped,
            retriangulated,
        })
    }

    /// Schur-complement the oldest keyframe (and the landmarks anchored in
    /// it) into the marginal prior, re-anchor still-observed landmarks, and
    /// publish the retired keyframe record.
    pub fn marginalize_oldest(&mut self) -> Result<(), InnerError> {
        if self.frames.len() < 2 {
            return Err(InnerError::DegenerateWindow);
        }
        let oldest_id = self.frames[0].frame_id;

        // Marginalization problem: only factors that involve the oldest
        // frame as prior, preintegration link, or reprojection anchor.
        let (problem, index) = self.build_problem(true);
        let mut drop: Vec<BlockId> = vec![index.pose_ids[&oldest_id], index.sb_ids[&oldest_id]];
        for (id, block) in &index.lambda_ids {
            if self.landmarks[id].anchor_frame == oldest_id {
                drop.push(*block);
            }
        }
        let (prior, border) = marginalize(&problem, &drop)?;
        let keys: Vec<PriorKey> = border
            .iter()
            .map(|b| index.key_of(*b).expect("border key"))
            .collect();
        if !prior.is_empty() {
            self.prior = Some((prior, keys));
        } else {
            self.prior = None;
        }

        // Publish the retiring keyframe with its marginal pose covariance.
        let cov_diag = self.pose_covariance_diag(oldest_id);
        let retiring = &self.frames[0];
        self.published.push(KeyframeRecord {
            frame_id: retiring.frame_id,
            t_ns: retiring.state.t_ns,
            position: retiring.state.position,
            attitude: retiring.state.attitude,
            velocity: retiring.state.velocity,
            pose_cov_diag: cov_diag,
            gnss_velocity: retiring.gnss_velocity,
        });

        // Remove the frame; re-anchor or prune its landmarks.
        let removed = self.frames.remove(0);
        let still_in: Vec<usize> = self.frames.iter().map(|f| f.frame_id).collect();
        let cam_pose_old = self.camera_pose(&removed.state);
        let cam_poses_by_id: BTreeMap<usize, Pose> = self
            .frames
            .iter()
            .map(|f| (f.frame_id, self.camera_pose(&f.state)))
            .collect();
        let ids: Vec<u64> = self.landmarks.keys().copied().collect();
        for id in ids {
            let entry = self.landmarks.get_mut(&id).expect("landmark exists");
            entry.observations.remove(&removed.frame_id);
            if entry.anchor_frame == removed.frame_id {
                // World point from the old anchor, re-anchored to the next
                // observing frame still in the window.
                let new_anchor = entry
                    .observations
                    .keys()
                    .find(|fid| still_in.contains(fid))
                    .copied();
                match (entry.inverse_depth, new_anchor) {
                    (Some(lambda), Some(anchor_id)) => {
                        let uv = removed.observations.get(&id).copied();
                        let world = uv.map(|uv| {
                            cam_pose_old.transform_point(&(Vector3::new(uv.x, uv.y, 1.0) / lambda))
                        });
                        let cam_new = cam_poses_by_id[&anchor_id];
                        let depth = world
                            .map(|w| cam_new.inverse().transform_point(&w).z)
                            .unwrap_or(0.0);
                        entry.anchor_frame = anchor_id;
                        entry.inverse_depth = (depth > 1e-3).then(|| 1.0 / depth);
                    }
                    _ => {
                        self.landmarks.remove(&id);
                    }
                }
            } else if entry.observations.is_empty() {
                self.landmarks.remove(&id);
            }
        }
        self.triangulate_new_landmarks();
        Ok(())
    }

    /// Marginal covariance diagonal of a keyframe pose from the full window
    /// normal equations (Gauss-Newton approximation at current values).
    fn pose_covariance_diag(&self, frame_id: usize) -> DVector<f64> {
        let (problem, index) = self.build_problem(false);
        let fallback = DVector::from_element(6, 1e-4);
        let Some(pose_block) = index.pose_ids.get(&frame_id) else {
            return fallback;
        };
        match solver_information_diag(&problem, *pose_block) {
            Some(d) => d,
            None => fallback,
        }
    }

    /// True if the window is at capacity and should marginalize.
    pub fn needs_marginalization(&self) -> bool {
        self.frames.len() > self.config.window_size
    }

    fn read_back(&mut self, problem: &Problem, index: &ProblemIndex) {
        for frame in self.frames.iter_mut() {
            let (p, q) = solver::pose_from_ambient(
                &problem.value(index.pose_ids[&frame.frame_id]).as_view(),
            );
            let sb = problem.value(index.sb_ids[&frame.frame_id]);
            frame.state.position = p;
            frame.state.attitude = q;
            frame.state.velocity = Vector3::new(sb[0], sb[1], sb[2]);
            frame.state.gyro_bias = Vector3::new(sb[3], sb[4], sb[5]);
            frame.state.accel_bias = Vector3::new(sb[6], sb[7], sb[8]);
        }
        if let Some(ext_id) = index.extrinsic_id {
            let (p, q) = solver::pose_from_ambient(&problem.value(ext_id).as_view());
            self.extrinsic = Pose::new(q, p);
        }
        for (id, block) in &index.lambda_ids {
            if let Some(entry) = self.landmarks.get_mut(id) {
                entry.inverse_depth = Some(problem.value(*block)[0]);
            }
        }
    }
}

fn sb_ambient(state: &FrameState) -> DVector<f64> {
    DVector::from_iterator(
        9,
        state
            .velocity
            .iter()
            .chain(state.gyro_bias.iter())
            .chain(state.accel_bias.iter())
            .copied(),
    )
}

/// Index of problem blocks per window entity.
pub(crate) struct ProblemIndex {
    pose_ids: BTreeMap<usize, BlockId>,
    sb_ids: BTreeMap<usize, BlockId>,
    extrinsic_id: Option<BlockId>,
    lambda_ids: BTreeMap<u64, BlockId>,
}

impl ProblemIndex {
    fn key_of(&self, block: BlockId) -> Option<PriorKey> {
        if Some(block) == self.extrinsic_id {
            return Some(PriorKey::Extrinsic);
        }
        for (fid, b) in &self.pose_ids {
            if *b == block {
                return Some(PriorKey::Pose(*fid));
            }
        }
        for (fid, b) in &self.sb_ids {
            if *b == block {
                return Some(PriorKey::SpeedBias(*fid));
            }
        }
        None
    }
}

/// Diagonal of the covariance block for one variable from the full weighted
/// normal equations.
fn solver_information_diag(problem: &Problem, block: BlockId) -> Option<DVector<f64>> {
    let (h, offsets) = assemble_normal_equations(problem)?;
    let (offset, dim) = offsets.get(&block).copied()?;
    let n = h.nrows();

    // Schur-eliminate scalar (landmark) blocks first: their H block is
    // diagonal, so the reduction is linear-time and the remaining dense
    // inverse stays small.
    let mut scalar = vec![false; n];
    for (b, (o, d)) in &offsets {
        if *d == 1 && *b != block && problem.manifold(*b).tangent_dim() == 1 {
            scalar[*o] = true;
        }
    }
    let keep: Vec<usize> = (0..n).filter(|i| !scalar[*i]).collect();
    let drop: Vec<usize> = (0..n).filter(|i| scalar[*i]).collect();
    let mut reduced = DMatrix::zeros(keep.len(), keep.len());
    for (ri, &i) in keep.iter().enumerate() {
        for (rj, &j) in keep.iter().enumerate() {
            reduced[(ri, rj)] = h[(i, j)];
        }
    }
    for &s in &drop {
        let d = h[(s, s)];
        if d.abs() < 1e-12 {
            continue;
        }
        let col: Vec<f64> = keep.iter().map(|&i| h[(i, s)]).collect();
        for (ri, &ci) in col.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            for (rj, &cj) in col.iter().enumerate() {
                reduced[(ri, rj)] -= ci * cj / d;
            }
        }
    }
    for i in 0..reduced.nrows() {
        reduced[(i, i)] += 1e-12 * reduced[(i, i)].abs().max(1e-9);
    }
    let cov = reduced.try_inverse()?;
    let pose_rows: Vec<usize> = (0..dim)
        .map(|i| keep.iter().position(|&k| k == offset + i).expect("kept"))
        .collect();
    Some(DVector::from_fn(dim, |i, _| {
        cov[(pose_rows[i], pose_rows[i])]
    }))
}

fn assemble_normal_equations(
    problem: &Problem,
) -> Option<(DMatrix<f64>, BTreeMap<BlockId, (usize, usize)>)> {
    // Rebuild the Gauss-Newton H over free blocks at current values.
    let mut offsets = BTreeMap::new();
    let mut total = 0usize;
    for i in 0..problem.num_blocks() {
        let id = BlockId(i);
        if problem.is_fixed(id) {
            continue;
        }
        let d = problem.manifold(id).tangent_dim();
        offsets.insert(id, (total, d));
        total += d;
    }
    let mut h = DMatrix::<f64>::zeros(total, total);
    let mut entries: Vec<(Vec<BlockId>, Vec<DMatrix<f64>>, f64)> = Vec::new();
    problem.collect_weighted_jacobians(&mut entries).ok()?;
    for (blocks, jacs, weight) in entries {
        for (bi, jb) in blocks.iter().zip(jacs.iter()) {
            let Some((oi, di)) = offsets.get(bi).copied() else {
                continue;
            };
            for (bj, jj) in blocks.iter().zip(jacs.iter()) {
                let Some((oj, dj)) = offsets.get(bj).copied() else {
                    continue;
                };
                let blockm = jb.transpose() * jj * weight;
                let mut view = h.view_mut((oi, oj), (di, dj));
                view += blockm;
            }
        }
    }
    Some((h, offsets))
}

impl SlidingWindow {
    fn build_problem(&self, for_marginalization: bool) -> (Problem, ProblemIndex) {
        let mut problem = Problem::new();
        let mut index = ProblemIndex {
            pose_ids: BTreeMap::new(),
            sb_ids: BTreeMap::new(),
            extrinsic_id: None,
            lambda_ids: BTreeMap::new(),
        };
        for f in &self.frames {
            let pose = problem.add_block(
                Manifold::Pose3,
                solver::pose_to_ambient(&f.state.position, &f.state.attitude),
            );
            let sb = problem.add_block(Manifold::Euclidean(9), sb_ambient(&f.state));
            index.pose_ids.insert(f.frame_id, pose);
            index.sb_ids.insert(f.frame_id, sb);
        }
        let estimate_ext = self.config.extrinsic_mode == ExtrinsicMode::Estimated;
        let ext_block = problem.add_block(
            Manifold::Pose3,
            solver::pose_to_ambient(&self.extrinsic.translation, &self.extrinsic.rotation),
        );
        // The extrinsic never enters the marginal prior: accumulated
        // frozen-Jacobian information would pin the calibration at its early
        // (wrong) linearization and bias the online estimate.
        problem.set_fixed(ext_block, !estimate_ext || for_marginalization);
        index.extrinsic_id = Some(ext_block);

        let oldest_id = self.frames[0].frame_id;
        let active = self.active_landmarks();
        for id in &active {
            let entry = &self.landmarks[id];
            if for_marginalization && entry.anchor_frame != oldest_id {
                continue;
            }
            let lambda = entry.inverse_depth.expect("active landmark has depth");
            let block = problem.add_block(Manifold::Euclidean(1), DVector::from_element(1, lambda));
            index.lambda_ids.insert(*id, block);
        }

        // Marginal prior.
        if let Some((prior, keys)) = &self.prior {
            let touches_oldest = keys.iter().any(
                |k| matches!(k, PriorKey::Pose(f) | PriorKey::SpeedBias(f) if *f == oldest_id),
            );
            if !for_marginalization || touches_oldest {
                let blocks: Vec<BlockId> = keys
                    .iter()
                    .map(|k| match k {
                        PriorKey::Pose(f) => index.pose_ids[f],
                        PriorKey::SpeedBias(f) => index.sb_ids[f],
                        PriorKey::Extrinsic => ext_block,
                    })
                    .collect();
                problem.add_residual(
                    &blocks,
                    Box::new(prior.to_factor()),
                    None,
                    RobustLoss::None,
                    "marginal_prior",
                );
            }
        }

        // Preintegration factors between consecutive keyframes.
        for k in 1..self.frames.len() {
            if for_marginalization && k != 1 {
                continue;
            }
            let f = &self.frames[k];
            if let Some(p) = &f.preint {
                let omega = p.residual_information();
                let prev_id = self.frames[k - 1].frame_id;
                problem.add_residual(
                    &[
                        index.pose_ids[&prev_id],
                        index.sb_ids[&prev_id],
                        index.pose_ids[&f.frame_id],
                        index.sb_ids[&f.frame_id],
                    ],
                    Box::new(PreintFactor {
                        preint: p.clone(),
                        gravity: self.config.gravity,
                    }),
                    Some(omega),
                    RobustLoss::None,
                    "preintegration",
                );
            }
        }

        // Reprojection factors.
        let reproj_info =
            DMatrix::identity(2, 2) / (self.config.reproj_sigma * self.config.reproj_sigma);
        for id in &active {
            let Some(lambda_block) = index.lambda_ids.get(id).copied() else {
                continue;
            };
            let entry = &self.landmarks[id];
            let anchor_id = entry.anchor_frame;
            let Some(anchor_uv) = entry.observations.get(&anchor_id) else {
                continue;
            };
            for (fid, uv) in &entry.observations {
                if *fid == anchor_id || !index.pose_ids.contains_key(fid) {
                    continue;
                }
                let mut blocks = vec![index.pose_ids[&anchor_id], index.pose_ids[fid]];
                if estimate_ext {
                    blocks.push(ext_block);
                }
                blocks.push(lambda_block);
                problem.add_residual(
                    &blocks,
                    Box::new(ReprojFactor {
                        anchor_obs: *anchor_uv,
                        target_obs: *uv,
                        fixed_extrinsic: (!estimate_ext).then_some(self.extrinsic),
                    }),
                    Some(reproj_info.clone()),
                    RobustLoss::Huber {
                        delta: self.config.huber_delta,
                    },
                    "reprojection",
                );
            }
        }

        // GNSS velocity factors.
        if self.config.use_gnss_velocity && !for_marginalization {
            for f in &self.frames {
                let Some(sample) = &f.gnss_velocity else {
                    continue;
                };
                if !sample.velocity_valid {
                    continue;
                }
                let mut omega = DMatrix::zeros(3, 3);
                for i in 0..3 {
                    let s = sample.vel_sigma[i].max(1e-3);
                    omega[(i, i)] = 1.0 / (s * s);
                }
                problem.add_residual(
                    &[index.sb_ids[&f.frame_id]],
                    Box::new(VelocityFactor {
                        measured: sample.velocity,
                        correction: self.correction,
                    }),
                    Some(omega),
                    RobustLoss::Huber {
                        delta: self.config.huber_delta,
                    },
                    "gnss_velocity",
                );
            }
        }

        (problem, index)
    }
}
