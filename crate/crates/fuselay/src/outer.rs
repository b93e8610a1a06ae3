//! Loosely-coupled 4-DOF pose graph (outer layer): fuses inner-layer
//! keyframe poses with GNSS position and course over a long horizon, and
//! estimates the world-frame correction q_w_w0 and the antenna lever arm
//! online.
//!
//! Nodes carry position and yaw only; pitch and roll are frozen from the
//! inner-layer attitude at node creation (gravity makes them observable
//! there, while GNSS z is deliberately soft).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{
    compose_quat, compose_ypr, decompose_ypr, rotation_residual, vec_jacobian_left_perturb,
    vec_jacobian_right_perturb, wrap_angle, yaw_quat, yaw_rotation_derivative, EulerYPR,
};
use crate::inner::KeyframeRecord;
use crate::io::TrajectoryRecord;
use crate::simulator::{GnssSample, COURSE_SPEED_THRESHOLD};
use crate::solver::{
    self, BlockId, Factor, Manifold, Problem, RobustLoss, SolveOptions, SolveReport, SolverError,
};

#[derive(Debug, Error)]
pub enum OuterError {
    #[error("node timestamp {t_ns} not after the previous node")]
    NonMonotonicTime { t_ns: i64 },
    #[error("pose graph needs at least two nodes")]
    TooFewNodes,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Course over ground from a GNSS sample: `atan2(v_N, v_E)`; `None` below
/// the speed threshold where Doppler-derived course is meaningless.
pub fn gnss_course(sample: &GnssSample) -> Option<f64> {
    if !sample.velocity_valid {
        return None;
    }
    let h = sample.velocity.xy().norm();
    (h >= COURSE_SPEED_THRESHOLD).then(|| sample.velocity.y.atan2(sample.velocity.x))
}

#[derive(Debug, Clone)]
pub struct OuterConfig {
    /// Bounded node horizon; retired nodes are frozen and written out.
    pub horizon: usize,
    /// Solve cadence in new nodes.
    pub solve_every: usize,
    /// Yaw-only world correction (4-DOF reasoning); full 3-DOF otherwise.
    pub yaw_only_correction: bool,
    /// Course sigma at 2 m/s, scaled inversely with speed.
    pub course_sigma_at_2ms: f64,
    pub rel_translation_sigma: f64,
    pub rel_yaw_sigma: f64,
    pub abs_yaw_sigma: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub estimate_lever_arm: bool,
    /// Weak prior pulling the lever arm toward its initial (calibration)
    /// value; regularizes directions the trajectory does not excite.
    pub lever_prior_sigma: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            horizon: 200,
            solve_every: 10,
            yaw_only_correction: true,
            course_sigma_at_2ms: 5.0_f64.to_radians(),
            rel_translation_sigma: 0.05,
            rel_yaw_sigma: 0.01,
            abs_yaw_sigma: 0.02,
            huber_delta: 1.0,
            max_iterations: 15,
            estimate_lever_arm: true,
            lever_prior_sigma: 0.1,
        }
    }
}

/// ζ_k: position and yaw are free, pitch/roll immutable after creation.
#[derive(Debug, Clone)]
pub struct PoseGraphNode {
    pub frame_id: usize,
    pub t_ns: i64,
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Inner-layer (w0-frame) pose snapshot backing the relative priors.
    pub w0_position: Vector3<f64>,
    pub w0_attitude: UnitQuaternion<f64>,
    pub gnss: Option<GnssSample>,
}

impl PoseGraphNode {
    pub fn attitude(&self) -> UnitQuaternion<f64> {
        compose_ypr(&EulerYPR {
            yaw: self.yaw,
            pitch: self.pitch,
            roll: self.roll,
        })
    }
}

pub struct PoseGraph {
    pub config: OuterConfig,
    nodes: VecDeque<PoseGraphNode>,
    correction: UnitQuaternion<f64>,
    lever_arm: Vector3<f64>,
    lever_prior: Vector3<f64>,
    nodes_since_solve: usize,
    solved_once: bool,
    retired: Vec<TrajectoryRecord>,
}

impl PoseGraph {
    pub fn new(config: OuterConfig, initial_lever_arm: Vector3<f64>) -> Self {
        Self {
            config,
            nodes: VecDeque::new(),
            correction: UnitQuaternion::identity(),
            lever_arm: initial_lever_arm,
            lever_prior: initial_lever_arm,
            nodes_since_solve: 0,
            solved_once: false,
            retired: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PoseGraphNode> {
        self.nodes.iter()
    }

    pub fn lever_arm(&self) -> Vector3<f64> {
        self.lever_arm
    }

    /// Current world correction estimate as a quaternion.
    pub fn correction(&self) -> UnitQuaternion<f64> {
        self.correction
    }

    /// Immutable correction snapshot for the inner layer; identity before
    /// the first successful solve, and idempotent between solves.
    pub fn publish_correction(&self) -> UnitQuaternion<f64> {
        if self.solved_once {
            self.correction
        } else {
            UnitQuaternion::identity()
        }
    }

    /// Append a node from an inner-layer keyframe record with an attached
    /// (time-matched) GNSS sample. The course factor is gated on validity.
    pub fn add_node(
        &mut self,
        record: &KeyframeRecord,
        gnss: Option<GnssSample>,
    ) -> Result<(), OuterError> {
        if let Some(last) = self.nodes.back() {
            if record.t_ns <= last.t_ns {
                return Err(OuterError::NonMonotonicTime { t_ns: record.t_ns });
            }
        }
        // World attitude estimate through the current correction; yaw-only
        // corrections leave pitch/roll exactly equal to the BA values.
        let q_w = compose_quat(&self.correction, &record.attitude);
        let e = decompose_ypr(&q_w).unwrap_or(EulerYPR {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
        });
        let position = match self.nodes.back() {
            Some(prev) => {
                // Propagate the world position through the corrected
                // relative displacement to keep the local shape.
                prev.position + self.correction * (record.position - prev.w0_position)
            }
            None => match &gnss {
                Some(s) => s.position - q_w * self.lever_arm,
                None => self.correction * record.position,
            },
        };
        self.nodes.push_back(PoseGraphNode {
            frame_id: record.frame_id,
            t_ns: record.t_ns,
            position,
            yaw: e.yaw,
            pitch: e.pitch,
            roll: e.roll,
            w0_position: record.position,
            w0_attitude: record.attitude,
            gnss,
        });
        self.nodes_since_solve += 1;
        while self.nodes.len() > self.config.horizon {
            let node = self.nodes.pop_front().expect("nonempty");
            self.retired.push(TrajectoryRecord {
                t_ns: node.t_ns,
                pose: crate::geometry::Pose::new(node.attitude(), node.position),
            });
        }
        Ok(())
    }

    /// True when the solve cadence has elapsed.
    pub fn due_for_solve(&self) -> bool {
        self.nodes.len() >= 2 && self.nodes_since_solve >= self.config.solve_every
    }

    /// Fused world-frame trajectory: retired nodes plus the current horizon.
    pub fn fused_trajectory(&self) -> Vec<TrajectoryRecord> {
        let mut out = self.retired.clone();
        out.extend(self.nodes.iter().map(|n| TrajectoryRecord {
            t_ns: n.t_ns,
            pose: crate::geometry::Pose::new(n.attitude(), n.position),
        }));
        out
    }

    /// Minimize the five residual classes (relative translation, relative
    /// rotation, absolute yaw, GNSS course, GNSS position) over node
    /// positions/yaws plus the global correction and lever-arm blocks.
    pub fn optimize_graph(&mut self) -> Result<SolveReport, OuterError> {
        if self.nodes.len() < 2 {
            return Err(OuterError::TooFewNodes);
        }
        self.nodes_since_solve = 0;
        let mut problem = Problem::new();
        let n = self.nodes.len();

        let mut p_blocks = Vec::with_capacity(n);
        let mut yaw_blocks = Vec::with_capacity(n);
        for node in &self.nodes {
            p_blocks.push(problem.add_block(
                Manifold::Euclidean(3),
                DVector::from_column_slice(node.position.as_slice()),
            ));
            yaw_blocks.push(problem.add_block(Manifold::Angle, DVector::from_element(1, node.yaw)));
        }
        let correction_block: CorrectionBlock = if self.config.yaw_only_correction {
            let e = decompose_ypr(&self.correction).unwrap_or(EulerYPR {
                yaw: 0.0,
                pitch: 0.0,
                roll: 0.0,
            });
            CorrectionBlock::YawOnly(
                problem.add_block(Manifold::Angle, DVector::from_element(1, e.yaw)),
            )
        } else {
            CorrectionBlock::Full(problem.add_block(
                Manifold::UnitQuat,
                solver::quat_to_ambient(&self.correction),
            ))
        };
        let lever_block = problem.add_block(
            Manifold::Euclidean(3),
            DVector::from_column_slice(self.lever_arm.as_slice()),
        );
        problem.set_fixed(lever_block, !self.config.estimate_lever_arm);
        if self.config.estimate_lever_arm {
            let sp = self.config.lever_prior_sigma.max(1e-4);
            problem.add_residual(
                &[lever_block],
                Box::new(crate::solver::LinearFactor {
                    mats: vec![DMatrix::identity(3, 3)],
                    rhs: DVector::from_column_slice(self.lever_prior.as_slice()),
                }),
                Some(DMatrix::identity(3, 3) / (sp * sp)),
                RobustLoss::None,
                "lever_prior",
            );
        }

        let rel_p_info = DMatrix::identity(3, 3) / self.config.rel_translation_sigma.powi(2);
        let rel_yaw_info = DMatrix::identity(3, 3) / self.config.rel_yaw_sigma.powi(2);
        let abs_yaw_info = DMatrix::identity(3, 3) / self.config.abs_yaw_sigma.powi(2);

        for k in 0..n {
            let node = &self.nodes[k];
            if k + 1 < n {
                let next = &self.nodes[k + 1];
                let rel_w0 = node.w0_attitude.inverse() * (next.w0_position - node.w0_position);
                problem.add_residual(
                    &[p_blocks[k], p_blocks[k + 1], yaw_blocks[k]],
                    Box::new(RelTranslationFactor {
                        pitch: node.pitch,
                        roll: node.roll,
                        measured: rel_w0,
                    }),
                    Some(rel_p_info.clone()),
                    RobustLoss::None,
                    "rel_translation",
                );
                let rel_q = node.w0_attitude.inverse() * next.w0_attitude;
                problem.add_residual(
                    &[yaw_blocks[k], yaw_blocks[k + 1]],
                    Box::new(RelRotationFactor {
                        pitch_k: node.pitch,
                        roll_k: node.roll,
                        pitch_k1: next.pitch,
                        roll_k1: next.roll,
                        measured: rel_q,
                    }),
                    Some(rel_yaw_info.clone()),
                    RobustLoss::None,
                    "rel_rotation",
                );
            }
            // Absolute yaw prior tying node yaw to the corrected BA attitude.
            let abs_blocks: Vec<BlockId> = match correction_block {
                CorrectionBlock::YawOnly(b) => vec![yaw_blocks[k], b],
                CorrectionBlock::Full(b) => vec![yaw_blocks[k], b],
            };
            problem.add_residual(
                &abs_blocks,
                Box::new(AbsYawFactor {
                    pitch: node.pitch,
                    roll: node.roll,
                    w0_attitude: node.w0_attitude,
                    yaw_only: self.config.yaw_only_correction,
                }),
                Some(abs_yaw_info.clone()),
                RobustLoss::None,
                "abs_yaw",
            );
            if let Some(gnss) = &node.gnss {
                if gnss.position_valid {
                    let mut omega = DMatrix::zeros(3, 3);
                    for i in 0..3 {
                        let s = gnss.pos_sigma[i].max(1e-3);
                        omega[(i, i)] = 1.0 / (s * s);
                    }
                    problem.add_residual(
                        &[p_blocks[k], yaw_blocks[k], lever_block],
                        Box::new(GnssPositionFactor {
                            pitch: node.pitch,
                            roll: node.roll,
                            measured: gnss.position,
                        }),
                        Some(omega),
                        RobustLoss::Huber {
                            delta: self.config.huber_delta,
                        },
                        "gnss_position",
                    );
                }
                if let Some(course) = gnss_course(gnss) {
                    let speed = gnss.velocity.xy().norm();
                    let sigma = self.config.course_sigma_at_2ms * (2.0 / speed.max(0.5));
                    problem.add_residual(
                        &[yaw_blocks[k]],
                        Box::new(CourseFactor { measured: course }),
                        Some(DMatrix::from_element(1, 1, 1.0 / (sigma * sigma))),
                        RobustLoss::Huber {
                            delta: self.config.huber_delta,
                        },
                        "gnss_course",
                    );
                }
            }
        }

        let report = solver::solve(
            &mut problem,
            &SolveOptions {
                max_iterations: self.config.max_iterations,
                ..Default::default()
            },
        )?;

        for (k, node) in self.nodes.iter_mut().enumerate() {
            let p = problem.value(p_blocks[k]);
            node.position = Vector3::new(p[0], p[1], p[2]);
            node.yaw = problem.value(yaw_blocks[k])[0];
        }
        self.correction = match correction_block {
            CorrectionBlock::YawOnly(b) => yaw_quat(problem.value(b)[0]),
            CorrectionBlock::Full(b) => solver::quat_from_ambient(&problem.value(b).as_view()),
        };
        let l = problem.value(lever_block);
        self.lever_arm = Vector3::new(l[0], l[1], l[2]);
        self.solved_once = true;
        Ok(report)
    }
}

#[derive(Clone, Copy)]
enum CorrectionBlock {
    YawOnly(BlockId),
    Full(BlockId),
}

fn rotation_from_angles(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    compose_ypr(&EulerYPR { yaw, pitch, roll })
        .to_rotation_matrix()
        .into_inner()
}

/// d q(φ,θ,γ) / dφ as a matrix: Rz'(φ) Ry(θ) Rx(γ).
fn rotation_yaw_derivative(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let ryx = compose_ypr(&EulerYPR {
        yaw: 0.0,
        pitch,
        roll,
    })
    .to_rotation_matrix()
    .into_inner();
    yaw_rotation_derivative(yaw) * ryx
}

/// `r = q(Φ_k)ᵀ (p_{k+1} − p_k) − Δp_w0`. Blocks `[p_k, p_{k+1}, φ_k]`.
pub struct RelTranslationFactor {
    pub pitch: f64,
    pub roll: f64,
    pub measured: Vector3<f64>,
}

impl Factor for RelTranslationFactor {
    fn dim(&self) -> usize {
        3
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let p_k = Vector3::new(values[0][0], values[0][1], values[0][2]);
        let p_k1 = Vector3::new(values[1][0], values[1][1], values[1][2]);
        let yaw = values[2][0];
        let rot = rotation_from_angles(yaw, self.pitch, self.roll);
        let delta = p_k1 - p_k;
        let r = rot.transpose() * delta - self.measured;
        if let Some(jacs) = jacobians {
            let rt = rot.transpose();
            jacs[0].copy_from(&DMatrix::from_iterator(3, 3, (-rt).iter().copied()));
            jacs[1].copy_from(&DMatrix::from_iterator(3, 3, rt.iter().copied()));
            let drot = rotation_yaw_derivative(yaw, self.pitch, self.roll);
            jacs[2].copy_from(&DMatrix::from_column_slice(
                3,
                1,
                (drot.transpose() * delta).as_slice(),
            ));
        }
        DVector::from_column_slice(r.as_slice())
    }
}

/// `r = 2 vec{ (q(Φ_k)⁻¹ q(Φ_{k+1}))⁻¹ ⊗ Δq_w0 }`. Blocks `[φ_k, φ_{k+1}]`.
pub struct RelRotationFactor {
    pub pitch_k: f64,
    pub roll_k: f64,
    pub pitch_k1: f64,
    pub roll_k1: f64,
    pub measured: UnitQuaternion<f64>,
}

impl Factor for RelRotationFactor {
    fn dim(&self) -> usize {
        3
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let q_k = compose_ypr(&EulerYPR {
            yaw: values[0][0],
            pitch: self.pitch_k,
            roll: self.roll_k,
        });
        let q_k1 = compose_ypr(&EulerYPR {
            yaw: values[1][0],
            pitch: self.pitch_k1,
            roll: self.roll_k1,
        });
        // (q_k⁻¹ q_{k+1})⁻¹ ⊗ measured = q_{k+1}⁻¹ ⊗ q_k ⊗ measured
        let q_err = q_k1.inverse() * q_k * self.measured;
        let r = DVector::from_column_slice(rotation_residual(&q_err).as_slice());
        if let Some(jacs) = jacobians {
            // Yaw perturbations act by left-multiplication with Exp(ε e_z).
            let u = (q_k * self.measured)
                .to_rotation_matrix()
                .into_inner()
                .transpose()
                * Vector3::z();
            let j_right = vec_jacobian_right_perturb(&q_err);
            jacs[0].copy_from(&DMatrix::from_column_slice(3, 1, (j_right * u).as_slice()));
            jacs[1].copy_from(&DMatrix::from_column_slice(
                3,
                1,
                (-(j_right * u)).as_slice(),
            ));
        }
        r
    }
}

/// `r = 2 vec{ (q_w_w0 ⊗ q_w0_bk)⁻¹ ⊗ q(Φ_k) }`. Blocks `[φ_k, correction]`.
pub struct AbsYawFactor {
    pub pitch: f64,
    pub roll: f64,
    pub w0_attitude: UnitQuaternion<f64>,
    pub yaw_only: bool,
}

impl Factor for AbsYawFactor {
    fn dim(&self) -> usize {
        3
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let q_node = compose_ypr(&EulerYPR {
            yaw: values[0][0],
            pitch: self.pitch,
            roll: self.roll,
        });
        let q_corr = if self.yaw_only {
            yaw_quat(values[1][0])
        } else {
            solver::quat_from_ambient(&values[1].as_view())
        };
        let combined = q_corr * self.w0_attitude;
        let q_err = combined.inverse() * q_node;
        let r = DVector::from_column_slice(rotation_residual(&q_err).as_slice());
        if let Some(jacs) = jacobians {
            let j_left = vec_jacobian_left_perturb(&q_err);
            let u = combined.to_rotation_matrix().into_inner().transpose() * Vector3::z();
            jacs[0].copy_from(&DMatrix::from_column_slice(3, 1, (j_left * u).as_slice()));
            if self.yaw_only {
                jacs[1].copy_from(&DMatrix::from_column_slice(
                    3,
                    1,
                    (-(j_left * u)).as_slice(),
                ));
            } else {
                let r_b_t = self
                    .w0_attitude
                    .to_rotation_matrix()
                    .into_inner()
                    .transpose();
                jacs[1].copy_from(&DMatrix::from_iterator(
                    3,
                    3,
                    (-(j_left * r_b_t)).iter().copied(),
                ));
            }
        }
        r
    }
}

/// `r = wrap(φ_k − course)`. Block `[φ_k]`.
pub struct CourseFactor {
    pub measured: f64,
}

impl Factor for CourseFactor {
    fn dim(&self) -> usize {
        1
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let r = wrap_angle(values[0][0] - self.measured);
        if let Some(jacs) = jacobians {
            jacs[0][(0, 0)] = 1.0;
        }
        DVector::from_element(1, r)
    }
}

/// `r = p_k + q(Φ_k) ⊗ t_b_g − p_gnss`. Blocks `[p_k, φ_k, t_b_g]`.
pub struct GnssPositionFactor {
    pub pitch: f64,
    pub roll: f64,
    pub measured: Vector3<f64>,
}

impl Factor for GnssPositionFactor {
    fn dim(&self) -> usize {
        3
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let p_k = Vector3::new(values[0][0], values[0][1], values[0][2]);
        let yaw = values[1][0];
        let lever = Vector3::new(values[2][0], values[2][1], values[2][2]);
        let rot = rotation_from_angles(yaw, self.pitch, self.roll);
        let r = p_k + rot * lever - self.measured;
        if let Some(jacs) = jacobians {
            jacs[0].copy_from(&DMatrix::identity(3, 3));
            let drot = rotation_yaw_derivative(yaw, self.pitch, self.roll);
            jacs[1].copy_from(&DMatrix::from_column_slice(3, 1, (drot * lever).as_slice()));
            jacs[2].copy_from(&DMatrix::from_iterator(3, 3, rot.iter().copied()));
        }
        DVector::from_column_slice(r.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_log;
    use crate::solver::check_jacobians;
    use approx::assert_relative_eq;

    fn sample(velocity: Vector3<f64>) -> GnssSample {
        // Zero-noise samples carry a small sigma: the weights should say the
        // measurements are trustworthy.
        GnssSample {
            t_ns: 0,
            position: Vector3::zeros(),
            velocity,
            course: velocity.y.atan2(velocity.x),
            pos_sigma: Vector3::new(0.02, 0.02, 0.02),
            vel_sigma: Vector3::new(0.05, 0.05, 0.05),
            position_valid: true,
            velocity_valid: true,
            course_valid: velocity.xy().norm() >= COURSE_SPEED_THRESHOLD,
        }
    }

    #[test]
    fn course_cases() {
        assert_relative_eq!(
            gnss_course(&sample(Vector3::new(1.0, 0.0, 0.0))).unwrap(),
            0.0
        );
        assert_relative_eq!(
            gnss_course(&sample(Vector3::new(1.0, 1.0, 0.0))).unwrap(),
            std::f64::consts::FRAC_PI_4
        );
        assert!(gnss_course(&sample(Vector3::new(0.1, 0.0, 0.0))).is_none());
    }

    fn record(
        frame_id: usize,
        t_ns: i64,
        position: Vector3<f64>,
        attitude: UnitQuaternion<f64>,
    ) -> KeyframeRecord {
        KeyframeRecord {
            frame_id,
            t_ns,
            position,
            attitude,
            velocity: Vector3::zeros(),
            pose_cov_diag: DVector::from_element(6, 1e-4),
            gnss_velocity: None,
        }
    }

    /// Keyframe records along a turning path, expressed in a w0 frame offset
    /// from the world by a yaw rotation; GNSS samples at the true antenna.
    fn misaligned_scenario(
        yaw_offset: f64,
        lever_arm: Vector3<f64>,
        n: usize,
    ) -> (Vec<KeyframeRecord>, Vec<GnssSample>) {
        let q_w_w0 = yaw_quat(yaw_offset);
        let q_w0_w = q_w_w0.inverse();
        let mut records = Vec::new();
        let mut gnss = Vec::new();
        for k in 0..n {
            let t = k as f64 * 0.5;
            let ang = 0.15 * t;
            // True world pose: circular arc with tangent yaw plus wobble.
            let position = Vector3::new(
                40.0 * ang.sin(),
                40.0 * (1.0 - ang.cos()),
                2.0 + 0.3 * (0.4 * t).sin(),
            );
            // Yaw follows the path tangent so course and yaw agree exactly;
            // pitch varies enough to make the vertical lever arm observable.
            let yaw = wrap_angle(ang);
            let pitch = 0.12 * (0.8 * t).sin();
            let roll = 0.05 * (0.6 * t).cos();
            let q_w_b = compose_ypr(&EulerYPR { yaw, pitch, roll });
            let velocity = Vector3::new(6.0 * ang.cos(), 6.0 * ang.sin(), 0.0);

            // w0-frame snapshot as the inner layer would publish it.
            let p_w0 = q_w0_w * position;
            let q_w0_b = compose_quat(&q_w0_w, &q_w_b);
            records.push(record(k, (t * 1e9) as i64, p_w0, q_w0_b));

            let mut s = sample(velocity);
            s.t_ns = (t * 1e9) as i64;
            s.position = position + q_w_b * lever_arm;
            gnss.push(s);
        }
        (records, gnss)
    }

    #[test]
    fn factor_jacobians_match_fd() {
        let (records, gnss) = misaligned_scenario(0.1, Vector3::new(0.4, -0.1, 0.2), 12);
        let mut graph = PoseGraph::new(
            OuterConfig {
                solve_every: 1,
                ..Default::default()
            },
            Vector3::new(0.3, 0.0, 0.1),
        );
        for (r, g) in records.iter().zip(gnss.iter()) {
            graph.add_node(r, Some(*g)).unwrap();
        }
        // Build the problem via one solve with zero iterations, then check.
        graph.config.max_iterations = 0;
        // Perturb node states so residuals are non-trivial.
        for (i, node) in graph.nodes.iter_mut().enumerate() {
            node.position += Vector3::new(0.05 * i as f64, -0.02, 0.03);
            node.yaw = wrap_angle(node.yaw + 0.02 * i as f64);
        }
        // Re-create the problem exactly as optimize_graph does, but check
        // Jacobians instead of solving.
        let mut p = Problem::new();
        let n = graph.nodes.len();
        let mut p_blocks = Vec::new();
        let mut yaw_blocks = Vec::new();
        for node in &graph.nodes {
            p_blocks.push(p.add_block(
                Manifold::Euclidean(3),
                DVector::from_column_slice(node.position.as_slice()),
            ));
            yaw_blocks.push(p.add_block(Manifold::Angle, DVector::from_element(1, node.yaw)));
        }
        let corr = p.add_block(Manifold::Angle, DVector::from_element(1, 0.07));
        let corr_full = p.add_block(
            Manifold::UnitQuat,
            solver::quat_to_ambient(&crate::geometry::so3_exp(&Vector3::new(0.02, -0.01, 0.08))),
        );
        let lever = p.add_block(
            Manifold::Euclidean(3),
            DVector::from_column_slice(&[0.3, 0.05, 0.1]),
        );
        for k in 0..n - 1 {
            let node = &graph.nodes[k];
            let next = &graph.nodes[k + 1];
            p.add_residual(
                &[p_blocks[k], p_blocks[k + 1], yaw_blocks[k]],
                Box::new(RelTranslationFactor {
                    pitch: node.pitch,
                    roll: node.roll,
                    measured: node.w0_attitude.inverse() * (next.w0_position - node.w0_position),
                }),
                None,
                RobustLoss::None,
                "rel_translation",
            );
            p.add_residual(
                &[yaw_blocks[k], yaw_blocks[k + 1]],
                Box::new(RelRotationFactor {
                    pitch_k: node.pitch,
                    roll_k: node.roll,
                    pitch_k1: next.pitch,
                    roll_k1: next.roll,
                    measured: node.w0_attitude.inverse() * next.w0_attitude,
                }),
                None,
                RobustLoss::None,
                "rel_rotation",
            );
            p.add_residual(
                &[yaw_blocks[k], corr],
                Box::new(AbsYawFactor {
                    pitch: node.pitch,
                    roll: node.roll,
                    w0_attitude: node.w0_attitude,
                    yaw_only: true,
                }),
                None,
                RobustLoss::None,
                "abs_yaw",
            );
            p.add_residual(
                &[yaw_blocks[k], corr_full],
                Box::new(AbsYawFactor {
                    pitch: node.pitch,
                    roll: node.roll,
                    w0_attitude: node.w0_attitude,
                    yaw_only: false,
                }),
                None,
                RobustLoss::None,
                "abs_yaw_full",
            );
            p.add_residual(
                &[yaw_blocks[k]],
                Box::new(CourseFactor { measured: 0.3 }),
                None,
                RobustLoss::None,
                "gnss_course",
            );
            p.add_residual(
                &[p_blocks[k], yaw_blocks[k], lever],
                Box::new(GnssPositionFactor {
                    pitch: node.pitch,
                    roll: node.roll,
                    measured: graph.nodes[k].gnss.as_ref().unwrap().position,
                }),
                None,
                RobustLoss::None,
                "gnss_position",
            );
        }
        let check = check_jacobians(&p, 1e-5, 1e-8);
        assert!(check.ok, "{check:?}");
    }

    #[test]
    fn fixed_point_when_frames_agree() {
        let (records, gnss) = misaligned_scenario(0.0, Vector3::zeros(), 15);
        let mut graph = PoseGraph::new(
            OuterConfig {
                estimate_lever_arm: false,
                ..Default::default()
            },
            Vector3::zeros(),
        );
        for (r, g) in records.iter().zip(gnss.iter()) {
            graph.add_node(r, Some(*g)).unwrap();
        }
        let before: Vec<Vector3<f64>> = graph.nodes().map(|n| n.position).collect();
        let report = graph.optimize_graph().unwrap();
        assert!(report.final_cost < 1e-16, "cost {}", report.final_cost);
        for (node, prev) in graph.nodes().zip(before.iter()) {
            assert!((node.position - prev).norm() < 1e-9);
        }
        assert!(so3_log(&graph.correction()).norm() < 1e-9);
    }

    #[test]
    fn five_degree_misalignment_recovered() {
        let yaw_true = 5.0_f64.to_radians();
        let (records, gnss) = misaligned_scenario(yaw_true, Vector3::zeros(), 40);
        let mut graph = PoseGraph::new(
            OuterConfig {
                estimate_lever_arm: false,
                ..Default::default()
            },
            Vector3::zeros(),
        );
        for (r, g) in records.iter().zip(gnss.iter()) {
            graph.add_node(r, Some(*g)).unwrap();
        }
        graph.optimize_graph().unwrap();
        let e = decompose_ypr(&graph.correction()).unwrap();
        assert!(
            (e.yaw - yaw_true).abs() < 0.01_f64.to_radians(),
            "recovered {} deg",
            e.yaw.to_degrees()
        );
        // Published snapshot equals the recovered correction.
        assert_eq!(graph.publish_correction(), graph.correction());
        assert_eq!(graph.publish_correction(), graph.publish_correction());
    }

    #[test]
    fn lever_arm_recovered_on_turning_trajectory() {
        let lever_true = Vector3::new(0.5, 0.0, 0.2);
        let (records, gnss) = misaligned_scenario(0.0, lever_true, 60);
        // Zero-noise inner poses justify tight relative priors; the initial
        // lever error is dozens of sigma and Huber-downweighted, so
        // convergence needs a few relinearized solves.
        let mut graph = PoseGraph::new(
            OuterConfig {
                max_iterations: 60,
                rel_translation_sigma: 0.005,
                rel_yaw_sigma: 0.002,
                lever_prior_sigma: 1.0,
                ..Default::default()
            },
            Vector3::zeros(),
        );
        for (r, g) in records.iter().zip(gnss.iter()) {
            graph.add_node(r, Some(*g)).unwrap();
        }
        for _ in 0..4 {
            graph.optimize_graph().unwrap();
        }
        assert!(
            (graph.lever_arm() - lever_true).norm() < 0.01,
            "lever arm {:?}",
            graph.lever_arm()
        );
    }

    #[test]
    fn publish_is_identity_before_first_solve() {
        let graph = PoseGraph::new(OuterConfig::default(), Vector3::zeros());
        assert_eq!(graph.publish_correction(), UnitQuaternion::identity());
    }

    #[test]
    fn course_factor_gated_on_validity() {
        let (records, mut gnss) = misaligned_scenario(0.0, Vector3::zeros(), 12);
        // Slow the mid-run samples below the course threshold.
        for s in gnss.iter_mut().skip(4) {
            s.velocity = Vector3::new(0.3, 0.0, 0.0);
            s.course_valid = false;
        }
        let mut graph = PoseGraph::new(
            OuterConfig {
                estimate_lever_arm: false,
                ..Default::default()
            },
            Vector3::zeros(),
        );
        for (r, g) in records.iter().zip(gnss.iter()) {
            graph.add_node(r, Some(*g)).unwrap();
        }
        let report = graph.optimize_graph().unwrap();
        // Course factors exist (the fast samples) but are fewer than nodes.
        assert!(report.class_costs.contains_key("gnss_course"));
    }

    #[test]
    fn horizon_overflow_retires_nodes() {
        let (records, gnss) = misaligned_scenario(0.0, Vector3::zeros(), 30);
        let mut graph = PoseGraph::new(
            OuterConfig {
                horizon: 10,
                ..Default::default()
            },
            Vector3::zeros(),
        );
        for (r, g) in records.iter().zip(gnss.iter()) {
            graph.add_node(r, Some(*g)).unwrap();
        }
        assert_eq!(graph.num_nodes(), 10);
        assert_eq!(graph.fused_trajectory().len(), 30);
        // Monotonic non-decreasing time ordering across retired + live.
        let fused = graph.fused_trajectory();
        assert!(fused.windows(2).all(|w| w[0].t_ns < w[1].t_ns));
    }

    #[test]
    fn yaw_residuals_invariant_to_two_pi() {
        let f = CourseFactor { measured: 0.4 };
        let a = DVector::from_element(1, 2.9);
        let b = DVector::from_element(1, 2.9 + 2.0 * std::f64::consts::PI);
        let ra = f.eval(&[&a], None);
        let rb = f.eval(&[&b], None);
        assert_relative_eq!(ra[0], rb[0], epsilon = 1e-12);
    }

    #[test]
    fn pitch_roll_frozen_across_solves() {
        let (records, gnss) = misaligned_scenario(0.03, Vector3::new(0.2, 0.0, 0.1), 25);
        let mut graph = PoseGraph::new(OuterConfig::default(), Vector3::zeros());
        for (r, g) in records.iter().zip(gnss.iter()) {
            graph.add_node(r, Some(*g)).unwrap();
        }
        let frozen: Vec<(f64, f64)> = graph.nodes().map(|n| (n.pitch, n.roll)).collect();
        graph.optimize_graph().unwrap();
        graph.optimize_graph().unwrap();
        for (node, (pitch, roll)) in graph.nodes().zip(frozen.iter()) {
            assert_eq!(node.pitch, *pitch);
            assert_eq!(node.roll, *roll);
        }
    }

    #[test]
    fn non_monotonic_node_rejected() {
        let (records, _) = misaligned_scenario(0.0, Vector3::zeros(), 3);
        let mut graph = PoseGraph::new(OuterConfig::default(), Vector3::zeros());
        graph.add_node(&records[1], None).unwrap();
        assert!(matches!(
            graph.add_node(&records[0], None),
            Err(OuterError::NonMonotonicTime { .. })
        ));
    }
}
