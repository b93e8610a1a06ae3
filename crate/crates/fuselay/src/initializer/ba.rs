//! Step-1 GNSS-aided visual bundle adjustment and step-3 joint VI-GNSS MAP
//! refinement.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};

use super::{InitError, InitWindow, WorldAlignment};
use crate::geometry::{right_jacobian, rotation_residual, skew, vec_jacobian_right_perturb, Pose};
use crate::inner::ReprojFactor;
use crate::preintegration::{preintegrate, ImuNoise, Preintegration};
use crate::simulator::ImuSample;
use crate::solver::{self, Factor, Manifold, Problem, RobustLoss, SolveOptions, SolveReport};

/// Relative-translation residual tying the trapezoidal GNSS (body-frame)
/// displacement to the scaled visual displacement, with the camera-to-body
/// lever removed:
/// `r = d_meas − ‖s0·(1+δs)·(p_j − p_i) − (R_j − R_i)·v‖` with
/// `v = R_bcᵀ t_bc`. Blocks: `[pose_i, pose_j, δs]`.
pub struct DisplacementFactor {
    pub measured: f64,
    pub base_scale: f64,
    /// Camera-to-body offset in the camera frame: R_bcᵀ t_bc.
    pub cam_to_body: Vector3<f64>,
}

impl Factor for DisplacementFactor {
    fn dim(&self) -> usize {
        1
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let (p_i, q_i) = solver::pose_from_ambient(&values[0].as_view());
        let (p_j, q_j) = solver::pose_from_ambient(&values[1].as_view());
        let ds = values[2][0];
        let s = self.base_scale * (1.0 + ds);
        let delta = p_j - p_i;
        let r_i = q_i.to_rotation_matrix().into_inner();
        let r_j = q_j.to_rotation_matrix().into_inner();
        let u = s * delta - (r_j - r_i) * self.cam_to_body;
        let norm = u.norm().max(1e-12);
        let r = DVector::from_element(1, self.measured - norm);
        if let Some(jacs) = jacobians {
            let dir = u / norm;
            for j in jacs.iter_mut() {
                j.fill(0.0);
            }
            for c in 0..3 {
                jacs[0][(0, c)] = s * dir[c];
                jacs[1][(0, c)] = -s * dir[c];
            }
            // u has +R_i v and −R_j v; d(R Exp(δ) v)/dδ = −R [v]×.
            let d_i = -(r_i * skew(&self.cam_to_body));
            let d_j = r_j * skew(&self.cam_to_body);
            let grad_i = -(dir.transpose() * d_i);
            let grad_j = -(dir.transpose() * d_j);
            for c in 0..3 {
                jacs[0][(0, 3 + c)] = grad_i[c];
                jacs[1][(0, 3 + c)] = grad_j[c];
            }
            jacs[2][(0, 0)] = -dir.dot(&(self.base_scale * delta));
        }
        r
    }
}

/// Options for the init bundle adjustment.
#[derive(Debug, Clone)]
pub struct InitBaOptions {
    pub reproj_sigma: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
}

impl Default for InitBaOptions {
    fn default() -> Self {
        Self {
            reproj_sigma: 1.5 / 460.0,
            huber_delta: 1.0,
            max_iterations: 30,
        }
    }
}

/// GNSS-aided visual bundle adjustment over the init window: jointly
/// optimizes the multiplicative scale correction, all frame poses and all
/// inverse depths. Huber applies to reprojection only; the first frame is
/// gauge-fixed at identity.
pub fn init_ba(
    window: &mut InitWindow,
    opts: &InitBaOptions,
    q_b_c: &UnitQuaternion<f64>,
    t_b_c: &Vector3<f64>,
) -> Result<SolveReport, InitError> {
    let cam_to_body = q_b_c.inverse() * t_b_c;
    let n = window.frames.len();
    let mut problem = Problem::new();

    let mut pose_blocks = Vec::with_capacity(n);
    for pose in window.poses.iter() {
        let block = pose.map(|p| {
            problem.add_block(
                Manifold::Pose3,
                solver::pose_to_ambient(&p.translation, &p.rotation),
            )
        });
        pose_blocks.push(block);
    }
    if let Some(first) = pose_blocks.iter().flatten().next() {
        problem.set_fixed(*first, true);
    }
    let ds_block = problem.add_block(Manifold::Euclidean(1), DVector::zeros(1));

    // Reprojection over triangulated landmarks.
    let reproj_info = DMatrix::identity(2, 2) / (opts.reproj_sigma * opts.reproj_sigma);
    let mut lambda_blocks: Vec<Option<crate::solver::BlockId>> = vec![None; window.tracks.len()];
    for (ti, track) in window.tracks.iter().enumerate() {
        let Some(lm) = window.landmarks[ti] else {
            continue;
        };
        let Some(anchor_obs) = track.observations.iter().find(|o| o.frame_id == lm.anchor) else {
            continue;
        };
        let Some(anchor_block) = pose_blocks[lm.anchor] else {
            continue;
        };
        let lambda_block = problem.add_block(
            Manifold::Euclidean(1),
            DVector::from_element(1, lm.inverse_depth),
        );
        lambda_blocks[ti] = Some(lambda_block);
        for obs in &track.observations {
            if obs.frame_id == lm.anchor {
                continue;
            }
            let Some(target_block) = pose_blocks[obs.frame_id] else {
                continue;
            };
            problem.add_residual(
                &[anchor_block, target_block, lambda_block],
                Box::new(ReprojFactor {
                    anchor_obs: anchor_obs.uv,
                    target_obs: obs.uv,
                    fixed_extrinsic: Some(Pose::identity()),
                }),
                Some(reproj_info.clone()),
                RobustLoss::Huber {
                    delta: opts.huber_delta,
                },
                "init_reprojection",
            );
        }
    }

    // GNSS relative-translation factors between consecutive posed frames.
    let base_scale = window.scale;
    for k in 1..n {
        let (Some(bi), Some(bj)) = (pose_blocks[k - 1], pose_blocks[k]) else {
            continue;
        };
        let g_i = &window.frames[k - 1].gnss;
        let g_j = &window.frames[k].gnss;
        if !g_i.velocity_valid || !g_j.velocity_valid {
            continue;
        }
        let dt = (window.frames[k].t_ns - window.frames[k - 1].t_ns) as f64 * 1e-9;
        let measured = 0.5 * (g_i.velocity + g_j.velocity).norm() * dt;
        let sigma = (0.5 * (g_i.vel_sigma.norm() + g_j.vel_sigma.norm()) * dt).max(1e-4);
        problem.add_residual(
            &[bi, bj, ds_block],
            Box::new(DisplacementFactor {
                measured,
                base_scale,
                cam_to_body,
            }),
            Some(DMatrix::from_element(1, 1, 1.0 / (sigma * sigma))),
            RobustLoss::None,
            "init_displacement",
        );
    }

    let report = solver::solve(
        &mut problem,
        &SolveOptions {
            max_iterations: opts.max_iterations,
            cost_tolerance: 1e-7,
            ..Default::default()
        },
    )?;

    // Read back poses, depths, and the multiplicative scale update.
    for (k, block) in pose_blocks.iter().enumerate() {
        if let Some(b) = block {
            let (p, q) = solver::pose_from_ambient(&problem.value(*b).as_view());
            window.poses[k] = Some(Pose::new(q, p));
        }
    }
    for (ti, block) in lambda_blocks.iter().enumerate() {
        if let Some(b) = block {
            let lambda = problem.value(*b)[0];
            if let Some(lm) = window.landmarks[ti].as_mut() {
                lm.inverse_depth = lambda;
            }
        }
    }
    window.scale = base_scale * (1.0 + problem.value(ds_block)[0]);

    // Positive-depth enforcement by re-triangulation.
    let poses: Vec<Pose> = window
        .poses
        .iter()
        .map(|p| p.unwrap_or(Pose::identity()))
        .collect();
    for (ti, lm) in window.landmarks.iter_mut().enumerate() {
        let Some(entry) = lm else { continue };
        if entry.inverse_depth > 1e-6 {
            continue;
        }
        let obs: Vec<(usize, nalgebra::Vector2<f64>)> = window.tracks[ti]
            .observations
            .iter()
            .map(|o| (o.frame_id, o.uv))
            .collect();
        match super::triangulate(&poses, &obs, 1e-3) {
            Ok(l) if l > 1e-6 => entry.inverse_depth = l,
            _ => *lm = None,
        }
    }
    Ok(report)
}

/// Inputs to the joint VI-GNSS MAP refinement: fixed visual poses from step
/// 1, GNSS antenna positions, raw IMU between frames, and the step-1/2 first
/// guess.
#[derive(Debug, Clone)]
pub struct MapInitInput {
    /// Unscaled camera positions p_c0_ck.
    pub cam_positions: Vec<Vector3<f64>>,
    /// Camera attitudes q_c0_ck.
    pub cam_attitudes: Vec<UnitQuaternion<f64>>,
    /// GNSS antenna positions (world frame) per frame.
    pub gnss_positions: Vec<Vector3<f64>>,
    pub gnss_pos_sigma: Vec<Vector3<f64>>,
    /// Frame timestamps, seconds.
    pub times: Vec<f64>,
    /// Raw IMU per consecutive frame pair (n−1 segments).
    pub imu_segments: Vec<Vec<ImuSample>>,
    pub q_b_c: UnitQuaternion<f64>,
    pub t_b_c: Vector3<f64>,
    pub t_b_g: Vector3<f64>,
    pub gravity: f64,
    pub imu_noise: ImuNoise,
    /// First guess: scale, world rotation, gyro bias, per-frame velocities.
    pub initial_scale: f64,
    pub initial_q_w_c0: UnitQuaternion<f64>,
    pub initial_gyro_bias: Vector3<f64>,
    pub initial_velocities: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct MapInitOptions {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Outer loop stops when the gyro-bias update falls below this.
    pub bias_update_tolerance: f64,
    /// Noise of the fixed visual poses entering the residuals: without these
    /// the IMU-only covariance treats centimetre-level VO error as hundreds
    /// of sigma and the refinement walks into degenerate minima.
    pub vo_rotation_sigma: f64,
    pub vo_position_sigma: f64,
    pub vo_velocity_sigma: f64,
    /// Prior on the scale around the step-1 estimate (relative), carrying
    /// the GNSS-velocity information forward into the MAP; zero disables it
    /// (the refinement then relies on the window data alone).
    pub scale_prior_relative_sigma: f64,
    /// Prior on the gyro bias around its first guess; zero disables.
    pub gyro_bias_prior_sigma: f64,
}

impl Default for MapInitOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 10,
            max_inner_iterations: 60,
            bias_update_tolerance: 1e-8,
            vo_rotation_sigma: 1e-3,
            vo_position_sigma: 5e-3,
            vo_velocity_sigma: 5e-3,
            scale_prior_relative_sigma: 0.0,
            gyro_bias_prior_sigma: 0.0,
        }
    }
}

/// Translation residual: rotated, scaled antenna track plus the estimated
/// world origin of c0 against GNSS. Blocks: `[q_w_c0, s, p0]`.
pub struct MapTranslationFactor {
    pub cam_position: Vector3<f64>,
    /// R(q_c0_bk) (t_bg − t_bc), constant per frame.
    pub lever_c0: Vector3<f64>,
    pub measured: Vector3<f64>,
}

impl Factor for MapTranslationFactor {
    fn dim(&self) -> usize {
        3
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let q_w = solver::quat_from_ambient(&values[0].as_view());
        let s = values[1][0];
        let p0 = Vector3::new(values[2][0], values[2][1], values[2][2]);
        let u = s * self.cam_position + self.lever_c0;
        let r_w = q_w.to_rotation_matrix().into_inner();
        let r = r_w * u + p0 - self.measured;
        if let Some(jacs) = jacobians {
            jacs[0].copy_from(&DMatrix::from_iterator(
                3,
                3,
                (-r_w * skew(&u)).iter().copied(),
            ));
            jacs[1].copy_from(&DMatrix::from_column_slice(
                3,
                1,
                (r_w * self.cam_position).as_slice(),
            ));
            jacs[2].copy_from(&DMatrix::identity(3, 3));
        }
        DVector::from_column_slice(r.as_slice())
    }
}

/// Preintegration residual with fixed visual attitudes/positions and free
/// (q_w_c0, s, b_g, v_k, v_{k+1}); rows `[r_γ, r_α, r_β]`.
/// Blocks: `[q_w_c0, s, b_g, v_k, v_{k+1}]`.
pub struct MapPreintFactor {
    pub preint: Preintegration,
    /// Body attitude in c0 at k and k+1.
    pub a_k: UnitQuaternion<f64>,
    pub a_k1: UnitQuaternion<f64>,
    /// Unscaled camera positions at k and k+1.
    pub p_ck: Vector3<f64>,
    pub p_ck1: Vector3<f64>,
    /// −R(A) t_bc, the scale-independent part of the body position in c0.
    pub m_k: Vector3<f64>,
    pub m_k1: Vector3<f64>,
    pub gravity: f64,
}

impl Factor for MapPreintFactor {
    fn dim(&self) -> usize {
        9
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let q_w = solver::quat_from_ambient(&values[0].as_view());
        let s = values[1][0];
        let bg = Vector3::new(values[2][0], values[2][1], values[2][2]);
        let v_k = Vector3::new(values[3][0], values[3][1], values[3][2]);
        let v_k1 = Vector3::new(values[4][0], values[4][1], values[4][2]);

        let p = &self.preint;
        let dt = p.dt;
        let g = Vector3::new(0.0, 0.0, self.gravity);
        let dbg = bg - p.lin_gyro_bias;
        let (alpha, beta, gamma) = p.bias_correct(&dbg, &Vector3::zeros());

        let r_w_t = q_w.to_rotation_matrix().into_inner().transpose();
        let a_k_t = self.a_k.to_rotation_matrix().into_inner().transpose();
        let c_diff = (s * self.p_ck1 + self.m_k1) - (s * self.p_ck + self.m_k);
        let u_p = 0.5 * g * dt * dt - v_k * dt;
        let u_v = v_k1 - v_k + g * dt;

        let q_err = self.a_k1.inverse() * self.a_k * gamma;
        let r_gamma = rotation_residual(&q_err);
        let r_alpha = alpha - a_k_t * (c_diff + r_w_t * u_p);
        let r_beta = beta - a_k_t * (r_w_t * u_v);

        let mut r = DVector::zeros(9);
        r.fixed_rows_mut::<3>(0).copy_from(&r_gamma);
        r.fixed_rows_mut::<3>(3).copy_from(&r_alpha);
        r.fixed_rows_mut::<3>(6).copy_from(&r_beta);

        if let Some(jacs) = jacobians {
            for j in jacs.iter_mut() {
                j.fill(0.0);
            }
            // q_w_c0 block (tangent 3).
            let j_w_alpha = -a_k_t * skew(&(r_w_t * u_p));
            let j_w_beta = -a_k_t * skew(&(r_w_t * u_v));
            jacs[0].view_mut((3, 0), (3, 3)).copy_from(&j_w_alpha);
            jacs[0].view_mut((6, 0), (3, 3)).copy_from(&j_w_beta);
            // s block.
            let j_s = -a_k_t * (self.p_ck1 - self.p_ck);
            jacs[1].view_mut((3, 0), (3, 1)).copy_from(&j_s);
            // bg block.
            let w_jr = right_jacobian(&(p.dgamma_dbg * dbg)) * p.dgamma_dbg;
            jacs[2]
                .view_mut((0, 0), (3, 3))
                .copy_from(&(vec_jacobian_right_perturb(&q_err) * w_jr));
            jacs[2].view_mut((3, 0), (3, 3)).copy_from(&p.dalpha_dbg);
            jacs[2].view_mut((6, 0), (3, 3)).copy_from(&p.dbeta_dbg);
            // v_k block.
            jacs[3]
                .view_mut((3, 0), (3, 3))
                .copy_from(&(dt * a_k_t * r_w_t));
            jacs[3].view_mut((6, 0), (3, 3)).copy_from(&(a_k_t * r_w_t));
            // v_{k+1} block.
            jacs[4]
                .view_mut((6, 0), (3, 3))
                .copy_from(&(-(a_k_t * r_w_t)));
        }
        r
    }
}

/// Joint MAP refinement of gyro bias, scale, world rotation and per-frame
/// velocities; preintegrations are re-evaluated with the updated bias
/// between outer iterations.
pub fn vi_gnss_map_init(
    input: &MapInitInput,
    opts: &MapInitOptions,
) -> Result<(WorldAlignment, SolveReport, usize), InitError> {
    let n = input.cam_positions.len();
    assert!(n >= 2, "MAP init needs at least two frames");
    assert_eq!(input.imu_segments.len(), n - 1);

    // Body attitude in c0 and the scale-independent position offsets.
    let attitudes_b: Vec<UnitQuaternion<f64>> = input
        .cam_attitudes
        .iter()
        .map(|q| q * input.q_b_c.inverse())
        .collect();
    let m: Vec<Vector3<f64>> = attitudes_b.iter().map(|a| -(a * input.t_b_c)).collect();
    let lever: Vec<Vector3<f64>> = attitudes_b
        .iter()
        .map(|a| a * (input.t_b_g - input.t_b_c))
        .collect();

    let mut bg = input.initial_gyro_bias;
    let mut scale = input.initial_scale;
    let mut q_w = input.initial_q_w_c0;
    let mut velocities = input.initial_velocities.clone();
    // World origin of c0: the first GNSS fix minus the rotated lever arm.
    let mut world_origin =
        input.gnss_positions[0] - q_w * (scale * input.cam_positions[0] + lever[0]);
    let mut best_cost: Option<f64> = None;
    let mut last_report: Option<SolveReport> = None;
    let mut outer_used = 0;

    for outer in 0..opts.max_outer_iterations {
        outer_used = outer + 1;
        let preints: Vec<Preintegration> = input
            .imu_segments
            .iter()
            .map(|seg| preintegrate(seg, bg, Vector3::zeros(), input.imu_noise))
            .collect::<Result<_, _>>()?;

        let mut problem = Problem::new();
        let w_block = problem.add_block(Manifold::UnitQuat, solver::quat_to_ambient(&q_w));
        let s_block = problem.add_block(Manifold::Euclidean(1), DVector::from_element(1, scale));
        let p0_block = problem.add_block(
            Manifold::Euclidean(3),
            DVector::from_column_slice(world_origin.as_slice()),
        );
        let bg_block = problem.add_block(
            Manifold::Euclidean(3),
            DVector::from_column_slice(bg.as_slice()),
        );
        let v_blocks: Vec<_> = velocities
            .iter()
            .map(|v| {
                problem.add_block(
                    Manifold::Euclidean(3),
                    DVector::from_column_slice(v.as_slice()),
                )
            })
            .collect();

        // Optional priors around the step-1/2 estimates, carrying the
        // earlier stages' information forward instead of re-deriving scale
        // from the (noisier) GNSS positions alone.
        if opts.scale_prior_relative_sigma > 0.0 {
            let s_sigma = opts.scale_prior_relative_sigma * input.initial_scale;
            problem.add_residual(
                &[s_block],
                Box::new(crate::solver::LinearFactor {
                    mats: vec![DMatrix::identity(1, 1)],
                    rhs: DVector::from_element(1, input.initial_scale),
                }),
                Some(DMatrix::from_element(1, 1, 1.0 / (s_sigma * s_sigma))),
                RobustLoss::None,
                "map_scale_prior",
            );
        }
        if opts.gyro_bias_prior_sigma > 0.0 {
            let bg_sigma = opts.gyro_bias_prior_sigma;
            problem.add_residual(
                &[bg_block],
                Box::new(crate::solver::LinearFactor {
                    mats: vec![DMatrix::identity(3, 3)],
                    rhs: DVector::from_column_slice(input.initial_gyro_bias.as_slice()),
                }),
                Some(DMatrix::identity(3, 3) / (bg_sigma * bg_sigma)),
                RobustLoss::None,
                "map_bias_prior",
            );
        }

        for k in 0..n {
            let mut omega = DMatrix::zeros(3, 3);
            for i in 0..3 {
                let s = input.gnss_pos_sigma[k][i].max(1e-3);
                omega[(i, i)] = 1.0 / (s * s);
            }
            problem.add_residual(
                &[w_block, s_block, p0_block],
                Box::new(MapTranslationFactor {
                    cam_position: input.cam_positions[k],
                    lever_c0: lever[k],
                    measured: input.gnss_positions[k],
                }),
                Some(omega),
                RobustLoss::None,
                "map_translation",
            );
        }
        for k in 0..n - 1 {
            let p = &preints[k];
            let mut cov = DMatrix::from_iterator(9, 9, p.covariance.iter().copied());
            let floors = [
                opts.vo_rotation_sigma,
                opts.vo_rotation_sigma,
                opts.vo_rotation_sigma,
                opts.vo_position_sigma,
                opts.vo_position_sigma,
                opts.vo_position_sigma,
                opts.vo_velocity_sigma,
                opts.vo_velocity_sigma,
                opts.vo_velocity_sigma,
            ];
            for i in 0..9 {
                cov[(i, i)] += floors[i] * floors[i] + 1e-14;
            }
            let omega = cov
                .try_inverse()
                .expect("regularized covariance invertible");
            problem.add_residual(
                &[w_block, s_block, bg_block, v_blocks[k], v_blocks[k + 1]],
                Box::new(MapPreintFactor {
                    preint: p.clone(),
                    a_k: attitudes_b[k],
                    a_k1: attitudes_b[k + 1],
                    p_ck: input.cam_positions[k],
                    p_ck1: input.cam_positions[k + 1],
                    m_k: m[k],
                    m_k1: m[k + 1],
                    gravity: input.gravity,
                }),
                Some(omega),
                RobustLoss::None,
                "map_preintegration",
            );
        }

        let report = solver::solve(
            &mut problem,
            &SolveOptions {
                max_iterations: opts.max_inner_iterations,
                cost_tolerance: 1e-9,
                ..Default::default()
            },
        )?;

        if std::env::var("FUSELAY_LOG").is_ok() {
            eprintln!(
                "map outer {outer}: cost {:.6e} -> {:.6e} ({} iters, {:?}) s {:.4} -> {:.4} classes {:?}",
                report.initial_cost, report.final_cost, report.iterations, report.termination,
                scale, problem.value(s_block)[0], report.class_costs
            );
        }
        let new_bg = {
            let v = problem.value(bg_block);
            Vector3::new(v[0], v[1], v[2])
        };
        let bias_update = (new_bg - bg).norm();
        bg = new_bg;
        scale = problem.value(s_block)[0];
        q_w = solver::quat_from_ambient(&problem.value(w_block).as_view());
        {
            let v = problem.value(p0_block);
            world_origin = Vector3::new(v[0], v[1], v[2]);
        }
        for (v, block) in velocities.iter_mut().zip(v_blocks.iter()) {
            let x = problem.value(*block);
            *v = Vector3::new(x[0], x[1], x[2]);
        }

        // Re-preintegration renews the measurement model between outer
        // iterations, so moderate cost changes are expected; divergence is a
        // run that climbs far above the best model fit seen so far.
        if let Some(best) = best_cost {
            if report.final_cost > 3.0 * best + 1e-9 {
                return Err(InitError::Diverged {
                    cost: report.final_cost,
                    outer_iterations: outer_used,
                });
            }
        }
        best_cost = Some(best_cost.map_or(report.final_cost, |b: f64| b.min(report.final_cost)));
        let converged = matches!(
            report.termination,
            crate::solver::TerminationReason::GradientTolerance
                | crate::solver::TerminationReason::StepTolerance
        );
        let done = bias_update < opts.bias_update_tolerance && converged;
        last_report = Some(report);
        if done {
            break;
        }
    }

    // A collapsed or wildly rescaled solution is a divergence, not an
    // answer: the first guess comes from a consistent BA.
    if scale <= 0.0 || (scale / input.initial_scale - 1.0).abs() > 0.5 {
        return Err(InitError::Diverged {
            cost: best_cost.unwrap_or(f64::INFINITY),
            outer_iterations: outer_used,
        });
    }
    Ok((
        WorldAlignment {
            scale,
            q_w_c0: q_w,
            gyro_bias: bg,
            velocities,
            q_w_w0: UnitQuaternion::identity(),
            world_origin,
        },
        last_report.expect("at least one outer iteration"),
        outer_used,
    ))
}
