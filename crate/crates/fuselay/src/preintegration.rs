//! On-manifold IMU preintegration between consecutive keyframes.
//!
//! The preintegrated terms (α position, β velocity, γ rotation) are relative
//! motion integrals of bias-corrected measurements in the frame of the first
//! sample, independent of the absolute state. First-order bias Jacobians and
//! a 9×9 covariance (rows/cols ordered [γ-tangent, α, β] to match the
//! residual layout [q, p, v]) are propagated alongside by midpoint
//! integration.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{
    compose_quat, right_jacobian, rotation_residual, skew, so3_exp, vec_jacobian_left_perturb,
    vec_jacobian_right_perturb,
};
use crate::inner::FrameState;
use crate::simulator::ImuSample;
use crate::solver::{pose_from_ambient, Factor};

#[derive(Debug, Error)]
pub enum PreintError {
    #[error("need at least two IMU samples to preintegrate")]
    EmptySegment,
    #[error("non-monotonic IMU timestamps at sample {index}")]
    NonMonotonicTime { index: usize },
}

/// Estimator-side IMU noise densities (white noise and bias random walk).
#[derive(Debug, Clone, Copy)]
pub struct ImuNoise {
    pub gyro_white: f64,
    pub accel_white: f64,
    pub gyro_walk: f64,
    pub accel_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_white: 1.7e-4,
            accel_white: 2.0e-3,
            gyro_walk: 1.9e-5,
            accel_walk: 3.0e-3,
        }
    }
}

/// Preintegrated IMU terms with bias Jacobians and propagated covariance.
#[derive(Debug, Clone)]
pub struct Preintegration {
    pub dt: f64,
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: UnitQuaternion<f64>,
    pub dalpha_dbg: Matrix3<f64>,
    pub dalpha_dba: Matrix3<f64>,
    pub dbeta_dbg: Matrix3<f64>,
    pub dbeta_dba: Matrix3<f64>,
    pub dgamma_dbg: Matrix3<f64>,
    /// 9×9 covariance of [γ-tangent, α, β].
    pub covariance: SMatrix<f64, 9, 9>,
    pub lin_gyro_bias: Vector3<f64>,
    pub lin_accel_bias: Vector3<f64>,
    pub noise: ImuNoise,
}

impl Preintegration {
    fn identity(bias_g: Vector3<f64>, bias_a: Vector3<f64>, noise: ImuNoise) -> Self {
        Self {
            dt: 0.0,
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: UnitQuaternion::identity(),
            dalpha_dbg: Matrix3::zeros(),
            dalpha_dba: Matrix3::zeros(),
            dbeta_dbg: Matrix3::zeros(),
            dbeta_dba: Matrix3::zeros(),
            dgamma_dbg: Matrix3::zeros(),
            covariance: SMatrix::zeros(),
            lin_gyro_bias: bias_g,
            lin_accel_bias: bias_a,
            noise,
        }
    }

    fn step(&mut self, s0: &ImuSample, s1: &ImuSample, dt: f64) {
        let omega = 0.5 * (s0.gyro + s1.gyro) - self.lin_gyro_bias;
        let a0 = s0.accel - self.lin_accel_bias;
        let a1 = s1.accel - self.lin_accel_bias;

        let r_k = self.gamma.to_rotation_matrix().into_inner();
        let dq = so3_exp(&(omega * dt));
        let gamma_next = compose_quat(&self.gamma, &dq);
        let r_k1 = gamma_next.to_rotation_matrix().into_inner();
        let a_w = 0.5 * (r_k * a0 + r_k1 * a1);

        let e_t = dq.to_rotation_matrix().into_inner().transpose();
        let jr = right_jacobian(&(omega * dt));

        // Bias Jacobians, exact to first order per step.
        let dgamma_next = e_t * self.dgamma_dbg - jr * dt;
        let d_bg = -0.5 * (r_k * skew(&a0) * self.dgamma_dbg + r_k1 * skew(&a1) * dgamma_next);
        let d_ba = -0.5 * (r_k + r_k1);
        self.dalpha_dbg += self.dbeta_dbg * dt + 0.5 * dt * dt * d_bg;
        self.dalpha_dba += self.dbeta_dba * dt + 0.5 * dt * dt * d_ba;
        self.dbeta_dbg += d_bg * dt;
        self.dbeta_dba += d_ba * dt;
        self.dgamma_dbg = dgamma_next;

        // Discrete error-state propagation for the covariance.
        let mut f = SMatrix::<f64, 9, 9>::identity();
        let f_beta_theta = -0.5 * dt * (r_k * skew(&a0) + r_k1 * skew(&a1) * e_t);
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&e_t);
        f.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(0.5 * dt * f_beta_theta));
        f.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&f_beta_theta);

        let mut g = SMatrix::<f64, 9, 12>::zeros();
        let g_theta = 0.5 * jr * dt;
        let g_beta_gyro = -0.25 * dt * dt * r_k1 * skew(&a1) * jr;
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&g_theta);
        g.fixed_view_mut::<3, 3>(0, 6).copy_from(&g_theta);
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&g_beta_gyro);
        g.fixed_view_mut::<3, 3>(6, 6).copy_from(&g_beta_gyro);
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(0.5 * dt * r_k));
        g.fixed_view_mut::<3, 3>(6, 9).copy_from(&(0.5 * dt * r_k1));
        let alpha_rows = 0.5 * dt * g.fixed_view::<3, 12>(6, 0).clone_owned();
        g.fixed_view_mut::<3, 12>(3, 0).copy_from(&alpha_rows);

        let sg2 = self.noise.gyro_white * self.noise.gyro_white / dt;
        let sa2 = self.noise.accel_white * self.noise.accel_white / dt;
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for i in 0..3 {
            q[(i, i)] = sg2;
            q[(i + 3, i + 3)] = sa2;
            q[(i + 6, i + 6)] = sg2;
            q[(i + 9, i + 9)] = sa2;
        }
        self.covariance = f * self.covariance * f.transpose() + g * q * g.transpose();

        // Midpoint state update.
        self.alpha += self.beta * dt + 0.5 * a_w * dt * dt;
        self.beta += a_w * dt;
        self.gamma = gamma_next;
        self.dt += dt;
    }

    /// First-order bias-corrected terms for bias deltas relative to the
    /// linearization point. Valid for small deltas (first-order expansion).
    pub fn bias_correct(
        &self,
        dbg: &Vector3<f64>,
        dba: &Vector3<f64>,
    ) -> (Vector3<f64>, Vector3<f64>, UnitQuaternion<f64>) {
        let alpha = self.alpha + self.dalpha_dbg * dbg + self.dalpha_dba * dba;
        let beta = self.beta + self.dbeta_dbg * dbg + self.dbeta_dba * dba;
        let gamma = compose_quat(&self.gamma, &so3_exp(&(self.dgamma_dbg * dbg)));
        (alpha, beta, gamma)
    }

    /// Predict the next frame state by inverting the residual at zero.
    pub fn propagate(&self, from: &FrameState, gravity: f64) -> FrameState {
        let g = Vector3::new(0.0, 0.0, gravity);
        let r = from.attitude.to_rotation_matrix().into_inner();
        let (alpha, beta, gamma) = self.bias_correct(
            &(from.gyro_bias - self.lin_gyro_bias),
            &(from.accel_bias - self.lin_accel_bias),
        );
        FrameState {
            t_ns: from.t_ns + (self.dt * 1e9).round() as i64,
            position: from.position + from.velocity * self.dt - 0.5 * g * self.dt * self.dt
                + r * alpha,
            attitude: compose_quat(&from.attitude, &gamma),
            velocity: from.velocity - g * self.dt + r * beta,
            gyro_bias: from.gyro_bias,
            accel_bias: from.accel_bias,
        }
    }

    /// Concatenate two consecutive preintegrations sharing a linearization
    /// bias: terms, bias Jacobians and covariance compose exactly.
    pub fn compose(&self, other: &Preintegration) -> Preintegration {
        let r12 = self.gamma.to_rotation_matrix().into_inner();
        let r23t = other.gamma.to_rotation_matrix().into_inner().transpose();
        let dt2 = other.dt;

        // Error maps from segment errors to composed errors, order [θ, α, β].
        let mut f_a = SMatrix::<f64, 9, 9>::identity();
        f_a.fixed_view_mut::<3, 3>(0, 0).copy_from(&r23t);
        f_a.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r12 * skew(&other.alpha)));
        f_a.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(Matrix3::identity() * dt2));
        f_a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r12 * skew(&other.beta)));
        let mut f_b = SMatrix::<f64, 9, 9>::identity();
        f_b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r12);
        f_b.fixed_view_mut::<3, 3>(6, 6).copy_from(&r12);

        let theta_g = r23t * self.dgamma_dbg + other.dgamma_dbg;
        let alpha_g = self.dalpha_dbg + dt2 * self.dbeta_dbg
            - r12 * skew(&other.alpha) * self.dgamma_dbg
            + r12 * other.dalpha_dbg;
        let beta_g =
            self.dbeta_dbg - r12 * skew(&other.beta) * self.dgamma_dbg + r12 * other.dbeta_dbg;
        let alpha_a = self.dalpha_dba + dt2 * self.dbeta_dba + r12 * other.dalpha_dba;
        let beta_a = self.dbeta_dba + r12 * other.dbeta_dba;

        Preintegration {
            dt: self.dt + other.dt,
            alpha: self.alpha + self.beta * dt2 + r12 * other.alpha,
            beta: self.beta + r12 * other.beta,
            gamma: compose_quat(&self.gamma, &other.gamma),
            dalpha_dbg: alpha_g,
            dalpha_dba: alpha_a,
            dbeta_dbg: beta_g,
            dbeta_dba: beta_a,
            dgamma_dbg: theta_g,
            covariance: f_a * self.covariance * f_a.transpose()
                + f_b * other.covariance * f_b.transpose(),
            lin_gyro_bias: self.lin_gyro_bias,
            lin_accel_bias: self.lin_accel_bias,
            noise: self.noise,
        }
    }

    /// 15×15 information matrix for the residual [q, p, v, b_ω, b_a]:
    /// inverse of the propagated covariance plus bias random-walk blocks.
    pub fn residual_information(&self) -> DMatrix<f64> {
        let mut cov = DMatrix::zeros(15, 15);
        let mut reg = self.covariance;
        for i in 0..9 {
            reg[(i, i)] += 1e-14;
        }
        cov.view_mut((0, 0), (9, 9)).copy_from(&reg);
        let walk_g = (self.noise.gyro_walk * self.noise.gyro_walk * self.dt).max(1e-16);
        let walk_a = (self.noise.accel_walk * self.noise.accel_walk * self.dt).max(1e-16);
        for i in 0..3 {
            cov[(9 + i, 9 + i)] = walk_g;
            cov[(12 + i, 12 + i)] = walk_a;
        }
        cov.try_inverse()
            .expect("regularized covariance invertible")
    }
}

/// Midpoint preintegration of bias-corrected measurements over a segment.
pub fn preintegrate(
    samples: &[ImuSample],
    bias_g: Vector3<f64>,
    bias_a: Vector3<f64>,
    noise: ImuNoise,
) -> Result<Preintegration, PreintError> {
    if samples.len() < 2 {
        return Err(PreintError::EmptySegment);
    }
    let mut p = Preintegration::identity(bias_g, bias_a, noise);
    for (i, pair) in samples.windows(2).enumerate() {
        let dt = pair[1].t() - pair[0].t();
        if dt <= 0.0 {
            return Err(PreintError::NonMonotonicTime { index: i + 1 });
        }
        p.step(&pair[0], &pair[1], dt);
    }
    Ok(p)
}

/// The 15-dimensional preintegration residual [r_q, r_p, r_v, r_bω, r_ba]
/// between two frame states sharing the w0 frame, with gravity applied as
/// `+ ½ g Δt²` in that frame.
pub fn preint_residual(
    p: &Preintegration,
    state_i: &FrameState,
    state_j: &FrameState,
    gravity: f64,
) -> DVector<f64> {
    let g = Vector3::new(0.0, 0.0, gravity);
    let dt = p.dt;
    let (alpha, beta, gamma) = p.bias_correct(
        &(state_i.gyro_bias - p.lin_gyro_bias),
        &(state_i.accel_bias - p.lin_accel_bias),
    );
    let r_i_t = state_i
        .attitude
        .to_rotation_matrix()
        .into_inner()
        .transpose();
    let q_err = gamma.inverse() * state_i.attitude.inverse() * state_j.attitude;
    let u_p = state_j.position - state_i.position - state_i.velocity * dt + 0.5 * g * dt * dt;
    let u_v = state_j.velocity - state_i.velocity + g * dt;

    let mut r = DVector::zeros(15);
    r.fixed_rows_mut::<3>(0)
        .copy_from(&rotation_residual(&q_err));
    r.fixed_rows_mut::<3>(3).copy_from(&(r_i_t * u_p - alpha));
    r.fixed_rows_mut::<3>(6).copy_from(&(r_i_t * u_v - beta));
    r.fixed_rows_mut::<3>(9)
        .copy_from(&(state_j.gyro_bias - state_i.gyro_bias));
    r.fixed_rows_mut::<3>(12)
        .copy_from(&(state_j.accel_bias - state_i.accel_bias));
    r
}

/// Residual block over `[pose_i, speedbias_i, pose_j, speedbias_j]` where a
/// pose block is `[p, q]` (Pose3) and a speed-bias block is `[v, b_ω, b_a]`
/// (Euclidean 9).
pub struct PreintFactor {
    pub preint: Preintegration,
    pub gravity: f64,
}

fn state_from_blocks(pose: &DVector<f64>, sb: &DVector<f64>) -> FrameState {
    let (p, q) = pose_from_ambient(&pose.as_view());
    FrameState {
        t_ns: 0,
        position: p,
        attitude: q,
        velocity: Vector3::new(sb[0], sb[1], sb[2]),
        gyro_bias: Vector3::new(sb[3], sb[4], sb[5]),
        accel_bias: Vector3::new(sb[6], sb[7], sb[8]),
    }
}

impl Factor for PreintFactor {
    fn dim(&self) -> usize {
        15
    }

    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let state_i = state_from_blocks(values[0], values[1]);
        let state_j = state_from_blocks(values[2], values[3]);
        let r = preint_residual(&self.preint, &state_i, &state_j, self.gravity);

        if let Some(jacs) = jacobians {
            let p = &self.preint;
            let g = Vector3::new(0.0, 0.0, self.gravity);
            let dt = p.dt;
            let dbg = state_i.gyro_bias - p.lin_gyro_bias;
            let (_, _, gamma) = p.bias_correct(&dbg, &(state_i.accel_bias - p.lin_accel_bias));
            let r_i = state_i.attitude.to_rotation_matrix().into_inner();
            let r_i_t = r_i.transpose();
            let q_err = gamma.inverse() * state_i.attitude.inverse() * state_j.attitude;
            let u_p =
                state_j.position - state_i.position - state_i.velocity * dt + 0.5 * g * dt * dt;
            let u_v = state_j.velocity - state_i.velocity + g * dt;

            let l_vv = vec_jacobian_right_perturb(&q_err);
            let r_vv = vec_jacobian_left_perturb(&q_err);
            let rel = state_i.attitude.inverse() * state_j.attitude;
            let r_rel_t = rel.to_rotation_matrix().into_inner().transpose();
            // Exact first-order map from δbg to the left-perturbation of q_err.
            let w = right_jacobian(&(p.dgamma_dbg * dbg)) * p.dgamma_dbg;

            // pose_i: [δp_i, δθ_i]
            let ji = &mut jacs[0];
            ji.fill(0.0);
            ji.view_mut((0, 3), (3, 3)).copy_from(&(-(l_vv * r_rel_t)));
            ji.view_mut((3, 0), (3, 3)).copy_from(&(-r_i_t));
            ji.view_mut((3, 3), (3, 3)).copy_from(&skew(&(r_i_t * u_p)));
            ji.view_mut((6, 3), (3, 3)).copy_from(&skew(&(r_i_t * u_v)));

            // speedbias_i: [δv_i, δbg_i, δba_i]
            let jsb = &mut jacs[1];
            jsb.fill(0.0);
            jsb.view_mut((0, 3), (3, 3)).copy_from(&(-(r_vv * w)));
            jsb.view_mut((3, 0), (3, 3)).copy_from(&(-r_i_t * dt));
            jsb.view_mut((3, 3), (3, 3)).copy_from(&(-p.dalpha_dbg));
            jsb.view_mut((3, 6), (3, 3)).copy_from(&(-p.dalpha_dba));
            jsb.view_mut((6, 0), (3, 3)).copy_from(&(-r_i_t));
            jsb.view_mut((6, 3), (3, 3)).copy_from(&(-p.dbeta_dbg));
            jsb.view_mut((6, 6), (3, 3)).copy_from(&(-p.dbeta_dba));
            jsb.view_mut((9, 3), (3, 3))
                .copy_from(&(-Matrix3::identity()));
            jsb.view_mut((12, 6), (3, 3))
                .copy_from(&(-Matrix3::identity()));

            // pose_j: [δp_j, δθ_j]
            let jj = &mut jacs[2];
            jj.fill(0.0);
            jj.view_mut((0, 3), (3, 3)).copy_from(&l_vv);
            jj.view_mut((3, 0), (3, 3)).copy_from(&r_i_t);

            // speedbias_j
            let jsbj = &mut jacs[3];
            jsbj.fill(0.0);
            jsbj.view_mut((6, 0), (3, 3)).copy_from(&r_i_t);
            jsbj.view_mut((9, 3), (3, 3))
                .copy_from(&Matrix3::identity());
            jsbj.view_mut((12, 6), (3, 3))
                .copy_from(&Matrix3::identity());
        }
        r
    }
}
