//! Rotation and pose algebra on the unit-quaternion and SE(3) manifolds.
//!
//! Conventions used throughout the crate:
//! - quaternions are canonicalized to `w >= 0` after every operation so that
//!   residuals and test expectations are deterministic;
//! - Euler angles follow the intrinsic Z(yaw)-Y(pitch)-X(roll) convention in
//!   the ENU world frame, which makes yaw the outermost rotation (the 4-DOF
//!   pose graph fixes pitch/roll and optimizes yaw);
//! - rotation-vector maps (`so3_exp`, `so3_log`) use the full angle, not the
//!   half-angle of the quaternion.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

/// Below this rotation angle the exp/log maps switch to their series branch.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pitch {pitch} rad is within 1e-6 of ±π/2: yaw/roll decomposition is degenerate")]
    GimbalLock { pitch: f64 },
}

/// Yaw/pitch/roll in radians, intrinsic Z-Y-X order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerYPR {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

/// Rigid transform: `x_parent = rotation * x_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonicalize(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            compose_quat(&self.rotation, &other.rotation),
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -(r_inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Flip the sign so the scalar part is non-negative.
pub fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Quaternion product with renormalization and canonical sign.
pub fn compose_quat(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    canonicalize(UnitQuaternion::from_quaternion(
        a.into_inner() * b.into_inner(),
    ))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map: rotation vector (axis * angle) to unit quaternion.
pub fn so3_exp(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = v.norm();
    let q = if angle < SMALL_ANGLE {
        // First-order series; normalization absorbs the truncation.
        Quaternion::from_parts(1.0, v * 0.5)
    } else {
        let half = 0.5 * angle;
        Quaternion::from_parts(half.cos(), v * (half.sin() / angle))
    };
    canonicalize(UnitQuaternion::from_quaternion(q))
}

/// Logarithm map: unit quaternion to rotation vector with norm <= π.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonicalize(*q);
    let vec = q.vector().clone_owned();
    let s = vec.norm();
    if s < SMALL_ANGLE {
        vec * (2.0 / q.w)
    } else {
        let angle = 2.0 * s.atan2(q.w);
        vec * (angle / s)
    }
}

/// Right Jacobian of SO(3): d Log(Exp(φ) Exp(δ)) / dδ at δ=0 equals Jr(φ)⁻¹,
/// and Exp(φ + δ) = Exp(φ) Exp(Jr(φ) δ) to first order.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * w + (w * w) / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() - ((1.0 - theta.cos()) / t2) * w
            + ((theta - theta.sin()) / (t2 * theta)) * (w * w)
    }
}

/// Left-multiplication matrix: `q ⊗ p = quat_left(q) * p` with coefficients
/// ordered `[w, x, y, z]`.
pub fn quat_left(q: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (w, v) = (q.w, q.vector());
    let mut m = Matrix4::zeros();
    m[(0, 0)] = w;
    m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-v.transpose()));
    m.fixed_view_mut::<3, 1>(1, 0).copy_from(&v);
    m.fixed_view_mut::<3, 3>(1, 1)
        .copy_from(&(Matrix3::identity() * w + skew(&v.clone_owned())));
    m
}

/// Right-multiplication matrix: `q ⊗ p = quat_right(p) * q`, same ordering.
pub fn quat_right(p: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (w, v) = (p.w, p.vector());
    let mut m = Matrix4::zeros();
    m[(0, 0)] = w;
    m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-v.transpose()));
    m.fixed_view_mut::<3, 1>(1, 0).copy_from(&v);
    m.fixed_view_mut::<3, 3>(1, 1)
        .copy_from(&(Matrix3::identity() * w - skew(&v.clone_owned())));
    m
}

/// Small-rotation residual `2 * vec(q_err)`, approximately the rotation vector.
pub fn rotation_residual(q_err: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonicalize(*q_err);
    2.0 * q.vector()
}

/// Vector-part rows/columns of `quat_left(q)`: the exact Jacobian of
/// `2*vec(q ⊗ Exp(δ))` with respect to δ at δ=0.
pub fn vec_jacobian_right_perturb(q_err: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let q = canonicalize(*q_err);
    quat_left(&q).fixed_view::<3, 3>(1, 1).clone_owned()
}

/// Vector-part rows/columns of `quat_right(q)`: the exact Jacobian of
/// `2*vec(Exp(δ) ⊗ q)` with respect to δ at δ=0.
pub fn vec_jacobian_left_perturb(q_err: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let q = canonicalize(*q_err);
    quat_right(&q).fixed_view::<3, 3>(1, 1).clone_owned()
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Compose a quaternion from intrinsic Z(yaw)-Y(pitch)-X(roll) angles.
pub fn compose_ypr(e: &EulerYPR) -> UnitQuaternion<f64> {
    let qz = so3_exp(&Vector3::new(0.0, 0.0, e.yaw));
    let qy = so3_exp(&Vector3::new(0.0, e.pitch, 0.0));
    let qx = so3_exp(&Vector3::new(e.roll, 0.0, 0.0));
    compose_quat(&compose_quat(&qz, &qy), &qx)
}

/// Decompose into intrinsic Z-Y-X angles; errors within 1e-6 rad of the
/// pitch singularity.
pub fn decompose_ypr(q: &UnitQuaternion<f64>) -> Result<EulerYPR, GeometryError> {
    let r = q.to_rotation_matrix();
    let m = r.matrix();
    let sin_pitch = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sin_pitch.asin();
    if std::f64::consts::FRAC_PI_2 - pitch.abs() < 1e-6 {
        return Err(GeometryError::GimbalLock { pitch });
    }
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    Ok(EulerYPR {
        yaw: wrap_angle(yaw),
        pitch,
        roll: wrap_angle(roll),
    })
}

/// Rotation about the Up axis only.
pub fn yaw_quat(yaw: f64) -> UnitQuaternion<f64> {
    so3_exp(&Vector3::new(0.0, 0.0, yaw))
}

/// d(Rz(φ))/dφ as a 3x3 matrix (equals [e_z]× Rz(φ)).
pub fn yaw_rotation_derivative(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Dense matrix exponential by scaling-and-squaring (test oracle).
    fn expm(a: &Matrix3<f64>) -> Matrix3<f64> {
        let norm = a.norm();
        let k = (norm.log2().ceil().max(0.0) as u32) + 4;
        let scaled = a / 2f64.powi(k as i32);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for i in 1..=16 {
            term = term * scaled / i as f64;
            sum += term;
        }
        let mut out = sum;
        for _ in 0..k {
            out = out * out;
        }
        out
    }

    fn random_rotvec(rng: &mut StdRng, max_angle: f64) -> Vector3<f64> {
        let v = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        if v.norm() < 1e-12 {
            return Vector3::zeros();
        }
        v.normalize() * rng.random::<f64>() * max_angle
    }

    #[test]
    fn exp_identity() {
        let q = so3_exp(&Vector3::zeros());
        assert_relative_eq!(q.w, 1.0, epsilon = 1e-15);
        assert_relative_eq!(q.vector().norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exp_quarter_turn_about_z_maps_x_to_y() {
        let q = so3_exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let y = q * Vector3::x();
        assert_relative_eq!(y, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn exp_matches_matrix_exponential_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let v = random_rotvec(&mut rng, std::f64::consts::PI * 0.999);
            let r_quat = so3_exp(&v).to_rotation_matrix().into_inner();
            let r_expm = expm(&skew(&v));
            assert!((r_quat - r_expm).norm() < 1e-9, "v = {v:?}");
        }
    }

    #[test]
    fn log_identity_and_quarter_turn() {
        assert_relative_eq!(
            so3_log(&UnitQuaternion::identity()),
            Vector3::zeros(),
            epsilon = 1e-15
        );
        let q = so3_exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(
            so3_log(&q),
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = random_rotvec(&mut rng, std::f64::consts::PI * 0.99);
            let q = so3_exp(&v);
            let q2 = so3_exp(&so3_log(&q));
            let diff = (q.into_inner() - q2.into_inner()).norm();
            assert!(diff < 1e-9, "residual {diff} for v = {v:?}");
            assert!(so3_log(&q).norm() <= std::f64::consts::PI + 1e-12);
        }
    }

    #[test]
    fn ypr_identity_and_pure_yaw() {
        let e = decompose_ypr(&UnitQuaternion::identity()).unwrap();
        assert_eq!((e.yaw, e.pitch, e.roll), (0.0, 0.0, 0.0));
        let q = yaw_quat(std::f64::consts::FRAC_PI_4);
        let e = decompose_ypr(&q).unwrap();
        assert_relative_eq!(e.yaw, std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
        assert_relative_eq!(e.pitch, 0.0, epsilon = 1e-12);
        assert_relative_eq!(e.roll, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ypr_round_trip_away_from_lock() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 1000 {
            let v = random_rotvec(&mut rng, std::f64::consts::PI * 0.99);
            let q = so3_exp(&v);
            let e = match decompose_ypr(&q) {
                Ok(e) => e,
                Err(_) => continue,
            };
            let q2 = compose_ypr(&e);
            let dist = (q.into_inner() - q2.into_inner()).norm();
            assert!(dist < 1e-9, "round trip distance {dist}");
            checked += 1;
        }
    }

    #[test]
    fn gimbal_lock_detected() {
        let q = so3_exp(&Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
        assert!(matches!(
            decompose_ypr(&q),
            Err(GeometryError::GimbalLock { .. })
        ));
    }

    #[test]
    fn pose_group_laws() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..100 {
            let p = Pose::new(
                so3_exp(&random_rotvec(&mut rng, 3.0)),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            );
            let id = p.compose(&p.inverse());
            assert!(id.translation.norm() < 1e-12);
            assert!(so3_log(&id.rotation).norm() < 1e-12);
        }
    }

    #[test]
    fn norm_drift_bounded_over_many_compositions() {
        let mut rng = StdRng::seed_from_u64(23);
        let mut q = UnitQuaternion::identity();
        let factors: Vec<_> = (0..64)
            .map(|_| so3_exp(&random_rotvec(&mut rng, 3.0)))
            .collect();
        for i in 0..1_000_000u32 {
            q = compose_quat(&q, &factors[(i % 64) as usize]);
        }
        assert!((q.into_inner().norm() - 1.0).abs() < 1e-9);
        assert!(q.w >= 0.0);
    }

    #[test]
    fn quat_product_matrices_agree_with_product() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..50 {
            let a = so3_exp(&random_rotvec(&mut rng, 3.0));
            let b = so3_exp(&random_rotvec(&mut rng, 3.0));
            let ab = a.into_inner() * b.into_inner();
            let coeffs_b = nalgebra::Vector4::new(b.w, b.vector()[0], b.vector()[1], b.vector()[2]);
            let coeffs_a = nalgebra::Vector4::new(a.w, a.vector()[0], a.vector()[1], a.vector()[2]);
            let left = quat_left(&a) * coeffs_b;
            let right = quat_right(&b) * coeffs_a;
            for (i, &x) in [ab.w, ab.i, ab.j, ab.k].iter().enumerate() {
                assert_relative_eq!(left[i], x, epsilon = 1e-12);
                assert_relative_eq!(right[i], x, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn right_jacobian_first_order_property() {
        // Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..50 {
            let phi = random_rotvec(&mut rng, 2.5);
            let delta = random_rotvec(&mut rng, 1.0) * 1e-7;
            let lhs = so3_exp(&(phi + delta));
            let rhs = compose_quat(&so3_exp(&phi), &so3_exp(&(right_jacobian(&phi) * delta)));
            let err = (lhs.into_inner() - rhs.into_inner()).norm();
            // remaining error is second order in |delta|
            assert!(err < 1e-11, "first-order mismatch {err}");
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(0.5), 0.5);
        assert_relative_eq!(
            wrap_angle(-0.5 - 4.0 * std::f64::consts::PI),
            -0.5,
            epsilon = 1e-12
        );
    }
}
