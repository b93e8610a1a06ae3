//! Numerical world-frame alignment: metric scale from GNSS velocity, yaw
//! from horizontal track alignment, roll/pitch from gravity after removing
//! motion acceleration.

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{compose_ypr, yaw_quat, EulerYPR};
use crate::simulator::COURSE_SPEED_THRESHOLD;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("no frame pair moves fast enough to constrain the scale")]
    NoMotion,
    #[error("horizontal displacement {displacement:.3} m below the {required:.3} m minimum")]
    NoHorizontalMotion { displacement: f64, required: f64 },
    #[error("gravity direction scatter {rms_deg:.2}° (median) exceeds 5°: dynamics too strong")]
    ExcessiveDynamics { rms_deg: f64 },
}

/// One frame pair for scale estimation: GNSS velocities at both frames, the
/// time between them, and the unscaled visual displacement.
#[derive(Debug, Clone, Copy)]
pub struct ScalePair {
    pub v_i: Vector3<f64>,
    pub v_j: Vector3<f64>,
    pub dt: f64,
    pub vo_displacement: f64,
}

/// Least-squares metric scale setting the trapezoidal GNSS displacement
/// `‖(v_i+v_j)/2‖·Δt` equal to `s · ‖Δp_vo‖` over all pairs.
pub fn scale_from_gnss_velocity(pairs: &[ScalePair]) -> Result<f64, AlignError> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut usable = 0;
    for p in pairs {
        let speed = 0.5 * (p.v_i + p.v_j).norm();
        if speed < COURSE_SPEED_THRESHOLD {
            continue;
        }
        let d = speed * p.dt;
        num += d * p.vo_displacement;
        den += p.vo_displacement * p.vo_displacement;
        usable += 1;
    }
    if usable == 0 || den < 1e-12 {
        return Err(AlignError::NoMotion);
    }
    Ok(num / den)
}

/// Closed-form yaw aligning the lever-arm-compensated, scaled visual antenna
/// track to the GNSS track about the Up axis (1-D Procrustes on centered
/// horizontal coordinates).
///
/// `cam_positions[k]` is p_c0_ck, `attitudes[k]` is q_c0_ck; the antenna
/// position in c0 is `s·p + R(q_c0_bk)(t_bg − t_bc)`. `q_rp` is the current
/// roll/pitch estimate of the c0 frame (identity on the first pass); the
/// local track is levelled by it before the horizontal alignment, which
/// matters when c0 is a strongly tilted camera frame.
pub fn solve_yaw(
    cam_positions: &[Vector3<f64>],
    attitudes: &[UnitQuaternion<f64>],
    gnss_positions: &[Vector3<f64>],
    scale: f64,
    q_b_c: &UnitQuaternion<f64>,
    t_b_c: &Vector3<f64>,
    t_b_g: &Vector3<f64>,
    q_rp: &UnitQuaternion<f64>,
) -> Result<f64, AlignError> {
    assert_eq!(cam_positions.len(), gnss_positions.len());
    assert_eq!(cam_positions.len(), attitudes.len());
    let n = cam_positions.len() as f64;

    let local: Vec<Vector3<f64>> = cam_positions
        .iter()
        .zip(attitudes.iter())
        .map(|(p, q)| q_rp * (scale * p + (q * q_b_c.inverse()) * (t_b_g - t_b_c)))
        .collect();

    // Horizontal span gate on the GNSS track.
    let mut span: f64 = 0.0;
    for a in gnss_positions {
        for b in gnss_positions {
            span = span.max((a.xy() - b.xy()).norm());
        }
    }
    if span < 0.5 {
        return Err(AlignError::NoHorizontalMotion {
            displacement: span,
            required: 0.5,
        });
    }

    let mean_l: Vector3<f64> = local.iter().sum::<Vector3<f64>>() / n;
    let mean_g: Vector3<f64> = gnss_positions.iter().sum::<Vector3<f64>>() / n;
    let mut dot = 0.0;
    let mut cross = 0.0;
    for (l, g) in local.iter().zip(gnss_positions.iter()) {
        let x = l - mean_l;
        let y = g - mean_g;
        dot += x.x * y.x + x.y * y.y;
        cross += x.x * y.y - x.y * y.x;
    }
    Ok(cross.atan2(dot))
}

/// Roll and pitch of the c0 frame from averaged gravity direction, with the
/// motion acceleration (differentiated GNSS velocity, world frame) removed.
///
/// `body_accels[k]` is the IMU specific force at frame k (body frame),
/// `attitudes[k]` is q_c0_ck, `motion_accels[k]` is the world-frame motion
/// acceleration from GNSS velocity differences, `yaw` the step-2 estimate.
pub fn solve_roll_pitch(
    body_accels: &[Vector3<f64>],
    attitudes: &[UnitQuaternion<f64>],
    motion_accels: &[Vector3<f64>],
    q_b_c: &UnitQuaternion<f64>,
    yaw: f64,
    gravity: f64,
) -> Result<(f64, f64), AlignError> {
    assert_eq!(body_accels.len(), attitudes.len());
    assert_eq!(body_accels.len(), motion_accels.len());
    let g_vec = Vector3::new(0.0, 0.0, gravity);
    let q_yaw_inv = yaw_quat(yaw).inverse();

    // u_k: specific force rotated into c0.
    let u: Vec<Vector3<f64>> = body_accels
        .iter()
        .zip(attitudes.iter())
        .map(|(a, q)| (q * q_b_c.inverse()) * a)
        .collect();

    // Iterate the roll/pitch-dependent motion-acceleration removal.
    let mut roll = 0.0;
    let mut pitch = 0.0;
    let mut g_hats: Vec<Vector3<f64>> = Vec::new();
    for _ in 0..3 {
        let q_rp = compose_ypr(&EulerYPR {
            yaw: 0.0,
            pitch,
            roll,
        });
        g_hats = u
            .iter()
            .zip(motion_accels.iter())
            .map(|(u_k, a_l)| u_k - q_rp.inverse() * (q_yaw_inv * a_l))
            .collect();
        let mean: Vector3<f64> = g_hats.iter().sum::<Vector3<f64>>() / g_hats.len() as f64;
        // Ry(pitch)·Rx(roll)·mean ∝ e_z, solved in closed form.
        roll = mean.y.atan2(mean.z);
        let z1 = roll.sin() * mean.y + roll.cos() * mean.z;
        pitch = (-mean.x).atan2(z1);
    }
    let _ = g_vec;

    // Scatter gate: the median angular deviation of per-frame gravity
    // directions from their mean must stay within 5°. The median keeps a
    // single noisy velocity draw from masquerading as dynamics.
    let mean: Vector3<f64> = g_hats.iter().sum::<Vector3<f64>>() / g_hats.len() as f64;
    let mean_dir = mean.normalize();
    let mut angles: Vec<f64> = g_hats
        .iter()
        .map(|g| {
            let d = g.normalize();
            d.cross(&mean_dir).norm().atan2(d.dot(&mean_dir))
        })
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).expect("finite angle"));
    let median = angles[angles.len() / 2];
    if median > 5.0_f64.to_radians() {
        return Err(AlignError::ExcessiveDynamics {
            rms_deg: median.to_degrees(),
        });
    }
    Ok((roll, pitch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scale_direct_case() {
        // v_i = v_j = 2 m/s, Δt = 0.5 s, unscaled ‖Δp‖ = 0.8 → s = 1.25.
        let pairs = [ScalePair {
            v_i: Vector3::new(2.0, 0.0, 0.0),
            v_j: Vector3::new(2.0, 0.0, 0.0),
            dt: 0.5,
            vo_displacement: 0.8,
        }];
        assert_relative_eq!(scale_from_gnss_velocity(&pairs).unwrap(), 1.25);
    }

    #[test]
    fn scale_stationary_is_no_motion() {
        let pairs = [ScalePair {
            v_i: Vector3::zeros(),
            v_j: Vector3::new(0.1, 0.0, 0.0),
            dt: 0.5,
            vo_displacement: 0.01,
        }];
        assert!(matches!(
            scale_from_gnss_velocity(&pairs),
            Err(AlignError::NoMotion)
        ));
    }

    #[test]
    fn yaw_aligned_track_gives_zero() {
        let cams: Vec<Vector3<f64>> = (0..5)
            .map(|k| Vector3::new(k as f64 * 0.5, 0.0, 0.0))
            .collect();
        let atts = vec![UnitQuaternion::identity(); 5];
        let gnss: Vec<Vector3<f64>> = (0..5)
            .map(|k| Vector3::new(k as f64 * 0.5, 0.0, 0.0))
            .collect();
        let yaw = solve_yaw(
            &cams,
            &atts,
            &gnss,
            1.0,
            &UnitQuaternion::identity(),
            &Vector3::zeros(),
            &Vector3::zeros(),
            &UnitQuaternion::identity(),
        )
        .unwrap();
        assert_relative_eq!(yaw, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn yaw_quarter_turn_to_north() {
        let cams: Vec<Vector3<f64>> = (0..5)
            .map(|k| Vector3::new(k as f64 * 0.5, 0.0, 0.0))
            .collect();
        let atts = vec![UnitQuaternion::identity(); 5];
        // GNSS track along North.
        let gnss: Vec<Vector3<f64>> = (0..5)
            .map(|k| Vector3::new(0.0, k as f64 * 0.5, 0.0))
            .collect();
        let yaw = solve_yaw(
            &cams,
            &atts,
            &gnss,
            1.0,
            &UnitQuaternion::identity(),
            &Vector3::zeros(),
            &Vector3::zeros(),
            &UnitQuaternion::identity(),
        )
        .unwrap();
        assert_relative_eq!(yaw, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn yaw_random_offsets_recovered() {
        use crate::geometry::so3_exp;
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..20 {
            let true_yaw = (rng.random::<f64>() - 0.5) * 5.0;
            let q = yaw_quat(true_yaw);
            let mut cams = Vec::new();
            let mut atts = Vec::new();
            let mut gnss = Vec::new();
            for k in 0..8 {
                let t = k as f64 * 0.4;
                // Wiggly but horizontal-dominant track in c0.
                let p = Vector3::new(t, 0.3 * (t * 1.7).sin(), 0.05 * (t * 0.9).sin());
                let att = so3_exp(&Vector3::new(0.0, 0.0, 0.2 * t));
                cams.push(p);
                atts.push(att);
                gnss.push(q * (1.4 * p));
            }
            let yaw = solve_yaw(
                &cams,
                &atts,
                &gnss,
                1.4,
                &UnitQuaternion::identity(),
                &Vector3::zeros(),
                &Vector3::zeros(),
                &UnitQuaternion::identity(),
            )
            .unwrap();
            assert!(
                (yaw - true_yaw).abs() < 1e-6,
                "recovered {yaw} vs {true_yaw}"
            );
        }
    }

    #[test]
    fn yaw_requires_horizontal_motion() {
        let cams = vec![Vector3::zeros(); 4];
        let atts = vec![UnitQuaternion::identity(); 4];
        let gnss = vec![Vector3::new(0.0, 0.0, 1.0); 4];
        assert!(matches!(
            solve_yaw(
                &cams,
                &atts,
                &gnss,
                1.0,
                &UnitQuaternion::identity(),
                &Vector3::zeros(),
                &Vector3::zeros(),
                &UnitQuaternion::identity(),
            ),
            Err(AlignError::NoHorizontalMotion { .. })
        ));
    }

    #[test]
    fn roll_pitch_stationary_level() {
        let accels = vec![Vector3::new(0.0, 0.0, 9.81); 5];
        let atts = vec![UnitQuaternion::identity(); 5];
        let motion = vec![Vector3::zeros(); 5];
        let (roll, pitch) = solve_roll_pitch(
            &accels,
            &atts,
            &motion,
            &UnitQuaternion::identity(),
            0.0,
            9.81,
        )
        .unwrap();
        assert_relative_eq!(roll, 0.0, epsilon = 1e-12);
        assert_relative_eq!(pitch, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn roll_pitch_tilted_body() {
        // Body pitched 10°: measured gravity tilts accordingly.
        let pitch_true = 10.0_f64.to_radians();
        let q_w_b = compose_ypr(&EulerYPR {
            yaw: 0.0,
            pitch: pitch_true,
            roll: 0.0,
        });
        let accel = q_w_b.inverse() * Vector3::new(0.0, 0.0, 9.81);
        let accels = vec![accel; 5];
        let atts = vec![UnitQuaternion::identity(); 5];
        let motion = vec![Vector3::zeros(); 5];
        let (roll, pitch) = solve_roll_pitch(
            &accels,
            &atts,
            &motion,
            &UnitQuaternion::identity(),
            0.0,
            9.81,
        )
        .unwrap();
        assert_relative_eq!(pitch, pitch_true, epsilon = 1e-6);
        assert_relative_eq!(roll, 0.0, epsilon = 1e-9);
        // The recovered q(r,p) maps the measurement back to vertical.
        let q_rp = compose_ypr(&EulerYPR {
            yaw: 0.0,
            pitch,
            roll,
        });
        let up = q_rp * accel;
        assert!(up.xy().norm() < 1e-6);
    }

    #[test]
    fn roll_pitch_constant_acceleration_removed() {
        // Accelerating at 1 m/s² East while level: without motion removal
        // the gravity direction is biased; with it the answer matches the
        // stationary case.
        let a_motion = Vector3::new(1.0, 0.0, 0.0);
        let accel_meas = Vector3::new(1.0, 0.0, 9.81); // level body, a + G
        let accels = vec![accel_meas; 6];
        let atts = vec![UnitQuaternion::identity(); 6];
        let motion = vec![a_motion; 6];
        let (roll, pitch) = solve_roll_pitch(
            &accels,
            &atts,
            &motion,
            &UnitQuaternion::identity(),
            0.0,
            9.81,
        )
        .unwrap();
        assert_relative_eq!(roll, 0.0, epsilon = 1e-6);
        assert_relative_eq!(pitch, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn excessive_dynamics_detected() {
        // Wildly inconsistent "gravity" directions.
        let accels = vec![
            Vector3::new(0.0, 0.0, 9.81),
            Vector3::new(3.0, 0.0, 9.0),
            Vector3::new(-3.0, 2.0, 9.0),
            Vector3::new(0.0, -3.5, 9.0),
        ];
        let atts = vec![UnitQuaternion::identity(); 4];
        let motion = vec![Vector3::zeros(); 4];
        assert!(matches!(
            solve_roll_pitch(
                &accels,
                &atts,
                &motion,
                &UnitQuaternion::identity(),
                0.0,
                9.81,
            ),
            Err(AlignError::ExcessiveDynamics { .. })
        ));
    }
}
