//! Deterministic, seedable generation of ground-truth trajectories and
//! synthetic IMU / GNSS / feature-track measurements.
//!
//! All timestamps are integer nanoseconds; measurement streams are
//! time-sorted and bit-identical for identical seeds. The world frame is ENU
//! (z = Up); gravity enters accelerometer synthesis as the specific force
//! `a_meas = R_wb⁻¹ (a_world + G) + b_a + n` with `G = (0, 0, g)`.

mod spline;

pub use spline::CubicSpline;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{yaw_quat, Pose};

/// Horizontal speed below which a GNSS course is meaningless.
pub const COURSE_SPEED_THRESHOLD: f64 = 1.0;

pub const NANOS_PER_SEC: i64 = 1_000_000_000;

pub fn ns_to_sec(t_ns: i64) -> f64 {
    t_ns as f64 * 1e-9
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("degenerate trajectory spec: {0}")]
    DegenerateSpec(String),
    #[error("frame {frame} observes only {count} tracks (floor {floor})")]
    InsufficientCoverage {
        frame: usize,
        count: usize,
        floor: usize,
    },
}

/// How the body yaw evolves along the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YawMode {
    /// Yaw follows the horizontal velocity direction (vehicle-like); course
    /// and yaw coincide exactly.
    FollowPath,
    /// Yaw is splined through the waypoint yaw values.
    Waypoints,
}

#[derive(Debug, Clone, Copy)]
pub struct Waypoint {
    pub position: Vector3<f64>,
    pub yaw: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub duration: f64,
    pub waypoints: Vec<Waypoint>,
    pub yaw_mode: YawMode,
    pub camera_hz: u32,
    pub imu_hz: u32,
    pub gnss_hz: u32,
    pub gravity: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            duration: 60.0,
            waypoints: Vec::new(),
            yaw_mode: YawMode::FollowPath,
            camera_hz: 20,
            imu_hz: 200,
            gnss_hz: 20,
            gravity: 9.81,
        }
    }
}

/// One ground-truth state, sampled at the IMU rate.
#[derive(Debug, Clone, Copy)]
pub struct GtState {
    pub t_ns: i64,
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    /// Body-frame angular rate (what an ideal gyro reads).
    pub angular_rate: Vector3<f64>,
    /// World-frame linear acceleration.
    pub acceleration: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub states: Vec<GtState>,
    pub imu_hz: u32,
    /// Camera frames are every `camera_every`-th IMU state.
    pub camera_every: usize,
    /// GNSS samples are every `gnss_every`-th camera frame.
    pub gnss_every: usize,
    pub gravity: f64,
}

impl GroundTruth {
    pub fn camera_frames(&self) -> impl Iterator<Item = (usize, &GtState)> {
        self.states.iter().step_by(self.camera_every).enumerate()
    }

    pub fn num_camera_frames(&self) -> usize {
        self.states.len().div_ceil(self.camera_every)
    }

    pub fn camera_state(&self, frame_id: usize) -> &GtState {
        &self.states[frame_id * self.camera_every]
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSpec {
    /// Gyro white noise density, rad/s/√Hz.
    pub gyro_white: f64,
    /// Accelerometer white noise density, m/s²/√Hz.
    pub accel_white: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub gyro_walk: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub accel_walk: f64,
    pub initial_gyro_bias: Vector3<f64>,
    pub initial_accel_bias: Vector3<f64>,
    /// GNSS position noise per ENU axis, meters.
    pub gnss_pos_sigma: Vector3<f64>,
    /// GNSS velocity noise per ENU axis, m/s.
    pub gnss_vel_sigma: Vector3<f64>,
    /// Intervals [start, end] in seconds with no GNSS samples.
    pub gnss_dropouts: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gyro_white: 0.0,
            accel_white: 0.0,
            gyro_walk: 0.0,
            accel_walk: 0.0,
            initial_gyro_bias: Vector3::zeros(),
            initial_accel_bias: Vector3::zeros(),
            gnss_pos_sigma: Vector3::zeros(),
            gnss_vel_sigma: Vector3::zeros(),
            gnss_dropouts: Vec::new(),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// The paper-protocol GNSS noise: 0.2 m per axis at camera rate.
    pub fn paper_protocol(seed: u64) -> Self {
        Self {
            gyro_white: 1.7e-4,
            accel_white: 2.0e-3,
            gyro_walk: 1.9e-5,
            accel_walk: 3.0e-3,
            gnss_pos_sigma: Vector3::new(0.2, 0.2, 0.2),
            gnss_vel_sigma: Vector3::new(0.05, 0.05, 0.05),
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub t_ns: i64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn t(&self) -> f64 {
        ns_to_sec(self.t_ns)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GnssSample {
    pub t_ns: i64,
    /// ENU antenna position, meters.
    pub position: Vector3<f64>,
    /// ENU velocity, m/s.
    pub velocity: Vector3<f64>,
    /// Course over ground, radians from East about Up.
    pub course: f64,
    pub pos_sigma: Vector3<f64>,
    pub vel_sigma: Vector3<f64>,
    pub position_valid: bool,
    pub velocity_valid: bool,
    pub course_valid: bool,
}

impl GnssSample {
    pub fn t(&self) -> f64 {
        ns_to_sec(self.t_ns)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrackObservation {
    pub frame_id: usize,
    /// Normalized image coordinates (pinhole, unit focal plane).
    pub uv: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub id: u64,
    /// Ground-truth landmark position (world frame); simulator-private,
    /// absent for ingested tracks.
    pub landmark: Option<Vector3<f64>>,
    pub observations: Vec<TrackObservation>,
}

impl FeatureTrack {
    pub fn usable(&self) -> bool {
        self.observations.len() >= 2
    }
}

/// Options for feature-track synthesis.
#[derive(Debug, Clone)]
pub struct TrackOptions {
    pub landmark_count: usize,
    /// Camera-in-body extrinsic T_b_c.
    pub t_bc: Pose,
    /// Tangent of the half field-of-view, both image axes.
    pub fov_half_tan: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Landmarks are drawn in a corridor of this radius around the path.
    pub corridor_radius: f64,
    pub max_track_length: usize,
    /// Noise on normalized coordinates (pixel noise / virtual focal length).
    pub pixel_sigma: f64,
    /// Minimum tracks observed per frame before `InsufficientCoverage`.
    pub min_per_frame: usize,
}

/// Camera looking along body +x: camera z is the optical axis, camera x
/// points to body −y (right), camera y to body −z (down).
pub fn forward_camera_extrinsic() -> Pose {
    let r = nalgebra::Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    );
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r)),
        Vector3::zeros(),
    )
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            landmark_count: 400,
            t_bc: forward_camera_extrinsic(),
            fov_half_tan: 0.9,
            min_depth: 0.5,
            max_depth: 60.0,
            corridor_radius: 18.0,
            max_track_length: 40,
            pixel_sigma: 0.0,
            min_per_frame: 8,
        }
    }
}

/// Build a C² ground-truth trajectory through the waypoints, sampled at the
/// IMU rate. Velocity and acceleration are analytic spline derivatives.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<GroundTruth, SimError> {
    if spec.duration <= 0.0 {
        return Err(SimError::DegenerateSpec("duration must be positive".into()));
    }
    if spec.waypoints.len() < 2 {
        return Err(SimError::DegenerateSpec(
            "need at least two waypoints".into(),
        ));
    }
    for w in spec.waypoints.windows(2) {
        if (w[0].position - w[1].position).norm() < 1e-12 {
            return Err(SimError::DegenerateSpec(
                "consecutive waypoints coincide".into(),
            ));
        }
    }
    if spec.imu_hz < spec.camera_hz || spec.camera_hz < spec.gnss_hz || spec.gnss_hz == 0 {
        return Err(SimError::DegenerateSpec(
            "rates must satisfy imu >= camera >= gnss > 0".into(),
        ));
    }
    if !spec.imu_hz.is_multiple_of(spec.camera_hz) || !spec.camera_hz.is_multiple_of(spec.gnss_hz) {
        return Err(SimError::DegenerateSpec(
            "imu rate must be a multiple of camera rate, camera of gnss".into(),
        ));
    }

    let n = spec.waypoints.len();
    let knots: Vec<f64> = (0..n)
        .map(|i| i as f64 * spec.duration / (n - 1) as f64)
        .collect();
    let sx = CubicSpline::fit(
        &knots,
        &spec
            .waypoints
            .iter()
            .map(|w| w.position.x)
            .collect::<Vec<_>>(),
    );
    let sy = CubicSpline::fit(
        &knots,
        &spec
            .waypoints
            .iter()
            .map(|w| w.position.y)
            .collect::<Vec<_>>(),
    );
    let sz = CubicSpline::fit(
        &knots,
        &spec
            .waypoints
            .iter()
            .map(|w| w.position.z)
            .collect::<Vec<_>>(),
    );
    let yaw_spline = match spec.yaw_mode {
        YawMode::Waypoints => {
            // Unwrap waypoint yaws so the spline never jumps by 2π.
            let mut yaws: Vec<f64> = Vec::with_capacity(n);
            for w in &spec.waypoints {
                let y = match yaws.last() {
                    Some(prev) => prev + crate::geometry::wrap_angle(w.yaw - prev),
                    None => w.yaw,
                };
                yaws.push(y);
            }
            Some(CubicSpline::fit(&knots, &yaws))
        }
        YawMode::FollowPath => None,
    };

    let dt_ns = NANOS_PER_SEC / spec.imu_hz as i64;
    let steps = (spec.duration * spec.imu_hz as f64).round() as i64;
    let mut states = Vec::with_capacity(steps as usize + 1);
    for k in 0..=steps {
        let t_ns = k * dt_ns;
        let t = ns_to_sec(t_ns);
        let (px, vx, ax) = sx.eval(t);
        let (py, vy, ay) = sy.eval(t);
        let (pz, vz, az) = sz.eval(t);
        let velocity = Vector3::new(vx, vy, vz);
        let acceleration = Vector3::new(ax, ay, az);
        let (yaw, yaw_rate) = match &yaw_spline {
            Some(s) => {
                let (y, dy, _) = s.eval(t);
                (y, dy)
            }
            None => {
                let v_h2 = vx * vx + vy * vy;
                if v_h2 < 0.01 {
                    return Err(SimError::DegenerateSpec(format!(
                        "horizontal speed too low at t={t:.2}s for path-following yaw"
                    )));
                }
                (vy.atan2(vx), (vx * ay - vy * ax) / v_h2)
            }
        };
        states.push(GtState {
            t_ns,
            position: Vector3::new(px, py, pz),
            attitude: yaw_quat(yaw),
            velocity,
            angular_rate: Vector3::new(0.0, 0.0, yaw_rate),
            acceleration,
        });
    }
    Ok(GroundTruth {
        states,
        imu_hz: spec.imu_hz,
        camera_every: (spec.imu_hz / spec.camera_hz) as usize,
        gnss_every: (spec.camera_hz / spec.gnss_hz) as usize,
        gravity: spec.gravity,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng, sigma: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        sigma.x * normal(rng),
        sigma.y * normal(rng),
        sigma.z * normal(rng),
    )
}

const STREAM_IMU: u64 = 0x1a2b_3c4d_0001;
const STREAM_GNSS: u64 = 0x1a2b_3c4d_0002;
const STREAM_TRACKS: u64 = 0x1a2b_3c4d_0003;

/// Synthesize IMU specific-force and angular-rate measurements with white
/// noise and random-walk biases at the IMU rate.
pub fn synth_imu(gt: &GroundTruth, noise: &NoiseSpec) -> Vec<ImuSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ STREAM_IMU);
    let dt = 1.0 / gt.imu_hz as f64;
    let sqrt_rate = (gt.imu_hz as f64).sqrt();
    let sqrt_dt = dt.sqrt();
    let g_vec = Vector3::new(0.0, 0.0, gt.gravity);
    let mut bias_g = noise.initial_gyro_bias;
    let mut bias_a = noise.initial_accel_bias;
    let mut out = Vec::with_capacity(gt.states.len());
    for s in &gt.states {
        let r_wb = s.attitude;
        let accel_body = r_wb.inverse() * (s.acceleration + g_vec);
        let white_g = Vector3::from_fn(|_, _| noise.gyro_white * sqrt_rate * normal(&mut rng));
        let white_a = Vector3::from_fn(|_, _| noise.accel_white * sqrt_rate * normal(&mut rng));
        out.push(ImuSample {
            t_ns: s.t_ns,
            gyro: s.angular_rate + bias_g + white_g,
            accel: accel_body + bias_a + white_a,
        });
        bias_g += Vector3::from_fn(|_, _| noise.gyro_walk * sqrt_dt * normal(&mut rng));
        bias_a += Vector3::from_fn(|_, _| noise.accel_walk * sqrt_dt * normal(&mut rng));
    }
    out
}

/// Synthesize GNSS fixes at the GNSS rate: antenna position (body position
/// plus rotated lever arm) with Gaussian noise, body velocity with Gaussian
/// noise, and course derived from the noisy velocity. Samples inside dropout
/// intervals are omitted.
pub fn synth_gnss(
    gt: &GroundTruth,
    noise: &NoiseSpec,
    lever_arm: &Vector3<f64>,
) -> Vec<GnssSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ STREAM_GNSS);
    let stride = gt.camera_every * gt.gnss_every;
    let mut out = Vec::new();
    for s in gt.states.iter().step_by(stride) {
        let t = ns_to_sec(s.t_ns);
        // Draw noise regardless of dropout so the stream stays reproducible
        // when dropout windows change.
        let pos_noise = normal3(&mut rng, &noise.gnss_pos_sigma);
        let vel_noise = normal3(&mut rng, &noise.gnss_vel_sigma);
        if noise
            .gnss_dropouts
            .iter()
            .any(|(start, end)| t >= *start && t <= *end)
        {
            continue;
        }
        let position = s.position + s.attitude * lever_arm + pos_noise;
        let velocity = s.velocity + vel_noise;
        let h_speed = velocity.xy().norm();
        out.push(GnssSample {
            t_ns: s.t_ns,
            position,
            velocity,
            course: velocity.y.atan2(velocity.x),
            pos_sigma: noise.gnss_pos_sigma,
            vel_sigma: noise.gnss_vel_sigma,
            position_valid: true,
            velocity_valid: true,
            course_valid: h_speed >= COURSE_SPEED_THRESHOLD,
        });
    }
    out
}

/// Synthesize feature tracks: landmarks drawn in a corridor around the
/// trajectory, projected through the pinhole camera at every frame, with
/// observations outside the field of view or behind the camera excluded and
/// long tracks split at `max_track_length` (tracker re-detection).
pub fn synth_tracks(
    gt: &GroundTruth,
    noise_seed: u64,
    opts: &TrackOptions,
) -> Result<Vec<FeatureTrack>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ STREAM_TRACKS);
    let n_frames = gt.num_camera_frames();

    // Landmarks around the path, overshooting the end so the final frames
    // still see structure ahead.
    let mut landmarks = Vec::with_capacity(opts.landmark_count);
    let last_t = ns_to_sec(gt.states.last().unwrap().t_ns);
    let last_state = *gt.states.last().unwrap();
    let overshoot = 0.15 * last_t;
    for _ in 0..opts.landmark_count {
        let t = rng.random::<f64>() * (last_t + overshoot);
        let base = if t <= last_t {
            let idx = ((t * gt.imu_hz as f64) as usize).min(gt.states.len() - 1);
            gt.states[idx].position
        } else {
            last_state.position + last_state.velocity * (t - last_t)
        };
        let dir = loop {
            let v = Vector3::new(
                2.0 * rng.random::<f64>() - 1.0,
                2.0 * rng.random::<f64>() - 1.0,
                2.0 * rng.random::<f64>() - 1.0,
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let radius = 2.0 + (opts.corridor_radius - 2.0) * rng.random::<f64>();
        landmarks.push(base + dir * radius);
    }

    // Project per frame; group into tracks, splitting on gaps and length cap.
    let mut tracks: Vec<FeatureTrack> = Vec::new();
    let mut next_id: u64 = 0;
    let mut open: Vec<Option<usize>> = vec![None; landmarks.len()];
    let mut per_frame_count = vec![0usize; n_frames];

    for (frame_id, state) in gt.camera_frames() {
        let t_wb = Pose::new(state.attitude, state.position);
        let t_wc = t_wb.compose(&opts.t_bc);
        let t_cw = t_wc.inverse();
        for (li, lm) in landmarks.iter().enumerate() {
            let p_c = t_cw.transform_point(lm);
            let visible = p_c.z > opts.min_depth
                && p_c.z < opts.max_depth
                && (p_c.x / p_c.z).abs() <= opts.fov_half_tan
                && (p_c.y / p_c.z).abs() <= opts.fov_half_tan;
            if !visible {
                open[li] = None;
                continue;
            }
            let uv = Vector2::new(
                p_c.x / p_c.z + opts.pixel_sigma * normal(&mut rng),
                p_c.y / p_c.z + opts.pixel_sigma * normal(&mut rng),
            );
            let track_idx = match open[li] {
                Some(ti) if tracks[ti].observations.len() < opts.max_track_length => ti,
                _ => {
                    tracks.push(FeatureTrack {
                        id: next_id,
                        landmark: Some(*lm),
                        observations: Vec::new(),
                    });
                    next_id += 1;
                    open[li] = Some(tracks.len() - 1);
                    tracks.len() - 1
                }
            };
            tracks[track_idx]
                .observations
                .push(TrackObservation { frame_id, uv });
            per_frame_count[frame_id] += 1;
        }
    }

    tracks.retain(|t| t.observations.len() >= 2);

    if opts.min_per_frame > 0 {
        // Count only usable tracks per frame.
        let mut usable = vec![0usize; n_frames];
        for t in &tracks {
            for o in &t.observations {
                usable[o.frame_id] += 1;
            }
        }
        for (frame, &count) in usable.iter().enumerate() {
            if count < opts.min_per_frame {
                return Err(SimError::InsufficientCoverage {
                    frame,
                    count,
                    floor: opts.min_per_frame,
                });
            }
        }
    }
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_spec(duration: f64) -> TrajectorySpec {
        TrajectorySpec {
            duration,
            waypoints: (0..5)
                .map(|i| Waypoint {
                    position: Vector3::new(i as f64 * duration, 0.0, 0.0),
                    yaw: 0.0,
                })
                .collect(),
            yaw_mode: YawMode::FollowPath,
            ..Default::default()
        }
    }

    fn circle_spec(radius: f64, omega: f64, duration: f64, n_wp: usize) -> TrajectorySpec {
        TrajectorySpec {
            duration,
            waypoints: (0..n_wp)
                .map(|i| {
                    let t = i as f64 * duration / (n_wp - 1) as f64;
                    let a = omega * t;
                    Waypoint {
                        position: Vector3::new(radius * a.cos(), radius * a.sin(), 0.0),
                        yaw: 0.0,
                    }
                })
                .collect(),
            yaw_mode: YawMode::FollowPath,
            ..Default::default()
        }
    }

    #[test]
    fn straight_line_has_zero_acceleration() {
        let gt = generate_trajectory(&straight_spec(10.0)).unwrap();
        for s in &gt.states {
            assert!(s.acceleration.norm() < 1e-9, "accel {:?}", s.acceleration);
            assert_relative_eq!(s.velocity.x, 4.0 * 10.0 / 10.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let (r, omega) = (20.0, 0.25);
        let duration = 2.0 * std::f64::consts::PI / omega; // one lap
        let gt = generate_trajectory(&circle_spec(r, omega, duration, 4000)).unwrap();
        // Skip the natural-spline end segments.
        let n = gt.states.len();
        for s in &gt.states[n / 10..9 * n / 10] {
            let expected = r * omega * omega;
            assert!(
                (s.acceleration.norm() - expected).abs() < 1e-6 * expected.max(1.0),
                "centripetal {} vs {}",
                s.acceleration.norm(),
                expected
            );
        }
    }

    #[test]
    fn finite_difference_velocity_oracle() {
        let spec = circle_spec(15.0, 0.2, 30.0, 200);
        let gt = generate_trajectory(&spec).unwrap();
        let dt = 1.0 / spec.imu_hz as f64;
        for w in gt.states.windows(3) {
            let fd = (w[2].position - w[0].position) / (2.0 * dt);
            assert!(
                (fd - w[1].velocity).norm() < 1e-4,
                "fd {:?} vs v {:?}",
                fd,
                w[1].velocity
            );
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut spec = straight_spec(10.0);
        spec.duration = -1.0;
        assert!(matches!(
            generate_trajectory(&spec),
            Err(SimError::DegenerateSpec(_))
        ));
        let mut spec = straight_spec(10.0);
        spec.waypoints[1].position = spec.waypoints[0].position;
        assert!(matches!(
            generate_trajectory(&spec),
            Err(SimError::DegenerateSpec(_))
        ));
    }

    fn stationary_gt(n: usize, attitude: UnitQuaternion<f64>) -> GroundTruth {
        GroundTruth {
            states: (0..n)
                .map(|k| GtState {
                    t_ns: k as i64 * 5_000_000,
                    position: Vector3::new(1.0, 2.0, 3.0),
                    attitude,
                    velocity: Vector3::zeros(),
                    angular_rate: Vector3::zeros(),
                    acceleration: Vector3::zeros(),
                })
                .collect(),
            imu_hz: 200,
            camera_every: 10,
            gnss_every: 1,
            gravity: 9.81,
        }
    }

    #[test]
    fn stationary_imu_reads_gravity_only() {
        let gt = stationary_gt(100, UnitQuaternion::identity());
        let imu = synth_imu(&gt, &NoiseSpec::default());
        for s in &imu {
            assert_relative_eq!(s.accel, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
            assert_relative_eq!(s.gyro, Vector3::zeros(), epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_world_acceleration_imu() {
        let mut gt = stationary_gt(100, UnitQuaternion::identity());
        for s in gt.states.iter_mut() {
            s.acceleration = Vector3::new(1.0, 0.0, 0.0);
        }
        let imu = synth_imu(&gt, &NoiseSpec::default());
        assert_relative_eq!(imu[0].accel, Vector3::new(1.0, 0.0, 9.81), epsilon = 1e-12);
    }

    #[test]
    fn imu_noise_variance_matches_density() {
        let gt = stationary_gt(100_000, UnitQuaternion::identity());
        let noise = NoiseSpec {
            gyro_white: 1e-3,
            accel_white: 2e-3,
            seed: 42,
            ..Default::default()
        };
        let imu = synth_imu(&gt, &noise);
        let rate = gt.imu_hz as f64;
        let gyro_var = imu.iter().map(|s| s.gyro.x * s.gyro.x).sum::<f64>() / imu.len() as f64;
        let accel_var =
            imu.iter().map(|s| (s.accel.z - 9.81).powi(2)).sum::<f64>() / imu.len() as f64;
        let expect_g = noise.gyro_white * noise.gyro_white * rate;
        let expect_a = noise.accel_white * noise.accel_white * rate;
        assert!(
            (gyro_var / expect_g - 1.0).abs() < 0.05,
            "{gyro_var} vs {expect_g}"
        );
        assert!(
            (accel_var / expect_a - 1.0).abs() < 0.05,
            "{accel_var} vs {expect_a}"
        );
    }

    #[test]
    fn gnss_zero_noise_equals_truth() {
        let gt = generate_trajectory(&straight_spec(10.0)).unwrap();
        let samples = synth_gnss(&gt, &NoiseSpec::default(), &Vector3::zeros());
        for s in &samples {
            let idx = (s.t_ns / 5_000_000) as usize;
            assert_relative_eq!(s.position, gt.states[idx].position, epsilon = 1e-12);
            assert_relative_eq!(s.velocity, gt.states[idx].velocity, epsilon = 1e-12);
        }
    }

    #[test]
    fn gnss_noise_mean_error_matches_gaussian_norm_expectation() {
        // E‖e‖ for isotropic 3-D Gaussian with per-axis σ: σ·√(8/π).
        let gt = stationary_gt(60_000, UnitQuaternion::identity());
        let mut gt = gt;
        gt.camera_every = 1;
        gt.gnss_every = 1;
        let noise = NoiseSpec {
            gnss_pos_sigma: Vector3::new(0.2, 0.2, 0.2),
            seed: 7,
            ..Default::default()
        };
        let samples = synth_gnss(&gt, &noise, &Vector3::zeros());
        assert!(samples.len() >= 10_000);
        let mean_err = samples
            .iter()
            .map(|s| (s.position - Vector3::new(1.0, 2.0, 3.0)).norm())
            .sum::<f64>()
            / samples.len() as f64;
        let expected = 0.2 * (8.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_err / expected - 1.0).abs() < 0.05,
            "mean {mean_err} vs expected {expected}"
        );
    }

    #[test]
    fn gnss_dropout_interval_omits_samples() {
        let gt = generate_trajectory(&straight_spec(30.0)).unwrap();
        let noise = NoiseSpec {
            gnss_dropouts: vec![(10.0, 20.0)],
            ..Default::default()
        };
        let samples = synth_gnss(&gt, &noise, &Vector3::zeros());
        assert!(!samples.is_empty());
        for s in &samples {
            let t = s.t();
            assert!(!(10.0..=20.0).contains(&t), "sample at {t} inside dropout");
        }
    }

    #[test]
    fn course_flag_obeys_speed_threshold() {
        let slow = TrajectorySpec {
            duration: 20.0,
            waypoints: (0..5)
                .map(|i| Waypoint {
                    position: Vector3::new(i as f64 * 2.0, 0.0, 0.0),
                    yaw: 0.0,
                })
                .collect(),
            yaw_mode: YawMode::Waypoints,
            ..Default::default()
        };
        let gt = generate_trajectory(&slow).unwrap();
        let samples = synth_gnss(&gt, &NoiseSpec::default(), &Vector3::zeros());
        for s in &samples {
            assert_eq!(
                s.course_valid,
                s.velocity.xy().norm() >= COURSE_SPEED_THRESHOLD
            );
        }
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let gt = generate_trajectory(&straight_spec(5.0)).unwrap();
        let noise = NoiseSpec::paper_protocol(123);
        let a = synth_imu(&gt, &noise);
        let b = synth_imu(&gt, &noise);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.t_ns, y.t_ns);
            assert_eq!(x.gyro, y.gyro);
            assert_eq!(x.accel, y.accel);
        }
        let g1 = synth_gnss(&gt, &noise, &Vector3::new(0.3, 0.0, 0.1));
        let g2 = synth_gnss(&gt, &noise, &Vector3::new(0.3, 0.0, 0.1));
        for (x, y) in g1.iter().zip(g2.iter()) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.velocity, y.velocity);
        }
        let t1 = synth_tracks(&gt, 123, &TrackOptions::default()).unwrap();
        let t2 = synth_tracks(&gt, 123, &TrackOptions::default()).unwrap();
        assert_eq!(t1.len(), t2.len());
        for (a, b) in t1.iter().zip(t2.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.observations.len(), b.observations.len());
            for (oa, ob) in a.observations.iter().zip(b.observations.iter()) {
                assert_eq!(oa.uv, ob.uv);
            }
        }
    }

    #[test]
    fn landmark_on_optical_axis_projects_to_origin() {
        // Identity body pose, forward camera: optical axis is body +x.
        let gt = stationary_gt(20, UnitQuaternion::identity());
        let opts = TrackOptions {
            landmark_count: 0,
            min_per_frame: 0,
            ..Default::default()
        };
        // Project manually through the same camera model.
        let state = &gt.states[0];
        let t_wc = Pose::new(state.attitude, state.position).compose(&opts.t_bc);
        let p_c = t_wc
            .inverse()
            .transform_point(&(state.position + Vector3::new(5.0, 0.0, 0.0)));
        assert_relative_eq!(p_c, Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-12);
        let uv = Vector2::new(p_c.x / p_c.z, p_c.y / p_c.z);
        assert_relative_eq!(uv, Vector2::zeros(), epsilon = 1e-12);

        // Camera-frame point (1, 0, 5) lands at (0.2, 0).
        let p_c2 = Vector3::new(1.0, 0.0, 5.0);
        assert_relative_eq!(
            Vector2::new(p_c2.x / p_c2.z, p_c2.y / p_c2.z),
            Vector2::new(0.2, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_noise_tracks_retriangulate_to_landmarks() {
        let spec = circle_spec(25.0, 0.15, 40.0, 400);
        let gt = generate_trajectory(&spec).unwrap();
        let opts = TrackOptions::default();
        let tracks = synth_tracks(&gt, 5, &opts).unwrap();
        assert!(tracks.len() > 50);

        // Two-view DLT oracle using true camera poses.
        let mut checked = 0;
        for track in tracks.iter().filter(|t| t.observations.len() >= 8) {
            let first = &track.observations[0];
            let last = track.observations.last().unwrap();
            let mut a = nalgebra::DMatrix::<f64>::zeros(4, 4);
            for (row, obs) in [(0usize, first), (2usize, last)] {
                let st = gt.camera_state(obs.frame_id);
                let t_cw = Pose::new(st.attitude, st.position)
                    .compose(&opts.t_bc)
                    .inverse();
                let r = t_cw.rotation.to_rotation_matrix();
                let m = r.matrix();
                let t = t_cw.translation;
                // Rows: u*(P row 3) − (P row 1), v*(P row 3) − (P row 2)
                for c in 0..3 {
                    a[(row, c)] = obs.uv.x * m[(2, c)] - m[(0, c)];
                    a[(row + 1, c)] = obs.uv.x * 0.0 + obs.uv.y * m[(2, c)] - m[(1, c)];
                }
                a[(row, 3)] = obs.uv.x * t.z - t.x;
                a[(row + 1, 3)] = obs.uv.y * t.z - t.y;
            }
            let svd = a.svd(false, true);
            let v_t = svd.v_t.unwrap();
            let h = v_t.row(3);
            let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
            let truth = track.landmark.unwrap();
            assert!(
                (point - truth).norm() < 1e-9,
                "triangulated {:?} vs landmark {:?}",
                point,
                truth
            );
            checked += 1;
            if checked > 30 {
                break;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn insufficient_coverage_detected() {
        let gt = generate_trajectory(&straight_spec(5.0)).unwrap();
        let opts = TrackOptions {
            landmark_count: 3,
            min_per_frame: 8,
            ..Default::default()
        };
        assert!(matches!(
            synth_tracks(&gt, 1, &opts),
            Err(SimError::InsufficientCoverage { .. })
        ));
    }

    #[test]
    fn streams_are_time_sorted_and_aligned() {
        let gt = generate_trajectory(&straight_spec(8.0)).unwrap();
        let noise = NoiseSpec::paper_protocol(3);
        let imu = synth_imu(&gt, &noise);
        assert!(imu.windows(2).all(|w| w[0].t_ns < w[1].t_ns));
        let gnss = synth_gnss(&gt, &noise, &Vector3::zeros());
        assert!(gnss.windows(2).all(|w| w[0].t_ns < w[1].t_ns));
        // Camera instants are a subset of IMU instants.
        let imu_times: std::collections::BTreeSet<i64> = imu.iter().map(|s| s.t_ns).collect();
        for (_, state) in gt.camera_frames() {
            assert!(imu_times.contains(&state.t_ns));
        }
    }
}
