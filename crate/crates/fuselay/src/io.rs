//! Dataset ingestion, GNSS time interpolation, and trajectory output.
//!
//! File formats (CSV, `#` comments allowed, header lines skipped):
//! - IMU (EuRoC-style): `timestamp_ns,wx,wy,wz,ax,ay,az`
//! - GNSS: `timestamp_ns,E,N,U,vE,vN,vU,sE,sN,sU`
//! - feature tracks: `feature_id,frame_id,u_norm,v_norm`
//! - camera frames: `frame_id,timestamp_ns`
//! - trajectories: TUM format `t tx ty tz qx qy qz qw`
//!
//! Timestamps are integer nanoseconds end to end; no floating-point
//! accumulation happens on the time axis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{canonicalize, Pose};
use crate::simulator::{
    FeatureTrack, GnssSample, ImuSample, TrackObservation, COURSE_SPEED_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{file}:{line}: parse error: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}:{line}: non-monotonic timestamp")]
    NonMonotonicTime { file: String, line: usize },
    #[error("interpolation time {t_ns} ns outside the stream span")]
    OutOfSpan { t_ns: i64 },
    #[error("gap of {gap:.3} s around interpolation time exceeds the {max_gap:.3} s limit")]
    GapTooLarge { gap: f64, max_gap: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>, IoError> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|source| IoError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn parse_fields(
    file: &str,
    line_no: usize,
    line: &str,
    expected: usize,
) -> Result<Option<Vec<f64>>, IoError> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = body.split(',').map(|f| f.trim()).collect();
    // Header line: first field not numeric.
    if fields[0].parse::<f64>().is_err() {
        return Ok(None);
    }
    if fields.len() != expected {
        return Err(IoError::Parse {
            file: file.to_string(),
            line: line_no,
            reason: format!("expected {expected} fields, got {}", fields.len()),
        });
    }
    let mut out = Vec::with_capacity(expected);
    for f in fields {
        let v: f64 = f.parse().map_err(|_| IoError::Parse {
            file: file.to_string(),
            line: line_no,
            reason: format!("`{f}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(IoError::Parse {
                file: file.to_string(),
                line: line_no,
                reason: format!("non-finite field `{f}`"),
            });
        }
        out.push(v);
    }
    Ok(Some(out))
}

/// Read EuRoC-format IMU CSV: `timestamp_ns,wx,wy,wz,ax,ay,az`.
pub fn read_euroc_imu(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let file = path.display().to_string();
    let mut out: Vec<ImuSample> = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| IoError::Io {
            path: file.clone(),
            source,
        })?;
        let Some(f) = parse_fields(&file, i + 1, &line, 7)? else {
            continue;
        };
        let t_ns = f[0] as i64;
        if let Some(last) = out.last() {
            if t_ns <= last.t_ns {
                return Err(IoError::NonMonotonicTime { file, line: i + 1 });
            }
        }
        out.push(ImuSample {
            t_ns,
            gyro: Vector3::new(f[1], f[2], f[3]),
            accel: Vector3::new(f[4], f[5], f[6]),
        });
    }
    Ok(out)
}

pub fn write_imu(samples: &[ImuSample], path: &Path) -> Result<(), IoError> {
    let mut text = String::from("# timestamp_ns,wx,wy,wz,ax,ay,az\n");
    for s in samples {
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            s.t_ns,
            fmt_sig(s.gyro.x),
            fmt_sig(s.gyro.y),
            fmt_sig(s.gyro.z),
            fmt_sig(s.accel.x),
            fmt_sig(s.accel.y),
            fmt_sig(s.accel.z)
        )
        .expect("string write");
    }
    write_file(path, &text)
}

/// Read GNSS CSV: `timestamp_ns,E,N,U,vE,vN,vU,sE,sN,sU`. Velocity sigma is
/// not part of the format; `default_vel_sigma` applies to every sample.
pub fn read_gnss(path: &Path, default_vel_sigma: Vector3<f64>) -> Result<Vec<GnssSample>, IoError> {
    let file = path.display().to_string();
    let mut out: Vec<GnssSample> = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| IoError::Io {
            path: file.clone(),
            source,
        })?;
        let Some(f) = parse_fields(&file, i + 1, &line, 10)? else {
            continue;
        };
        let t_ns = f[0] as i64;
        if let Some(last) = out.last() {
            if t_ns <= last.t_ns {
                return Err(IoError::NonMonotonicTime { file, line: i + 1 });
            }
        }
        let velocity = Vector3::new(f[4], f[5], f[6]);
        out.push(GnssSample {
            t_ns,
            position: Vector3::new(f[1], f[2], f[3]),
            velocity,
            course: velocity.y.atan2(velocity.x),
            pos_sigma: Vector3::new(f[7], f[8], f[9]),
            vel_sigma: default_vel_sigma,
            position_valid: true,
            velocity_valid: true,
            course_valid: velocity.xy().norm() >= COURSE_SPEED_THRESHOLD,
        });
    }
    Ok(out)
}

pub fn write_gnss(samples: &[GnssSample], path: &Path) -> Result<(), IoError> {
    let mut text = String::from("# timestamp_ns,E,N,U,vE,vN,vU,sE,sN,sU\n");
    for s in samples {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{}",
            s.t_ns,
            fmt_sig(s.position.x),
            fmt_sig(s.position.y),
            fmt_sig(s.position.z),
            fmt_sig(s.velocity.x),
            fmt_sig(s.velocity.y),
            fmt_sig(s.velocity.z),
            fmt_sig(s.pos_sigma.x),
            fmt_sig(s.pos_sigma.y),
            fmt_sig(s.pos_sigma.z)
        )
        .expect("string write");
    }
    write_file(path, &text)
}

/// Read feature tracks: `feature_id,frame_id,u_norm,v_norm`, grouped by id.
/// Duplicate (id, frame) observations are ambiguous and rejected;
/// single-observation tracks are retained but flagged unusable.
pub fn read_tracks(path: &Path) -> Result<Vec<FeatureTrack>, IoError> {
    let file = path.display().to_string();
    let mut by_id: BTreeMap<u64, FeatureTrack> = BTreeMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| IoError::Io {
            path: file.clone(),
            source,
        })?;
        let Some(f) = parse_fields(&file, i + 1, &line, 4)? else {
            continue;
        };
        let id = f[0] as u64;
        let frame_id = f[1] as usize;
        let track = by_id.entry(id).or_insert_with(|| FeatureTrack {
            id,
            landmark: None,
            observations: Vec::new(),
        });
        if track.observations.iter().any(|o| o.frame_id == frame_id) {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                reason: format!("duplicate observation of feature {id} in frame {frame_id}"),
            });
        }
        track.observations.push(TrackObservation {
            frame_id,
            uv: Vector2::new(f[2], f[3]),
        });
    }
    let mut out: Vec<FeatureTrack> = by_id.into_values().collect();
    for t in &mut out {
        t.observations.sort_by_key(|o| o.frame_id);
    }
    Ok(out)
}

pub fn write_tracks(tracks: &[FeatureTrack], path: &Path) -> Result<(), IoError> {
    let mut text = String::from("# feature_id,frame_id,u_norm,v_norm\n");
    for t in tracks {
        for o in &t.observations {
            writeln!(
                text,
                "{},{},{},{}",
                t.id,
                o.frame_id,
                fmt_sig(o.uv.x),
                fmt_sig(o.uv.y)
            )
            .expect("string write");
        }
    }
    write_file(path, &text)
}

/// Read camera frame timestamps: `frame_id,timestamp_ns`.
pub fn read_frames(path: &Path) -> Result<Vec<(usize, i64)>, IoError> {
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| IoError::Io {
            path: file.clone(),
            source,
        })?;
        let Some(f) = parse_fields(&file, i + 1, &line, 2)? else {
            continue;
        };
        out.push((f[0] as usize, f[1] as i64));
    }
    Ok(out)
}

pub fn write_frames(frames: &[(usize, i64)], path: &Path) -> Result<(), IoError> {
    let mut text = String::from("# frame_id,timestamp_ns\n");
    for (id, t_ns) in frames {
        writeln!(text, "{id},{t_ns}").expect("string write");
    }
    write_file(path, &text)
}

/// Linear interpolation of the GNSS stream at `t_ns`. Position and velocity
/// interpolate componentwise, course is recomputed from the interpolated
/// velocity, and sigma takes the larger of the bracketing values per channel.
pub fn interpolate_gnss(
    stream: &[GnssSample],
    t_ns: i64,
    max_gap: f64,
) -> Result<GnssSample, IoError> {
    if stream.is_empty() {
        return Err(IoError::OutOfSpan { t_ns });
    }
    if t_ns < stream[0].t_ns || t_ns > stream.last().unwrap().t_ns {
        return Err(IoError::OutOfSpan { t_ns });
    }
    let idx = stream.partition_point(|s| s.t_ns < t_ns);
    if idx < stream.len() && stream[idx].t_ns == t_ns {
        return Ok(stream[idx]);
    }
    let (a, b) = (&stream[idx - 1], &stream[idx]);
    let gap = (b.t_ns - a.t_ns) as f64 * 1e-9;
    if gap > max_gap {
        return Err(IoError::GapTooLarge { gap, max_gap });
    }
    let w = (t_ns - a.t_ns) as f64 / (b.t_ns - a.t_ns) as f64;
    let lerp3 = |x: &Vector3<f64>, y: &Vector3<f64>| x * (1.0 - w) + y * w;
    let max3 =
        |x: &Vector3<f64>, y: &Vector3<f64>| Vector3::new(x.x.max(y.x), x.y.max(y.y), x.z.max(y.z));
    let velocity = lerp3(&a.velocity, &b.velocity);
    Ok(GnssSample {
        t_ns,
        position: lerp3(&a.position, &b.position),
        velocity,
        course: velocity.y.atan2(velocity.x),
        pos_sigma: max3(&a.pos_sigma, &b.pos_sigma),
        vel_sigma: max3(&a.vel_sigma, &b.vel_sigma),
        position_valid: a.position_valid && b.position_valid,
        velocity_valid: a.velocity_valid && b.velocity_valid,
        course_valid: velocity.xy().norm() >= COURSE_SPEED_THRESHOLD,
    })
}

/// One trajectory record: timestamp and body pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t_ns: i64,
    pub pose: Pose,
}

impl TrajectoryRecord {
    pub fn t(&self) -> f64 {
        self.t_ns as f64 * 1e-9
    }
}

/// Format a value with 9 significant digits, trimming trailing zeros.
fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), IoError> {
    let mut f = std::fs::File::create(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(text.as_bytes()).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write a TUM-format trajectory: `t tx ty tz qx qy qz qw`, time with
/// nanosecond resolution, values with 9 significant digits.
pub fn write_trajectory(records: &[TrajectoryRecord], path: &Path) -> Result<(), IoError> {
    let mut text = String::new();
    for r in records {
        let q = canonicalize(r.pose.rotation);
        let secs = r.t_ns / 1_000_000_000;
        let nanos = r.t_ns % 1_000_000_000;
        writeln!(
            text,
            "{}.{:09} {} {} {} {} {} {} {}",
            secs,
            nanos,
            fmt_sig(r.pose.translation.x),
            fmt_sig(r.pose.translation.y),
            fmt_sig(r.pose.translation.z),
            fmt_sig(q.i),
            fmt_sig(q.j),
            fmt_sig(q.k),
            fmt_sig(q.w)
        )
        .expect("string write");
    }
    write_file(path, &text)
}

/// Read a TUM-format trajectory (whitespace-separated).
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| IoError::Io {
            path: file.clone(),
            source,
        })?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields[0].parse::<f64>().is_err() {
            continue;
        }
        if fields.len() != 8 {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                reason: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 8];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.parse().map_err(|_| IoError::Parse {
                file: file.clone(),
                line: i + 1,
                reason: format!("`{f}` is not a number"),
            })?;
            if !vals[k].is_finite() {
                return Err(IoError::Parse {
                    file: file.clone(),
                    line: i + 1,
                    reason: format!("non-finite field `{f}`"),
                });
            }
        }
        let t_ns = parse_time_ns(fields[0]);
        out.push(TrajectoryRecord {
            t_ns,
            pose: Pose::new(
                UnitQuaternion::from_quaternion(Quaternion::new(
                    vals[7], vals[4], vals[5], vals[6],
                )),
                Vector3::new(vals[1], vals[2], vals[3]),
            ),
        });
    }
    Ok(out)
}

/// Parse "sec.fraction" into integer nanoseconds without float rounding.
fn parse_time_ns(field: &str) -> i64 {
    match field.split_once('.') {
        Some((secs, frac)) => {
            let mut frac9: String = frac.chars().take(9).collect();
            while frac9.len() < 9 {
                frac9.push('0');
            }
            let sign = if secs.starts_with('-') { -1 } else { 1 };
            secs.parse::<i64>().unwrap_or(0) * 1_000_000_000
                + sign * frac9.parse::<i64>().unwrap_or(0)
        }
        None => field.parse::<i64>().unwrap_or(0) * 1_000_000_000,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("fuselay_io_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn imu_format_echo() {
        let p = tmp("imu_echo.csv");
        std::fs::write(&p, "1000000000,0,0,0,0,0,9.81\n").unwrap();
        let samples = read_euroc_imu(&p).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].t_ns, 1_000_000_000);
        assert_eq!(samples[0].t(), 1.0);
        assert_eq!(samples[0].gyro, Vector3::zeros());
        assert_eq!(samples[0].accel, Vector3::new(0.0, 0.0, 9.81));
    }

    #[test]
    fn empty_file_is_empty_sequence() {
        let p = tmp("imu_empty.csv");
        std::fs::write(&p, "").unwrap();
        assert!(read_euroc_imu(&p).unwrap().is_empty());
    }

    #[test]
    fn out_of_order_names_line() {
        let p = tmp("imu_ooo.csv");
        std::fs::write(&p, "2000,0,0,0,0,0,0\n1000,0,0,0,0,0,0\n").unwrap();
        match read_euroc_imu(&p) {
            Err(IoError::NonMonotonicTime { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_rejected_with_diagnostic() {
        let p = tmp("imu_nan.csv");
        std::fs::write(&p, "1000,0,NaN,0,0,0,0\n").unwrap();
        match read_euroc_imu(&p) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tracks_group_by_id_and_reject_duplicates() {
        let p = tmp("tracks.csv");
        std::fs::write(&p, "7,0,0.1,0.2\n7,1,0.15,0.22\n3,4,0,0\n").unwrap();
        let tracks = read_tracks(&p).unwrap();
        assert_eq!(tracks.len(), 2);
        let t7 = tracks.iter().find(|t| t.id == 7).unwrap();
        assert_eq!(t7.observations.len(), 2);
        assert!(t7.usable());
        let t3 = tracks.iter().find(|t| t.id == 3).unwrap();
        assert!(!t3.usable());

        let p2 = tmp("tracks_dup.csv");
        std::fs::write(&p2, "7,0,0.1,0.2\n7,0,0.15,0.22\n").unwrap();
        assert!(matches!(read_tracks(&p2), Err(IoError::Parse { .. })));
    }

    #[test]
    fn interpolation_cases() {
        let mk = |t_ns: i64, x: f64| GnssSample {
            t_ns,
            position: Vector3::new(x, 0.0, 0.0),
            velocity: Vector3::new(2.0, 0.0, 0.0),
            course: 0.0,
            pos_sigma: Vector3::new(0.2, 0.2, 0.2),
            vel_sigma: Vector3::new(0.05, 0.05, 0.05),
            position_valid: true,
            velocity_valid: true,
            course_valid: true,
        };
        let stream = vec![mk(0, 0.0), mk(1_000_000_000, 1.0)];
        let mid = interpolate_gnss(&stream, 500_000_000, 2.0).unwrap();
        assert_eq!(mid.position, Vector3::new(0.5, 0.0, 0.0));
        let exact = interpolate_gnss(&stream, 1_000_000_000, 2.0).unwrap();
        assert_eq!(exact.position, Vector3::new(1.0, 0.0, 0.0));
        assert!(matches!(
            interpolate_gnss(&stream, 2_000_000_000, 2.0),
            Err(IoError::OutOfSpan { .. })
        ));
        let gap_stream = vec![mk(0, 0.0), mk(5_000_000_000, 5.0)];
        assert!(matches!(
            interpolate_gnss(&gap_stream, 2_000_000_000, 2.0),
            Err(IoError::GapTooLarge { .. })
        ));
    }

    #[test]
    fn tum_identity_line() {
        let p = tmp("traj_identity.tum");
        write_trajectory(
            &[TrajectoryRecord {
                t_ns: 0,
                pose: Pose::identity(),
            }],
            &p,
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "0.000000000 0 0 0 0 0 0 1\n");
    }

    #[test]
    fn tum_empty_records_empty_file() {
        let p = tmp("traj_empty.tum");
        write_trajectory(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
    }

    #[test]
    fn trajectory_round_trip() {
        let p = tmp("traj_rt.tum");
        let records: Vec<TrajectoryRecord> = (0..50)
            .map(|k| TrajectoryRecord {
                t_ns: k as i64 * 50_000_000,
                pose: Pose::new(
                    so3_exp(&Vector3::new(
                        0.3 * (k as f64 * 0.1).sin(),
                        0.2 * (k as f64 * 0.13).cos(),
                        0.5 * (k as f64 * 0.07).sin(),
                    )),
                    Vector3::new(k as f64 * 0.1, -(k as f64) * 0.05, 1.0 + 0.01 * k as f64),
                ),
            })
            .collect();
        write_trajectory(&records, &p).unwrap();
        let back = read_trajectory(&p).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(back.iter()) {
            assert_eq!(a.t_ns, b.t_ns);
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-8);
            assert!(
                (a.pose.rotation.into_inner() - canonicalize(b.pose.rotation).into_inner()).norm()
                    < 1e-8
            );
        }
    }

    proptest! {
        #[test]
        fn imu_write_read_is_identity(
            times in proptest::collection::vec(1i64..1_000_000_000_000, 1..40),
            seed in 0u64..1000
        ) {
            let mut ts = times.clone();
            ts.sort_unstable();
            ts.dedup();
            let mut rng_state = seed;
            let mut next = || {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 20.0
            };
            let samples: Vec<ImuSample> = ts
                .iter()
                .map(|&t_ns| ImuSample {
                    t_ns,
                    gyro: Vector3::new(next(), next(), next()),
                    accel: Vector3::new(next(), next(), next()),
                })
                .collect();
            let p = tmp(&format!("imu_prop_{seed}.csv"));
            write_imu(&samples, &p).unwrap();
            let back = read_euroc_imu(&p).unwrap();
            prop_assert_eq!(samples.len(), back.len());
            for (a, b) in samples.iter().zip(back.iter()) {
                prop_assert_eq!(a.t_ns, b.t_ns);
                prop_assert!((a.gyro - b.gyro).norm() < 1e-7 * (1.0 + a.gyro.norm()));
                prop_assert!((a.accel - b.accel).norm() < 1e-7 * (1.0 + a.accel.norm()));
            }
        }

        #[test]
        fn tracks_write_read_is_identity(n_tracks in 1usize..20, seed in 0u64..1000) {
            let mut rng_state = seed.wrapping_add(17);
            let mut next = || {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            };
            let tracks: Vec<FeatureTrack> = (0..n_tracks)
                .map(|id| FeatureTrack {
                    id: id as u64,
                    landmark: None,
                    observations: (0..2 + id % 5)
                        .map(|f| TrackObservation {
                            frame_id: f,
                            uv: Vector2::new(next(), next()),
                        })
                        .collect(),
                })
                .collect();
            let p = tmp(&format!("tracks_prop_{seed}_{n_tracks}.csv"));
            write_tracks(&tracks, &p).unwrap();
            let back = read_tracks(&p).unwrap();
            prop_assert_eq!(tracks.len(), back.len());
            for (a, b) in tracks.iter().zip(back.iter()) {
                prop_assert_eq!(a.id, b.id);
                prop_assert_eq!(a.observations.len(), b.observations.len());
                for (oa, ob) in a.observations.iter().zip(b.observations.iter()) {
                    prop_assert_eq!(oa.frame_id, ob.frame_id);
                    prop_assert!((oa.uv - ob.uv).norm() < 1e-8);
                }
            }
        }
    }
}
