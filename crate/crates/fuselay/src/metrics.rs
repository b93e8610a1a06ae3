//! Trajectory evaluation: absolute trajectory error statistics, scale error,
//! and closed-form trajectory alignment for baselines whose frame is
//! arbitrary.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{canonicalize, yaw_quat};
use crate::io::TrajectoryRecord;

/// Association window for timestamp matching: 10 ms.
pub const MATCH_WINDOW_NS: i64 = 10_000_000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no timestamp-matched pairs between the trajectories")]
    NoOverlap,
    #[error("degenerate geometry: matched positions are collinear")]
    Degenerate,
}

/// Absolute trajectory error statistics over matched pose pairs, meters.
#[derive(Debug, Clone, Copy)]
pub struct AteStats {
    pub mean: f64,
    pub rmse: f64,
    pub max: f64,
    pub p90: f64,
    pub p95: f64,
    pub matched: usize,
}

impl AteStats {
    /// Key-value report using the conventional statistic names.
    pub fn render(&self) -> String {
        format!(
            "matched = {}\nMean = {:.6}\nRMSE = {:.6}\nMax = {:.6}\n90% = {:.6}\n95% = {:.6}\n",
            self.matched, self.mean, self.rmse, self.max, self.p90, self.p95
        )
    }
}

/// Nearest-neighbor match within [`MATCH_WINDOW_NS`]; both inputs are sorted
/// by timestamp internally.
fn matched_pairs<'a>(
    estimated: &'a [TrajectoryRecord],
    truth: &'a [TrajectoryRecord],
) -> Vec<(&'a TrajectoryRecord, &'a TrajectoryRecord)> {
    let mut est: Vec<&TrajectoryRecord> = estimated.iter().collect();
    est.sort_by_key(|r| r.t_ns);
    let mut gt: Vec<&TrajectoryRecord> = truth.iter().collect();
    gt.sort_by_key(|r| r.t_ns);

    let mut out = Vec::new();
    for e in est {
        let idx = gt.partition_point(|g| g.t_ns < e.t_ns);
        let mut best: Option<&TrajectoryRecord> = None;
        for cand in [idx.wrapping_sub(1), idx] {
            if let Some(g) = gt.get(cand) {
                let d = (g.t_ns - e.t_ns).abs();
                if d <= MATCH_WINDOW_NS && best.map(|b| d < (b.t_ns - e.t_ns).abs()).unwrap_or(true)
                {
                    best = Some(g);
                }
            }
        }
        if let Some(g) = best {
            out.push((e, g));
        }
    }
    out
}

/// Absolute trajectory error without alignment: world-frame estimators are
/// directly comparable to ground truth.
pub fn ate(
    estimated: &[TrajectoryRecord],
    truth: &[TrajectoryRecord],
) -> Result<AteStats, MetricsError> {
    let pairs = matched_pairs(estimated, truth);
    if pairs.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    let mut errors: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| (e.pose.translation - g.pose.translation).norm())
        .collect();
    errors.sort_by(|a, b| a.partial_cmp(b).expect("finite error"));
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let pct = |q: f64| {
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        errors[rank - 1]
    };
    Ok(AteStats {
        mean,
        rmse,
        max: errors[n - 1],
        p90: pct(0.90),
        p95: pct(0.95),
        matched: n,
    })
}

/// Scale error in percent: `100·|s_est − s_true|/s_true`.
pub fn scale_error(estimated: f64, truth: f64) -> f64 {
    100.0 * (estimated - truth).abs() / truth
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignDof {
    /// Translation and yaw only; pitch/roll untouched.
    Yaw4Dof,
    Se3,
    Sim3,
}

/// Similarity transform mapping the estimate into the truth frame:
/// `p ↦ scale · rotation · p + translation`.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, records: &[TrajectoryRecord]) -> Vec<TrajectoryRecord> {
        records
            .iter()
            .map(|r| TrajectoryRecord {
                t_ns: r.t_ns,
                pose: crate::geometry::Pose::new(
                    canonicalize(self.rotation * r.pose.rotation),
                    self.scale * (self.rotation * r.pose.translation) + self.translation,
                ),
            })
            .collect()
    }
}

/// Closed-form least-squares alignment of the estimate to the truth over the
/// matched positions (Umeyama for SE3/Sim3, horizontal Procrustes for the
/// yaw-only 4-DOF class).
pub fn align_similarity(
    estimated: &[TrajectoryRecord],
    truth: &[TrajectoryRecord],
    dof: AlignDof,
) -> Result<SimilarityTransform, MetricsError> {
    let pairs = matched_pairs(estimated, truth);
    if pairs.len() < 3 {
        return Err(MetricsError::NoOverlap);
    }
    let n = pairs.len() as f64;
    let mean_e: Vector3<f64> = pairs
        .iter()
        .map(|(e, _)| e.pose.translation)
        .sum::<Vector3<f64>>()
        / n;
    let mean_g: Vector3<f64> = pairs
        .iter()
        .map(|(_, g)| g.pose.translation)
        .sum::<Vector3<f64>>()
        / n;

    match dof {
        AlignDof::Yaw4Dof => {
            let mut dot = 0.0;
            let mut cross = 0.0;
            for (e, g) in &pairs {
                let x = e.pose.translation - mean_e;
                let y = g.pose.translation - mean_g;
                dot += x.x * y.x + x.y * y.y;
                cross += x.x * y.y - x.y * y.x;
            }
            if dot.abs() < 1e-12 && cross.abs() < 1e-12 {
                return Err(MetricsError::Degenerate);
            }
            let yaw = cross.atan2(dot);
            let rotation = yaw_quat(yaw);
            Ok(SimilarityTransform {
                scale: 1.0,
                rotation,
                translation: mean_g - rotation * mean_e,
            })
        }
        AlignDof::Se3 | AlignDof::Sim3 => {
            let mut sigma = Matrix3::zeros();
            let mut var_e = 0.0;
            for (e, g) in &pairs {
                let x = e.pose.translation - mean_e;
                let y = g.pose.translation - mean_g;
                sigma += y * x.transpose();
                var_e += x.norm_squared();
            }
            sigma /= n;
            var_e /= n;
            let svd = sigma.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            // Collinear positions leave the rotation about the line free.
            if svd.singular_values[1] < 1e-9 * svd.singular_values[0].max(1e-300) {
                return Err(MetricsError::Degenerate);
            }
            let mut s = Matrix3::identity();
            if (u * vt).determinant() < 0.0 {
                s[(2, 2)] = -1.0;
            }
            let r = u * s * vt;
            let rotation = canonicalize(UnitQuaternion::from_rotation_matrix(
                &nalgebra::Rotation3::from_matrix_unchecked(r),
            ));
            let scale = match dof {
                AlignDof::Sim3 => {
                    let d = Matrix3::from_diagonal(&svd.singular_values);
                    (d * s).trace() / var_e
                }
                _ => 1.0,
            };
            Ok(SimilarityTransform {
                scale,
                rotation,
                translation: mean_g - scale * (rotation * mean_e),
            })
        }
    }
}
