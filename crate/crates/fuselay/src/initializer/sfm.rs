//! Minimal structure-from-motion pieces for initialization: seven-point
//! essential matrix inside RANSAC, DLT triangulation, and PnP.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{canonicalize, skew, Pose};
use crate::solver::{self, Factor, Manifold, Problem, RobustLoss, SolveOptions};

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("only {found} inliers, need at least {needed}")]
    InsufficientInliers { found: usize, needed: usize },
    #[error("parallax {angle_rad:.6} rad below threshold {threshold_rad:.6}")]
    LowParallax { angle_rad: f64, threshold_rad: f64 },
    #[error("triangulated point has non-positive depth in its anchor frame")]
    NegativeDepth,
    #[error("need at least {needed} points, got {found}")]
    InsufficientPoints { found: usize, needed: usize },
}

#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Sampson error threshold in normalized units.
    pub threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Median triangulation parallax below this marks pure rotation.
    pub min_parallax_rad: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            // Roughly 3 sigma of one-pixel tracking noise at a 460-pixel
            // focal length; tighter gates fit lucky noise subsets.
            threshold: 1.0e-2,
            min_inliers: 12,
            seed: 0,
            min_parallax_rad: 2e-3,
        }
    }
}

/// Relative pose of the second frame expressed in the first:
/// `x_1 = rotation * x_2 + translation`, with unit-norm translation.
#[derive(Debug, Clone)]
pub struct RelativePose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub inliers: Vec<usize>,
}

fn hom(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

/// Essential matrix candidates from exactly seven correspondences: the
/// two-dimensional nullspace plus the rank-2 cubic constraint gives up to
/// three real solutions, each projected onto the essential manifold.
fn essential_7pt(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Vec<Matrix3<f64>> {
    debug_assert_eq!(pairs.len(), 7);
    let mut a = DMatrix::<f64>::zeros(7, 9);
    for (row, (p1, p2)) in pairs.iter().enumerate() {
        let (x1, x2) = (hom(p1), hom(p2));
        // x2ᵀ E x1 = 0, E stacked row-major.
        for r in 0..3 {
            for c in 0..3 {
                a[(row, 3 * r + c)] = x2[r] * x1[c];
            }
        }
    }
    // Two-dimensional nullspace of the 7×9 system from the eigenvectors of
    // AᵀA with the two smallest eigenvalues.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .expect("finite eigenvalue")
    });
    let unstack = |col: usize| {
        let v = eig.eigenvectors.column(col);
        Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
    };
    let f1 = unstack(order[0]);
    let f2 = unstack(order[1]);

    // det(λ F1 + (1−λ) F2) is cubic in λ; fit it by evaluation.
    let det_at = |l: f64| (f1 * l + f2 * (1.0 - l)).determinant();
    let (d0, d1, dm1, d2) = (det_at(0.0), det_at(1.0), det_at(-1.0), det_at(2.0));
    // Vandermonde solve for c0 + c1 λ + c2 λ² + c3 λ³.
    let c0 = d0;
    let c2 = (d1 + dm1) / 2.0 - d0;
    let c3 = (d2 - 2.0 * d1 + 2.0 * dm1 - d0 - 6.0 * c2) / 6.0;
    let c1 = d1 - d0 - c2 - c3;

    let mut out = Vec::new();
    for l in real_roots(&[c0, c1, c2, c3]) {
        let f = f1 * l + f2 * (1.0 - l);
        if let Some(e) = project_to_essential(&f) {
            out.push(e);
        }
    }
    out
}

/// Real roots of a polynomial with ascending coefficients, via the companion
/// matrix of the highest non-negligible degree.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() < 1e-12 * scale {
        deg -= 1;
    }
    match deg {
        0 => Vec::new(),
        1 => vec![-coeffs[0] / coeffs[1]],
        _ => {
            let lead = coeffs[deg];
            let mut companion = DMatrix::<f64>::zeros(deg, deg);
            for i in 1..deg {
                companion[(i, i - 1)] = 1.0;
            }
            for i in 0..deg {
                companion[(i, deg - 1)] = -coeffs[i] / lead;
            }
            companion
                .complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() < 1e-8 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    }
}

fn project_to_essential(f: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = f.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    if s < 1e-12 {
        return None;
    }
    let d = Matrix3::from_diagonal(&Vector3::new(s, s, 0.0));
    Some(u * d * v_t)
}

fn sampson_error(e: &Matrix3<f64>, p1: &Vector2<f64>, p2: &Vector2<f64>) -> f64 {
    let (x1, x2) = (hom(p1), hom(p2));
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    num * num / den.max(1e-18)
}

/// Mid-point triangulation in the first camera frame given the relative pose
/// `x_1 = R x_2 + t`. Returns the point in frame 1, or None when rays are
/// near parallel.
fn triangulate_two_view(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    p1: &Vector2<f64>,
    p2: &Vector2<f64>,
) -> Option<Vector3<f64>> {
    let d1 = hom(p1);
    let d2 = r * hom(p2);
    // Solve [d1, -d2] [s1, s2]ᵀ ≈ t in least squares.
    let a = nalgebra::Matrix3x2::from_columns(&[d1, -d2]);
    let ata = a.transpose() * a;
    let atb = a.transpose() * t;
    let sol = ata.try_inverse()? * atb;
    let q1 = d1 * sol[0];
    let q2 = r * hom(p2) * sol[1] + t;
    Some(0.5 * (q1 + q2))
}

fn decompose_essential(
    e: &Matrix3<f64>,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
) -> Option<(Matrix3<f64>, Vector3<f64>, usize)> {
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut u = u;
    let mut v_t = v_t;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).clone_owned();

    // Candidates map frame-1 points into frame 2: x2 = R21 x1 + t21.
    // Count positive depths in both frames for cheirality.
    let mut best: Option<(Matrix3<f64>, Vector3<f64>, usize)> = None;
    for r21 in [r1, r2] {
        for t21 in [t, -t] {
            // Relative pose of frame 2 in frame 1.
            let r12 = r21.transpose();
            let t12 = -(r21.transpose() * t21);
            let mut good = 0;
            for (p1, p2) in pairs {
                if let Some(x1) = triangulate_two_view(&r12, &t12, p1, p2) {
                    let x2 = r21 * x1 + t21;
                    if x1.z > 0.0 && x2.z > 0.0 {
                        good += 1;
                    }
                }
            }
            if best.as_ref().map(|(_, _, b)| good > *b).unwrap_or(true) {
                best = Some((r12, t12, good));
            }
        }
    }
    best
}

/// Seven-point essential-matrix estimation inside RANSAC with cheirality
/// disambiguation. Correspondences are (frame-1, frame-2) normalized points.
pub fn relative_pose_7pt(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    cfg: &RansacConfig,
) -> Result<RelativePose, SfmError> {
    if pairs.len() < 7 {
        return Err(SfmError::InsufficientPoints {
            found: pairs.len(),
            needed: 7,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let thr2 = cfg.threshold * cfg.threshold;
    let mut best_e: Option<Matrix3<f64>> = None;
    let mut best_inliers: Vec<usize> = Vec::new();

    for _ in 0..cfg.iterations {
        // Seven distinct indices.
        let mut idx = Vec::with_capacity(7);
        while idx.len() < 7 {
            let k = rng.random_range(0..pairs.len());
            if !idx.contains(&k) {
                idx.push(k);
            }
        }
        let sample: Vec<_> = idx.iter().map(|&k| pairs[k]).collect();
        for e in essential_7pt(&sample) {
            let inliers: Vec<usize> = (0..pairs.len())
                .filter(|&k| sampson_error(&e, &pairs[k].0, &pairs[k].1) < thr2)
                .collect();
            if inliers.len() > best_inliers.len() {
                best_inliers = inliers;
                best_e = Some(e);
            }
        }
        if best_inliers.len() > pairs.len() * 9 / 10 {
            break;
        }
    }

    let needed = cfg.min_inliers.max(8);
    if best_inliers.len() < needed {
        return Err(SfmError::InsufficientInliers {
            found: best_inliers.len(),
            needed,
        });
    }

    // Linear refit on all inliers (8-point style on the essential manifold).
    let mut a = DMatrix::<f64>::zeros(best_inliers.len(), 9);
    for (row, &k) in best_inliers.iter().enumerate() {
        let (x1, x2) = (hom(&pairs[k].0), hom(&pairs[k].1));
        for r in 0..3 {
            for c in 0..3 {
                a[(row, 3 * r + c)] = x2[r] * x1[c];
            }
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let min_idx = (0..9)
        .min_by(|&i, &j| {
            eig.eigenvalues[i]
                .partial_cmp(&eig.eigenvalues[j])
                .expect("finite")
        })
        .expect("nonempty");
    let v = eig.eigenvectors.column(min_idx);
    let f = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let e = project_to_essential(&f)
        .or(best_e)
        .ok_or_else(|| SfmError::DegenerateGeometry("rank-deficient essential".into()))?;

    let inlier_pairs: Vec<_> = best_inliers.iter().map(|&k| pairs[k]).collect();
    let (r12, t12, good) = decompose_essential(&e, &inlier_pairs)
        .ok_or_else(|| SfmError::DegenerateGeometry("essential decomposition failed".into()))?;
    if good < inlier_pairs.len() / 2 {
        return Err(SfmError::DegenerateGeometry(
            "cheirality check failed for every decomposition".into(),
        ));
    }

    // Pure rotation / no-parallax guard: median triangulation angle.
    let mut angles: Vec<f64> = inlier_pairs
        .iter()
        .map(|(p1, p2)| {
            let d1 = hom(p1).normalize();
            let d2 = (r12 * hom(p2)).normalize();
            d1.cross(&d2).norm().atan2(d1.dot(&d2))
        })
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = angles[angles.len() / 2];
    if median < cfg.min_parallax_rad {
        return Err(SfmError::DegenerateGeometry(format!(
            "median parallax {median:.2e} rad: pure rotation or stationary pair"
        )));
    }

    Ok(RelativePose {
        rotation: canonicalize(UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(r12),
        )),
        translation: t12.normalize(),
        inliers: best_inliers,
    })
}

/// Multi-view DLT triangulation. `poses[k]` is the camera-k pose in a common
/// frame; observations index into `poses`. Returns the inverse depth in the
/// first observing frame.
pub fn triangulate(
    poses: &[Pose],
    observations: &[(usize, Vector2<f64>)],
    min_parallax_rad: f64,
) -> Result<f64, SfmError> {
    if observations.len() < 2 {
        return Err(SfmError::InsufficientPoints {
            found: observations.len(),
            needed: 2,
        });
    }
    let anchor = poses[observations[0].0];

    // Max pairwise ray angle in the common frame.
    let dirs: Vec<Vector3<f64>> = observations
        .iter()
        .map(|(k, uv)| (poses[*k].rotation * hom(uv)).normalize())
        .collect();
    let mut max_angle: f64 = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let a = dirs[i].cross(&dirs[j]).norm().atan2(dirs[i].dot(&dirs[j]));
            max_angle = max_angle.max(a);
        }
    }
    if max_angle < min_parallax_rad {
        return Err(SfmError::LowParallax {
            angle_rad: max_angle,
            threshold_rad: min_parallax_rad,
        });
    }

    // DLT in the anchor frame.
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (row, (k, uv)) in observations.iter().enumerate() {
        let t_ca = poses[*k].inverse().compose(&anchor); // anchor -> camera k
        let r = t_ca.rotation.to_rotation_matrix().into_inner();
        let t = t_ca.translation;
        for c in 0..3 {
            a[(2 * row, c)] = uv.x * r[(2, c)] - r[(0, c)];
            a[(2 * row + 1, c)] = uv.y * r[(2, c)] - r[(1, c)];
        }
        a[(2 * row, 3)] = uv.x * t.z - t.x;
        a[(2 * row + 1, 3)] = uv.y * t.z - t.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| SfmError::DegenerateGeometry("triangulation svd failed".into()))?;
    let h = v_t.row(3);
    if h[3].abs() < 1e-15 {
        return Err(SfmError::NegativeDepth);
    }
    let depth = h[2] / h[3];
    if depth <= 1e-6 {
        return Err(SfmError::NegativeDepth);
    }
    Ok(1.0 / depth)
}

/// Reprojection factor for a single free camera pose with fixed world points.
struct PnpFactor {
    point: Vector3<f64>,
    obs: Vector2<f64>,
}

impl Factor for PnpFactor {
    fn dim(&self) -> usize {
        2
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let (p, q) = solver::pose_from_ambient(&values[0].as_view());
        let r_t = q.to_rotation_matrix().into_inner().transpose();
        let pc = r_t * (self.point - p);
        let (x, y, z) = (pc.x, pc.y, pc.z);
        let r = DVector::from_column_slice(&[x / z - self.obs.x, y / z - self.obs.y]);
        if let Some(jacs) = jacobians {
            let proj =
                nalgebra::Matrix2x3::new(1.0 / z, 0.0, -x / (z * z), 0.0, 1.0 / z, -y / (z * z));
            let mut j = DMatrix::zeros(2, 6);
            j.view_mut((0, 0), (2, 3)).copy_from(&(proj * (-r_t)));
            j.view_mut((0, 3), (2, 3)).copy_from(&(proj * skew(&pc)));
            jacs[0].copy_from(&j);
        }
        r
    }
}

fn refine_pose(
    initial: &Pose,
    points: &[Vector3<f64>],
    observations: &[Vector2<f64>],
) -> Result<Pose, SfmError> {
    let mut problem = Problem::new();
    let block = problem.add_block(
        Manifold::Pose3,
        solver::pose_to_ambient(&initial.translation, &initial.rotation),
    );
    for (pt, obs) in points.iter().zip(observations.iter()) {
        problem.add_residual(
            &[block],
            Box::new(PnpFactor {
                point: *pt,
                obs: *obs,
            }),
            None,
            RobustLoss::None,
            "pnp_reprojection",
        );
    }
    solver::solve(
        &mut problem,
        &SolveOptions {
            max_iterations: 30,
            ..Default::default()
        },
    )
    .map_err(|e| SfmError::DegenerateGeometry(format!("pnp refinement failed: {e}")))?;
    let (p, q) = solver::pose_from_ambient(&problem.value(block).as_view());
    Ok(Pose::new(q, p))
}

fn reprojection_rms(pose: &Pose, points: &[Vector3<f64>], obs: &[Vector2<f64>]) -> f64 {
    let t_cw = pose.inverse();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pt, uv) in points.iter().zip(obs.iter()) {
        let pc = t_cw.transform_point(pt);
        if pc.z <= 1e-6 {
            return f64::INFINITY;
        }
        sum += (Vector2::new(pc.x / pc.z, pc.y / pc.z) - uv).norm_squared();
        n += 1;
    }
    (sum / n as f64).sqrt()
}

/// Kabsch: rotation/translation with `R * src + t ≈ dst`.
fn rigid_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = src.len() as f64;
    let ms: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let md: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst.iter()) {
        h += (d - md) * (s - ms).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    Some((r, md - r * ms))
}

/// Grunert-style P3P: distances from a quartic in the ratio v = s3/s1, then
/// a rigid fit of the three back-projected points.
fn p3p_candidates(points: &[Vector3<f64>; 3], obs: &[Vector2<f64>; 3]) -> Vec<Pose> {
    let f: Vec<Vector3<f64>> = obs.iter().map(|o| hom(o).normalize()).collect();
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if b2 < 1e-18 {
        return Vec::new();
    }
    let cos_alpha = f[1].dot(&f[2]);
    let cos_beta = f[0].dot(&f[2]);
    let cos_gamma = f[0].dot(&f[1]);
    let aa = a2 / b2;
    let cc = c2 / b2;

    // Ascending-coefficient polynomial helpers.
    fn pmul(p: &[f64], q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len() + q.len() - 1];
        for (i, a) in p.iter().enumerate() {
            for (j, b) in q.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        out
    }
    fn padd(p: &[f64], q: &[f64], sign: f64) -> Vec<f64> {
        let n = p.len().max(q.len());
        let mut out = vec![0.0; n];
        for (i, v) in p.iter().enumerate() {
            out[i] += v;
        }
        for (i, v) in q.iter().enumerate() {
            out[i] += sign * v;
        }
        out
    }

    // D(v) = 1 − 2 cosβ v + v²
    let d = [1.0, -2.0 * cos_beta, 1.0];
    // num(v) = (A−C)·D(v) + 1 − v²
    let num = padd(
        &d.iter().map(|x| x * (aa - cc)).collect::<Vec<_>>(),
        &[1.0, 0.0, -1.0],
        1.0,
    );
    // den(v) = 2(cosγ − v cosα)
    let den = vec![2.0 * cos_gamma, -2.0 * cos_alpha];
    // num² − 2 cosγ · num·den + (1 − C·D)·den² = 0
    let one_minus_cd = padd(&[1.0], &d.iter().map(|x| x * cc).collect::<Vec<_>>(), -1.0);
    let quartic = padd(
        &padd(
            &pmul(&num, &num),
            &pmul(&num, &den)
                .iter()
                .map(|x| x * 2.0 * cos_gamma)
                .collect::<Vec<_>>(),
            -1.0,
        ),
        &pmul(&one_minus_cd, &pmul(&den, &den)),
        1.0,
    );

    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        let d_v = 1.0 - 2.0 * cos_beta * v + v * v;
        if d_v <= 0.0 {
            continue;
        }
        let den_v = 2.0 * (cos_gamma - v * cos_alpha);
        if den_v.abs() < 1e-12 {
            continue;
        }
        let u = ((aa - cc) * d_v + 1.0 - v * v) / den_v;
        if u <= 0.0 {
            continue;
        }
        let s1 = (b2 / d_v).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        let cam_pts = [f[0] * s1, f[1] * s2, f[2] * s3];
        if let Some((r, t)) = rigid_fit(points.as_slice(), &cam_pts) {
            // (r, t) maps world to camera; candidate pose is the inverse.
            let q = canonicalize(UnitQuaternion::from_rotation_matrix(
                &nalgebra::Rotation3::from_matrix_unchecked(r),
            ));
            out.push(Pose::new(q, t).inverse());
        }
    }
    out
}

fn coplanarity_ratio(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let mean: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    vals[0] / vals[2].max(1e-300)
}

/// Pose of the camera in the points' frame minimizing reprojection error.
/// DLT bootstraps well-conditioned sets; coplanar or minimal sets fall back
/// to P3P over sampled triples. A pose-only LM refinement finishes either
/// path.
pub fn pnp(points: &[Vector3<f64>], observations: &[Vector2<f64>]) -> Result<Pose, SfmError> {
    if points.len() < 4 || points.len() != observations.len() {
        return Err(SfmError::InsufficientPoints {
            found: points.len(),
            needed: 4,
        });
    }
    let coplanar = coplanarity_ratio(points) < 1e-6;

    let initial = if !coplanar && points.len() >= 6 {
        dlt_pose(points, observations)
    } else {
        None
    };
    let initial = match initial {
        Some(p) => p,
        None => {
            // P3P route (planar-safe): try a few deterministic triples and
            // keep the candidate that reprojects every point best.
            let n = points.len();
            let triples = [
                [0, n / 2, n - 1],
                [0, 1, 2],
                [n / 3, 2 * n / 3, n - 1],
                [1, n / 2, n - 2],
            ];
            let mut best: Option<(f64, Pose)> = None;
            for tri in triples {
                if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                    continue;
                }
                let pts = [points[tri[0]], points[tri[1]], points[tri[2]]];
                let obs = [
                    observations[tri[0]],
                    observations[tri[1]],
                    observations[tri[2]],
                ];
                for cand in p3p_candidates(&pts, &obs) {
                    let rms = reprojection_rms(&cand, points, observations);
                    if best.as_ref().map(|(b, _)| rms < *b).unwrap_or(true) {
                        best = Some((rms, cand));
                    }
                }
            }
            best.ok_or_else(|| SfmError::DegenerateGeometry("no p3p candidate survived".into()))?
                .1
        }
    };

    refine_pose(&initial, points, observations)
}

/// Direct linear transform for the projection matrix, orthogonalized.
fn dlt_pose(points: &[Vector3<f64>], observations: &[Vector2<f64>]) -> Option<Pose> {
    let n = points.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (k, (pt, uv)) in points.iter().zip(observations.iter()).enumerate() {
        let x = [pt.x, pt.y, pt.z, 1.0];
        for c in 0..4 {
            a[(2 * k, c)] = x[c];
            a[(2 * k, 8 + c)] = -uv.x * x[c];
            a[(2 * k + 1, 4 + c)] = x[c];
            a[(2 * k + 1, 8 + c)] = -uv.y * x[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let p = v_t.row(11);
    let mut proj = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            proj[(r, c)] = p[4 * r + c];
        }
    }
    let m = proj.fixed_view::<3, 3>(0, 0).clone_owned();
    let mut sign = 1.0;
    if m.determinant() < 0.0 {
        sign = -1.0;
    }
    let m = m * sign;
    let t_col = proj.fixed_view::<3, 1>(0, 3).clone_owned() * sign;
    let svd_m = m.svd(true, true);
    let (u, v_t) = (svd_m.u?, svd_m.v_t?);
    let scale = svd_m.singular_values.mean();
    if scale < 1e-15 {
        return None;
    }
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t; // world -> camera
    let t = t_col / scale;
    let q = canonicalize(UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(r),
    ));
    Some(Pose::new(q, t).inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn project(pose_wc: &Pose, point: &Vector3<f64>) -> Option<Vector2<f64>> {
        let pc = pose_wc.inverse().transform_point(point);
        (pc.z > 0.1).then(|| Vector2::new(pc.x / pc.z, pc.y / pc.z))
    }

    fn random_scene(rng: &mut StdRng, n: usize, pose2: &Pose) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let mut out = Vec::new();
        while out.len() < n {
            let pt = Vector3::new(
                (rng.random::<f64>() - 0.5) * 8.0,
                (rng.random::<f64>() - 0.5) * 6.0,
                4.0 + rng.random::<f64>() * 8.0,
            );
            if let (Some(a), Some(b)) = (project(&Pose::identity(), &pt), project(pose2, &pt)) {
                out.push((a, b));
            }
        }
        out
    }

    #[test]
    fn seven_point_recovers_zero_noise_motion() {
        let mut rng = StdRng::seed_from_u64(1);
        for trial in 0..10 {
            let true_pose = Pose::new(
                so3_exp(&Vector3::new(0.05, -0.1, 0.08)),
                Vector3::new(0.6, 0.15, 0.2),
            );
            let pairs = random_scene(&mut rng, 60, &true_pose);
            let cfg = RansacConfig {
                seed: trial,
                ..Default::default()
            };
            let rel = relative_pose_7pt(&pairs, &cfg).unwrap();
            let angle_err =
                crate::geometry::so3_log(&(rel.rotation.inverse() * true_pose.rotation)).norm();
            let dir_err = rel
                .translation
                .cross(&true_pose.translation.normalize())
                .norm()
                .atan2(rel.translation.dot(&true_pose.translation.normalize()));
            assert!(
                angle_err < 1e-6,
                "trial {trial}: rotation error {angle_err}"
            );
            assert!(dir_err < 1e-6, "trial {trial}: direction error {dir_err}");
            assert!(rel.inliers.len() >= 55);
            assert!((rel.translation.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_motion_is_degenerate() {
        let mut rng = StdRng::seed_from_u64(2);
        let pairs = random_scene(&mut rng, 40, &Pose::identity());
        match relative_pose_7pt(&pairs, &RansacConfig::default()) {
            Err(SfmError::DegenerateGeometry(_)) => {}
            other => panic!("expected degenerate geometry, got {other:?}"),
        }
    }

    #[test]
    fn outliers_are_excluded() {
        let mut rng = StdRng::seed_from_u64(3);
        let true_pose = Pose::new(
            so3_exp(&Vector3::new(0.0, -0.06, 0.04)),
            Vector3::new(0.8, 0.0, 0.1),
        );
        let mut pairs = random_scene(&mut rng, 70, &true_pose);
        // ~1px-equivalent noise at f≈460.
        let noise = 1.0 / 460.0;
        for (a, b) in pairs.iter_mut() {
            a.x += noise * (rng.random::<f64>() - 0.5);
            a.y += noise * (rng.random::<f64>() - 0.5);
            b.x += noise * (rng.random::<f64>() - 0.5);
            b.y += noise * (rng.random::<f64>() - 0.5);
        }
        // 30% labeled outliers.
        let n_out = 30;
        let first_outlier = pairs.len();
        for _ in 0..n_out {
            pairs.push((
                Vector2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
                Vector2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
            ));
        }
        let rel = relative_pose_7pt(
            &pairs,
            &RansacConfig {
                seed: 9,
                iterations: 500,
                ..Default::default()
            },
        )
        .unwrap();
        let outliers_kept = rel.inliers.iter().filter(|&&k| k >= first_outlier).count();
        assert!(
            outliers_kept * 100 <= n_out * 5,
            "kept {outliers_kept} of {n_out} injected outliers"
        );
    }

    #[test]
    fn triangulate_analytic_case() {
        // Two cameras 1 m apart along x, point 5 m ahead of the first.
        let poses = [
            Pose::identity(),
            Pose::new(UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 0.0)),
        ];
        let point = Vector3::new(0.0, 0.0, 5.0);
        let obs: Vec<(usize, Vector2<f64>)> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| (k, project(p, &point).unwrap()))
            .collect();
        let lambda = triangulate(&poses, &obs, 5e-3).unwrap();
        assert!((lambda - 0.2).abs() < 1e-9, "lambda {lambda}");
    }

    #[test]
    fn low_parallax_detected() {
        // Baseline so small the rays subtend ~0.1 degree at 5 m.
        let poses = [
            Pose::identity(),
            Pose::new(UnitQuaternion::identity(), Vector3::new(0.008, 0.0, 0.0)),
        ];
        let point = Vector3::new(0.0, 0.0, 5.0);
        let obs: Vec<(usize, Vector2<f64>)> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| (k, project(p, &point).unwrap()))
            .collect();
        match triangulate(&poses, &obs, 5e-3) {
            Err(SfmError::LowParallax { .. }) => {}
            other => panic!("expected low parallax, got {other:?}"),
        }
    }

    #[test]
    fn triangulation_round_trip_random_scenes() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..50 {
            let pose2 = Pose::new(
                so3_exp(&Vector3::new(
                    0.1 * (rng.random::<f64>() - 0.5),
                    0.1 * (rng.random::<f64>() - 0.5),
                    0.1 * (rng.random::<f64>() - 0.5),
                )),
                Vector3::new(
                    1.0 + rng.random::<f64>(),
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ),
            );
            let point = Vector3::new(
                (rng.random::<f64>() - 0.5) * 4.0,
                (rng.random::<f64>() - 0.5) * 4.0,
                6.0 + rng.random::<f64>() * 4.0,
            );
            let poses = [Pose::identity(), pose2];
            let obs: Vec<(usize, Vector2<f64>)> =
                match (project(&poses[0], &point), project(&poses[1], &point)) {
                    (Some(a), Some(b)) => vec![(0, a), (1, b)],
                    _ => continue,
                };
            let lambda = triangulate(&poses, &obs, 1e-4).unwrap();
            let recovered = hom(&obs[0].1) / lambda;
            // Reprojection into the second camera.
            let pc = poses[1].inverse().transform_point(&recovered);
            let reproj = Vector2::new(pc.x / pc.z, pc.y / pc.z);
            assert!((reproj - obs[1].1).norm() < 1e-9);
            assert!((recovered - point).norm() < 1e-8);
        }
    }

    fn pnp_scene(
        rng: &mut StdRng,
        n: usize,
        pose: &Pose,
        planar: bool,
        noise: f64,
    ) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let mut pts = Vec::new();
        let mut obs = Vec::new();
        while pts.len() < n {
            let p = Vector3::new(
                (rng.random::<f64>() - 0.5) * 10.0,
                (rng.random::<f64>() - 0.5) * 8.0,
                if planar {
                    6.0
                } else {
                    4.0 + rng.random::<f64>() * 8.0
                },
            );
            if let Some(uv) = project(pose, &p) {
                pts.push(p);
                obs.push(
                    uv + Vector2::new(
                        noise * (rng.random::<f64>() - 0.5),
                        noise * (rng.random::<f64>() - 0.5),
                    ),
                );
            }
        }
        (pts, obs)
    }

    #[test]
    fn pnp_zero_noise_twenty_points() {
        let mut rng = StdRng::seed_from_u64(5);
        let pose = Pose::new(
            so3_exp(&Vector3::new(0.2, -0.1, 0.3)),
            Vector3::new(1.0, -0.5, 0.8),
        );
        let (pts, obs) = pnp_scene(&mut rng, 20, &pose, false, 0.0);
        let est = pnp(&pts, &obs).unwrap();
        assert!(
            (est.translation - pose.translation).norm() < 1e-8,
            "translation error {}",
            (est.translation - pose.translation).norm()
        );
        assert!(crate::geometry::so3_log(&(est.rotation.inverse() * pose.rotation)).norm() < 1e-8);
    }

    #[test]
    fn pnp_own_observations_give_identity() {
        let mut rng = StdRng::seed_from_u64(6);
        let (pts, obs) = pnp_scene(&mut rng, 12, &Pose::identity(), false, 0.0);
        let est = pnp(&pts, &obs).unwrap();
        assert!(est.translation.norm() < 1e-9);
        assert!(crate::geometry::so3_log(&est.rotation).norm() < 1e-9);
    }

    #[test]
    fn pnp_planar_scene_falls_back_safely() {
        let mut rng = StdRng::seed_from_u64(7);
        let pose = Pose::new(
            so3_exp(&Vector3::new(0.1, 0.05, -0.2)),
            Vector3::new(0.4, 0.6, -0.3),
        );
        let (pts, obs) = pnp_scene(&mut rng, 15, &pose, true, 0.0);
        assert!(coplanarity_ratio(&pts) < 1e-6);
        let est = pnp(&pts, &obs).unwrap();
        assert!(
            (est.translation - pose.translation).norm() < 1e-6,
            "planar translation error {}",
            (est.translation - pose.translation).norm()
        );
    }

    #[test]
    fn pnp_error_scales_with_noise() {
        let mut rng = StdRng::seed_from_u64(8);
        let pose = Pose::new(
            so3_exp(&Vector3::new(0.05, -0.15, 0.1)),
            Vector3::new(0.5, 0.2, -0.4),
        );
        let mut errors = Vec::new();
        for noise in [0.001, 0.002, 0.004] {
            let mut total = 0.0;
            for _ in 0..12 {
                let (pts, obs) = pnp_scene(&mut rng, 40, &pose, false, noise);
                let est = pnp(&pts, &obs).unwrap();
                total += (est.translation - pose.translation).norm();
            }
            errors.push(total / 12.0);
        }
        // Roughly linear growth: doubling noise should not much more than
        // double error, and error must grow.
        assert!(errors[1] > errors[0]);
        assert!(errors[2] > errors[1]);
        assert!(errors[2] / errors[0] < 8.0, "{errors:?}");
        assert!(errors[2] / errors[0] > 1.8, "{errors:?}");
    }

    #[test]
    fn pnp_needs_four_points() {
        let pts = vec![Vector3::new(0.0, 0.0, 5.0); 3];
        let obs = vec![Vector2::zeros(); 3];
        assert!(matches!(
            pnp(&pts, &obs),
            Err(SfmError::InsufficientPoints { .. })
        ));
    }
}
