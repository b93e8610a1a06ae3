//! Schur-complement marginalization producing linear priors.

use nalgebra::{DMatrix, DVector};

use super::problem::{Factor, Manifold, Problem};
use super::{robust_weight, SolverError};
use crate::solver::BlockId;

/// Linear prior over a set of retained blocks, obtained by eliminating
/// dropped blocks from the Gauss-Newton system of the residuals that touch
/// them.
///
/// The prior's residual is `r(x) = J0 · (x ⊟ x_lin) + r0` with `J0` frozen at
/// the linearization point (first-estimates Jacobians), so repeated solves
/// cannot manufacture information along previously marginalized directions.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    /// Manifold and linearization value per retained block, in order.
    pub lin_points: Vec<(Manifold, DVector<f64>)>,
    jacobian: DMatrix<f64>,
    residual0: DVector<f64>,
}

impl MarginalPrior {
    /// Number of rows of the prior residual.
    pub fn dim(&self) -> usize {
        self.residual0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    /// Total tangent dimension over retained blocks.
    pub fn tangent_dim(&self) -> usize {
        self.lin_points.iter().map(|(m, _)| m.tangent_dim()).sum()
    }

    /// Recover the information matrix `H_m = J0ᵀ J0`.
    pub fn information(&self) -> DMatrix<f64> {
        self.jacobian.transpose() * &self.jacobian
    }

    /// Gradient of the prior cost at the linearization point.
    pub fn gradient(&self) -> DVector<f64> {
        self.jacobian.transpose() * &self.residual0
    }

    /// Build a prior directly from a Gaussian information form `(H, g)` over
    /// the given linearization points. Used for gauge and bootstrap priors.
    pub fn from_information(
        lin_points: Vec<(Manifold, DVector<f64>)>,
        h: &DMatrix<f64>,
        g: &DVector<f64>,
    ) -> Self {
        let (jacobian, residual0) = square_root_form(h, g);
        Self {
            lin_points,
            jacobian,
            residual0,
        }
    }

    pub fn empty() -> Self {
        Self {
            lin_points: Vec::new(),
            jacobian: DMatrix::zeros(0, 0),
            residual0: DVector::zeros(0),
        }
    }
}

/// Factorize `cost(δ) = ½ δᵀHδ + gᵀδ + c` into `½‖J δ + r0‖²`, truncating
/// eigenvalues below `1e-12 · λ_max`.
fn square_root_form(h: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), DVector::zeros(0));
    }
    let eig = h.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.amax().max(0.0);
    let tol = 1e-12 * lam_max.max(1e-300);
    let kept: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let r = kept.len();
    let mut j = DMatrix::zeros(r, n);
    let mut r0 = DVector::zeros(r);
    for (row, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        j.row_mut(row).copy_from(&(v.transpose() * s));
        r0[row] = v.dot(g) / s;
    }
    (j, r0)
}

/// The prior as a residual block over the retained blocks (same order as
/// `lin_points`).
pub struct PriorFactor {
    prior: MarginalPrior,
}

impl MarginalPrior {
    pub fn to_factor(&self) -> PriorFactor {
        PriorFactor {
            prior: self.clone(),
        }
    }
}

impl Factor for PriorFactor {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let mut delta = DVector::zeros(self.prior.tangent_dim());
        let mut off = 0;
        for ((manifold, lin), value) in self.prior.lin_points.iter().zip(values) {
            let d = manifold.tangent_dim();
            delta
                .rows_mut(off, d)
                .copy_from(&manifold.local_diff(value, lin));
            off += d;
        }
        let r = &self.prior.jacobian * delta + &self.prior.residual0;
        if let Some(jacs) = jacobians {
            let mut off = 0;
            for (j, (manifold, _)) in jacs.iter_mut().zip(self.prior.lin_points.iter()) {
                let d = manifold.tangent_dim();
                j.copy_from(&self.prior.jacobian.columns(off, d));
                off += d;
            }
        }
        r
    }
}

/// Schur-complement the given blocks out of the Gauss-Newton system of the
/// residuals touching them, evaluated at current values. Returns a prior over
/// the remaining (border) blocks in ascending block-id order, along with that
/// order.
pub fn marginalize(
    problem: &Problem,
    drop: &[BlockId],
) -> Result<(MarginalPrior, Vec<BlockId>), SolverError> {
    for id in drop {
        if id.0 >= problem.blocks.len() {
            return Err(SolverError::UnknownBlock(*id));
        }
    }
    let is_dropped = |id: BlockId| drop.contains(&id);

    // Residuals touching any dropped block.
    let touching: Vec<usize> = problem
        .residuals
        .iter()
        .enumerate()
        .filter(|(_, e)| e.blocks.iter().any(|b| is_dropped(*b)))
        .map(|(i, _)| i)
        .collect();

    // Border: retained, non-fixed blocks referenced by touching residuals.
    let mut border: Vec<BlockId> = Vec::new();
    for &i in &touching {
        for b in &problem.residuals[i].blocks {
            if !is_dropped(*b) && !problem.blocks[b.0].fixed && !border.contains(b) {
                border.push(*b);
            }
        }
    }
    border.sort();

    if touching.is_empty() || border.is_empty() {
        return Ok((MarginalPrior::empty(), border));
    }

    // Local tangent layout: dropped blocks first, border after.
    let dropped_active: Vec<BlockId> = drop
        .iter()
        .copied()
        .filter(|b| !problem.blocks[b.0].fixed)
        .collect();
    let mut offsets: Vec<(BlockId, usize)> = Vec::new();
    let mut nd = 0usize;
    for &b in &dropped_active {
        offsets.push((b, nd));
        nd += problem.blocks[b.0].manifold.tangent_dim();
    }
    let mut nb = 0usize;
    for &b in &border {
        offsets.push((b, nd + nb));
        nb += problem.blocks[b.0].manifold.tangent_dim();
    }
    let n = nd + nb;
    let offset_of = |id: BlockId| offsets.iter().find(|(b, _)| *b == id).map(|(_, o)| *o);

    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    for &ri in &touching {
        let entry = &problem.residuals[ri];
        let values = problem.gather_values(&entry.blocks);
        let dim = entry.factor.dim();
        let mut jacs: Vec<DMatrix<f64>> = entry
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(dim, problem.blocks[b.0].manifold.tangent_dim()))
            .collect();
        let mut r = entry.factor.eval(&values, Some(&mut jacs));
        if let Some(l) = &entry.sqrt_info {
            r = l * r;
            for j in jacs.iter_mut() {
                *j = l * &*j;
            }
        }
        if !r.iter().all(|v| v.is_finite()) {
            return Err(SolverError::NonFiniteResidual {
                class: entry.class.clone(),
                index: ri,
            });
        }
        let (_, weight) = robust_weight(r.norm_squared(), &entry.loss);
        for (bi, block_i) in entry.blocks.iter().enumerate() {
            let Some(oi) = offset_of(*block_i) else {
                continue;
            };
            let ji = &jacs[bi];
            let di = ji.ncols();
            g.rows_mut(oi, di).axpy(weight, &(ji.transpose() * &r), 1.0);
            for (bj, block_j) in entry.blocks.iter().enumerate() {
                let Some(oj) = offset_of(*block_j) else {
                    continue;
                };
                let jj = &jacs[bj];
                let block = ji.transpose() * jj * weight;
                let mut view = h.view_mut((oi, oj), (di, jj.ncols()));
                view += block;
            }
        }
    }

    // Schur complement of the dropped partition.
    let h_dd = h.view((0, 0), (nd, nd)).clone_owned();
    let h_db = h.view((0, nd), (nd, nb)).clone_owned();
    let h_bb = h.view((nd, nd), (nb, nb)).clone_owned();
    let g_d = g.rows(0, nd).clone_owned();
    let g_b = g.rows(nd, nb).clone_owned();

    let h_dd_pinv = pseudo_inverse_psd(&h_dd)?;
    let h_bd = h_db.transpose();
    let h_m = &h_bb - &h_bd * &h_dd_pinv * &h_db;
    let g_m = &g_b - &h_bd * &h_dd_pinv * &g_d;

    let lin_points: Vec<(Manifold, DVector<f64>)> = border
        .iter()
        .map(|b| {
            (
                problem.blocks[b.0].manifold,
                problem.blocks[b.0].value.clone(),
            )
        })
        .collect();
    Ok((
        MarginalPrior::from_information(lin_points, &h_m, &g_m),
        border,
    ))
}

/// Eigenvalue pseudo-inverse of a symmetric PSD matrix with relative
/// tolerance 1e-10; errors if the matrix is meaningfully indefinite.
fn pseudo_inverse_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SolverError> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = m.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.amax().max(1e-300);
    let tol = 1e-10 * lam_max;
    let mut inv_vals = eig.eigenvalues.clone();
    for v in inv_vals.iter_mut() {
        if *v < -tol {
            return Err(SolverError::IndefiniteSystem { eigenvalue: *v });
        }
        *v = if *v > tol { 1.0 / *v } else { 0.0 };
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{lm, LinearFactor, RobustLoss, SolveOptions};
    use nalgebra::{DMatrix, DVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Dense joint-Gaussian marginalization oracle over a two-block chain.
    #[test]
    fn two_block_chain_matches_analytic_marginal() {
        // x ~ N(0, 1) via unary factor, y - x ~ N(0, 1/4) via binary factor.
        // Marginalizing x leaves y ~ N(0, var_x + var_{y|x}) = N(0, 1 + 0.25).
        let mut p = Problem::new();
        let x = p.add_block(Manifold::Euclidean(1), DVector::zeros(1));
        let y = p.add_block(Manifold::Euclidean(1), DVector::zeros(1));
        p.add_residual(
            &[x],
            Box::new(LinearFactor {
                mats: vec![DMatrix::identity(1, 1)],
                rhs: DVector::zeros(1),
            }),
            Some(DMatrix::from_element(1, 1, 1.0)),
            RobustLoss::None,
            "unary",
        );
        p.add_residual(
            &[x, y],
            Box::new(LinearFactor {
                mats: vec![-DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
                rhs: DVector::zeros(1),
            }),
            Some(DMatrix::from_element(1, 1, 4.0)),
            RobustLoss::None,
            "chain",
        );
        let (prior, border) = marginalize(&p, &[x]).unwrap();
        assert_eq!(border, vec![y]);
        let info = prior.information();
        assert_eq!(info.nrows(), 1);
        assert!(
            (info[(0, 0)] - 1.0 / 1.25).abs() < 1e-10,
            "marginal information {}",
            info[(0, 0)]
        );
    }

    #[test]
    fn untouched_drop_block_gives_empty_prior() {
        let mut p = Problem::new();
        let x = p.add_block(Manifold::Euclidean(2), DVector::zeros(2));
        let y = p.add_block(Manifold::Euclidean(2), DVector::zeros(2));
        p.add_residual(
            &[y],
            Box::new(LinearFactor {
                mats: vec![DMatrix::identity(2, 2)],
                rhs: DVector::zeros(2),
            }),
            None,
            RobustLoss::None,
            "unary",
        );
        let (prior, border) = marginalize(&p, &[x]).unwrap();
        assert!(prior.is_empty());
        assert!(border.is_empty());
    }

    /// Batch-vs-marginal equivalence on a linear 5-pose chain.
    #[test]
    fn five_pose_chain_batch_equivalence() {
        let build = |with_all: bool| {
            let mut p = Problem::new();
            let ids: Vec<_> = (0..5)
                .map(|_| p.add_block(Manifold::Euclidean(2), DVector::zeros(2)))
                .collect();
            // Anchor on pose 0 and odometry-like factors with measurements.
            p.add_residual(
                &[ids[0]],
                Box::new(LinearFactor {
                    mats: vec![DMatrix::identity(2, 2)],
                    rhs: DVector::from_column_slice(&[0.3, -0.1]),
                }),
                Some(DMatrix::identity(2, 2) * 25.0),
                RobustLoss::None,
                "anchor",
            );
            for k in 0..4 {
                p.add_residual(
                    &[ids[k], ids[k + 1]],
                    Box::new(LinearFactor {
                        mats: vec![-DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
                        rhs: DVector::from_column_slice(&[1.0 + 0.1 * k as f64, 0.2]),
                    }),
                    Some(DMatrix::identity(2, 2) * (4.0 + k as f64)),
                    RobustLoss::None,
                    "odom",
                );
            }
            let _ = with_all;
            (p, ids)
        };

        // Full batch solve.
        let (mut full, ids_full) = build(true);
        lm::solve(&mut full, &SolveOptions::default()).unwrap();

        // Marginalize pose 0 out of the *initial* problem, rebuild with the
        // prior replacing its factors, solve, compare retained estimates.
        let (initial, ids) = build(true);
        let (prior, border) = marginalize(&initial, &[ids[0]]).unwrap();
        assert_eq!(border, vec![ids[1]]);

        let mut reduced = Problem::new();
        let rids: Vec<_> = (0..4)
            .map(|_| reduced.add_block(Manifold::Euclidean(2), DVector::zeros(2)))
            .collect();
        reduced.add_residual(
            &[rids[0]],
            Box::new(prior.to_factor()),
            None,
            RobustLoss::None,
            "prior",
        );
        for k in 0..3 {
            reduced.add_residual(
                &[rids[k], rids[k + 1]],
                Box::new(LinearFactor {
                    mats: vec![-DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
                    rhs: DVector::from_column_slice(&[1.0 + 0.1 * (k + 1) as f64, 0.2]),
                }),
                Some(DMatrix::identity(2, 2) * (5.0 + k as f64)),
                RobustLoss::None,
                "odom",
            );
        }
        lm::solve(&mut reduced, &SolveOptions::default()).unwrap();

        for k in 0..4 {
            let batch = full.value(ids_full[k + 1]);
            let marg = reduced.value(rids[k]);
            assert!(
                (batch - marg).norm() < 1e-8,
                "pose {k}: batch {batch:?} vs marginalized {marg:?}"
            );
        }
    }

    /// Randomized linear-Gaussian problems up to dimension 50: the
    /// marginalized solve must reproduce the dense batch solution.
    #[test]
    fn random_linear_gaussian_equivalence() {
        let mut rng = StdRng::seed_from_u64(99);
        for trial in 0..50 {
            let n_blocks = 2 + (trial % 8);
            let dims: Vec<usize> = (0..n_blocks).map(|_| 1 + rng.random_range(0..5)).collect();
            let total: usize = dims.iter().sum();
            if total > 50 {
                continue;
            }

            let build = |rng: &mut StdRng| {
                let mut p = Problem::new();
                let ids: Vec<_> = dims
                    .iter()
                    .map(|&d| p.add_block(Manifold::Euclidean(d), DVector::zeros(d)))
                    .collect();
                // Unary anchors on every block keep the system nonsingular.
                for (i, &d) in dims.iter().enumerate() {
                    let a = DMatrix::from_fn(d, d, |r, c| {
                        if r == c {
                            1.5 + rng.random::<f64>()
                        } else {
                            0.2 * (rng.random::<f64>() - 0.5)
                        }
                    });
                    let b = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
                    p.add_residual(
                        &[ids[i]],
                        Box::new(LinearFactor {
                            mats: vec![a],
                            rhs: b,
                        }),
                        None,
                        RobustLoss::None,
                        "anchor",
                    );
                }
                // Chain couplings.
                for i in 0..n_blocks - 1 {
                    let (di, dj) = (dims[i], dims[i + 1]);
                    let a1 = DMatrix::from_fn(dj, di, |_, _| rng.random::<f64>() - 0.5);
                    let a2 = DMatrix::from_fn(dj, dj, |r, c| {
                        if r == c {
                            1.0
                        } else {
                            0.1 * (rng.random::<f64>() - 0.5)
                        }
                    });
                    let b = DVector::from_fn(dj, |_, _| rng.random::<f64>() - 0.5);
                    p.add_residual(
                        &[ids[i], ids[i + 1]],
                        Box::new(LinearFactor {
                            mats: vec![a1, a2],
                            rhs: b,
                        }),
                        None,
                        RobustLoss::None,
                        "chain",
                    );
                }
                (p, ids)
            };

            let seed_state = rng.clone();
            let (mut full, ids) = build(&mut rng);
            lm::solve(&mut full, &SolveOptions::default()).unwrap();

            let mut rng2 = seed_state.clone();
            let (initial, ids2) = build(&mut rng2);
            let (prior, border) = marginalize(&initial, &[ids2[0]]).unwrap();

            // Rebuild without block 0: prior over border + untouched factors.
            let mut reduced = Problem::new();
            let rids: Vec<_> = dims[1..]
                .iter()
                .map(|&d| reduced.add_block(Manifold::Euclidean(d), DVector::zeros(d)))
                .collect();
            let map_id = |b: BlockId| rids[b.0 - 1];
            let prior_blocks: Vec<_> = border.iter().map(|b| map_id(*b)).collect();
            reduced.add_residual(
                &prior_blocks,
                Box::new(prior.to_factor()),
                None,
                RobustLoss::None,
                "prior",
            );
            // Re-create (deterministically) all factors not touching block 0.
            let mut rng3 = seed_state.clone();
            let (initial2, _) = build(&mut rng3);
            for entry in initial2.residuals {
                if entry.blocks.contains(&ids2[0]) {
                    continue;
                }
                let blocks: Vec<_> = entry.blocks.iter().map(|b| map_id(*b)).collect();
                reduced
                    .residuals
                    .push(super::super::problem::ResidualEntry {
                        factor: entry.factor,
                        blocks,
                        sqrt_info: entry.sqrt_info,
                        loss: entry.loss,
                        class: entry.class,
                    });
            }
            lm::solve(&mut reduced, &SolveOptions::default()).unwrap();

            for (k, &id) in ids.iter().enumerate().skip(1) {
                let batch = full.value(id);
                let marg = reduced.value(rids[k - 1]);
                assert!(
                    (batch - marg).norm() < 1e-8,
                    "trial {trial} block {k}: {batch:?} vs {marg:?}"
                );
            }
        }
    }
}
