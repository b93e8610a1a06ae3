//! Variable blocks, residual blocks, and problem assembly.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};

use super::{robust_weight, SolverError};
use crate::geometry::{canonicalize, compose_quat, so3_exp, so3_log, wrap_angle};

/// Handle to a variable block inside a [`Problem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub(crate) usize);

/// Parameterization of a variable block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Manifold {
    /// Flat vector of the given dimension.
    Euclidean(usize),
    /// Unit quaternion, ambient `[w, x, y, z]`, tangent dimension 3.
    UnitQuat,
    /// Pose, ambient `[px, py, pz, qw, qx, qy, qz]`, tangent `[δp, δθ]`.
    Pose3,
    /// Angle wrapped to (−π, π].
    Angle,
}

impl Manifold {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::UnitQuat => 4,
            Manifold::Pose3 => 7,
            Manifold::Angle => 1,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::UnitQuat => 3,
            Manifold::Pose3 => 6,
            Manifold::Angle => 1,
        }
    }

    /// `x ⊞ δ` into a fresh ambient vector.
    pub fn retract(&self, x: &DVector<f64>, delta: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.ambient_dim());
        debug_assert_eq!(delta.len(), self.tangent_dim());
        match self {
            Manifold::Euclidean(_) => x + delta,
            Manifold::UnitQuat => {
                let q = quat_from_ambient(&x.as_view());
                let dq = so3_exp(&Vector3::new(delta[0], delta[1], delta[2]));
                quat_to_ambient(&compose_quat(&q, &dq))
            }
            Manifold::Pose3 => {
                let (p, q) = pose_from_ambient(&x.as_view());
                let dq = so3_exp(&Vector3::new(delta[3], delta[4], delta[5]));
                let q_new = compose_quat(&q, &dq);
                let p_new = p + Vector3::new(delta[0], delta[1], delta[2]);
                pose_to_ambient(&p_new, &q_new)
            }
            Manifold::Angle => DVector::from_element(1, wrap_angle(x[0] + delta[0])),
        }
    }

    /// `x ⊟ x0`, the tangent vector such that `x0 ⊞ (x ⊟ x0) = x`.
    pub fn local_diff(&self, x: &DVector<f64>, x0: &DVector<f64>) -> DVector<f64> {
        match self {
            Manifold::Euclidean(_) => x - x0,
            Manifold::UnitQuat => {
                let q = quat_from_ambient(&x.as_view());
                let q0 = quat_from_ambient(&x0.as_view());
                DVector::from_column_slice(so3_log(&(q0.inverse() * q)).as_slice())
            }
            Manifold::Pose3 => {
                let (p, q) = pose_from_ambient(&x.as_view());
                let (p0, q0) = pose_from_ambient(&x0.as_view());
                let mut out = DVector::zeros(6);
                out.rows_mut(0, 3).copy_from(&(p - p0));
                out.rows_mut(3, 3).copy_from(&so3_log(&(q0.inverse() * q)));
                out
            }
            Manifold::Angle => DVector::from_element(1, wrap_angle(x[0] - x0[0])),
        }
    }
}

pub fn quat_from_ambient(x: &nalgebra::DVectorView<f64>) -> UnitQuaternion<f64> {
    canonicalize(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        x[0], x[1], x[2], x[3],
    )))
}

pub fn quat_to_ambient(q: &UnitQuaternion<f64>) -> DVector<f64> {
    let q = canonicalize(*q);
    DVector::from_column_slice(&[q.w, q.i, q.j, q.k])
}

pub fn pose_from_ambient(x: &nalgebra::DVectorView<f64>) -> (Vector3<f64>, UnitQuaternion<f64>) {
    (
        Vector3::new(x[0], x[1], x[2]),
        canonicalize(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            x[3], x[4], x[5], x[6],
        ))),
    )
}

pub fn pose_to_ambient(p: &Vector3<f64>, q: &UnitQuaternion<f64>) -> DVector<f64> {
    let q = canonicalize(*q);
    DVector::from_column_slice(&[p.x, p.y, p.z, q.w, q.i, q.j, q.k])
}

/// Robust loss applied to the squared Mahalanobis norm of a residual block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    None,
    Huber { delta: f64 },
}

/// A residual block: evaluates `r(x)` and optionally the Jacobians of `r`
/// with respect to each referenced block's tangent space.
pub trait Factor {
    fn dim(&self) -> usize;

    /// `values[i]` is the ambient vector of the i-th referenced block.
    /// When `jacobians` is `Some`, entry `i` is a pre-sized
    /// `dim × tangent_dim(block_i)` matrix to fill.
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64>;
}

/// `r = Σ_i A_i x_i − b` over Euclidean blocks. Used for Gaussian priors and
/// linear surrogate problems.
pub struct LinearFactor {
    pub mats: Vec<DMatrix<f64>>,
    pub rhs: DVector<f64>,
}

impl Factor for LinearFactor {
    fn dim(&self) -> usize {
        self.rhs.len()
    }

    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let mut r = -self.rhs.clone();
        for (a, x) in self.mats.iter().zip(values.iter()) {
            r += a * *x;
        }
        if let Some(jacs) = jacobians {
            for (j, a) in jacs.iter_mut().zip(self.mats.iter()) {
                j.copy_from(a);
            }
        }
        r
    }
}

pub(crate) struct VariableBlock {
    pub value: DVector<f64>,
    pub manifold: Manifold,
    pub fixed: bool,
}

pub(crate) struct ResidualEntry {
    pub factor: Box<dyn Factor>,
    pub blocks: Vec<BlockId>,
    /// Square root of the information matrix (Ω = sqrt_infoᵀ · sqrt_info);
    /// `None` means identity.
    pub sqrt_info: Option<DMatrix<f64>>,
    pub loss: RobustLoss,
    pub class: String,
}

/// Per-class cost breakdown from [`Problem::evaluate`].
#[derive(Debug, Clone, Default)]
pub struct CostBreakdown {
    pub total: f64,
    pub per_class: BTreeMap<String, f64>,
}

/// A nonlinear least-squares problem over manifold variable blocks.
#[derive(Default)]
pub struct Problem {
    pub(crate) blocks: Vec<VariableBlock>,
    pub(crate) residuals: Vec<ResidualEntry>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, manifold: Manifold, initial: DVector<f64>) -> BlockId {
        assert_eq!(
            initial.len(),
            manifold.ambient_dim(),
            "initial value does not match manifold ambient dimension"
        );
        self.blocks.push(VariableBlock {
            value: initial,
            manifold,
            fixed: false,
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn set_fixed(&mut self, id: BlockId, fixed: bool) {
        self.blocks[id.0].fixed = fixed;
    }

    pub fn is_fixed(&self, id: BlockId) -> bool {
        self.blocks[id.0].fixed
    }

    pub fn value(&self, id: BlockId) -> &DVector<f64> {
        &self.blocks[id.0].value
    }

    pub fn set_value(&mut self, id: BlockId, value: DVector<f64>) {
        assert_eq!(value.len(), self.blocks[id.0].manifold.ambient_dim());
        self.blocks[id.0].value = value;
    }

    pub fn manifold(&self, id: BlockId) -> Manifold {
        self.blocks[id.0].manifold
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_residuals(&self) -> usize {
        self.residuals.len()
    }

    /// Register a residual block. `information` is the (symmetric PSD) Ω for
    /// the Mahalanobis norm; pass `None` for identity weighting.
    pub fn add_residual(
        &mut self,
        blocks: &[BlockId],
        factor: Box<dyn Factor>,
        information: Option<DMatrix<f64>>,
        loss: RobustLoss,
        class: &str,
    ) {
        for b in blocks {
            assert!(b.0 < self.blocks.len(), "residual references unknown block");
        }
        let dim = factor.dim();
        let sqrt_info = information.map(|omega| {
            assert_eq!(omega.nrows(), dim);
            assert_eq!(omega.ncols(), dim);
            sqrt_information(&omega)
        });
        self.residuals.push(ResidualEntry {
            factor,
            blocks: blocks.to_vec(),
            sqrt_info,
            loss,
            class: class.to_string(),
        });
    }

    pub(crate) fn gather_values<'a>(&'a self, blocks: &[BlockId]) -> Vec<&'a DVector<f64>> {
        blocks.iter().map(|b| &self.blocks[b.0].value).collect()
    }

    /// Whitened, robust-weighted Jacobians of every residual at current
    /// values, for external covariance assembly.
    pub fn collect_weighted_jacobians(
        &self,
        out: &mut Vec<(Vec<BlockId>, Vec<DMatrix<f64>>, f64)>,
    ) -> Result<(), SolverError> {
        for (index, entry) in self.residuals.iter().enumerate() {
            let values = self.gather_values(&entry.blocks);
            let dim = entry.factor.dim();
            let mut jacs: Vec<DMatrix<f64>> = entry
                .blocks
                .iter()
                .map(|b| DMatrix::zeros(dim, self.blocks[b.0].manifold.tangent_dim()))
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
                    index,
                });
            }
            let (_, weight) = robust_weight(r.norm_squared(), &entry.loss);
            out.push((entry.blocks.clone(), jacs, weight));
        }
        Ok(())
    }

    /// Evaluate the robust cost, broken down per residual class.
    pub fn evaluate(&self) -> Result<CostBreakdown, SolverError> {
        let mut out = CostBreakdown::default();
        for (index, entry) in self.residuals.iter().enumerate() {
            let values = self.gather_values(&entry.blocks);
            let mut r = entry.factor.eval(&values, None);
            if let Some(l) = &entry.sqrt_info {
                r = l * r;
            }
            if !r.iter().all(|v| v.is_finite()) {
                return Err(SolverError::NonFiniteResidual {
                    class: entry.class.clone(),
                    index,
                });
            }
            let (rho, _) = robust_weight(r.norm_squared(), &entry.loss);
            let cost = 0.5 * rho;
            out.total += cost;
            *out.per_class.entry(entry.class.clone()).or_insert(0.0) += cost;
        }
        Ok(out)
    }
}

/// Upper-triangular square root `L` with `Ω = Lᵀ L`, so residual whitening is
/// `r ↦ L r`. Falls back to a symmetric eigendecomposition square root for
/// semi-definite Ω.
pub(crate) fn sqrt_information(omega: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = omega.clone().cholesky() {
        chol.l().transpose()
    } else {
        let eig = omega.clone_owned().symmetric_eigen();
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            *v = v.max(0.0).sqrt();
        }
        DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retract_and_local_diff_are_inverse() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(5);
        let manifolds = [
            Manifold::Euclidean(4),
            Manifold::UnitQuat,
            Manifold::Pose3,
            Manifold::Angle,
        ];
        for m in manifolds {
            for _ in 0..50 {
                let x = match m {
                    Manifold::UnitQuat => quat_to_ambient(&so3_exp(&Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    ))),
                    Manifold::Pose3 => pose_to_ambient(
                        &Vector3::new(rng.random(), rng.random(), rng.random()),
                        &so3_exp(&Vector3::new(
                            rng.random::<f64>() - 0.5,
                            rng.random::<f64>() - 0.5,
                            rng.random::<f64>() - 0.5,
                        )),
                    ),
                    _ => DVector::from_fn(m.ambient_dim(), |_, _| rng.random::<f64>() - 0.5),
                };
                let delta =
                    DVector::from_fn(m.tangent_dim(), |_, _| 0.4 * (rng.random::<f64>() - 0.5));
                let y = m.retract(&x, &delta);
                let recovered = m.local_diff(&y, &x);
                assert!(
                    (recovered - &delta).norm() < 1e-10,
                    "manifold {m:?} retract/local mismatch"
                );
            }
        }
    }

    #[test]
    fn evaluate_breakdown_sums_to_total() {
        let mut p = Problem::new();
        let a = p.add_block(
            Manifold::Euclidean(2),
            DVector::from_column_slice(&[1.0, 2.0]),
        );
        p.add_residual(
            &[a],
            Box::new(LinearFactor {
                mats: vec![DMatrix::identity(2, 2)],
                rhs: DVector::zeros(2),
            }),
            None,
            RobustLoss::None,
            "one",
        );
        p.add_residual(
            &[a],
            Box::new(LinearFactor {
                mats: vec![DMatrix::identity(2, 2) * 2.0],
                rhs: DVector::from_column_slice(&[1.0, 1.0]),
            }),
            None,
            RobustLoss::Huber { delta: 0.5 },
            "two",
        );
        let ev = p.evaluate().unwrap();
        let sum: f64 = ev.per_class.values().sum();
        assert!((ev.total - sum).abs() <= 1e-12 * ev.total.abs().max(1.0));
        assert_eq!(ev.per_class.len(), 2);
    }

    #[test]
    fn empty_problem_costs_zero() {
        let p = Problem::new();
        assert_eq!(p.evaluate().unwrap().total, 0.0);
    }

    #[test]
    fn unit_residual_identity_information_costs_half() {
        let mut p = Problem::new();
        let a = p.add_block(Manifold::Euclidean(1), DVector::from_element(1, 1.0));
        p.add_residual(
            &[a],
            Box::new(LinearFactor {
                mats: vec![DMatrix::identity(1, 1)],
                rhs: DVector::zeros(1),
            }),
            Some(DMatrix::identity(1, 1)),
            RobustLoss::None,
            "unit",
        );
        assert!((p.evaluate().unwrap().total - 0.5).abs() < 1e-15);
    }
}
