//! Manifold Levenberg-Marquardt nonlinear least squares with robust losses,
//! Mahalanobis weighting, and Schur-complement marginalization.
//!
//! Cost convention: `0.5 * Σ ρ(‖r‖²_Ω)` where Ω is the per-residual
//! information matrix and ρ an optional robust loss on the squared
//! Mahalanobis norm. Quaternion blocks use right perturbation
//! `q ⊞ δ = q ⊗ Exp(δ)`; pose blocks perturb translation additively in the
//! parent frame.

mod check;
mod lm;
mod marginal;
mod problem;

pub use check::{check_jacobians, JacobianCheck};
pub use lm::{solve, SolveOptions, SolveReport, TerminationReason};
pub use marginal::{marginalize, MarginalPrior, PriorFactor};
pub use problem::{
    pose_from_ambient, pose_to_ambient, quat_from_ambient, quat_to_ambient, BlockId, CostBreakdown,
    Factor, LinearFactor, Manifold, Problem, RobustLoss,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("residual class `{class}` (index {index}) produced a non-finite value")]
    NonFiniteResidual { class: String, index: usize },
    #[error("normal equations are singular even under damping")]
    SingularNormalEquations,
    #[error("dropped-block system is indefinite (eigenvalue {eigenvalue:.3e})")]
    IndefiniteSystem { eigenvalue: f64 },
    #[error("block {0:?} does not exist")]
    UnknownBlock(BlockId),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Robust cost and its derivative w.r.t. the squared Mahalanobis norm.
///
/// Huber with scale δ: `ρ(s) = s` for `s ≤ δ²`, else `2δ√s − δ²`; the weight
/// `dρ/ds` is what iteratively-reweighted least squares multiplies into the
/// normal equations.
pub fn robust_weight(squared_mahalanobis: f64, loss: &RobustLoss) -> (f64, f64) {
    debug_assert!(squared_mahalanobis >= 0.0);
    match loss {
        RobustLoss::None => (squared_mahalanobis, 1.0),
        RobustLoss::Huber { delta } => {
            let d2 = delta * delta;
            if squared_mahalanobis <= d2 {
                (squared_mahalanobis, 1.0)
            } else {
                let s = squared_mahalanobis.sqrt();
                (2.0 * delta * s - d2, delta / s)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_closed_forms() {
        let huber = RobustLoss::Huber { delta: 1.0 };
        assert_eq!(robust_weight(0.0, &huber), (0.0, 1.0));
        assert_eq!(robust_weight(0.25, &huber), (0.25, 1.0));
        // s = 4: cost = 2*1*2 - 1 = 3, weight = 1/2
        let (c, w) = robust_weight(4.0, &huber);
        assert_eq!(c, 3.0);
        assert_eq!(w, 0.5);
        assert_eq!(robust_weight(4.0, &RobustLoss::None), (4.0, 1.0));
    }
}
