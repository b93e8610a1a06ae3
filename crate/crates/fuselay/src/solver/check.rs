//! Central-finite-difference verification of analytic Jacobians.

use nalgebra::{DMatrix, DVector};

use super::problem::Problem;

/// Worst-case comparison between analytic and central-finite-difference
/// Jacobians over every residual block of a problem.
#[derive(Debug, Clone)]
pub struct JacobianCheck {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// (class, residual index, block position, row, col) of the worst entry.
    pub worst: Option<(String, usize, usize, usize, usize)>,
    pub ok: bool,
}

/// Compare analytic Jacobians against central finite differences at the
/// problem's current values. An entry passes when
/// `|analytic − fd| ≤ abs_tol + rel_tol · max(|analytic|, |fd|)`.
pub fn check_jacobians(problem: &Problem, rel_tol: f64, abs_tol: f64) -> JacobianCheck {
    let step = 1e-6;
    let mut out = JacobianCheck {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: None,
        ok: true,
    };

    for (ri, entry) in problem.residuals.iter().enumerate() {
        let values = problem.gather_values(&entry.blocks);
        let dim = entry.factor.dim();
        let mut jacs: Vec<DMatrix<f64>> = entry
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(dim, problem.blocks[b.0].manifold.tangent_dim()))
            .collect();
        let _ = entry.factor.eval(&values, Some(&mut jacs));

        for (bi, block_id) in entry.blocks.iter().enumerate() {
            let manifold = problem.blocks[block_id.0].manifold;
            let td = manifold.tangent_dim();
            let base = problem.blocks[block_id.0].value.clone();
            for col in 0..td {
                let mut delta = DVector::zeros(td);
                delta[col] = step;
                let plus = eval_with(problem, ri, bi, &manifold.retract(&base, &delta));
                delta[col] = -step;
                let minus = eval_with(problem, ri, bi, &manifold.retract(&base, &delta));
                let fd = (plus - minus) / (2.0 * step);
                for row in 0..dim {
                    let a = jacs[bi][(row, col)];
                    let f = fd[row];
                    let abs_err = (a - f).abs();
                    let rel_err = abs_err / a.abs().max(f.abs()).max(1e-300);
                    let pass = abs_err <= abs_tol + rel_tol * a.abs().max(f.abs());
                    if abs_err > out.max_abs_error {
                        out.max_abs_error = abs_err;
                    }
                    if !pass && rel_err > out.max_rel_error {
                        out.max_rel_error = rel_err;
                        out.worst = Some((entry.class.clone(), ri, bi, row, col));
                    }
                    if !pass {
                        out.ok = false;
                    }
                }
            }
        }
    }
    out
}

fn eval_with(
    problem: &Problem,
    residual_index: usize,
    block_pos: usize,
    substituted: &DVector<f64>,
) -> DVector<f64> {
    let entry = &problem.residuals[residual_index];
    let mut values = problem.gather_values(&entry.blocks);
    values[block_pos] = substituted;
    entry.factor.eval(&values, None)
}

#[cfg(test)]
mod tests {
    use super::super::problem::{Factor, Manifold, Problem, RobustLoss};
    use super::*;
    use nalgebra::{DMatrix, DVector};

    struct GoodQuadratic;
    impl Factor for GoodQuadratic {
        fn dim(&self) -> usize {
            1
        }
        fn eval(
            &self,
            values: &[&DVector<f64>],
            jacobians: Option<&mut [DMatrix<f64>]>,
        ) -> DVector<f64> {
            let x = values[0][0];
            if let Some(j) = jacobians {
                j[0][(0, 0)] = 2.0 * x;
            }
            DVector::from_element(1, x * x - 2.0)
        }
    }

    struct BadJacobian;
    impl Factor for BadJacobian {
        fn dim(&self) -> usize {
            1
        }
        fn eval(
            &self,
            values: &[&DVector<f64>],
            jacobians: Option<&mut [DMatrix<f64>]>,
        ) -> DVector<f64> {
            let x = values[0][0];
            if let Some(j) = jacobians {
                j[0][(0, 0)] = 3.0 * x; // wrong on purpose
            }
            DVector::from_element(1, x * x)
        }
    }

    #[test]
    fn detects_correct_and_incorrect_jacobians() {
        let mut p = Problem::new();
        let x = p.add_block(Manifold::Euclidean(1), DVector::from_element(1, 1.3));
        p.add_residual(
            &[x],
            Box::new(GoodQuadratic),
            None,
            RobustLoss::None,
            "good",
        );
        assert!(check_jacobians(&p, 1e-5, 1e-8).ok);

        let mut p2 = Problem::new();
        let y = p2.add_block(Manifold::Euclidean(1), DVector::from_element(1, 1.3));
        p2.add_residual(&[y], Box::new(BadJacobian), None, RobustLoss::None, "bad");
        let check = check_jacobians(&p2, 1e-5, 1e-8);
        assert!(!check.ok);
        assert_eq!(check.worst.unwrap().0, "bad");
    }
}
