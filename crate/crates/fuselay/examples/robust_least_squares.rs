//! The manifold Levenberg-Marquardt solver on its own: a nonlinear
//! benchmark, Huber-bounded outliers, and Schur-complement marginalization.
//!
//! ```bash
//! cargo run --release --example robust_least_squares
//! ```

use fuselay::solver::{
    self, marginalize, Factor, LinearFactor, Manifold, Problem, RobustLoss, SolveOptions,
};
use nalgebra::{DMatrix, DVector};

struct Rosenbrock;

impl Factor for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }
    fn eval(
        &self,
        values: &[&DVector<f64>],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let (x, y) = (values[0][0], values[0][1]);
        if let Some(jacs) = jacobians {
            jacs[0].copy_from(&DMatrix::from_row_slice(
                2,
                2,
                &[-20.0 * x, 10.0, -1.0, 0.0],
            ));
        }
        DVector::from_column_slice(&[10.0 * (y - x * x), 1.0 - x])
    }
}

fn main() {
    // 1. Rosenbrock valley from the classic (-1.2, 1) start.
    let mut problem = Problem::new();
    let x = problem.add_block(
        Manifold::Euclidean(2),
        DVector::from_column_slice(&[-1.2, 1.0]),
    );
    problem.add_residual(
        &[x],
        Box::new(Rosenbrock),
        None,
        RobustLoss::None,
        "rosenbrock",
    );
    let report = solver::solve(
        &mut problem,
        &SolveOptions {
            max_iterations: 200,
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "rosenbrock: ({:.6}, {:.6}) after {} iterations, cost {:.2e} -> {:.2e}",
        problem.value(x)[0],
        problem.value(x)[1],
        report.iterations,
        report.initial_cost,
        report.final_cost
    );

    // 2. Huber keeps a wild outlier from dragging the estimate.
    let mut robust = Problem::new();
    let m = robust.add_block(Manifold::Euclidean(1), DVector::zeros(1));
    for z in [0.1, -0.2, 0.05, 0.15, -0.1] {
        robust.add_residual(
            &[m],
            Box::new(LinearFactor {
                mats: vec![DMatrix::identity(1, 1)],
                rhs: DVector::from_element(1, z),
            }),
            None,
            RobustLoss::None,
            "inlier",
        );
    }
    robust.add_residual(
        &[m],
        Box::new(LinearFactor {
            mats: vec![DMatrix::identity(1, 1)],
            rhs: DVector::from_element(1, 50.0),
        }),
        None,
        RobustLoss::Huber { delta: 1.0 },
        "outlier",
    );
    solver::solve(&mut robust, &SolveOptions::default()).unwrap();
    println!(
        "huber: estimate {:.4} with a 50.0 outlier in five ~0.0 measurements",
        robust.value(m)[0]
    );

    // 3. Marginalize the head of a chain into a prior and keep solving.
    let mut chain = Problem::new();
    let a = chain.add_block(Manifold::Euclidean(1), DVector::zeros(1));
    let b = chain.add_block(Manifold::Euclidean(1), DVector::zeros(1));
    let c = chain.add_block(Manifold::Euclidean(1), DVector::zeros(1));
    let link = |p: &mut Problem, i, j, meas: f64, w: f64| {
        p.add_residual(
            &[i, j],
            Box::new(LinearFactor {
                mats: vec![-DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
                rhs: DVector::from_element(1, meas),
            }),
            Some(DMatrix::from_element(1, 1, w)),
            RobustLoss::None,
            "link",
        );
    };
    chain.add_residual(
        &[a],
        Box::new(LinearFactor {
            mats: vec![DMatrix::identity(1, 1)],
            rhs: DVector::from_element(1, 0.3),
        }),
        Some(DMatrix::from_element(1, 1, 25.0)),
        RobustLoss::None,
        "anchor",
    );
    link(&mut chain, a, b, 1.0, 9.0);
    link(&mut chain, b, c, 1.0, 9.0);
    let (prior, border) = marginalize(&chain, &[a]).unwrap();
    println!(
        "marginalization: dropped the anchor block, prior of dimension {} over {} border block(s), information {:.3}",
        prior.dim(),
        border.len(),
        prior.information()[(0, 0)]
    );
}
