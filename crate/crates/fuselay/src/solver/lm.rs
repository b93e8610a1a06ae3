//! Levenberg-Marquardt iteration over a [`Problem`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::problem::{Problem, ResidualEntry};
use super::{robust_weight, SolverError};

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Terminate when the max-norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Terminate when the step norm falls below `tol * (‖x‖ + tol)`.
    pub step_tolerance: f64,
    /// Terminate when an accepted step reduces the cost by less than this
    /// relative amount.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            cost_tolerance: 0.0,
            initial_damping: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    GradientTolerance,
    StepTolerance,
    CostTolerance,
    MaxIterations,
    /// Damping grew past its cap without an acceptable step.
    StalledDamping,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: TerminationReason,
    pub class_costs: BTreeMap<String, f64>,
}

struct TangentLayout {
    /// Column offset per block; `usize::MAX` for fixed blocks.
    offsets: Vec<usize>,
    total: usize,
}

fn layout(problem: &Problem) -> TangentLayout {
    let mut offsets = Vec::with_capacity(problem.blocks.len());
    let mut total = 0usize;
    for b in &problem.blocks {
        if b.fixed {
            offsets.push(usize::MAX);
        } else {
            offsets.push(total);
            total += b.manifold.tangent_dim();
        }
    }
    TangentLayout { offsets, total }
}

/// Evaluate one residual entry: whitened residual, whitened Jacobians,
/// robust cost and IRLS weight.
fn eval_entry(
    problem: &Problem,
    entry: &ResidualEntry,
    index: usize,
    with_jacobians: bool,
) -> Result<(DVector<f64>, Option<Vec<DMatrix<f64>>>, f64, f64), SolverError> {
    let values = problem.gather_values(&entry.blocks);
    let dim = entry.factor.dim();
    let mut jacs: Option<Vec<DMatrix<f64>>> = with_jacobians.then(|| {
        entry
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(dim, problem.blocks[b.0].manifold.tangent_dim()))
            .collect()
    });
    let mut r = entry.factor.eval(&values, jacs.as_deref_mut());
    if let Some(l) = &entry.sqrt_info {
        r = l * r;
        if let Some(jacs) = jacs.as_mut() {
            for j in jacs.iter_mut() {
                *j = l * &*j;
            }
        }
    }
    let finite = r.iter().all(|v| v.is_finite())
        && jacs
            .as_ref()
            .map(|js| js.iter().all(|j| j.iter().all(|v| v.is_finite())))
            .unwrap_or(true);
    if !finite {
        return Err(SolverError::NonFiniteResidual {
            class: entry.class.clone(),
            index,
        });
    }
    let (rho, weight) = robust_weight(r.norm_squared(), &entry.loss);
    Ok((r, jacs, 0.5 * rho, weight))
}

fn total_cost(problem: &Problem) -> Result<f64, SolverError> {
    let mut cost = 0.0;
    for (i, entry) in problem.residuals.iter().enumerate() {
        let (_, _, c, _) = eval_entry(problem, entry, i, false)?;
        cost += c;
    }
    Ok(cost)
}

/// Minimize the robust cost in place, updating block values via retraction.
///
/// Rejected steps never mutate block values; damping follows the
/// double-on-reject / third-on-accept schedule.
pub fn solve(problem: &mut Problem, options: &SolveOptions) -> Result<SolveReport, SolverError> {
    let layout = layout(problem);
    let n = layout.total;
    let initial_cost = total_cost(problem)?;
    let mut cost = initial_cost;
    let mut damping = options.initial_damping;
    let mut accepted_steps = 0usize;
    let mut termination = TerminationReason::MaxIterations;
    let mut iterations = 0usize;

    if n > 0 {
        'outer: for _ in 0..options.max_iterations {
            iterations += 1;
            // Assemble the normal equations with IRLS robust weights.
            let mut h = DMatrix::<f64>::zeros(n, n);
            let mut g = DVector::<f64>::zeros(n);
            for (i, entry) in problem.residuals.iter().enumerate() {
                let (r, jacs, _, weight) = eval_entry(problem, entry, i, true)?;
                let jacs = jacs.expect("jacobians requested");
                for (bi, block_i) in entry.blocks.iter().enumerate() {
                    let oi = layout.offsets[block_i.0];
                    if oi == usize::MAX {
                        continue;
                    }
                    let ji = &jacs[bi];
                    let di = ji.ncols();
                    g.rows_mut(oi, di).axpy(weight, &(ji.transpose() * &r), 1.0);
                    for (bj, block_j) in entry.blocks.iter().enumerate() {
                        let oj = layout.offsets[block_j.0];
                        if oj == usize::MAX {
                            continue;
                        }
                        let jj = &jacs[bj];
                        let block = ji.transpose() * jj * weight;
                        let mut view = h.view_mut((oi, oj), (di, jj.ncols()));
                        view += block;
                    }
                }
            }

            if g.amax() < options.gradient_tolerance {
                termination = TerminationReason::GradientTolerance;
                break;
            }

            // Damped scaling matrix: λ·max(diag(H), floor) keeps rank-deficient
            // directions solvable.
            let diag_floor = 1e-8 * h.diagonal().amax().max(1.0);
            let scale: DVector<f64> = DVector::from_fn(n, |i, _| h[(i, i)].max(diag_floor));

            loop {
                let mut h_damped = h.clone();
                for i in 0..n {
                    h_damped[(i, i)] += damping * scale[i];
                }
                let step = match h_damped.cholesky() {
                    Some(chol) => chol.solve(&(-&g)),
                    None => {
                        damping *= 10.0;
                        if damping > 1e18 {
                            return Err(SolverError::SingularNormalEquations);
                        }
                        continue;
                    }
                };

                // Trial retraction on copies; commit only if the cost drops.
                let old_values: Vec<DVector<f64>> =
                    problem.blocks.iter().map(|b| b.value.clone()).collect();
                for (idx, block) in problem.blocks.iter_mut().enumerate() {
                    let o = layout.offsets[idx];
                    if o == usize::MAX {
                        continue;
                    }
                    let d = block.manifold.tangent_dim();
                    let delta = step.rows(o, d).clone_owned();
                    block.value = block.manifold.retract(&block.value, &delta);
                }
                let new_cost = total_cost(problem)?;
                if new_cost < cost {
                    let decrease = cost - new_cost;
                    cost = new_cost;
                    accepted_steps += 1;
                    damping = (damping / 3.0).max(1e-12);
                    let x_norm: f64 = old_values.iter().map(|v| v.norm_squared()).sum::<f64>();
                    if step.norm()
                        < options.step_tolerance * (x_norm.sqrt() + options.step_tolerance)
                    {
                        termination = TerminationReason::StepTolerance;
                        break 'outer;
                    }
                    if options.cost_tolerance > 0.0
                        && decrease < options.cost_tolerance * cost.max(1e-300)
                    {
                        termination = TerminationReason::CostTolerance;
                        break 'outer;
                    }
                    break;
                }
                // Reject: restore values, raise damping, retry this iteration.
                for (block, old) in problem.blocks.iter_mut().zip(old_values) {
                    block.value = old;
                }
                damping *= 2.0;
                if damping > 1e16 {
                    termination = TerminationReason::StalledDamping;
                    break 'outer;
                }
            }
        }
    }

    let breakdown = problem.evaluate()?;
    Ok(SolveReport {
        iterations,
        accepted_steps,
        initial_cost,
        final_cost: cost,
        termination,
        class_costs: breakdown.per_class,
    })
}
