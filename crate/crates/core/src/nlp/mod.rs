//! Sparse sequential quadratic programming for the transcribed optimal
//! control problems.
//!
//! Objectives are least-squares (`f = sum r_i^2 + c' x`), and the SQP uses
//! the Gauss-Newton Hessian of the residuals with Levenberg damping adapted
//! by step acceptance, a convex QP subproblem solved by a dual active-set
//! method, and an l1-merit backtracking line search. Problems that declare a
//! multiple-shooting [`ShootingStructure`] get their linearized defects
//! eliminated by block substitution before the QP (see [`condense`]); other
//! problems take the dense path.

mod condense;
pub mod qp;

pub use condense::{ChainLayout, ShootingStructure};

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;

use self::condense::{full_gradient, solve_subproblem, QpStep};
use self::qp::QpStatus;

/// A nonlinear program in least-squares form.
///
/// Minimize `sum_i r_i(x)^2 + c' x` subject to `g(x) = 0`, `h(x) >= 0`, and
/// variable bounds. All first derivatives are supplied analytically through
/// [`NlpProblem::eval`] as sparse rows.
pub trait NlpProblem {
    fn n_vars(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    /// Per-variable lower and upper bounds; equal entries pin a variable.
    fn bounds(&self) -> (&[f64], &[f64]);
    /// Gradient of the linear cost term, empty when absent.
    fn linear_cost(&self) -> &[f64] {
        &[]
    }
    /// Evaluates residuals, constraints, and their Jacobians at `x`.
    fn eval(&self, x: &[f64], out: &mut Evaluation);
    /// Multiple-shooting structure, when the problem has one.
    fn shooting_structure(&self) -> Option<&ShootingStructure> {
        None
    }
}

/// Evaluation workspace filled by [`NlpProblem::eval`].
#[derive(Debug, Default, Clone)]
pub struct Evaluation {
    pub residuals: Vec<f64>,
    pub residual_jac: Vec<Vec<(usize, f64)>>,
    pub eq: Vec<f64>,
    pub eq_jac: Vec<Vec<(usize, f64)>>,
    pub ineq: Vec<f64>,
    pub ineq_jac: Vec<Vec<(usize, f64)>>,
}

impl Evaluation {
    pub fn sized(problem: &dyn NlpProblem) -> Self {
        let mut ws = Self::default();
        ws.resize(problem);
        ws
    }

    pub fn resize(&mut self, problem: &dyn NlpProblem) {
        self.residuals.resize(problem.n_residuals(), 0.0);
        self.residual_jac.resize(problem.n_residuals(), Vec::new());
        self.eq.resize(problem.n_eq(), 0.0);
        self.eq_jac.resize(problem.n_eq(), Vec::new());
        self.ineq.resize(problem.n_ineq(), 0.0);
        self.ineq_jac.resize(problem.n_ineq(), Vec::new());
    }

    fn all_finite(&self) -> bool {
        let vals = self
            .residuals
            .iter()
            .chain(self.eq.iter())
            .chain(self.ineq.iter());
        if !vals.clone().all(|v| v.is_finite()) {
            return false;
        }
        self.residual_jac
            .iter()
            .chain(self.eq_jac.iter())
            .chain(self.ineq_jac.iter())
            .all(|row| row.iter().all(|(_, v)| v.is_finite()))
    }

    /// l1 constraint violation used by the merit function.
    fn infeasibility(&self) -> f64 {
        self.eq.iter().map(|v| v.abs()).sum::<f64>()
            + self.ineq.iter().map(|v| (-v).max(0.0)).sum::<f64>()
    }
}

/// Objective value at `x` given a completed evaluation.
pub fn objective(problem: &dyn NlpProblem, ws: &Evaluation, x: &[f64]) -> f64 {
    let lsq: f64 = ws.residuals.iter().map(|r| r * r).sum();
    let lin: f64 = problem
        .linear_cost()
        .iter()
        .zip(x)
        .map(|(c, xj)| c * xj)
        .sum();
    lsq + lin
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleQp,
    NumericalError,
}

/// Combined first-order optimality measure.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResidual {
    pub stationarity: f64,
    pub eq_feasibility: f64,
    pub ineq_feasibility: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.eq_feasibility)
            .max(self.ineq_feasibility)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Multipliers of the equality constraints.
    pub eq_mult: Vec<f64>,
    /// Multipliers of the inequality constraints (nonnegative).
    pub ineq_mult: Vec<f64>,
    /// Net bound multipliers (positive at a lower bound, negative at an upper).
    pub bound_mult: Vec<f64>,
    pub kkt: KktResidual,
    pub iterations: usize,
    /// Wall-clock solve time [s].
    pub wall_time: f64,
    pub status: SolveStatus,
    pub diagnostic: Option<String>,
}

impl SolveReport {
    pub fn kkt_residual(&self) -> f64 {
        self.kkt.max()
    }
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone)]
pub struct SqpOptions {
    /// KKT tolerance for convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub ls_contraction: f64,
    pub min_step: f64,
    /// Initial Levenberg damping on the Gauss-Newton Hessian.
    pub init_lambda: f64,
    /// Optional per-solve iterate trace file.
    pub trace_path: Option<std::path::PathBuf>,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            ls_contraction: 0.5,
            min_step: 1e-10,
            init_lambda: 1e-8,
            trace_path: None,
        }
    }
}

/// KKT residual of `(x, multipliers)` given a completed evaluation at `x`.
///
/// Stationarity is measured over free variables; pinned variables
/// (`lo == hi`) carry their own bound multiplier by convention and are
/// excluded.
pub fn kkt_residual(
    problem: &dyn NlpProblem,
    x: &[f64],
    ws: &Evaluation,
    eq_mult: &[f64],
    ineq_mult: &[f64],
    bound_mult: &[f64],
) -> KktResidual {
    let n = problem.n_vars();
    let (lo, hi) = problem.bounds();
    let mut stat = full_gradient(problem, ws);
    for (k, row) in ws.eq_jac.iter().enumerate() {
        for &(j, v) in row {
            stat[j] -= eq_mult[k] * v;
        }
    }
    for (k, row) in ws.ineq_jac.iter().enumerate() {
        for &(j, v) in row {
            stat[j] -= ineq_mult[k] * v;
        }
    }
    for j in 0..n {
        stat[j] -= bound_mult[j];
    }
    let mut stationarity = 0.0f64;
    for j in 0..n {
        if lo[j] == hi[j] {
            continue;
        }
        stationarity = stationarity.max(stat[j].abs());
    }

    let eq_feasibility = ws.eq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut ineq_feasibility = ws.ineq.iter().fold(0.0f64, |m, &v| m.max((-v).max(0.0)));
    // Complementarity entries are scaled by 1/(1 + |multiplier|) so that
    // exact-penalty-sized multipliers do not amplify feasibility noise.
    let mut complementarity = 0.0f64;
    for (k, &l) in ineq_mult.iter().enumerate() {
        complementarity = complementarity.max((l * ws.ineq[k]).abs() / (1.0 + l.abs()));
    }
    for j in 0..n {
        if lo[j] == hi[j] {
            continue;
        }
        if lo[j].is_finite() {
            ineq_feasibility = ineq_feasibility.max(lo[j] - x[j]);
        }
        if hi[j].is_finite() {
            ineq_feasibility = ineq_feasibility.max(x[j] - hi[j]);
        }
        let z = bound_mult[j];
        if z > 0.0 && lo[j].is_finite() {
            complementarity = complementarity.max((z * (x[j] - lo[j])).abs() / (1.0 + z.abs()));
        } else if z < 0.0 && hi[j].is_finite() {
            complementarity = complementarity.max((z * (hi[j] - x[j])).abs() / (1.0 + z.abs()));
        }
    }
    KktResidual {
        stationarity,
        eq_feasibility,
        ineq_feasibility,
        complementarity,
    }
}

/// Solves the NLP from `x0` (projected into the bounds).
pub fn solve(problem: &dyn NlpProblem, x0: &[f64], opts: &SqpOptions) -> SolveReport {
    let start = Instant::now();
    let n = problem.n_vars();
    let (lo, hi) = problem.bounds();
    let mut x: Vec<f64> = x0
        .iter()
        .enumerate()
        .map(|(j, &v)| v.clamp(lo[j], hi[j]))
        .collect();

    let mut ws = Evaluation::sized(problem);
    let mut ws_trial = Evaluation::sized(problem);
    let mut lambda = opts.init_lambda;
    let mut sigma = 1.0f64;
    let mut iterations = 0usize;
    let mut trace = opts
        .trace_path
        .as_ref()
        .and_then(|p| std::fs::File::create(p).ok());

    let report = |x: Vec<f64>,
                  objective: f64,
                  step: Option<&QpStep>,
                  kkt: KktResidual,
                  iterations: usize,
                  status: SolveStatus,
                  diagnostic: Option<String>| {
        SolveReport {
            x,
            objective,
            eq_mult: step.map(|s| s.eq_mult.clone()).unwrap_or_default(),
            ineq_mult: step.map(|s| s.ineq_mult.clone()).unwrap_or_default(),
            bound_mult: step.map(|s| s.bound_mult.clone()).unwrap_or_default(),
            kkt,
            iterations,
            wall_time: start.elapsed().as_secs_f64(),
            status,
            diagnostic,
        }
    };

    let mut fresh = false;
    loop {
        if !fresh {
            problem.eval(&x, &mut ws);
        }
        fresh = false;
        if !ws.all_finite() {
            let dump = format!(
                "non-finite evaluation at iteration {iterations}; x head: {:?}",
                &x[..n.min(8)]
            );
            return report(
                x.clone(),
                f64::NAN,
                None,
                KktResidual::default(),
                iterations,
                SolveStatus::NumericalError,
                Some(dump),
            );
        }
        let f = objective(problem, &ws, &x);

        // QP subproblem, retrying with stronger damping on factorization or
        // degeneracy trouble.
        let mut step = None;
        for _ in 0..12 {
            iterations += 1;
            let s = solve_subproblem(problem, &x, &ws, lambda);
            match s.status {
                QpStatus::Optimal => {
                    step = Some(s);
                    break;
                }
                QpStatus::Infeasible => {
                    return report(
                        x.clone(),
                        f,
                        Some(&s),
                        KktResidual::default(),
                        iterations,
                        SolveStatus::InfeasibleQp,
                        Some("QP subproblem infeasible".into()),
                    );
                }
                QpStatus::NotPositiveDefinite | QpStatus::Degenerate => {
                    lambda = (lambda.max(1e-8)) * 10.0;
                    if lambda > 1e9 {
                        return report(
                            x.clone(),
                            f,
                            None,
                            KktResidual::default(),
                            iterations,
                            SolveStatus::NumericalError,
                            Some("QP subproblem unsolvable at maximum damping".into()),
                        );
                    }
                }
            }
        }
        let Some(step) = step else {
            return report(
                x.clone(),
                f,
                None,
                KktResidual::default(),
                iterations,
                SolveStatus::NumericalError,
                Some("QP retry budget exhausted".into()),
            );
        };

        let kkt = kkt_residual(problem, &x, &ws, &step.eq_mult, &step.ineq_mult, &step.bound_mult);
        if let Some(t) = trace.as_mut() {
            let _ = writeln!(
                t,
                "iter {iterations} f {f:.9e} kkt {:.3e} stat {:.3e} feas {:.3e} compl {:.3e} lambda {lambda:.1e} step {:.3e}",
                kkt.max(),
                kkt.stationarity,
                kkt.eq_feasibility.max(kkt.ineq_feasibility),
                kkt.complementarity,
                step.delta.norm()
            );
        }
        if kkt.max() <= opts.tol {
            return report(x, f, Some(&step), kkt, iterations, SolveStatus::Converged, None);
        }
        if iterations >= opts.max_iter {
            return report(x, f, Some(&step), kkt, iterations, SolveStatus::MaxIter, None);
        }

        // l1-merit backtracking line search along the QP step. Bounds are
        // enforced exactly by the QP, so only equality and inequality
        // multipliers size the penalty.
        let mult_inf = step
            .eq_mult
            .iter()
            .chain(step.ineq_mult.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        sigma = sigma.max(1.5 * mult_inf).max(1.0);
        let infeas0 = ws.infeasibility();
        let phi0 = f + sigma * infeas0;
        let grad = full_gradient(problem, &ws);
        let descent = grad.dot(&step.delta) - sigma * infeas0;
        if descent >= 0.0 {
            lambda = (lambda.max(1e-8)) * 10.0;
            if lambda > 1e9 {
                return report(x, f, Some(&step), kkt, iterations, SolveStatus::MaxIter, None);
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        let mut x_trial = vec![0.0; n];
        while alpha >= opts.min_step {
            for j in 0..n {
                // Projection absorbs QP-tolerance drift off the bounds.
                x_trial[j] = (x[j] + alpha * step.delta[j]).clamp(lo[j], hi[j]);
            }
            problem.eval(&x_trial, &mut ws_trial);
            if ws_trial.all_finite() {
                let phi = objective(problem, &ws_trial, &x_trial) + sigma * ws_trial.infeasibility();
                if phi <= phi0 + 1e-4 * alpha * descent {
                    accepted = true;
                    break;
                }
            }
            alpha *= opts.ls_contraction;
        }
        if !accepted {
            lambda = (lambda.max(1e-8)) * 10.0;
            if lambda > 1e9 {
                return report(x, f, Some(&step), kkt, iterations, SolveStatus::MaxIter, None);
            }
            continue;
        }
        std::mem::swap(&mut x, &mut x_trial);
        std::mem::swap(&mut ws, &mut ws_trial);
        fresh = true;
        if alpha == 1.0 {
            lambda = (lambda * 0.25).max(1e-8);
        }
    }
}

/// Central finite-difference check of all supplied derivatives at `x`.
/// Returns the maximum relative error over the objective gradient and every
/// constraint Jacobian entry; steps are scaled per variable by
/// `h * max(1, |x_j|)`.
pub fn check_derivatives(problem: &dyn NlpProblem, x: &[f64], h: f64) -> f64 {
    let n = problem.n_vars();
    let mut ws = Evaluation::sized(problem);
    problem.eval(x, &mut ws);
    let grad = full_gradient(problem, &ws);
    let dense = |rows: &[Vec<(usize, f64)>]| -> Vec<DVector<f64>> {
        rows.iter()
            .map(|row| {
                let mut v = DVector::zeros(n);
                for &(j, a) in row {
                    v[j] += a;
                }
                v
            })
            .collect()
    };
    let eq_jac = dense(&ws.eq_jac);
    let ineq_jac = dense(&ws.ineq_jac);

    let mut ws_p = Evaluation::sized(problem);
    let mut ws_m = Evaluation::sized(problem);
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for j in 0..n {
        let hj = h * x[j].abs().max(1.0);
        xp[j] = x[j] + hj;
        xm[j] = x[j] - hj;
        problem.eval(&xp, &mut ws_p);
        problem.eval(&xm, &mut ws_m);
        let rel = |analytic: f64, fd: f64| {
            (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
        };
        let fd_obj =
            (objective(problem, &ws_p, &xp) - objective(problem, &ws_m, &xm)) / (2.0 * hj);
        worst = worst.max(rel(grad[j], fd_obj));
        for k in 0..problem.n_eq() {
            let fd = (ws_p.eq[k] - ws_m.eq[k]) / (2.0 * hj);
            worst = worst.max(rel(eq_jac[k][j], fd));
        }
        for k in 0..problem.n_ineq() {
            let fd = (ws_p.ineq[k] - ws_m.ineq[k]) / (2.0 * hj);
            worst = worst.max(rel(ineq_jac[k][j], fd));
        }
        xp[j] = x[j];
        xm[j] = x[j];
    }
    worst
}
