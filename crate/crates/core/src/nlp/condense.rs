//! Structure-exploiting QP subproblem assembly for multiple-shooting NLPs.
//!
//! When a problem declares its shooting structure, the linearized dynamics
//! defects are eliminated by block forward substitution: every state delta
//! becomes an affine function `dx = E dz + e` of the remaining (control and
//! slack) variables `z`, the defect residuals entering through `e`. The QP is
//! then solved densely in the small `z` space and the defect multipliers are
//! recovered by a backward recursion through the same blocks.

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpRow, QpSolution, QpStatus};
use super::{Evaluation, NlpProblem};

/// Location of one shooting chain inside the decision vector.
///
/// The chain owns `(n_stages + 1) * state_dim` consecutive state variables
/// starting at `state_start`, `n_stages` consecutive controls starting at
/// `control_start`, and `state_dim * n_stages` consecutive equality rows
/// starting at `defect_row_start`, each block being
/// `integrate(x_i, u_i[, coupled x_i, coupled u_i]) - x_{i+1}` with an exact
/// negative identity on the `x_{i+1}` block. State variables must be
/// unbounded except the initial state, which is pinned (`lo == hi`).
#[derive(Debug, Clone)]
pub struct ChainLayout {
    pub state_dim: usize,
    pub n_stages: usize,
    pub state_start: usize,
    pub control_start: usize,
    pub defect_row_start: usize,
    /// Chain whose stage states/controls also enter this chain's defects.
    /// Must point to an earlier chain.
    pub coupled_to: Option<usize>,
}

impl ChainLayout {
    fn state_var(&self, stage: usize, comp: usize) -> usize {
        self.state_start + stage * self.state_dim + comp
    }
    fn state_range(&self) -> std::ops::Range<usize> {
        self.state_start..self.state_start + (self.n_stages + 1) * self.state_dim
    }
}

/// Multiple-shooting structure metadata attached to an [`NlpProblem`].
#[derive(Debug, Clone)]
pub struct ShootingStructure {
    pub chains: Vec<ChainLayout>,
}

/// Per-stage defect linearization blocks.
struct StageBlocks {
    /// d defect / d own state.
    a: DMatrix<f64>,
    /// d defect / d own control.
    b: DVector<f64>,
    /// d defect / d coupled state (zero matrix when uncoupled).
    c: DMatrix<f64>,
    /// d defect / d coupled control.
    d: DVector<f64>,
}

/// Outcome of one condensed QP solve, mapped back to the full space.
pub(super) struct QpStep {
    pub delta: DVector<f64>,
    pub eq_mult: Vec<f64>,
    pub ineq_mult: Vec<f64>,
    pub bound_mult: Vec<f64>,
    pub status: QpStatus,
}

/// Maps full-space variables to the condensed `z` space.
struct Condenser<'a> {
    structure: &'a ShootingStructure,
    /// Full index -> z index (None for state variables).
    to_z: Vec<Option<usize>>,
    /// z index -> full index.
    from_z: Vec<usize>,
    /// Full index -> (chain, stage, component) for state variables.
    state_of: Vec<Option<(usize, usize, usize)>>,
    /// Sensitivity rows: sens[chain][stage] is `state_dim x n_z`.
    sens: Vec<Vec<DMatrix<f64>>>,
    /// Offsets: off[chain][stage] is `state_dim`.
    off: Vec<Vec<DVector<f64>>>,
    blocks: Vec<Vec<StageBlocks>>,
}

impl<'a> Condenser<'a> {
    fn new(n: usize, structure: &'a ShootingStructure) -> Self {
        let mut state_of = vec![None; n];
        for (ci, ch) in structure.chains.iter().enumerate() {
            for stage in 0..=ch.n_stages {
                for comp in 0..ch.state_dim {
                    state_of[ch.state_var(stage, comp)] = Some((ci, stage, comp));
                }
            }
        }
        let mut to_z = vec![None; n];
        let mut from_z = Vec::new();
        for j in 0..n {
            if state_of[j].is_none() {
                to_z[j] = Some(from_z.len());
                from_z.push(j);
            }
        }
        Self {
            structure,
            to_z,
            from_z,
            state_of,
            sens: Vec::new(),
            off: Vec::new(),
            blocks: Vec::new(),
        }
    }

    fn n_z(&self) -> usize {
        self.from_z.len()
    }

    /// Forward block substitution through the linearized defects.
    fn roll_out(&mut self, x: &[f64], lo: &[f64], ws: &Evaluation) {
        let n_z = self.n_z();
        self.sens.clear();
        self.off.clear();
        self.blocks.clear();
        for (ci, ch) in self.structure.chains.iter().enumerate() {
            let sd = ch.state_dim;
            let mut sens = Vec::with_capacity(ch.n_stages + 1);
            let mut off = Vec::with_capacity(ch.n_stages + 1);
            let mut blocks = Vec::with_capacity(ch.n_stages);
            sens.push(DMatrix::zeros(sd, n_z));
            // Initial state restoration toward its pin.
            off.push(DVector::from_fn(sd, |k, _| {
                lo[ch.state_var(0, k)] - x[ch.state_var(0, k)]
            }));
            for stage in 0..ch.n_stages {
                let mut blk = StageBlocks {
                    a: DMatrix::zeros(sd, sd),
                    b: DVector::zeros(sd),
                    c: DMatrix::zeros(sd, sd),
                    d: DVector::zeros(sd),
                };
                let coupled = ch.coupled_to.map(|e| &self.structure.chains[e]);
                for comp in 0..sd {
                    let row = &ws.eq_jac[ch.defect_row_start + stage * sd + comp];
                    for &(col, val) in row {
                        if col == ch.control_start + stage {
                            blk.b[comp] = val;
                            continue;
                        }
                        if let Some(ec) = coupled {
                            if col == ec.control_start + stage {
                                blk.d[comp] = val;
                                continue;
                            }
                        }
                        match self.state_of[col] {
                            Some((c2, st, k)) if c2 == ci && st == stage => {
                                blk.a[(comp, k)] = val;
                            }
                            Some((c2, st, k))
                                if Some(c2) == ch.coupled_to && st == stage =>
                            {
                                blk.c[(comp, k)] = val;
                            }
                            Some((c2, st, k)) if c2 == ci && st == stage + 1 => {
                                debug_assert!(
                                    k == comp && (val + 1.0).abs() < 1e-12,
                                    "defect rows must carry -I on the next state"
                                );
                            }
                            _ => panic!("defect row references a variable outside its stage"),
                        }
                    }
                }
                let g_val = DVector::from_fn(sd, |k, _| ws.eq[ch.defect_row_start + stage * sd + k]);
                let mut s_next = &blk.a * &sens[stage];
                let mut o_next = &blk.a * &off[stage] + g_val;
                if let Some(e) = ch.coupled_to {
                    s_next += &blk.c * &self.sens[e][stage];
                    o_next += &blk.c * &self.off[e][stage];
                    let zu = self.to_z[self.structure.chains[e].control_start + stage].unwrap();
                    for comp in 0..sd {
                        s_next[(comp, zu)] += blk.d[comp];
                    }
                }
                let zu = self.to_z[ch.control_start + stage].unwrap();
                for comp in 0..sd {
                    s_next[(comp, zu)] += blk.b[comp];
                }
                sens.push(s_next);
                off.push(o_next);
                blocks.push(blk);
            }
            self.sens.push(sens);
            self.off.push(off);
            self.blocks.push(blocks);
        }
    }

    /// Maps a sparse full-space gradient row into z space, returning the
    /// offset contributed by the defect restoration terms.
    fn map_row(&self, row: &[(usize, f64)], out: &mut DVector<f64>) -> f64 {
        out.fill(0.0);
        let mut offset = 0.0;
        for &(col, val) in row {
            match self.state_of[col] {
                None => out[self.to_z[col].unwrap()] += val,
                Some((ci, stage, comp)) => {
                    out.axpy(val, &self.sens[ci][stage].row(comp).transpose(), 1.0);
                    offset += val * self.off[ci][stage][comp];
                }
            }
        }
        offset
    }

    /// Expands a z-space step to the full space through the sensitivities.
    fn expand(&self, dz: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut dx = DVector::zeros(n);
        for (zi, &full) in self.from_z.iter().enumerate() {
            dx[full] = dz[zi];
        }
        for (ci, ch) in self.structure.chains.iter().enumerate() {
            for stage in 0..=ch.n_stages {
                let v = &self.sens[ci][stage] * dz + &self.off[ci][stage];
                for comp in 0..ch.state_dim {
                    dx[ch.state_var(stage, comp)] = v[comp];
                }
            }
        }
        dx
    }

    /// Recovers the defect multipliers from the stationarity of the state
    /// rows: `w` must hold `grad f - J_ineq' lambda - zeta` in full space.
    fn recover_eq_multipliers(&self, w: &DVector<f64>, n_eq: usize) -> Vec<f64> {
        let mut mu = vec![0.0; n_eq];
        // Reverse order so chains coupled into earlier ones resolve first.
        for (ci, ch) in self.structure.chains.iter().enumerate().rev() {
            let sd = ch.state_dim;
            let nst = ch.n_stages;
            let mut mu_next = DVector::zeros(sd); // multiplier of defect i (for i = stage)
            for stage in (0..nst).rev() {
                // Stationarity of x_{stage+1}.
                let mut m = DVector::from_fn(sd, |k, _| -w[ch.state_var(stage + 1, k)]);
                if stage + 1 < nst {
                    m += self.blocks[ci][stage + 1].a.transpose() * &mu_next;
                    // Coupling contributions from later chains referencing us.
                    for (cj, other) in self.structure.chains.iter().enumerate().skip(ci + 1) {
                        if other.coupled_to == Some(ci) {
                            let mu_other = DVector::from_fn(sd, |k, _| {
                                mu[other.defect_row_start + (stage + 1) * sd + k]
                            });
                            m += self.blocks[cj][stage + 1].c.transpose() * mu_other;
                        }
                    }
                }
                for k in 0..sd {
                    mu[ch.defect_row_start + stage * sd + k] = m[k];
                }
                mu_next = m;
            }
        }
        mu
    }
}

/// Builds and solves the QP subproblem for one SQP iteration.
///
/// `lambda` is the Levenberg damping added to the Gauss-Newton diagonal.
pub(super) fn solve_subproblem(
    problem: &dyn NlpProblem,
    x: &[f64],
    ws: &Evaluation,
    lambda: f64,
) -> QpStep {
    match problem.shooting_structure() {
        Some(structure) => condensed_step(problem, x, ws, lambda, structure),
        None => dense_step(problem, x, ws, lambda),
    }
}

fn diag_floor(h: &mut DMatrix<f64>, lambda: f64) {
    let n = h.nrows();
    let max_diag = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max);
    let floor = (1e-4 * max_diag).max(lambda).max(1e-10);
    for i in 0..n {
        h[(i, i)] += lambda;
        if h[(i, i)] < floor {
            h[(i, i)] = floor;
        }
    }
}

fn condensed_step(
    problem: &dyn NlpProblem,
    x: &[f64],
    ws: &Evaluation,
    lambda: f64,
    structure: &ShootingStructure,
) -> QpStep {
    let n = problem.n_vars();
    let (lo, hi) = problem.bounds();
    let mut cond = Condenser::new(n, structure);
    cond.roll_out(x, lo, ws);
    let n_z = cond.n_z();

    // Gauss-Newton data in z space.
    let mut h = DMatrix::zeros(n_z, n_z);
    let mut g = DVector::zeros(n_z);
    let mut row_z = DVector::zeros(n_z);
    for (k, row) in ws.residual_jac.iter().enumerate() {
        let offset = cond.map_row(row, &mut row_z);
        let adjusted = ws.residuals[k] + offset;
        h.syger(2.0, &row_z, &row_z, 1.0);
        g.axpy(2.0 * adjusted, &row_z, 1.0);
    }
    let linear = problem.linear_cost();
    if !linear.is_empty() {
        let lin_row: Vec<(usize, f64)> = linear
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, &v)| (j, v))
            .collect();
        cond.map_row(&lin_row, &mut row_z);
        g += &row_z;
    }
    diag_floor(&mut h, lambda);

    // Inequalities, then bounds of z variables.
    let mut rows = Vec::new();
    let mut origins = Vec::new();
    for (k, row) in ws.ineq_jac.iter().enumerate() {
        let offset = cond.map_row(row, &mut row_z);
        rows.push(QpRow {
            coeffs: row_z
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, v)| (j, *v))
                .collect(),
            rhs: -(ws.ineq[k] + offset),
        });
        origins.push(RowOrigin::Ineq(k));
    }
    for (zi, &full) in cond.from_z.iter().enumerate() {
        if lo[full].is_finite() {
            rows.push(QpRow {
                coeffs: vec![(zi, 1.0)],
                rhs: lo[full] - x[full],
            });
            origins.push(RowOrigin::BoundLo(full));
        }
        if hi[full].is_finite() {
            rows.push(QpRow {
                coeffs: vec![(zi, -1.0)],
                rhs: x[full] - hi[full],
            });
            origins.push(RowOrigin::BoundHi(full));
        }
    }

    let sol = solve_qp(&h, &g, &rows, 0);
    let (ineq_mult, bound_mult) = scatter_multipliers(&sol, &origins, problem.n_ineq(), n);
    let delta = cond.expand(&sol.x, n);

    // Full-space stationarity ingredients for the defect multipliers.
    let mut w = full_gradient(problem, ws);
    for (k, row) in ws.ineq_jac.iter().enumerate() {
        for &(col, val) in row {
            w[col] -= ineq_mult[k] * val;
        }
    }
    for j in 0..n {
        w[j] -= bound_mult[j];
    }
    let eq_mult = cond.recover_eq_multipliers(&w, problem.n_eq());

    QpStep {
        delta,
        eq_mult,
        ineq_mult,
        bound_mult,
        status: sol.status,
    }
}

fn dense_step(problem: &dyn NlpProblem, x: &[f64], ws: &Evaluation, lambda: f64) -> QpStep {
    let n = problem.n_vars();
    let (lo, hi) = problem.bounds();

    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut dense_row = DVector::zeros(n);
    for (k, row) in ws.residual_jac.iter().enumerate() {
        dense_row.fill(0.0);
        for &(j, v) in row {
            dense_row[j] += v;
        }
        h.syger(2.0, &dense_row, &dense_row, 1.0);
        g.axpy(2.0 * ws.residuals[k], &dense_row, 1.0);
    }
    for (j, &c) in problem.linear_cost().iter().enumerate() {
        g[j] += c;
    }
    diag_floor(&mut h, lambda);

    let mut rows = Vec::new();
    let mut origins = Vec::new();
    for (k, row) in ws.eq_jac.iter().enumerate() {
        rows.push(QpRow {
            coeffs: row.clone(),
            rhs: -ws.eq[k],
        });
        origins.push(RowOrigin::Eq(k));
    }
    let meq = rows.len();
    for (k, row) in ws.ineq_jac.iter().enumerate() {
        rows.push(QpRow {
            coeffs: row.clone(),
            rhs: -ws.ineq[k],
        });
        origins.push(RowOrigin::Ineq(k));
    }
    for j in 0..n {
        if lo[j] == hi[j] {
            // Pinned variable: keep it exactly on its pin.
            rows.insert(
                meq,
                QpRow {
                    coeffs: vec![(j, 1.0)],
                    rhs: lo[j] - x[j],
                },
            );
            origins.insert(meq, RowOrigin::Pin(j));
            continue;
        }
        if lo[j].is_finite() {
            rows.push(QpRow {
                coeffs: vec![(j, 1.0)],
                rhs: lo[j] - x[j],
            });
            origins.push(RowOrigin::BoundLo(j));
        }
        if hi[j].is_finite() {
            rows.push(QpRow {
                coeffs: vec![(j, -1.0)],
                rhs: x[j] - hi[j],
            });
            origins.push(RowOrigin::BoundHi(j));
        }
    }
    let meq = origins
        .iter()
        .filter(|o| matches!(o, RowOrigin::Eq(_) | RowOrigin::Pin(_)))
        .count();

    let sol = solve_qp(&h, &g, &rows, meq);
    let (ineq_mult, bound_mult) = scatter_multipliers(&sol, &origins, problem.n_ineq(), n);
    let mut eq_mult = vec![0.0; problem.n_eq()];
    for (i, origin) in origins.iter().enumerate() {
        if let RowOrigin::Eq(k) = origin {
            eq_mult[*k] = sol.multipliers[i];
        }
    }
    QpStep {
        delta: sol.x,
        eq_mult,
        ineq_mult,
        bound_mult,
        status: sol.status,
    }
}

enum RowOrigin {
    Eq(usize),
    Pin(usize),
    Ineq(usize),
    BoundLo(usize),
    BoundHi(usize),
}

fn scatter_multipliers(
    sol: &QpSolution,
    origins: &[RowOrigin],
    n_ineq: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ineq_mult = vec![0.0; n_ineq];
    let mut bound_mult = vec![0.0; n];
    for (i, origin) in origins.iter().enumerate() {
        match origin {
            RowOrigin::Ineq(k) => ineq_mult[*k] = sol.multipliers[i],
            RowOrigin::BoundLo(j) => bound_mult[*j] += sol.multipliers[i],
            RowOrigin::BoundHi(j) => bound_mult[*j] -= sol.multipliers[i],
            RowOrigin::Pin(j) => bound_mult[*j] += sol.multipliers[i],
            RowOrigin::Eq(_) => {}
        }
    }
    (ineq_mult, bound_mult)
}

/// `grad f = 2 J_r' r + c` assembled in the full space.
pub(super) fn full_gradient(problem: &dyn NlpProblem, ws: &Evaluation) -> DVector<f64> {
    let n = problem.n_vars();
    let mut grad = DVector::zeros(n);
    for (k, row) in ws.residual_jac.iter().enumerate() {
        for &(j, v) in row {
            grad[j] += 2.0 * ws.residuals[k] * v;
        }
    }
    for (j, &c) in problem.linear_cost().iter().enumerate() {
        grad[j] += c;
    }
    grad
}
