//! Dense convex quadratic programming by the dual active-set method of
//! Goldfarb and Idnani.
//!
//! Solves `min 1/2 x' H x + g' x` subject to a row list whose first `meq`
//! rows are equalities `a' x = b` and whose remainder are inequalities
//! `a' x >= b`. `H` must be positive definite. The method starts from the
//! unconstrained minimizer and adds violated constraints one at a time, so no
//! feasible starting point is required; an infeasible problem is detected as
//! an unbounded dual step.

use nalgebra::{DMatrix, DVector};

/// One linear constraint `a' x (=|>=) b` in sparse form.
#[derive(Debug, Clone)]
pub struct QpRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl QpRow {
    pub fn dot(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    fn dense(&self, n: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        for &(j, a) in &self.coeffs {
            v[j] += a;
        }
        v
    }

    fn norm(&self) -> f64 {
        self.coeffs.iter().map(|&(_, a)| a * a).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// The constraints admit no solution (dual became unbounded).
    Infeasible,
    /// Iteration cap hit; the active set cycled or the problem is degenerate.
    Degenerate,
    /// H was not positive definite.
    NotPositiveDefinite,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per row: equalities signed, inequalities nonnegative.
    pub multipliers: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

const VIOLATION_TOL: f64 = 1e-10;
const Z_TOL: f64 = 1e-12;

/// Solves the QP; see module docs. Deterministic: ties in constraint
/// selection break toward the lowest row index.
pub fn solve_qp(h: &DMatrix<f64>, g: &DVector<f64>, rows: &[QpRow], meq: usize) -> QpSolution {
    let n = g.len();
    let m = rows.len();

    let fail = |status: QpStatus| QpSolution {
        x: DVector::zeros(n),
        multipliers: vec![0.0; m],
        status,
        iterations: 0,
    };

    let Some(chol) = h.clone().cholesky() else {
        return fail(QpStatus::NotPositiveDefinite);
    };

    // Normalized constraint normals; remember scales to restore multipliers.
    let mut normals: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    let mut scale = Vec::with_capacity(m);
    for row in rows {
        let nrm = row.norm();
        if nrm <= 0.0 {
            // Empty row: 0 >= b. Violated only if b > 0, which no caller builds.
            normals.push(DVector::zeros(n));
            rhs.push(row.rhs);
            scale.push(1.0);
            continue;
        }
        normals.push(row.dense(n) / nrm);
        rhs.push(row.rhs / nrm);
        scale.push(nrm);
    }

    // Unconstrained minimizer and the inverse-Cholesky operator J = L^-T.
    let mut x = chol.solve(&(-g));
    let mut j_op = DMatrix::identity(n, n);
    chol.l().transpose().solve_upper_triangular_mut(&mut j_op);

    let mut r_mat = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut flipped = vec![false; m];
    let mut u: Vec<f64> = Vec::new();

    let max_iter = 50 * (n + m + 10);
    let mut iterations = 0;

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return QpSolution {
                x,
                multipliers: vec![0.0; m],
                status: QpStatus::Degenerate,
                iterations,
            };
        }

        // Pick the next constraint to enforce: pending equalities first (in
        // order), then the most violated inequality.
        let mut p = None;
        for eq in 0..meq {
            if !active.contains(&eq) {
                p = Some(eq);
                break;
            }
        }
        if p.is_none() {
            let mut worst = -VIOLATION_TOL;
            for (i, row_n) in normals.iter().enumerate().skip(meq) {
                if active.contains(&i) {
                    continue;
                }
                let s = row_n.dot(&x) - rhs[i];
                if s < worst {
                    worst = s;
                    p = Some(i);
                }
            }
        }
        let Some(p) = p else {
            break; // all satisfied: optimal
        };

        let mut np = normals[p].clone();
        let mut bp = rhs[p];
        if p < meq {
            // Orient the equality so it is approached from the violated side.
            let s = np.dot(&x) - bp;
            if s > 0.0 {
                np = -np;
                bp = -bp;
                flipped[p] = true;
            }
        }
        let mut s = np.dot(&x) - bp;
        let mut u_p = 0.0f64;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return QpSolution {
                    x,
                    multipliers: vec![0.0; m],
                    status: QpStatus::Degenerate,
                    iterations,
                };
            }
            let q = active.len();
            let d = j_op.transpose() * &np;

            // Primal step direction in the null space of the active normals.
            let mut z = DVector::zeros(n);
            for k in q..n {
                z.axpy(d[k], &j_op.column(k).into_owned(), 1.0);
            }
            // Dual step direction r = R^-1 d1.
            let mut r_dir = vec![0.0; q];
            for i in (0..q).rev() {
                let mut acc = d[i];
                for k in i + 1..q {
                    acc -= r_mat[(i, k)] * r_dir[k];
                }
                r_dir[i] = acc / r_mat[(i, i)];
            }

            // Longest dual step keeping all inequality multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut k_drop = None;
            for k in 0..q {
                if active[k] < meq {
                    continue; // equalities are never dropped
                }
                if r_dir[k] > 1e-14 {
                    let t = u[k] / r_dir[k];
                    if t < t1 {
                        t1 = t;
                        k_drop = Some(k);
                    }
                }
            }

            let ztnp = z.dot(&np);
            let z_nonzero = z.norm() > Z_TOL * (1.0 + d.norm());
            let t2 = if z_nonzero && ztnp.abs() > 0.0 {
                -s / ztnp
            } else {
                f64::INFINITY
            };

            if !z_nonzero && t1.is_infinite() {
                return QpSolution {
                    x,
                    multipliers: vec![0.0; m],
                    status: QpStatus::Infeasible,
                    iterations,
                };
            }

            if t2.is_infinite() {
                // Pure dual step.
                let t = t1;
                for k in 0..q {
                    u[k] -= t * r_dir[k];
                }
                u_p += t;
                drop_constraint(&mut active, &mut u, &mut r_mat, &mut j_op, k_drop.unwrap());
                continue;
            }

            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for k in 0..q {
                u[k] -= t * r_dir[k];
            }
            u_p += t;
            s = np.dot(&x) - bp;

            if t == t2 && t2 <= t1 {
                // Full step: p becomes active.
                add_constraint(&mut r_mat, &mut j_op, &d, q);
                active.push(p);
                u.push(u_p);
                continue 'outer;
            }
            // Partial step: drop the blocking constraint, stay on p.
            drop_constraint(&mut active, &mut u, &mut r_mat, &mut j_op, k_drop.unwrap());
        }
    }

    let mut multipliers = vec![0.0; m];
    for (k, &idx) in active.iter().enumerate() {
        let mult = u[k] / scale[idx];
        multipliers[idx] = if flipped[idx] { -mult } else { mult };
    }
    QpSolution {
        x,
        multipliers,
        status: QpStatus::Optimal,
        iterations,
    }
}

/// Rotates `d[q+1..n]` to zero with Givens rotations applied to the columns
/// of `j_op`; the first `q+1` entries of the rotated `d` become the new
/// column of `R`.
fn add_constraint(r_mat: &mut DMatrix<f64>, j_op: &mut DMatrix<f64>, d: &DVector<f64>, q: usize) {
    let n = d.len();
    let mut d = d.clone();
    for i in (q + 1..n).rev() {
        let (c, s_rot) = givens(d[i - 1], d[i]);
        let di = c * d[i - 1] + s_rot * d[i];
        d[i - 1] = di;
        d[i] = 0.0;
        rotate_columns(j_op, i - 1, i, c, s_rot);
    }
    for i in 0..=q {
        r_mat[(i, q)] = d[i];
    }
}

/// Removes active constraint at position `l`, shifting the later columns of
/// `R` left and re-triangularizing.
fn drop_constraint(
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    r_mat: &mut DMatrix<f64>,
    j_op: &mut DMatrix<f64>,
    l: usize,
) {
    let q = active.len();
    active.remove(l);
    u.remove(l);
    for col in l..q - 1 {
        for row in 0..=col + 1 {
            r_mat[(row, col)] = r_mat[(row, col + 1)];
        }
    }
    for row in 0..q {
        r_mat[(row, q - 1)] = 0.0;
    }
    // Chase the subdiagonal introduced by the shift.
    for jcol in l..q - 1 {
        let a = r_mat[(jcol, jcol)];
        let b = r_mat[(jcol + 1, jcol)];
        if b == 0.0 {
            continue;
        }
        let (c, s_rot) = givens(a, b);
        for col in jcol..q - 1 {
            let top = r_mat[(jcol, col)];
            let bot = r_mat[(jcol + 1, col)];
            r_mat[(jcol, col)] = c * top + s_rot * bot;
            r_mat[(jcol + 1, col)] = -s_rot * top + c * bot;
        }
        r_mat[(jcol + 1, jcol)] = 0.0;
        rotate_columns(j_op, jcol, jcol + 1, c, s_rot);
    }
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0)
    } else {
        (a / h, b / h)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, k: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let a = m[(row, i)];
        let b = m[(row, k)];
        m[(row, i)] = c * a + s * b;
        m[(row, k)] = -s * a + c * b;
    }
}
