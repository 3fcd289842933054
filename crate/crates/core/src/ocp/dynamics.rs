//! Controller-side longitudinal model with analytic sensitivities.
//!
//! The planner integrates one or two coupled trucks over a stage with fixed
//! gear, grade from the Legendre preview, and drafting drag evaluated at the
//! predicted gap. Stage maps and their Jacobians are produced by propagating
//! forward sensitivities through the same RK4 scheme, so every derivative the
//! NLP sees is the exact derivative of the discrete dynamics.

use crate::powertrain::DragReductionModel;
use crate::road::LegendrePreview;

/// Maximum joint dimensions: two trucks, three states and one control each.
pub const MAX_NX: usize = 6;
pub const MAX_NIN: usize = 8;

/// A leader position trajectory sampled on the stage grid, extended linearly
/// beyond its last point.
#[derive(Debug, Clone)]
pub struct PlannedPath {
    /// Positions at stage times `i * dt` [m].
    pub positions: Vec<f64>,
    /// Stage duration [s].
    pub dt: f64,
}

impl PlannedPath {
    /// Position at stage `i`; stages past the plan's last point extrapolate
    /// with the final segment slope (the plan carries `N` points but the
    /// horizon has `N + 1` stage boundaries).
    pub fn at_stage(&self, i: usize) -> f64 {
        self.at_time(i as f64 * self.dt)
    }

    /// Position at an arbitrary in-horizon time, linear between stage points
    /// and extrapolated with the edge slopes.
    pub fn at_time(&self, t: f64) -> f64 {
        let n = self.positions.len();
        if n == 1 {
            return self.positions[0];
        }
        let idx = (t / self.dt).floor();
        let i = (idx.max(0.0) as usize).min(n - 2);
        let frac = t / self.dt - i as f64;
        self.positions[i] + frac * (self.positions[i + 1] - self.positions[i])
    }
}

/// What, if anything, a modeled truck is drafting behind.
#[derive(Debug, Clone)]
pub enum LeaderRef {
    /// Free air: full drag.
    None,
    /// Gap to a communicated leader plan (solo follower problems).
    Data(PlannedPath),
    /// Gap to the preceding chain's decision-variable trajectory (joint
    /// problems); valid only for the second truck of a pair.
    Coupled,
}

/// Per-truck model constants frozen for one solve.
#[derive(Debug, Clone)]
pub struct TruckModel {
    pub m: f64,
    /// Effective mass at the frozen gear [kg].
    pub m_e: f64,
    pub tau_d: f64,
    /// Lumped drag coefficient `0.5 rho A_f C_D` [kg/m].
    pub c_aero: f64,
    pub c_r: f64,
    pub grav: f64,
    pub preview: LegendrePreview,
    pub drag: DragReductionModel,
    pub leader: LeaderRef,
    /// Length of the truck ahead [m] (gap = leader position - length - own).
    pub leader_length: f64,
}

impl TruckModel {
    /// Longitudinal force balance at `(s, v, a_t)` given the drafting gap
    /// source; returns `dv` and the partials needed by the planner.
    fn accel_terms(&self, s: f64, v: f64, a_t: f64, gap: Option<(f64, f64)>) -> AccelTerms {
        let (alpha, dalpha_ds) = self.preview.eval_with_deriv(s);
        let (beta, dbeta_dgap, dgap_dself) = match gap {
            None => (1.0, 0.0, 0.0),
            Some((d, dgap_dself)) => {
                let dc = d.clamp(0.0, self.drag.gap_max);
                let (b, db) = self.drag.eval_with_deriv(dc);
                let db = if d <= 0.0 || d >= self.drag.gap_max { 0.0 } else { db };
                (b, db, dgap_dself)
            }
        };
        let f_a = self.c_aero * beta * v * v;
        let f_r = self.m * self.grav * (self.c_r * alpha.cos() + alpha.sin());
        let dv = (self.m * a_t - f_a - f_r) / self.m_e;
        let df_r_ds = self.m * self.grav * (alpha.cos() - self.c_r * alpha.sin()) * dalpha_ds;
        AccelTerms {
            dv,
            ddv_ds_self: (-self.c_aero * v * v * dbeta_dgap * dgap_dself - df_r_ds) / self.m_e,
            ddv_ds_lead: -self.c_aero * v * v * dbeta_dgap / self.m_e,
            ddv_dv: -2.0 * self.c_aero * beta * v / self.m_e,
            ddv_da: self.m / self.m_e,
        }
    }
}

struct AccelTerms {
    dv: f64,
    /// d(dv)/d(own position), via grade and the gap's own-position slope.
    ddv_ds_self: f64,
    /// d(dv)/d(leading chain position); zero unless coupled.
    ddv_ds_lead: f64,
    ddv_dv: f64,
    ddv_da: f64,
}

/// Right-hand side and Jacobians of the joint system at time `t` (relative
/// to the solve start). States are `[s, v, a_t]` per truck in chain order;
/// inputs are one commanded acceleration per truck.
fn rhs_jac(
    models: &[TruckModel],
    t: f64,
    x: &[f64; MAX_NX],
    u: &[f64],
    dx: &mut [f64; MAX_NX],
    fx: &mut [[f64; MAX_NX]; MAX_NX],
    fu: &mut [[f64; 2]; MAX_NX],
) {
    let nx = 3 * models.len();
    for r in 0..nx {
        dx[r] = 0.0;
        for c in 0..nx {
            fx[r][c] = 0.0;
        }
        fu[r] = [0.0, 0.0];
    }
    for (k, model) in models.iter().enumerate() {
        let (s, v, a_t) = (x[3 * k], x[3 * k + 1], x[3 * k + 2]);
        let gap = match &model.leader {
            LeaderRef::None => None,
            LeaderRef::Data(path) => Some((path.at_time(t) - model.leader_length - s, -1.0)),
            LeaderRef::Coupled => {
                debug_assert!(k == 1, "coupled drag needs a preceding chain");
                Some((x[0] - model.leader_length - s, -1.0))
            }
        };
        let terms = model.accel_terms(s, v, a_t, gap);
        let b = 3 * k;
        dx[b] = v;
        dx[b + 1] = terms.dv;
        dx[b + 2] = (u[k] - a_t) / model.tau_d;

        fx[b][b + 1] = 1.0;
        fx[b + 1][b] = terms.ddv_ds_self;
        fx[b + 1][b + 1] = terms.ddv_dv;
        fx[b + 1][b + 2] = terms.ddv_da;
        if matches!(model.leader, LeaderRef::Coupled) {
            fx[b + 1][0] = terms.ddv_ds_lead;
        }
        fx[b + 2][b + 2] = -1.0 / model.tau_d;
        fu[b + 2][k] = 1.0 / model.tau_d;
    }
}

/// Result of one stage integration: end state and its sensitivity to the
/// stage-start state and controls, `sens[r][c]` over columns
/// `[x_0 .. x_{nx-1}, u_0 .. u_{nu-1}]`.
pub struct StageMap {
    pub x_end: [f64; MAX_NX],
    pub sens: [[f64; MAX_NIN]; MAX_NX],
}

/// Integrates the joint system over one stage of duration `dt` with
/// `n_nodes` RK4 substeps starting at stage time `t0`, propagating exact
/// forward sensitivities through the scheme.
pub fn integrate_stage(
    models: &[TruckModel],
    t0: f64,
    x0: &[f64],
    u: &[f64],
    dt: f64,
    n_nodes: usize,
) -> StageMap {
    let nx = 3 * models.len();
    let nu = models.len();
    let nin = nx + nu;

    let mut x = [0.0; MAX_NX];
    x[..nx].copy_from_slice(x0);
    // sens = [I | 0] over [x; u] columns.
    let mut sens = [[0.0; MAX_NIN]; MAX_NX];
    for r in 0..nx {
        sens[r][r] = 1.0;
    }

    let h = dt / n_nodes as f64;
    let mut dx = [0.0; MAX_NX];
    let mut fx = [[0.0; MAX_NX]; MAX_NX];
    let mut fu = [[0.0; 2]; MAX_NX];
    let mut k_st = [[0.0; MAX_NX]; 4];
    let mut k_sens = [[[0.0; MAX_NIN]; MAX_NX]; 4];
    let mut xs = [0.0; MAX_NX];
    let mut ss = [[0.0; MAX_NIN]; MAX_NX];

    for node in 0..n_nodes {
        let t_node = t0 + node as f64 * h;
        for (stage, (c_t, c_prev)) in [(0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            // Stage state and stage sensitivity.
            for r in 0..nx {
                xs[r] = x[r];
                ss[r][..nin].copy_from_slice(&sens[r][..nin]);
            }
            if stage > 0 {
                for r in 0..nx {
                    xs[r] += h * c_prev * k_st[stage - 1][r];
                    for c in 0..nin {
                        ss[r][c] += h * c_prev * k_sens[stage - 1][r][c];
                    }
                }
            }
            rhs_jac(models, t_node + c_t * h, &xs, u, &mut dx, &mut fx, &mut fu);
            k_st[stage][..nx].copy_from_slice(&dx[..nx]);
            // K = fx * ss + fu * [0 | I]
            for r in 0..nx {
                for c in 0..nin {
                    let mut acc = 0.0;
                    for m in 0..nx {
                        acc += fx[r][m] * ss[m][c];
                    }
                    k_sens[stage][r][c] = acc;
                }
                for j in 0..nu {
                    k_sens[stage][r][nx + j] += fu[r][j];
                }
            }
        }
        for r in 0..nx {
            x[r] += h / 6.0
                * (k_st[0][r] + 2.0 * k_st[1][r] + 2.0 * k_st[2][r] + k_st[3][r]);
            for c in 0..nin {
                sens[r][c] += h / 6.0
                    * (k_sens[0][r][c]
                        + 2.0 * k_sens[1][r][c]
                        + 2.0 * k_sens[2][r][c]
                        + k_sens[3][r][c]);
            }
        }
    }
    StageMap { x_end: x, sens }
}

/// Value-only variant used for rollouts and initial guesses.
pub fn integrate_stage_values(
    models: &[TruckModel],
    t0: f64,
    x0: &[f64],
    u: &[f64],
    dt: f64,
    n_nodes: usize,
) -> [f64; MAX_NX] {
    let nx = 3 * models.len();
    let mut x = [0.0; MAX_NX];
    x[..nx].copy_from_slice(x0);
    let h = dt / n_nodes as f64;
    let mut dx = [0.0; MAX_NX];
    let mut fx = [[0.0; MAX_NX]; MAX_NX];
    let mut fu = [[0.0; 2]; MAX_NX];
    let mut k_st = [[0.0; MAX_NX]; 4];
    let mut xs = [0.0; MAX_NX];
    for node in 0..n_nodes {
        let t_node = t0 + node as f64 * h;
        for (stage, (c_t, c_prev)) in [(0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            xs[..nx].copy_from_slice(&x[..nx]);
            if stage > 0 {
                for r in 0..nx {
                    xs[r] += h * c_prev * k_st[stage - 1][r];
                }
            }
            rhs_jac(models, t_node + c_t * h, &xs, u, &mut dx, &mut fx, &mut fu);
            k_st[stage][..nx].copy_from_slice(&dx[..nx]);
        }
        for r in 0..nx {
            x[r] += h / 6.0
                * (k_st[0][r] + 2.0 * k_st[1][r] + 2.0 * k_st[2][r] + k_st[3][r]);
        }
    }
    x
}

/// Equilibrium tractive acceleration holding `(s, v)` on the previewed grade.
pub fn equilibrium_accel(model: &TruckModel, s: f64, v: f64, gap: Option<f64>) -> f64 {
    let alpha = model.preview.eval(s);
    let beta = match gap {
        Some(d) => model.drag.eval(d.clamp(0.0, model.drag.gap_max)),
        None => 1.0,
    };
    let f_a = model.c_aero * beta * v * v;
    let f_r = model.m * model.grav * (model.c_r * alpha.cos() + alpha.sin());
    (f_a + f_r) / model.m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powertrain::{fit_drag_reduction, DRAG_DATA};
    use crate::road::LegendrePreview;
    use approx::assert_relative_eq;

    fn flat_preview() -> LegendrePreview {
        LegendrePreview {
            c: [0.0; 4],
            s_start: 0.0,
            s_plus: 1000.0,
        }
    }

    fn model(leader: LeaderRef) -> TruckModel {
        TruckModel {
            m: 38_000.0,
            m_e: 38_000.0 * 1.0425,
            tau_d: 0.4,
            c_aero: 0.5 * 1.2 * 10.0 * 0.6,
            c_r: 0.007,
            grav: 9.81,
            preview: flat_preview(),
            drag: fit_drag_reduction(&DRAG_DATA).unwrap().model,
            leader,
            leader_length: 18.0,
        }
    }

    /// Finite-difference check of the stage sensitivities for the coupled
    /// two-truck map.
    #[test]
    fn stage_sensitivities_match_finite_differences() {
        let models = vec![model(LeaderRef::None), model(LeaderRef::Coupled)];
        let x0 = [50.0, 24.0, 0.1, 10.0, 25.5, -0.05];
        let u = [0.15, -0.1];
        let map = integrate_stage(&models, 0.0, &x0, &u, 0.5, 10);
        let h = 1e-6;
        for col in 0..8 {
            let mut xp = x0;
            let mut xm = x0;
            let mut up = u;
            let mut um = u;
            if col < 6 {
                xp[col] += h;
                xm[col] -= h;
            } else {
                up[col - 6] += h;
                um[col - 6] -= h;
            }
            let fp = integrate_stage_values(&models, 0.0, &xp, &up, 0.5, 10);
            let fm = integrate_stage_values(&models, 0.0, &xm, &um, 0.5, 10);
            for r in 0..6 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!(
                    (map.sens[r][col] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                    "sens[{r}][{col}] = {} vs fd {}",
                    map.sens[r][col],
                    fd
                );
            }
        }
        // Ego rows must not depend on follower variables.
        for r in 0..3 {
            for c in 3..6 {
                assert_eq!(map.sens[r][c], 0.0);
            }
            assert_eq!(map.sens[r][7], 0.0);
        }
    }

    #[test]
    fn planned_path_interpolates_and_extrapolates() {
        let path = PlannedPath {
            positions: vec![0.0, 10.0, 20.0],
            dt: 0.5,
        };
        assert_relative_eq!(path.at_time(0.25), 5.0);
        assert_relative_eq!(path.at_time(1.0), 20.0);
        // Beyond the end: last segment slope.
        assert_relative_eq!(path.at_time(1.5), 30.0);
    }

    #[test]
    fn equilibrium_holds_speed() {
        let m = model(LeaderRef::None);
        let u_eq = equilibrium_accel(&m, 100.0, 25.0, None);
        let x0 = [100.0, 25.0, u_eq];
        let end = integrate_stage_values(&[m], 0.0, &x0, &[u_eq], 0.5, 10);
        assert_relative_eq!(end[1], 25.0, epsilon = 1e-9);
    }
}
