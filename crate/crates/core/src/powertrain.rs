//! Longitudinal vehicle, engine, gearbox, drag, rolling-resistance, and fuel
//! models for a single heavy truck.
//!
//! Forces follow the wheel-force balance `m_e(i) dv/dt = m a_t - F_a(d) - F_r(s)`
//! with gear-dependent effective mass, a first-order lag between the commanded
//! tractive acceleration `u` and the applied acceleration `a_t`, and a
//! two-exponential drag-reduction factor `beta(d)` when drafting behind
//! another truck.

use serde::{Deserialize, Serialize};

use crate::road::{GradeProfile, LegendrePreview};
use crate::{Error, Result};

/// Speed guard in the engine-power bound, avoids division by zero at standstill [m/s].
pub const V_EPS: f64 = 0.1;

/// Drafting drag-reduction factors by inter-vehicle gap, identified on a test
/// track: `(gap [m], beta [-])`.
pub const DRAG_DATA: [(f64, f64); 9] = [
    (15.0, 0.90497),
    (20.0, 0.91298),
    (30.0, 0.92834),
    (40.0, 0.93729),
    (50.0, 0.94624),
    (60.0, 0.95519),
    (70.0, 0.96415),
    (80.0, 0.97310),
    (100.0, 0.99100),
];

/// Willans-line fuel model parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FuelParams {
    /// Indicated (Willans) efficiency [-].
    pub willans_eff: f64,
    /// Lower heating value of the fuel [J/kg].
    pub lhv: f64,
    /// Idle/friction fuel power offset [W].
    pub p_idle: f64,
}

impl Default for FuelParams {
    fn default() -> Self {
        Self {
            willans_eff: 0.40,
            lhv: 42.5e6,
            p_idle: 15.0e3,
        }
    }
}

/// Two-exponential drag-reduction fit `beta(d) = A exp(B d) + C exp(D d)`,
/// valid while following within `[0, gap_max]`; unity outside.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DragReductionModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d_coef: f64,
    /// Upper validity gap of the drafting envelope [m].
    pub gap_max: f64,
}

impl DragReductionModel {
    /// Raw two-exponential value without branch or clamp.
    fn raw(&self, d: f64) -> f64 {
        self.a * (self.b * d).exp() + self.c * (self.d_coef * d).exp()
    }

    /// Drag-reduction factor at gap `d`, clamped to at most 1 inside the
    /// drafting envelope and exactly 1 beyond it.
    pub fn eval(&self, d: f64) -> f64 {
        if d > self.gap_max {
            1.0
        } else {
            self.raw(d.max(0.0)).min(1.0)
        }
    }

    /// Value and derivative d(beta)/d(gap) with the same branch/clamp rules.
    /// The derivative is zero outside the envelope and on the unity clamp.
    pub fn eval_with_deriv(&self, d: f64) -> (f64, f64) {
        if d > self.gap_max {
            return (1.0, 0.0);
        }
        let dc = d.max(0.0);
        let ea = self.a * (self.b * dc).exp();
        let ec = self.c * (self.d_coef * dc).exp();
        let val = ea + ec;
        if val >= 1.0 || d < 0.0 {
            (val.min(1.0), 0.0)
        } else {
            (val, self.b * ea + self.d_coef * ec)
        }
    }
}

/// Result of a drag-reduction least-squares fit.
#[derive(Debug, Clone, Copy)]
pub struct DragFit {
    pub model: DragReductionModel,
    /// Root-mean-square residual over the fitted data [-].
    pub rmse: f64,
    pub iterations: usize,
}

fn drag_residuals(p: &[f64; 4], data: &[(f64, f64)]) -> Vec<f64> {
    data.iter()
        .map(|&(d, y)| p[0] * (p[1] * d).exp() + p[2] * (p[3] * d).exp() - y)
        .collect()
}

/// Levenberg-damped Gauss-Newton polish from a seed; returns (params, cost, iters).
fn drag_lm(seed: [f64; 4], data: &[(f64, f64)]) -> ([f64; 4], f64, usize) {
    let sq_sum = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut p = seed;
    let mut lambda = 1e-3;
    let mut r = drag_residuals(&p, data);
    let mut cost = sq_sum(&r);
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        // Jacobian rows: [e^{Bd}, A d e^{Bd}, e^{Dd}, C d e^{Dd}]
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (k, &(d, _)) in data.iter().enumerate() {
            let eb = (p[1] * d).exp();
            let ed = (p[3] * d).exp();
            let row = [eb, p[0] * d * eb, ed, p[2] * d * ed];
            for i in 0..4 {
                jtr[i] += row[i] * r[k];
                for j in 0..4 {
                    jtj[i][j] += row[i] * row[j];
                }
            }
        }
        if jtr.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-14 {
            break;
        }
        let mut step = None;
        for _ in 0..40 {
            let mut m = nalgebra::Matrix4::zeros();
            let mut rhs = nalgebra::Vector4::zeros();
            for i in 0..4 {
                rhs[i] = -jtr[i];
                for j in 0..4 {
                    m[(i, j)] = jtj[i][j];
                }
                m[(i, i)] += lambda * jtj[i][i].max(1e-12);
            }
            let Some(dx) = m.lu().solve(&rhs) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [p[0] + dx[0], p[1] + dx[1], p[2] + dx[2], p[3] + dx[3]];
            let tr = drag_residuals(&trial, data);
            let tc = sq_sum(&tr);
            if tc < cost {
                p = trial;
                r = tr;
                cost = tc;
                lambda = (lambda * 0.3).max(1e-12);
                step = Some(dx.amax());
                break;
            }
            lambda *= 10.0;
        }
        match step {
            Some(s) if s < 1e-13 => break,
            Some(_) => {}
            None => break, // no productive step at any damping
        }
    }
    (p, cost, iterations)
}

/// Fits the two-exponential drag-reduction form to `(gap, beta)` data.
///
/// The two-exponential family is degenerate along `B == D`, where plain
/// damped Gauss-Newton stalls, so the solve runs from the standard seed
/// (0.85, 1e-4, 0.04, 0.02) and from a variable-projection sweep (linear
/// `A, C` solved in closed form on a log grid of `B, D`), keeping whichever
/// polished result has the lower residual.
pub fn fit_drag_reduction(data: &[(f64, f64)]) -> Result<DragFit> {
    if data.len() < 4 {
        return Err(Error::Domain(format!(
            "drag fit needs at least 4 data points, got {}",
            data.len()
        )));
    }
    for (i, a) in data.iter().enumerate() {
        for b in data.iter().skip(i + 1) {
            if a.0 == b.0 {
                return Err(Error::Domain(format!("duplicate gap {} in drag data", a.0)));
            }
        }
    }
    let n = data.len();

    // Variable-projection sweep over the exponents.
    let grid: Vec<f64> = (0..40)
        .map(|i| 1e-5 * (0.05f64 / 1e-5).powf(i as f64 / 39.0))
        .collect();
    let mut vp_best: Option<([f64; 4], f64)> = None;
    for (i, &b) in grid.iter().enumerate() {
        for &dc in &grid[i + 1..] {
            // 2x2 normal equations for the linear amplitudes.
            let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(d, y) in data {
                let e1 = (b * d).exp();
                let e2 = (dc * d).exp();
                s11 += e1 * e1;
                s12 += e1 * e2;
                s22 += e2 * e2;
                t1 += e1 * y;
                t2 += e2 * y;
            }
            let det = s11 * s22 - s12 * s12;
            if det.abs() < 1e-12 {
                continue;
            }
            let a = (t1 * s22 - t2 * s12) / det;
            let c = (t2 * s11 - t1 * s12) / det;
            let p = [a, b, c, dc];
            let cost: f64 = drag_residuals(&p, data).iter().map(|v| v * v).sum();
            if vp_best.map_or(true, |(_, bc)| cost < bc) {
                vp_best = Some((p, cost));
            }
        }
    }

    let (p1, c1, it1) = drag_lm([0.85, 1.0e-4, 0.04, 0.02], data);
    let mut best = (p1, c1, it1);
    if let Some((seed, _)) = vp_best {
        let (p2, c2, it2) = drag_lm(seed, data);
        if c2 < best.1 {
            best = (p2, c2, it1 + it2);
        }
    }
    let (p, cost, iterations) = best;

    let rmse = (cost / n as f64).sqrt();
    if !rmse.is_finite() || rmse > 0.05 {
        return Err(Error::FitDiverged { residual: rmse });
    }
    Ok(DragFit {
        model: DragReductionModel {
            a: p[0],
            b: p[1],
            c: p[2],
            d_coef: p[3],
            gap_max: 110.0,
        },
        rmse,
        iterations,
    })
}

/// Drag-reduction factor at gap `d` [m].
pub fn drag_reduction(d: f64, model: &DragReductionModel) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::Domain(format!("negative gap {d} in drag_reduction")));
    }
    Ok(model.eval(d))
}

/// All per-truck physical and powertrain constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruckParams {
    /// Total mass [kg].
    pub m: f64,
    /// Vehicle length [m].
    pub length: f64,
    /// Wheel radius [m].
    pub r_w: f64,
    /// Frontal area [m^2].
    pub a_f: f64,
    /// Nominal drag coefficient [-].
    pub c_d: f64,
    /// Rolling resistance coefficient [-].
    pub c_r: f64,
    /// Final drive ratio [-].
    pub i_f: f64,
    /// Gear ratios, highest first [-].
    pub gear_ratios: Vec<f64>,
    /// Driveline efficiency per gear [-].
    pub gear_efficiency: Vec<f64>,
    /// Maximum engine torque [N m].
    pub tau_max: f64,
    /// Maximum engine power [W].
    pub p_max: f64,
    /// Tractive actuation lag time constant [s].
    pub tau_d: f64,
    /// Rotational-mass coefficients in `m_e = m (1 + e0 + e1 i_r^2)` [-].
    pub e0: f64,
    pub e1: f64,
    /// Service-brake deceleration bound [m/s^2].
    pub brake_decel: f64,
    pub fuel: FuelParams,
    /// Air density [kg/m^3].
    pub rho: f64,
    /// Gravitational acceleration [m/s^2].
    pub grav: f64,
}

impl TruckParams {
    /// A line-haul tractor-trailer at the given total mass [kg].
    pub fn tractor(mass: f64) -> Self {
        Self {
            m: mass,
            length: 18.0,
            r_w: 0.5,
            a_f: 10.0,
            c_d: 0.6,
            c_r: 0.007,
            i_f: 2.64,
            gear_ratios: vec![14.9, 11.04, 8.18, 6.06, 4.49, 3.32, 2.46, 1.82, 1.35, 1.0],
            gear_efficiency: vec![0.96; 10],
            tau_max: 2500.0,
            p_max: 330.0e3,
            tau_d: 0.4,
            e0: 0.04,
            e1: 0.0025,
            brake_decel: 2.0,
            fuel: FuelParams::default(),
            rho: 1.2,
            grav: 9.81,
        }
    }

    pub fn n_gears(&self) -> usize {
        self.gear_ratios.len()
    }

    /// Gear-dependent effective inertial mass [kg].
    pub fn effective_mass(&self, gear: usize) -> f64 {
        let ir = self.gear_ratios[gear];
        self.m * (1.0 + self.e0 + self.e1 * ir * ir)
    }

    /// Gear whose engine speed at `v` sits closest to the middle of the
    /// operating band; used to seed initial conditions.
    pub fn cruise_gear(&self, v: f64) -> usize {
        let mut best = self.n_gears() - 1;
        let mut best_err = f64::INFINITY;
        for g in 0..self.n_gears() {
            let w = engine_speed(v, g, self);
            if w < SHIFT_DOWN_OMEGA || w > SHIFT_UP_OMEGA {
                continue;
            }
            let err = (w - 150.0).abs();
            if err < best_err {
                best_err = err;
                best = g;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("r_w", self.r_w),
            ("tau_d", self.tau_d),
            ("p_max", self.p_max),
            ("tau_max", self.tau_max),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.gear_ratios.is_empty() || self.gear_ratios.len() != self.gear_efficiency.len() {
            return Err(Error::Config(
                "gear_ratios and gear_efficiency must be non-empty and equal length".into(),
            ));
        }
        for w in self.gear_ratios.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config("gear_ratios must be strictly decreasing".into()));
            }
        }
        if self.gear_ratios.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("gear ratios must be positive".into()));
        }
        if self.gear_efficiency.iter().any(|&e| e <= 0.0 || e > 1.0) {
            return Err(Error::Config("gear efficiencies must lie in (0, 1]".into()));
        }
        if self.fuel.willans_eff <= 0.0 || self.fuel.willans_eff >= 0.6 {
            return Err(Error::Config("willans_eff must lie in (0, 0.6)".into()));
        }
        if self.fuel.lhv <= 0.0 || self.fuel.p_idle < 0.0 {
            return Err(Error::Config("fuel constants out of range".into()));
        }
        Ok(())
    }
}

/// Continuous longitudinal state plus the discrete gear and fuel tally.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruckState {
    /// Position along the route [m].
    pub s: f64,
    /// Speed [m/s].
    pub v: f64,
    /// Applied tractive acceleration [m/s^2].
    pub a_t: f64,
    /// Current gear index into `gear_ratios`.
    pub gear: usize,
    /// Cumulative fuel burned [kg].
    pub fuel_used: f64,
}

impl TruckState {
    pub fn at_speed(s: f64, v: f64, gear: usize) -> Self {
        Self {
            s,
            v,
            a_t: 0.0,
            gear,
            fuel_used: 0.0,
        }
    }
}

/// Road-grade source for plant integration.
#[derive(Clone, Copy)]
pub enum GradeSource<'a> {
    Constant(f64),
    Profile(&'a GradeProfile),
    Preview(&'a LegendrePreview),
}

impl GradeSource<'_> {
    pub fn grade_at(&self, s: f64) -> f64 {
        match self {
            GradeSource::Constant(a) => *a,
            GradeSource::Profile(p) => p.grade_at(s),
            GradeSource::Preview(f) => f.eval(s),
        }
    }
}

/// Exogenous inputs to the single-truck dynamics: grade and, when following,
/// the (step-frozen) gap to the preceding truck.
#[derive(Clone, Copy)]
pub struct ExogenousInput<'a> {
    pub grade: GradeSource<'a>,
    /// Bumper-to-bumper gap to the preceding truck [m], if any.
    pub leader_gap: Option<f64>,
    /// Length of the preceding truck [m].
    pub leader_length: f64,
}

impl<'a> ExogenousInput<'a> {
    pub fn free_road(grade: GradeSource<'a>) -> Self {
        Self {
            grade,
            leader_gap: None,
            leader_length: 0.0,
        }
    }

    /// Input for a truck whose front bumper trails a leader's rear by the gap
    /// implied by the two positions.
    pub fn behind_leader(grade: GradeSource<'a>, s_leader: f64, leader_length: f64, s_ego: f64) -> Self {
        Self {
            grade,
            leader_gap: Some(s_leader - leader_length - s_ego),
            leader_length,
        }
    }
}

/// Aerodynamic drag force [N] at speed `v`, reduced by drafting when a gap is given.
pub fn aero_force(v: f64, d: Option<f64>, p: &TruckParams, model: &DragReductionModel) -> f64 {
    let beta = match d {
        Some(gap) if gap <= model.gap_max => model.eval(gap.max(0.0)),
        _ => 1.0,
    };
    0.5 * p.rho * p.a_f * p.c_d * beta * v * v
}

/// Rolling plus grade force [N]; negative downhill.
pub fn rolling_force(grade: f64, p: &TruckParams) -> f64 {
    p.m * p.grav * (p.c_r * grade.cos() + grade.sin())
}

/// Maximum wheel force available from the engine in the given gear [N].
pub fn max_wheel_force(gear: usize, p: &TruckParams) -> f64 {
    p.tau_max * p.gear_efficiency[gear] * p.i_f * p.gear_ratios[gear] / p.r_w
}

/// Engine speed [rad/s] implied by vehicle speed and gearing.
pub fn engine_speed(v: f64, gear: usize, p: &TruckParams) -> f64 {
    v * p.i_f * p.gear_ratios[gear] / p.r_w
}

/// Commanded-acceleration interval admissible under the engine torque and
/// power limits and the service-brake bound: `(u_min, u_max)` [m/s^2].
pub fn admissible_control_set(v: f64, gear: usize, p: &TruckParams) -> (f64, f64) {
    let f_bar = max_wheel_force(gear, p);
    let f_power = p.p_max / v.max(V_EPS);
    let u_max = f_bar.min(f_power) / p.m;
    (-p.brake_decel, u_max)
}

/// Fuel mass flow [kg/s] for engine torque `tau` [N m] at speed `omega` [rad/s].
/// Braking power burns nothing beyond the idle floor.
pub fn fuel_rate(tau: f64, omega: f64, f: &FuelParams) -> f64 {
    ((tau * omega).max(0.0) / f.willans_eff + f.p_idle) / f.lhv
}

/// Engine torque [N m] delivering wheel force `f_wheel` in the given gear;
/// zero when the wheel force is braking (service brakes, engine unloaded).
pub fn engine_torque(f_wheel: f64, gear: usize, p: &TruckParams) -> f64 {
    if f_wheel <= 0.0 {
        0.0
    } else {
        f_wheel * p.r_w / (p.gear_efficiency[gear] * p.i_f * p.gear_ratios[gear])
    }
}

/// Upshift engine-speed threshold [rad/s]: 10% inside the 220 rad/s band edge.
pub const SHIFT_UP_OMEGA: f64 = 220.0 / 1.1;
/// Downshift engine-speed threshold [rad/s]: 10% above the 100 rad/s band edge.
pub const SHIFT_DOWN_OMEGA: f64 = 100.0 * 1.1;

/// Speed-threshold automatic shift map with hysteresis; at most one gear
/// change per call.
pub fn shift_logic(v: f64, gear: usize, p: &TruckParams) -> usize {
    let omega = engine_speed(v, gear, p);
    if omega >= SHIFT_UP_OMEGA && gear + 1 < p.n_gears() {
        gear + 1
    } else if omega <= SHIFT_DOWN_OMEGA && gear > 0 {
        gear - 1
    } else {
        gear
    }
}

/// Time derivative of the continuous state `[s, v, a_t]` under command `u`.
pub fn state_derivative(
    x: &TruckState,
    u: f64,
    w: &ExogenousInput,
    p: &TruckParams,
    model: &DragReductionModel,
) -> (f64, f64, f64) {
    let f_a = aero_force(x.v, w.leader_gap, p, model);
    let f_r = rolling_force(w.grade.grade_at(x.s), p);
    let m_e = p.effective_mass(x.gear);
    let ds = x.v;
    let dv = (p.m * x.a_t - f_a - f_r) / m_e;
    let da = (u - x.a_t) / p.tau_d;
    (ds, dv, da)
}

fn rhs(x: [f64; 4], u: f64, gear: usize, w: &ExogenousInput, p: &TruckParams, model: &DragReductionModel) -> [f64; 4] {
    let state = TruckState {
        s: x[0],
        v: x[1],
        a_t: x[2],
        gear,
        fuel_used: x[3],
    };
    let (ds, dv, da) = state_derivative(&state, u, w, p, model);
    let f_wheel = p.m * x[2];
    let tau = engine_torque(f_wheel, gear, p);
    let omega = engine_speed(x[1].max(0.0), gear, p);
    let dfuel = fuel_rate(tau, omega, &p.fuel);
    [ds, dv, da, dfuel]
}

/// Advances the plant state by `h` seconds using `n_sub` fixed RK4 substeps,
/// accumulating fuel along the way. Speed is clamped at zero and the shift
/// map is applied once at the step boundary.
pub fn integrate_step(
    x: &TruckState,
    u: f64,
    w: &ExogenousInput,
    p: &TruckParams,
    model: &DragReductionModel,
    h: f64,
    n_sub: usize,
) -> TruckState {
    assert!(h > 0.0 && n_sub >= 1, "integrate_step needs h > 0 and n_sub >= 1");
    let gear = x.gear;
    let mut y = [x.s, x.v, x.a_t, x.fuel_used];
    let dt = h / n_sub as f64;
    for _ in 0..n_sub {
        let k1 = rhs(y, u, gear, w, p, model);
        let y2 = add_scaled(y, k1, dt / 2.0);
        let k2 = rhs(y2, u, gear, w, p, model);
        let y3 = add_scaled(y, k2, dt / 2.0);
        let k3 = rhs(y3, u, gear, w, p, model);
        let y4 = add_scaled(y, k3, dt);
        let k4 = rhs(y4, u, gear, w, p, model);
        for i in 0..4 {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y[1] < 0.0 {
            y[1] = 0.0;
            if y[2] < 0.0 {
                y[2] = 0.0; // no reverse traction while standing
            }
        }
    }
    let mut out = TruckState {
        s: y[0],
        v: y[1],
        a_t: y[2],
        gear,
        fuel_used: y[3].max(x.fuel_used),
    };
    out.gear = shift_logic(out.v, out.gear, p);
    out
}

fn add_scaled(y: [f64; 4], k: [f64; 4], a: f64) -> [f64; 4] {
    [y[0] + a * k[0], y[1] + a * k[1], y[2] + a * k[2], y[3] + a * k[3]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road::make_s_road;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fitted_model() -> DragReductionModel {
        fit_drag_reduction(&DRAG_DATA).unwrap().model
    }

    #[test]
    fn drag_fit_matches_track_data() {
        let fit = fit_drag_reduction(&DRAG_DATA).unwrap();
        assert!(fit.rmse <= 0.002, "rmse {} too large", fit.rmse);
        let b15 = drag_reduction(15.0, &fit.model).unwrap();
        assert!((b15 - 0.90497).abs() <= 0.003, "beta(15) = {b15}");
        let b110 = drag_reduction(110.0, &fit.model).unwrap();
        assert!((0.995..=1.0).contains(&b110), "beta(110) = {b110}");
        assert_eq!(drag_reduction(200.0, &fit.model).unwrap(), 1.0);
        assert!(drag_reduction(-1.0, &fit.model).is_err());
    }

    #[test]
    fn drag_fit_recovers_exact_coefficients() {
        let truth = DragReductionModel {
            a: 0.85,
            b: 1.0e-4,
            c: 0.04,
            d_coef: 0.02,
            gap_max: 110.0,
        };
        let gaps = [5.0, 15.0, 25.0, 35.0, 45.0, 55.0, 65.0, 80.0, 95.0, 108.0];
        let data: Vec<(f64, f64)> = gaps.iter().map(|&d| (d, truth.raw(d))).collect();
        let fit = fit_drag_reduction(&data).unwrap();
        for &(d, y) in &data {
            assert!((fit.model.raw(d) - y).abs() <= 1e-6, "refit beta({d}) off");
        }
    }

    #[test]
    fn drag_fit_rejects_underdetermined_data() {
        assert!(fit_drag_reduction(&DRAG_DATA[..3]).is_err());
    }

    proptest! {
        #[test]
        fn beta_monotone_on_envelope(d1 in 0.0..110.0f64, d2 in 0.0..110.0f64) {
            let model = fitted_model();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(model.eval(lo) <= model.eval(hi) + 1e-12);
            prop_assert!(model.eval(lo) > 0.0 && model.eval(lo) <= 1.0);
        }
    }

    #[test]
    fn aero_force_cases() {
        let mut p = TruckParams::tractor(38_000.0);
        p.rho = 1.2;
        p.a_f = 10.0;
        p.c_d = 0.6;
        let model = fitted_model();
        assert_relative_eq!(aero_force(25.0, None, &p, &model), 2250.0, epsilon = 1e-9);
        assert_eq!(aero_force(0.0, None, &p, &model), 0.0);
        let b15 = model.eval(15.0);
        assert_relative_eq!(
            aero_force(25.0, Some(15.0), &p, &model),
            2250.0 * b15,
            epsilon = 1e-9
        );
        assert!((aero_force(25.0, Some(15.0), &p, &model) - 2035.7).abs() < 10.0);
    }

    #[test]
    fn rolling_force_cases() {
        let p = TruckParams::tractor(38_000.0);
        assert_relative_eq!(rolling_force(0.0, &p), 2609.46, epsilon = 1e-6);
        let mut p0 = p.clone();
        p0.c_r = 0.0;
        assert_relative_eq!(
            rolling_force(0.05, &p0),
            38_000.0 * 9.81 * 0.05f64.sin(),
            epsilon = 1e-9
        );
        assert!((rolling_force(0.03, &p) - 13_791.0).abs() < 2.0);
    }

    #[test]
    fn wheel_force_and_engine_speed() {
        let mut p = TruckParams::tractor(38_000.0);
        p.tau_max = 2500.0;
        p.i_f = 2.64;
        p.r_w = 0.5;
        p.gear_ratios = vec![1.53, 1.0];
        p.gear_efficiency = vec![1.0, 1.0];
        assert_relative_eq!(max_wheel_force(1, &p), 13_200.0, epsilon = 1e-9);
        assert!(max_wheel_force(0, &p) > max_wheel_force(1, &p));
        p.gear_efficiency = vec![0.96, 0.96];
        assert_relative_eq!(max_wheel_force(1, &p), 12_672.0, epsilon = 1e-9);

        assert_relative_eq!(engine_speed(25.0, 1, &p), 132.0, epsilon = 1e-12);
        assert_eq!(engine_speed(0.0, 1, &p), 0.0);
        assert_relative_eq!(engine_speed(20.0, 0, &p), 161.568, epsilon = 1e-9);
    }

    #[test]
    fn admissible_control_cases() {
        let mut p = TruckParams::tractor(38_000.0);
        p.p_max = 300.0e3;
        // Single synthetic gear with exactly 20 kN wheel-force capability.
        p.gear_ratios = vec![20_000.0 * p.r_w / (p.tau_max * p.i_f)];
        p.gear_efficiency = vec![1.0];
        let (_, u_max) = admissible_control_set(25.0, 0, &p);
        assert_relative_eq!(u_max, 12_000.0 / 38_000.0, epsilon = 1e-9);
        let (_, u0) = admissible_control_set(0.0, 0, &p);
        assert_relative_eq!(u0, 20_000.0 / 38_000.0, epsilon = 1e-9);
        let (_, u10) = admissible_control_set(10.0, 0, &p);
        assert_relative_eq!(u10, 20_000.0 / 38_000.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn admissible_control_invariant(v in 0.0..40.0f64, gear in 0usize..10) {
            let p = TruckParams::tractor(30_000.0);
            let (_, u_max) = admissible_control_set(v, gear, &p);
            let f = p.m * u_max;
            prop_assert!(f <= max_wheel_force(gear, &p) + 1e-9);
            prop_assert!(f * v <= p.p_max + 1e-9);
        }
    }

    #[test]
    fn fuel_rate_cases() {
        let f = FuelParams {
            willans_eff: 0.4,
            lhv: 42.5e6,
            p_idle: 5.0e3,
        };
        assert_relative_eq!(fuel_rate(0.0, 0.0, &f), 5.0e3 / 42.5e6, epsilon = 1e-15);
        // 200 kW brake power
        assert_relative_eq!(
            fuel_rate(2000.0, 100.0, &f),
            (200_000.0 / 0.4 + 5.0e3) / 42.5e6,
            epsilon = 1e-12
        );
        assert_relative_eq!(fuel_rate(-500.0, 150.0, &f), 5.0e3 / 42.5e6, epsilon = 1e-15);
    }

    #[test]
    fn shift_logic_hysteresis_and_saturation() {
        let p = TruckParams::tractor(30_000.0);
        // Mid-band speed in top gear: no shift either way.
        let top = p.n_gears() - 1;
        let v_mid = 150.0 * p.r_w / (p.i_f * p.gear_ratios[top]);
        assert_eq!(shift_logic(v_mid, top, &p), top);
        // Above the upshift threshold in top gear: saturates.
        assert_eq!(shift_logic(60.0, top, &p), top);
        // Below the downshift threshold in bottom gear: saturates.
        assert_eq!(shift_logic(0.0, 0, &p), 0);
    }

    #[test]
    fn shift_logic_ramp_visits_each_gear_once() {
        let p = TruckParams::tractor(30_000.0);
        let mut gear = 0;
        let mut seq = vec![0];
        let mut v = 0.0;
        while v < 30.0 {
            v += 0.05;
            let g = shift_logic(v, gear, &p);
            assert!(g == gear || g == gear + 1, "ramp must never downshift");
            if g != gear {
                gear = g;
                seq.push(g);
            }
        }
        let expect: Vec<usize> = (0..p.n_gears()).collect();
        assert_eq!(seq, expect, "each gear visited exactly once on the ramp");
    }

    #[test]
    fn state_derivative_equilibrium_and_lag() {
        let p = TruckParams::tractor(38_000.0);
        let model = fitted_model();
        let w = ExogenousInput::free_road(GradeSource::Constant(0.0));
        let f_a = aero_force(25.0, None, &p, &model);
        let f_r = rolling_force(0.0, &p);
        let a_eq = (f_a + f_r) / p.m;
        let x = TruckState {
            s: 0.0,
            v: 25.0,
            a_t: a_eq,
            gear: 9,
            fuel_used: 0.0,
        };
        let (ds, dv, da) = state_derivative(&x, a_eq, &w, &p, &model);
        assert_relative_eq!(ds, 25.0);
        assert_relative_eq!(dv, 0.0, epsilon = 1e-12);
        assert_relative_eq!(da, 0.0, epsilon = 1e-12);

        let x0 = TruckState { a_t: 0.0, ..x };
        let (_, _, da) = state_derivative(&x0, 0.3, &w, &p, &model);
        assert_relative_eq!(da, 0.3 / p.tau_d, epsilon = 1e-12);

        // Coasting on a flat road: composition of the two force models.
        let (_, dv, _) = state_derivative(&x0, 0.0, &w, &p, &model);
        assert_relative_eq!(dv, -(f_a + f_r) / p.effective_mass(9), epsilon = 1e-12);
        assert!(dv < 0.0);
    }

    #[test]
    fn integrate_zero_dynamics_is_linear_motion() {
        let mut p = TruckParams::tractor(38_000.0);
        p.rho = 0.0;
        p.c_r = 0.0;
        p.grav = 0.0;
        let model = fitted_model();
        let w = ExogenousInput::free_road(GradeSource::Constant(0.0));
        let x = TruckState::at_speed(100.0, 20.0, 9);
        let out = integrate_step(&x, 0.0, &w, &p, &model, 1.0, 10);
        assert_relative_eq!(out.s, 100.0 + 20.0, epsilon = 1e-12);
        assert_relative_eq!(out.v, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn integrate_clamps_speed_at_zero() {
        let p = TruckParams::tractor(38_000.0);
        let model = fitted_model();
        let w = ExogenousInput::free_road(GradeSource::Constant(0.0));
        let mut x = TruckState::at_speed(0.0, 0.3, 2);
        x.a_t = -2.0;
        let out = integrate_step(&x, -2.0, &w, &p, &model, 1.0, 10);
        assert!(out.v >= 0.0);
        assert_eq!(out.v, 0.0);
    }

    /// One plant step on the downhill plateau of the S-road, where the grade
    /// profile is locally constant and the dynamics are smooth.
    fn s_road_step(n_sub: usize) -> TruckState {
        let road = make_s_road(-0.04, 0.04, &[5.0e3, 10.0e3, 5.0e3, 10.0e3, 5.0e3], 500.0);
        let p = TruckParams::tractor(38_000.0);
        let model = fitted_model();
        let w = ExogenousInput::free_road(GradeSource::Profile(&road));
        let x = TruckState {
            s: 10_000.0,
            v: 25.0,
            a_t: 0.1,
            gear: 8,
            fuel_used: 0.0,
        };
        integrate_step(&x, 0.2, &w, &p, &model, 1.0, n_sub)
    }

    #[test]
    fn integrator_is_fourth_order() {
        let v10 = s_road_step(10).v;
        let v20 = s_road_step(20).v;
        let v40 = s_road_step(40).v;
        let ratio = (v10 - v20) / (v20 - v40);
        assert!((14.0..=18.0).contains(&ratio), "Richardson ratio {ratio}");
    }

    #[test]
    fn integrator_matches_fine_oracle() {
        let coarse = s_road_step(10);
        let fine = s_road_step(1000);
        assert!((coarse.v - fine.v).abs() <= 1e-6, "dv = {}", (coarse.v - fine.v).abs());

        // Independent first-order (forward Euler) oracle over the same step.
        let road = make_s_road(-0.04, 0.04, &[5.0e3, 10.0e3, 5.0e3, 10.0e3, 5.0e3], 500.0);
        let p = TruckParams::tractor(38_000.0);
        let model = fitted_model();
        let w = ExogenousInput::free_road(GradeSource::Profile(&road));
        let mut y = [10_000.0, 25.0, 0.1, 0.0];
        let n = 200_000;
        let dt = 1.0 / n as f64;
        for _ in 0..n {
            let k = rhs(y, 0.2, 8, &w, &p, &model);
            for i in 0..4 {
                y[i] += dt * k[i];
            }
        }
        assert!((coarse.v - y[1]).abs() <= 1e-4, "vs Euler oracle: {}", (coarse.v - y[1]).abs());
    }

    #[test]
    fn fuel_increases_while_running() {
        let p = TruckParams::tractor(38_000.0);
        let model = fitted_model();
        let w = ExogenousInput::free_road(GradeSource::Constant(0.0));
        let mut x = TruckState::at_speed(0.0, 25.0, 9);
        for _ in 0..20 {
            let next = integrate_step(&x, 0.0, &w, &p, &model, 0.2, 10);
            assert!(next.fuel_used > x.fuel_used, "idle floor keeps fuel increasing");
            x = next;
        }
    }

    #[test]
    fn effective_mass_at_least_static_mass() {
        let p = TruckParams::tractor(22_000.0);
        for g in 0..p.n_gears() {
            assert!(p.effective_mass(g) >= p.m);
        }
    }
}
