//! Direct multiple-shooting transcription of the platooning motion planning
//! problems.
//!
//! Three variants share one transcription: the solo problem (a single truck,
//! optionally tracking a communicated leader plan, with or without the
//! control-compliance term), and the considerate problem (a joint two-truck
//! program in which the trailing truck's drag and gap couple to the leading
//! truck's decision trajectory).
//!
//! Decision vector layout, per truck in chain order: `(N+1)` states
//! `[s, v, a_t]`, then `N` controls, then the two nonnegative slacks
//! `[eps_v, eps_gap]`. Dynamics defects are equality constraints; speed and
//! gap corridors are softened by the slacks; engine torque enters as control
//! bounds and engine power as a per-stage bilinear inequality.

pub mod dynamics;

use serde::{Deserialize, Serialize};

use crate::nlp::{ChainLayout, Evaluation, NlpProblem, ShootingStructure, SolveReport};
use crate::powertrain::{max_wheel_force, DragReductionModel, TruckParams, TruckState, V_EPS};
use crate::road::LegendrePreview;
use crate::{Error, Result};

use self::dynamics::{
    equilibrium_accel, integrate_stage, LeaderRef, PlannedPath, TruckModel, MAX_NX,
};

/// Planner configuration: horizon, weights, and corridor parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcpConfig {
    /// Shooting stages per horizon.
    pub n_stages: usize,
    /// RK4 substeps per stage.
    pub n_nodes: usize,
    /// Stage duration [s].
    pub dt: f64,
    /// Terminal pace weight.
    pub q_t: f64,
    /// Control effort weight.
    pub q_u: f64,
    /// Leader velocity-tracking weight.
    pub q_v: f64,
    /// Gap-tracking weight.
    pub q_d: f64,
    /// Suggested-control compliance weight.
    pub q_c: f64,
    /// Linear slack penalty.
    pub q_eps: f64,
    /// Desired following headway [s].
    pub headway: f64,
    /// Speed ceiling [m/s].
    pub v_max: f64,
    /// Hard gap floor [m].
    pub d_min: f64,
    /// In-horizon velocity reference [m/s].
    pub v_ref: f64,
    /// Trip end position [m].
    pub s_f: f64,
    /// Trip end time [s].
    pub t_f: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            n_stages: 22,
            n_nodes: 10,
            dt: 0.5,
            q_t: 1.0,
            q_u: 2.0,
            q_v: 1.0,
            q_d: 0.05,
            q_c: 0.5,
            q_eps: 1.0e4,
            headway: 0.72,
            v_max: 30.0,
            d_min: 10.0,
            v_ref: 25.0,
            s_f: 35.0e3,
            t_f: 35.0e3 / 25.0 + 120.0,
        }
    }
}

/// Position of a truck within the platoon, which gates the cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Mid,
    Last,
}

/// Predecessor plan resampled onto the ego stage grid.
#[derive(Debug, Clone)]
pub struct LeaderPlan {
    /// Planned predecessor positions per stage [m].
    pub positions: Vec<f64>,
    /// Suggested controls per stage [m/s^2].
    pub controls: Vec<f64>,
    /// Predecessor vehicle length [m].
    pub leader_length: f64,
}

/// Everything the ego truck knows about itself when building a problem.
#[derive(Debug, Clone)]
pub struct EgoContext {
    pub role: Role,
    pub state: TruckState,
    pub params: TruckParams,
    pub preview: LegendrePreview,
    pub leader_plan: Option<LeaderPlan>,
    /// Simulation time of stage 0 [s].
    pub t_now: f64,
}

/// Trailing-truck data for the joint problem, reconstructed from the
/// backward message.
#[derive(Debug, Clone)]
pub struct FollowerContext {
    pub state: TruckState,
    pub params: TruckParams,
    pub preview: LegendrePreview,
    /// Suggestion the follower is currently complying with (the ego's
    /// previous broadcast), resampled onto the stage grid.
    pub mu: Option<Vec<f64>>,
}

/// Named slices of the decision vector.
#[derive(Debug, Clone, Copy)]
pub struct VarLayout {
    pub n_stages: usize,
    pub n_trucks: usize,
}

impl VarLayout {
    pub fn truck_block(&self) -> usize {
        3 * (self.n_stages + 1) + self.n_stages + 2
    }
    pub fn n_vars(&self) -> usize {
        self.n_trucks * self.truck_block()
    }
    pub fn state(&self, truck: usize, stage: usize, comp: usize) -> usize {
        truck * self.truck_block() + 3 * stage + comp
    }
    pub fn control(&self, truck: usize, stage: usize) -> usize {
        truck * self.truck_block() + 3 * (self.n_stages + 1) + stage
    }
    /// `which`: 0 for the velocity slack, 1 for the gap slack.
    pub fn slack(&self, truck: usize, which: usize) -> usize {
        truck * self.truck_block() + 3 * (self.n_stages + 1) + self.n_stages + which
    }
}

/// Gap reference of one chain: free air, communicated plan, or the preceding
/// chain's decision trajectory.
#[derive(Debug, Clone)]
enum GapSource {
    Free,
    Data(PlannedPath),
    Coupled,
}

#[derive(Debug, Clone, Copy)]
enum TerminalMode {
    /// Track the average pace needed to finish the trip: kappa = 1/(t_f - t_N).
    Pace { kappa: f64 },
    /// Fallback to plain reference-speed tracking.
    RefSpeed,
}

#[derive(Debug, Clone)]
struct ChainData {
    model: TruckModel,
    x0: [f64; 3],
    u_lo: f64,
    u_hi: f64,
    m: f64,
    p_max: f64,
    tracks_ref_speed: bool,
    gap: GapSource,
    mu: Option<Vec<f64>>,
    leader_length: f64,
    terminal: TerminalMode,
}

#[derive(Debug, Clone, Copy)]
enum ResidualDesc {
    Effort { chain: usize, stage: usize },
    RefSpeed { chain: usize, stage: usize },
    Gap { chain: usize, stage: usize },
    Compliance { chain: usize, stage: usize },
    Terminal { chain: usize },
}

#[derive(Debug, Clone, Copy)]
enum IneqDesc {
    VelLo { chain: usize, stage: usize },
    VelHi { chain: usize, stage: usize },
    GapFloor { chain: usize, stage: usize },
    Power { chain: usize, stage: usize },
}

/// A transcribed nonlinear program over one or two trucks.
pub struct OcpProblem {
    cfg: OcpConfig,
    layout: VarLayout,
    chains: Vec<ChainData>,
    structure: ShootingStructure,
    lo: Vec<f64>,
    hi: Vec<f64>,
    linear: Vec<f64>,
    residual_descs: Vec<ResidualDesc>,
    ineq_descs: Vec<IneqDesc>,
}

impl OcpProblem {
    pub fn cfg(&self) -> &OcpConfig {
        &self.cfg
    }
    pub fn layout(&self) -> &VarLayout {
        &self.layout
    }
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Gap of chain `c` at a stage, given the decision vector.
    fn gap_at(&self, x: &[f64], chain: usize, stage: usize) -> Option<f64> {
        let ch = &self.chains[chain];
        let s_own = x[self.layout.state(chain, stage, 0)];
        match &ch.gap {
            GapSource::Free => None,
            GapSource::Data(path) => Some(path.at_stage(stage) - ch.leader_length - s_own),
            GapSource::Coupled => {
                Some(x[self.layout.state(0, stage, 0)] - ch.leader_length - s_own)
            }
        }
    }
}

fn terminal_mode(cfg: &OcpConfig, t_now: f64, s0: f64) -> TerminalMode {
    let t_n = t_now + cfg.n_stages as f64 * cfg.dt;
    let horizon_reach = cfg.v_max * cfg.n_stages as f64 * cfg.dt;
    if t_n >= cfg.t_f - 1.0 || cfg.s_f - s0 <= horizon_reach {
        TerminalMode::RefSpeed
    } else {
        TerminalMode::Pace {
            kappa: 1.0 / (cfg.t_f - t_n),
        }
    }
}

fn make_chain(
    state: &TruckState,
    params: &TruckParams,
    preview: LegendrePreview,
    drag: DragReductionModel,
    gap: GapSource,
    mu: Option<Vec<f64>>,
    leader_length: f64,
    tracks_ref_speed: bool,
    cfg: &OcpConfig,
    t_now: f64,
) -> ChainData {
    let leader = match &gap {
        GapSource::Free => LeaderRef::None,
        GapSource::Data(path) => LeaderRef::Data(path.clone()),
        GapSource::Coupled => LeaderRef::Coupled,
    };
    let model = TruckModel {
        m: params.m,
        m_e: params.effective_mass(state.gear),
        tau_d: params.tau_d,
        c_aero: 0.5 * params.rho * params.a_f * params.c_d,
        c_r: params.c_r,
        grav: params.grav,
        preview,
        drag,
        leader,
        leader_length,
    };
    ChainData {
        model,
        x0: [state.s, state.v, state.a_t],
        u_lo: -params.brake_decel,
        u_hi: max_wheel_force(state.gear, params) / params.m,
        m: params.m,
        p_max: params.p_max,
        tracks_ref_speed,
        gap,
        mu,
        leader_length,
        terminal: terminal_mode(cfg, t_now, state.s),
    }
}

fn assemble(cfg: &OcpConfig, chains: Vec<ChainData>) -> OcpProblem {
    let n = cfg.n_stages;
    let layout = VarLayout {
        n_stages: n,
        n_trucks: chains.len(),
    };
    let n_vars = layout.n_vars();

    let mut lo = vec![f64::NEG_INFINITY; n_vars];
    let mut hi = vec![f64::INFINITY; n_vars];
    let mut linear = vec![0.0; n_vars];
    let mut residual_descs = Vec::new();
    let mut ineq_descs = Vec::new();
    let mut structure_chains = Vec::new();

    for (c, ch) in chains.iter().enumerate() {
        for comp in 0..3 {
            let j = layout.state(c, 0, comp);
            lo[j] = ch.x0[comp];
            hi[j] = ch.x0[comp];
        }
        for stage in 0..n {
            let j = layout.control(c, stage);
            lo[j] = ch.u_lo;
            hi[j] = ch.u_hi;
        }
        for which in 0..2 {
            let j = layout.slack(c, which);
            lo[j] = 0.0;
            linear[j] = cfg.q_eps;
        }

        for stage in 0..n {
            if cfg.q_u > 0.0 {
                residual_descs.push(ResidualDesc::Effort { chain: c, stage });
            }
            if ch.tracks_ref_speed && cfg.q_v > 0.0 {
                residual_descs.push(ResidualDesc::RefSpeed { chain: c, stage });
            }
            if !matches!(ch.gap, GapSource::Free) && cfg.q_d > 0.0 {
                residual_descs.push(ResidualDesc::Gap { chain: c, stage });
            }
            if ch.mu.is_some() && cfg.q_c > 0.0 {
                residual_descs.push(ResidualDesc::Compliance { chain: c, stage });
            }
        }
        if cfg.q_t > 0.0 {
            residual_descs.push(ResidualDesc::Terminal { chain: c });
        }

        for stage in 1..=n {
            ineq_descs.push(IneqDesc::VelLo { chain: c, stage });
            ineq_descs.push(IneqDesc::VelHi { chain: c, stage });
        }
        if !matches!(ch.gap, GapSource::Free) {
            for stage in 1..=n {
                ineq_descs.push(IneqDesc::GapFloor { chain: c, stage });
            }
        }
        for stage in 0..n {
            ineq_descs.push(IneqDesc::Power { chain: c, stage });
        }

        structure_chains.push(ChainLayout {
            state_dim: 3,
            n_stages: n,
            state_start: layout.state(c, 0, 0),
            control_start: layout.control(c, 0),
            defect_row_start: c * 3 * n,
            coupled_to: matches!(ch.gap, GapSource::Coupled).then_some(0),
        });
    }

    OcpProblem {
        cfg: cfg.clone(),
        layout,
        chains,
        structure: ShootingStructure {
            chains: structure_chains,
        },
        lo,
        hi,
        linear,
        residual_descs,
        ineq_descs,
    }
}

/// Builds the single-truck problem: plain velocity tracking for the platoon
/// leader, gap tracking against the communicated plan for followers.
/// `compliance_on = false` drops the suggested-control term (the anticipative
/// variant).
pub fn build_solo(
    ego: &EgoContext,
    drag: DragReductionModel,
    cfg: &OcpConfig,
    compliance_on: bool,
) -> Result<OcpProblem> {
    let chain = match ego.role {
        Role::Leader => make_chain(
            &ego.state,
            &ego.params,
            ego.preview,
            drag,
            GapSource::Free,
            None,
            0.0,
            true,
            cfg,
            ego.t_now,
        ),
        Role::Mid | Role::Last => {
            let plan = ego.leader_plan.as_ref().ok_or_else(|| {
                Error::Solver("follower problem needs a leader plan to form the gap".into())
            })?;
            make_chain(
                &ego.state,
                &ego.params,
                ego.preview,
                drag,
                GapSource::Data(PlannedPath {
                    positions: plan.positions.clone(),
                    dt: cfg.dt,
                }),
                compliance_on.then(|| plan.controls.clone()),
                plan.leader_length,
                false,
                cfg,
                ego.t_now,
            )
        }
    };
    Ok(assemble(cfg, vec![chain]))
}

/// Builds the joint two-truck problem: the ego plans for itself and its
/// follower, whose drag and gap couple to the ego's decision trajectory.
pub fn build_considerate(
    ego: &EgoContext,
    follower: &FollowerContext,
    drag: DragReductionModel,
    cfg: &OcpConfig,
) -> Result<OcpProblem> {
    if ego.role == Role::Last {
        return Err(Error::Solver(
            "the last truck has no follower to plan for".into(),
        ));
    }
    let ego_chain = match ego.role {
        Role::Leader => make_chain(
            &ego.state,
            &ego.params,
            ego.preview,
            drag,
            GapSource::Free,
            None,
            0.0,
            true,
            cfg,
            ego.t_now,
        ),
        Role::Mid => {
            let plan = ego.leader_plan.as_ref().ok_or_else(|| {
                Error::Solver("mid-platoon problem needs the predecessor plan".into())
            })?;
            make_chain(
                &ego.state,
                &ego.params,
                ego.preview,
                drag,
                GapSource::Data(PlannedPath {
                    positions: plan.positions.clone(),
                    dt: cfg.dt,
                }),
                Some(plan.controls.clone()),
                plan.leader_length,
                false,
                cfg,
                ego.t_now,
            )
        }
        Role::Last => unreachable!(),
    };
    let follower_chain = make_chain(
        &follower.state,
        &follower.params,
        follower.preview,
        drag,
        GapSource::Coupled,
        follower.mu.clone(),
        ego.params.length,
        false,
        cfg,
        ego.t_now,
    );
    Ok(assemble(cfg, vec![ego_chain, follower_chain]))
}

impl NlpProblem for OcpProblem {
    fn n_vars(&self) -> usize {
        self.layout.n_vars()
    }
    fn n_residuals(&self) -> usize {
        self.residual_descs.len()
    }
    fn n_eq(&self) -> usize {
        self.chains.len() * 3 * self.cfg.n_stages
    }
    fn n_ineq(&self) -> usize {
        self.ineq_descs.len()
    }
    fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }
    fn linear_cost(&self) -> &[f64] {
        &self.linear
    }
    fn shooting_structure(&self) -> Option<&ShootingStructure> {
        Some(&self.structure)
    }

    fn eval(&self, x: &[f64], out: &mut Evaluation) {
        let cfg = &self.cfg;
        let n = cfg.n_stages;
        let lay = &self.layout;
        let n_chains = self.chains.len();
        let models: Vec<TruckModel> = self.chains.iter().map(|c| c.model.clone()).collect();

        // Dynamics defects: one joint integration per stage covers all chains.
        let mut x_stage = [0.0; MAX_NX];
        for stage in 0..n {
            for c in 0..n_chains {
                for comp in 0..3 {
                    x_stage[3 * c + comp] = x[lay.state(c, stage, comp)];
                }
            }
            let u_stage: Vec<f64> = (0..n_chains).map(|c| x[lay.control(c, stage)]).collect();
            let map = integrate_stage(
                &models,
                stage as f64 * cfg.dt,
                &x_stage[..3 * n_chains],
                &u_stage,
                cfg.dt,
                cfg.n_nodes,
            );
            for c in 0..n_chains {
                let coupled = matches!(self.chains[c].gap, GapSource::Coupled);
                for comp in 0..3 {
                    let r = 3 * c + comp;
                    let row_idx = c * 3 * n + 3 * stage + comp;
                    out.eq[row_idx] = map.x_end[r] - x[lay.state(c, stage + 1, comp)];
                    let row = &mut out.eq_jac[row_idx];
                    row.clear();
                    if coupled {
                        for k in 0..3 {
                            row.push((lay.state(0, stage, k), map.sens[r][k]));
                        }
                        row.push((lay.control(0, stage), map.sens[r][3 * n_chains]));
                    }
                    for k in 0..3 {
                        row.push((lay.state(c, stage, k), map.sens[r][3 * c + k]));
                    }
                    row.push((lay.control(c, stage), map.sens[r][3 * n_chains + c]));
                    row.push((lay.state(c, stage + 1, comp), -1.0));
                }
            }
        }

        // Cost residuals.
        let sq_u = cfg.q_u.sqrt();
        let sq_v = cfg.q_v.sqrt();
        let sq_d = cfg.q_d.sqrt();
        let sq_c = cfg.q_c.sqrt();
        let sq_t = cfg.q_t.sqrt();
        for (k, desc) in self.residual_descs.iter().enumerate() {
            let row = &mut out.residual_jac[k];
            row.clear();
            match *desc {
                ResidualDesc::Effort { chain, stage } => {
                    let j = lay.control(chain, stage);
                    out.residuals[k] = sq_u * x[j];
                    row.push((j, sq_u));
                }
                ResidualDesc::RefSpeed { chain, stage } => {
                    let j = lay.state(chain, stage, 1);
                    out.residuals[k] = sq_v * (x[j] - cfg.v_ref);
                    row.push((j, sq_v));
                }
                ResidualDesc::Gap { chain, stage } => {
                    let d = self.gap_at(x, chain, stage).expect("gap chains only");
                    let jv = lay.state(chain, stage, 1);
                    out.residuals[k] = sq_d * (d - cfg.headway * x[jv]);
                    if matches!(self.chains[chain].gap, GapSource::Coupled) {
                        row.push((lay.state(0, stage, 0), sq_d));
                    }
                    row.push((lay.state(chain, stage, 0), -sq_d));
                    row.push((jv, -sq_d * cfg.headway));
                }
                ResidualDesc::Compliance { chain, stage } => {
                    let mu = self.chains[chain].mu.as_ref().expect("compliance chains only");
                    let j = lay.control(chain, stage);
                    out.residuals[k] = sq_c * (x[j] - mu[stage.min(mu.len() - 1)]);
                    row.push((j, sq_c));
                }
                ResidualDesc::Terminal { chain } => {
                    let js = lay.state(chain, n, 0);
                    let jv = lay.state(chain, n, 1);
                    match self.chains[chain].terminal {
                        TerminalMode::Pace { kappa } => {
                            out.residuals[k] = sq_t * (kappa * (cfg.s_f - x[js]) - x[jv]);
                            row.push((js, -sq_t * kappa));
                            row.push((jv, -sq_t));
                        }
                        TerminalMode::RefSpeed => {
                            out.residuals[k] = sq_t * (x[jv] - cfg.v_ref);
                            row.push((jv, sq_t));
                        }
                    }
                }
            }
        }

        // Path inequalities.
        for (k, desc) in self.ineq_descs.iter().enumerate() {
            let row = &mut out.ineq_jac[k];
            row.clear();
            match *desc {
                IneqDesc::VelLo { chain, stage } => {
                    let jv = lay.state(chain, stage, 1);
                    let je = lay.slack(chain, 0);
                    out.ineq[k] = x[jv] + x[je];
                    row.push((jv, 1.0));
                    row.push((je, 1.0));
                }
                IneqDesc::VelHi { chain, stage } => {
                    let jv = lay.state(chain, stage, 1);
                    let je = lay.slack(chain, 0);
                    out.ineq[k] = cfg.v_max - x[jv] + x[je];
                    row.push((jv, -1.0));
                    row.push((je, 1.0));
                }
                IneqDesc::GapFloor { chain, stage } => {
                    let d = self.gap_at(x, chain, stage).expect("gap chains only");
                    let je = lay.slack(chain, 1);
                    out.ineq[k] = d + x[je] - cfg.d_min;
                    if matches!(self.chains[chain].gap, GapSource::Coupled) {
                        row.push((lay.state(0, stage, 0), 1.0));
                    }
                    row.push((lay.state(chain, stage, 0), -1.0));
                    row.push((je, 1.0));
                }
                IneqDesc::Power { chain, stage } => {
                    let ch = &self.chains[chain];
                    let ju = lay.control(chain, stage);
                    let jv = lay.state(chain, stage, 1);
                    out.ineq[k] = 1.0 - ch.m * x[ju] * x[jv] / ch.p_max;
                    row.push((ju, -ch.m * x[jv] / ch.p_max));
                    row.push((jv, -ch.m * x[ju] / ch.p_max));
                }
            }
        }
    }
}

/// Stage values entering the running cost.
#[derive(Debug, Clone, Copy)]
pub struct StageValues {
    pub u: f64,
    pub v: f64,
    pub gap: Option<f64>,
    pub mu: Option<f64>,
}

/// Role-gated running cost of one stage.
pub fn stage_cost(vals: &StageValues, cfg: &OcpConfig, role: Role) -> f64 {
    let mut cost = cfg.q_u * vals.u * vals.u;
    match role {
        Role::Leader => {
            let dv = vals.v - cfg.v_ref;
            cost += cfg.q_v * dv * dv;
        }
        Role::Mid | Role::Last => {
            if let Some(d) = vals.gap {
                let e = d - cfg.headway * vals.v;
                cost += cfg.q_d * e * e;
            }
            if let Some(mu) = vals.mu {
                let e = vals.u - mu;
                cost += cfg.q_c * e * e;
            }
        }
    }
    cost
}

/// Terminal pace cost: tracks the average velocity needed to cover the
/// remaining distance in the remaining trip time; falls back to plain
/// reference tracking when the trip clock has run out.
pub fn terminal_cost(s_n: f64, v_n: f64, t_n: f64, cfg: &OcpConfig) -> f64 {
    if t_n >= cfg.t_f {
        let e = v_n - cfg.v_ref;
        return cfg.q_t * e * e;
    }
    let pace = (cfg.s_f - s_n) / (cfg.t_f - t_n);
    let e = pace - v_n;
    cfg.q_t * e * e
}

/// Soft corridor residuals for one stage, ordered
/// `[v + eps1, v_max - v + eps1, gap + eps2 - d_min]`; all must be >= 0.
pub fn path_constraints(v: f64, gap: Option<f64>, eps1: f64, eps2: f64, cfg: &OcpConfig) -> Vec<f64> {
    let mut res = vec![v + eps1, cfg.v_max - v + eps1];
    if let Some(d) = gap {
        res.push(d + eps2 - cfg.d_min);
    }
    res
}

/// Extracted, plant-ready solution of one solve.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Commanded accelerations per chain per stage, clamped into the
    /// admissible set at the predicted speeds [m/s^2].
    pub controls: Vec<Vec<f64>>,
    /// Predicted positions per chain, stages `0..=N` [m].
    pub positions: Vec<Vec<f64>>,
    /// Predicted speeds per chain, stages `0..=N` [m/s].
    pub velocities: Vec<Vec<f64>>,
    /// Predicted applied traction per chain, stages `0..=N` [m/s^2].
    pub tractions: Vec<Vec<f64>>,
    /// `[eps_v, eps_gap]` per chain.
    pub slacks: Vec<[f64; 2]>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub converged: bool,
}

/// Maps a solver report back to trajectories, clamping every control into
/// the torque/power admissible set at its own stage speed.
pub fn extract_solution(problem: &OcpProblem, report: &SolveReport) -> OcpSolution {
    let lay = problem.layout;
    let n = lay.n_stages;
    let x = &report.x;
    let mut controls = Vec::with_capacity(problem.chains.len());
    let mut positions = Vec::with_capacity(problem.chains.len());
    let mut velocities = Vec::with_capacity(problem.chains.len());
    let mut tractions = Vec::with_capacity(problem.chains.len());
    let mut slacks = Vec::with_capacity(problem.chains.len());
    for (c, ch) in problem.chains.iter().enumerate() {
        let mut u_c = Vec::with_capacity(n);
        for stage in 0..n {
            let v = x[lay.state(c, stage, 1)].max(V_EPS);
            let u_cap = ch.u_hi.min(ch.p_max / (ch.m * v));
            u_c.push(x[lay.control(c, stage)].clamp(ch.u_lo, u_cap));
        }
        controls.push(u_c);
        positions.push((0..=n).map(|i| x[lay.state(c, i, 0)]).collect());
        velocities.push((0..=n).map(|i| x[lay.state(c, i, 1)]).collect());
        tractions.push((0..=n).map(|i| x[lay.state(c, i, 2)]).collect());
        slacks.push([x[lay.slack(c, 0)], x[lay.slack(c, 1)]]);
    }
    OcpSolution {
        controls,
        positions,
        velocities,
        tractions,
        slacks,
        objective: report.objective,
        kkt_residual: report.kkt_residual(),
        iterations: report.iterations,
        wall_time: report.wall_time,
        converged: report.converged(),
    }
}

/// Constant-speed rollout with equilibrium controls; the standard cold start.
pub fn cold_start(problem: &OcpProblem) -> Vec<f64> {
    let lay = problem.layout;
    let cfg = &problem.cfg;
    let n = lay.n_stages;
    let mut x = vec![0.0; lay.n_vars()];
    for (c, ch) in problem.chains.iter().enumerate() {
        let v0 = ch.x0[1];
        for stage in 0..=n {
            let s = ch.x0[0] + stage as f64 * cfg.dt * v0;
            let gap = match &ch.gap {
                GapSource::Free => None,
                GapSource::Data(path) => Some(path.at_stage(stage.min(n - 1)) - ch.leader_length - s),
                GapSource::Coupled => {
                    let s_lead = problem.chains[0].x0[0] + stage as f64 * cfg.dt * problem.chains[0].x0[1];
                    Some(s_lead - ch.leader_length - s)
                }
            };
            let a_eq = equilibrium_accel(&ch.model, s, v0, gap).clamp(ch.u_lo, ch.u_hi);
            x[lay.state(c, stage, 0)] = s;
            x[lay.state(c, stage, 1)] = v0;
            x[lay.state(c, stage, 2)] = a_eq;
            if stage < n {
                x[lay.control(c, stage)] = a_eq;
            }
        }
        x[lay.state(c, 0, 0)] = ch.x0[0];
        x[lay.state(c, 0, 1)] = ch.x0[1];
        x[lay.state(c, 0, 2)] = ch.x0[2];
    }
    x
}

/// Receding-horizon warm start: the previous solution shifted by
/// `shift_time` (one stage in the classic case), last stage duplicated, and
/// the initial state replaced by the new problem's pin.
pub fn warm_start(prev: &OcpSolution, problem: &OcpProblem, shift_time: f64) -> Vec<f64> {
    let lay = problem.layout;
    let cfg = &problem.cfg;
    let n = lay.n_stages;
    let mut x = cold_start(problem);
    if prev.controls.len() != problem.chains.len() || prev.controls[0].len() != n {
        return x;
    }
    let interp = |series: &[f64], t: f64| -> f64 {
        let idx = (t / cfg.dt).floor().max(0.0) as usize;
        if idx + 1 <= n {
            let i = idx.min(n - 1);
            let frac = t / cfg.dt - i as f64;
            series[i] + frac * (series[i + 1] - series[i])
        } else {
            series[n]
        }
    };
    for c in 0..problem.chains.len() {
        for stage in 0..=n {
            let t = stage as f64 * cfg.dt + shift_time;
            if t <= n as f64 * cfg.dt {
                x[lay.state(c, stage, 0)] = interp(&prev.positions[c], t);
                x[lay.state(c, stage, 1)] = interp(&prev.velocities[c], t);
                x[lay.state(c, stage, 2)] = interp(&prev.tractions[c], t);
            } else {
                // Beyond the previous horizon: constant-speed extrapolation.
                let dt_over = t - n as f64 * cfg.dt;
                x[lay.state(c, stage, 0)] =
                    prev.positions[c][n] + prev.velocities[c][n] * dt_over;
                x[lay.state(c, stage, 1)] = prev.velocities[c][n];
                x[lay.state(c, stage, 2)] = prev.tractions[c][n];
            }
            if stage < n {
                let idx = ((stage as f64 * cfg.dt + shift_time) / cfg.dt + 1e-9).floor() as usize;
                x[lay.control(c, stage)] = prev.controls[c][idx.min(n - 1)];
            }
        }
        for comp in 0..3 {
            x[lay.state(c, 0, comp)] = problem.chains[c].x0[comp];
        }
        x[lay.slack(c, 0)] = prev.slacks[c][0];
        x[lay.slack(c, 1)] = prev.slacks[c][1];
    }
    x
}
