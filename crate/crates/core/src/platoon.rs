//! V2V message lifecycle and the per-truck controller variants.
//!
//! Trucks exchange two payloads each control cycle: a forward message
//! (planned positions `S_r` and suggested controls `U_r`, truck k to k+1)
//! and a backward message (state, gear, mass, and engine limits, truck k+1
//! to k). Delivery has a fixed one-cycle delay and an optional seeded drop
//! probability; receivers fall back to the last known payload and track
//! staleness.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nlp::{self, SqpOptions};
use crate::ocp::dynamics::PlannedPath;
use crate::ocp::{
    build_considerate, build_solo, cold_start, extract_solution, warm_start, EgoContext,
    FollowerContext, LeaderPlan, OcpConfig, OcpSolution, Role,
};
use crate::powertrain::{admissible_control_set, DragReductionModel, TruckParams, TruckState};
use crate::road::{fit_preview, GradeProfile, LegendrePreview};

/// Telemetry sent upstream, truck k+1 to truck k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackwardMessage {
    /// Cycle the payload was sent on.
    pub cycle: u64,
    /// Sender truck index.
    pub from: usize,
    pub state: TruckState,
    /// Total mass [kg].
    pub mass: f64,
    /// Maximum engine power [W].
    pub p_max: f64,
    /// Maximum engine torque [N m].
    pub tau_max: f64,
    pub gear_ratios: Vec<f64>,
}

/// Plan broadcast downstream, truck k to truck k+1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardMessage {
    pub cycle: u64,
    pub from: usize,
    /// Planned forward positions per stage [m].
    pub positions: Vec<f64>,
    /// Suggested control actions per stage [m/s^2].
    pub controls: Vec<f64>,
    /// Sender vehicle length [m].
    pub sender_length: f64,
}

/// One latched inbox slot: the latest payload and its age in cycles.
#[derive(Debug, Clone)]
pub struct InboxSlot<T> {
    pub payload: Option<T>,
    /// Cycles since the payload was sent; grows while nothing arrives.
    pub staleness: u64,
}

impl<T> Default for InboxSlot<T> {
    fn default() -> Self {
        Self {
            payload: None,
            staleness: 0,
        }
    }
}

impl<T> InboxSlot<T> {
    fn accept(&mut self, payload: T) {
        self.payload = Some(payload);
        self.staleness = 1; // delivered with the fixed one-cycle delay
    }
    fn age(&mut self) {
        if self.payload.is_some() {
            self.staleness += 1;
        }
    }
}

/// Per-truck inboxes after an exchange step.
#[derive(Debug, Clone, Default)]
pub struct Inbox {
    /// Latest forward message from the preceding truck.
    pub forward: InboxSlot<ForwardMessage>,
    /// Latest backward message from the following truck.
    pub backward: InboxSlot<BackwardMessage>,
}

/// The platoon message bus: fixed one-cycle delivery delay, deterministic
/// delivery order by truck index, optional seeded drop injection.
pub struct MessageBus {
    inboxes: Vec<Inbox>,
    in_flight_fwd: Vec<Option<ForwardMessage>>,
    in_flight_bwd: Vec<Option<BackwardMessage>>,
    drop_probability: f64,
    rng: ChaCha8Rng,
    pub delivered: u64,
    pub dropped: u64,
}

impl MessageBus {
    pub fn new(n_trucks: usize, drop_probability: f64, rng: ChaCha8Rng) -> Self {
        Self {
            inboxes: vec![Inbox::default(); n_trucks],
            in_flight_fwd: vec![None; n_trucks],
            in_flight_bwd: vec![None; n_trucks],
            drop_probability,
            rng,
            delivered: 0,
            dropped: 0,
        }
    }

    pub fn inbox(&self, truck: usize) -> &Inbox {
        &self.inboxes[truck]
    }

    /// Pre-seeds an inbox payload (used for the synthetic cycle-0 plans).
    pub fn seed(&mut self, truck: usize, fwd: Option<ForwardMessage>, bwd: Option<BackwardMessage>) {
        if let Some(m) = fwd {
            self.inboxes[truck].forward.accept(m);
        }
        if let Some(m) = bwd {
            self.inboxes[truck].backward.accept(m);
        }
    }

    /// Queues messages sent during this cycle; they arrive next cycle.
    pub fn send_forward(&mut self, msg: ForwardMessage) {
        let from = msg.from;
        if from + 1 < self.inboxes.len() {
            self.in_flight_fwd[from] = Some(msg);
        }
    }

    pub fn send_backward(&mut self, msg: BackwardMessage) {
        let from = msg.from;
        if from > 0 {
            self.in_flight_bwd[from] = Some(msg);
        }
    }

    /// Delivers everything queued last cycle; order is deterministic by
    /// sender index, forward before backward.
    pub fn exchange(&mut self) {
        for inbox in &mut self.inboxes {
            inbox.forward.age();
            inbox.backward.age();
        }
        for from in 0..self.in_flight_fwd.len() {
            if let Some(msg) = self.in_flight_fwd[from].take() {
                if self.roll_delivery() {
                    self.inboxes[from + 1].forward.accept(msg);
                }
            }
        }
        for from in 0..self.in_flight_bwd.len() {
            if let Some(msg) = self.in_flight_bwd[from].take() {
                if self.roll_delivery() {
                    self.inboxes[from - 1].backward.accept(msg);
                }
            }
        }
    }

    fn roll_delivery(&mut self) -> bool {
        if self.drop_probability <= 0.0 {
            self.delivered += 1;
            return true;
        }
        if self.rng.gen::<f64>() < self.drop_probability {
            self.dropped += 1;
            false
        } else {
            self.delivered += 1;
            true
        }
    }
}

/// Classical constant-time-headway CACC gains.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CaccGains {
    /// Gap-error gain [1/s^2].
    pub k_p: f64,
    /// Relative-speed gain [1/s].
    pub k_v: f64,
    /// Leader-acceleration feedforward [-].
    pub k_ff: f64,
    /// Target headway [s].
    pub headway: f64,
}

impl Default for CaccGains {
    fn default() -> Self {
        Self {
            k_p: 0.2,
            k_v: 0.7,
            k_ff: 1.0,
            headway: 0.72,
        }
    }
}

/// Constant-time-headway PD law with acceleration feedforward (unclamped).
pub fn cacc_law(gap: f64, v_ego: f64, v_lead: f64, a_lead: f64, gains: &CaccGains) -> f64 {
    gains.k_p * (gap - gains.headway * v_ego) + gains.k_v * (v_lead - v_ego) + gains.k_ff * a_lead
}

/// Proportional cruise gain used by leaders and disengaged trucks without a
/// predictive plan [1/s].
const CRUISE_GAIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Considerate,
    Anticipative,
    Cacc,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Considerate => "considerate",
            ControllerKind::Anticipative => "anticipative",
            ControllerKind::Cacc => "cacc",
        }
    }
}

/// Everything the simulator hands a controller for one step.
pub struct StepInput<'a> {
    pub cycle: u64,
    pub t_now: f64,
    pub state: TruckState,
    pub profile: &'a GradeProfile,
    pub drag: &'a DragReductionModel,
    pub inbox: &'a Inbox,
    /// Measured bumper gap to the preceding truck [m] (radar).
    pub gap_measured: Option<f64>,
    /// Measured closing rate `v_lead - v_ego` [m/s] (radar).
    pub closing_rate: Option<f64>,
    pub dt_ctrl: f64,
}

/// Per-step controller diagnostics for the trajectory log.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub kkt: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub eps_v: f64,
    pub eps_gap: f64,
    /// Considerate step degraded to the solo problem (stale or absent
    /// follower data, or the follower left the drafting envelope).
    pub degraded: bool,
    /// Solver failure handled by a fallback control.
    pub fallback: bool,
}

pub struct StepOutput {
    pub u: f64,
    pub forward: Option<ForwardMessage>,
    pub stats: StepStats,
}

/// One truck's controller: kind, planner state, and fallback bookkeeping.
pub struct TruckController {
    pub index: usize,
    pub kind: ControllerKind,
    pub is_last: bool,
    pub params: TruckParams,
    pub cfg: OcpConfig,
    pub gains: CaccGains,
    pub sqp: SqpOptions,
    /// Messages older than this many cycles are discarded.
    pub staleness_limit: u64,
    /// A follower reporting a gap beyond this is treated as out of the
    /// platoon and no longer planned for [m].
    pub follower_gap_limit: f64,
    pub disengaged: bool,
    prev_solution: Option<OcpSolution>,
    /// The suggestion block this truck last broadcast, with its cycle.
    last_suggestion: Option<(u64, Vec<f64>)>,
    fail_count: u32,
    /// Recent `(s, a_t)` trail for the CACC state broadcast.
    trail: VecDeque<(f64, f64)>,
}

impl TruckController {
    pub fn new(
        index: usize,
        is_last: bool,
        kind: ControllerKind,
        params: TruckParams,
        cfg: OcpConfig,
        gains: CaccGains,
    ) -> Self {
        Self {
            index,
            kind,
            is_last,
            params,
            cfg,
            gains,
            sqp: SqpOptions::default(),
            staleness_limit: 3,
            follower_gap_limit: 110.0,
            disengaged: false,
            prev_solution: None,
            last_suggestion: None,
            fail_count: 0,
            trail: VecDeque::new(),
        }
    }

    fn role(&self) -> Role {
        if self.index == 0 {
            Role::Leader
        } else if self.is_last {
            Role::Last
        } else {
            Role::Mid
        }
    }

    /// Grade preview covering the horizon's reachable positions.
    fn fit_own_preview(&self, profile: &GradeProfile, s: f64, v: f64) -> LegendrePreview {
        let horizon = self.cfg.n_stages as f64 * self.cfg.dt;
        let s_plus = v.max(5.0) * horizon + 200.0;
        fit_preview(profile, s - 10.0, s_plus, 20).expect("preview fit on valid window")
    }

    /// Resamples a received plan onto this truck's stage grid, accounting
    /// for the message age.
    fn resample_plan(&self, msg: &ForwardMessage, age_cycles: u64, dt_ctrl: f64) -> LeaderPlan {
        let n = self.cfg.n_stages;
        let shift = age_cycles as f64 * dt_ctrl;
        let path = PlannedPath {
            positions: msg.positions.clone(),
            dt: self.cfg.dt,
        };
        let positions = (0..n)
            .map(|i| path.at_time(shift + i as f64 * self.cfg.dt))
            .collect();
        let controls = (0..n)
            .map(|i| {
                let idx = ((shift + i as f64 * self.cfg.dt) / self.cfg.dt + 1e-9).floor() as usize;
                msg.controls[idx.min(msg.controls.len() - 1)]
            })
            .collect();
        LeaderPlan {
            positions,
            controls,
            leader_length: msg.sender_length,
        }
    }

    /// Runs one control cycle; see the module docs for the message protocol.
    pub fn step(&mut self, input: &StepInput) -> StepOutput {
        match self.kind {
            ControllerKind::Cacc => self.step_cacc(input),
            ControllerKind::Considerate | ControllerKind::Anticipative => self.step_mpc(input),
        }
    }

    fn step_cacc(&mut self, input: &StepInput) -> StepOutput {
        let state = &input.state;
        self.trail.push_back((state.s, state.a_t));
        while self.trail.len() > self.cfg.n_stages {
            self.trail.pop_front();
        }
        let (u_lo, u_hi) = admissible_control_set(state.v, state.gear, &self.params);
        let u = if self.index == 0 || self.disengaged {
            (CRUISE_GAIN * (self.cfg.v_ref - state.v)).clamp(u_lo, u_hi)
        } else {
            let gap = input.gap_measured.unwrap_or(f64::INFINITY);
            let v_lead = state.v + input.closing_rate.unwrap_or(0.0);
            let a_lead = input
                .inbox
                .forward
                .payload
                .as_ref()
                .and_then(|m| m.controls.last().copied())
                .unwrap_or(0.0);
            cacc_law(gap, state.v, v_lead, a_lead, &self.gains).clamp(u_lo, u_hi)
        };
        // State trail as the plan proxy: recent positions and tractions,
        // newest last, padded at the front.
        let n = self.cfg.n_stages;
        let mut positions: Vec<f64> = self.trail.iter().map(|&(s, _)| s).collect();
        let mut controls: Vec<f64> = self.trail.iter().map(|&(_, a)| a).collect();
        while positions.len() < n {
            positions.insert(0, positions[0]);
            controls.insert(0, controls[0]);
        }
        StepOutput {
            u,
            forward: Some(ForwardMessage {
                cycle: input.cycle,
                from: self.index,
                positions,
                controls,
                sender_length: self.params.length,
            }),
            stats: StepStats::default(),
        }
    }

    fn step_mpc(&mut self, input: &StepInput) -> StepOutput {
        let mut stats = StepStats::default();
        let role = if self.disengaged { Role::Leader } else { self.role() };

        let preview = self.fit_own_preview(input.profile, input.state.s, input.state.v);
        let leader_plan = if role == Role::Leader {
            None
        } else {
            match &input.inbox.forward.payload {
                Some(msg) => {
                    if input.inbox.forward.staleness > self.staleness_limit {
                        stats.degraded = true;
                    }
                    Some(self.resample_plan(msg, input.inbox.forward.staleness, input.dt_ctrl))
                }
                None => {
                    stats.degraded = true;
                    None
                }
            }
        };
        let effective_role = if leader_plan.is_none() { Role::Leader } else { role };
        let ego = EgoContext {
            role: effective_role,
            state: input.state,
            params: self.params.clone(),
            preview,
            leader_plan,
            t_now: input.t_now,
        };

        // Considerate trucks plan jointly with a fresh, still-platooning
        // follower; otherwise they degrade to the solo problem.
        let follower = if self.kind == ControllerKind::Considerate
            && !self.is_last
            && !self.disengaged
        {
            match &input.inbox.backward.payload {
                Some(msg) if input.inbox.backward.staleness <= self.staleness_limit => {
                    let gap = input.state.s - self.params.length - msg.state.s;
                    if gap <= self.follower_gap_limit {
                        Some(self.follower_context(msg, input))
                    } else {
                        stats.degraded = true;
                        None
                    }
                }
                _ => {
                    stats.degraded = true;
                    None
                }
            }
        } else {
            None
        };

        let problem = match &follower {
            Some(fctx) => build_considerate(&ego, fctx, *input.drag, &self.cfg),
            None => build_solo(
                &ego,
                *input.drag,
                &self.cfg,
                self.kind == ControllerKind::Considerate,
            ),
        };
        let problem = match problem {
            Ok(p) => p,
            Err(_) => return self.failure_output(input, &mut stats),
        };

        let guess = match &self.prev_solution {
            Some(prev) => warm_start(prev, &problem, input.dt_ctrl),
            None => cold_start(&problem),
        };
        let report = nlp::solve(&problem, &guess, &self.sqp);
        stats.kkt = report.kkt_residual();
        stats.iterations = report.iterations;
        stats.wall_time = report.wall_time;

        if !report.converged() {
            return self.failure_output(input, &mut stats);
        }
        self.fail_count = 0;
        let sol = extract_solution(&problem, &report);
        stats.eps_v = sol.slacks[0][0];
        stats.eps_gap = sol.slacks[0][1];

        let u = sol.controls[0][0];
        let n = self.cfg.n_stages;
        // Broadcast own planned positions; suggest the follower's joint
        // block when present, otherwise share own controls.
        let suggestion = if sol.controls.len() > 1 {
            sol.controls[1].clone()
        } else {
            sol.controls[0].clone()
        };
        let forward = ForwardMessage {
            cycle: input.cycle,
            from: self.index,
            positions: sol.positions[0][..n].to_vec(),
            controls: suggestion.clone(),
            sender_length: self.params.length,
        };
        self.last_suggestion = Some((input.cycle, suggestion));
        self.prev_solution = Some(sol);
        StepOutput {
            u,
            forward: Some(forward),
            stats,
        }
    }

    /// Follower model data from the backward message; hardware constants the
    /// message does not carry are taken from the ego's own parameters (the
    /// fleet shares hardware).
    fn follower_context(&self, msg: &BackwardMessage, input: &StepInput) -> FollowerContext {
        let mut params = self.params.clone();
        params.m = msg.mass;
        params.p_max = msg.p_max;
        params.tau_max = msg.tau_max;
        if msg.gear_ratios.len() == params.gear_efficiency.len() {
            params.gear_ratios = msg.gear_ratios.clone();
        }
        let gear = msg.state.gear.min(params.gear_ratios.len() - 1);
        let mut state = msg.state;
        state.gear = gear;
        let preview = self.fit_own_preview(input.profile, state.s, state.v);
        let mu = self.last_suggestion.as_ref().map(|(cycle, controls)| {
            let age = input.cycle.saturating_sub(*cycle);
            let shift = age as f64 * input.dt_ctrl;
            (0..self.cfg.n_stages)
                .map(|i| {
                    let idx =
                        ((shift + i as f64 * self.cfg.dt) / self.cfg.dt + 1e-9).floor() as usize;
                    controls[idx.min(controls.len() - 1)]
                })
                .collect()
        });
        FollowerContext {
            state,
            params,
            preview,
            mu,
        }
    }

    /// Solver-failure policy: the first failure applies the previous plan's
    /// next control; a repeated failure coasts and latches disengagement.
    fn failure_output(&mut self, input: &StepInput, stats: &mut StepStats) -> StepOutput {
        self.fail_count += 1;
        stats.fallback = true;
        let u = if self.fail_count == 1 {
            self.prev_solution
                .as_ref()
                .map(|s| s.controls[0][1.min(s.controls[0].len() - 1)])
                .unwrap_or(0.0)
        } else {
            self.disengaged = true;
            0.0
        };
        let (u_lo, u_hi) = admissible_control_set(input.state.v, input.state.gear, &self.params);
        StepOutput {
            u: u.clamp(u_lo, u_hi),
            forward: None,
            stats: *stats,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powertrain::{fit_drag_reduction, DRAG_DATA};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn cacc_law_cases() {
        let gains = CaccGains::default();
        // On the headway curve with matched speeds and a coasting leader.
        assert_eq!(cacc_law(0.72 * 25.0, 25.0, 25.0, 0.0, &gains), 0.0);
        // Five meters short at k_p = 0.2: -1 m/s^2 before clamping.
        let g = CaccGains {
            k_p: 0.2,
            k_v: 0.0,
            k_ff: 0.0,
            headway: 1.0,
        };
        assert_relative_eq!(cacc_law(20.0, 25.0, 25.0, 0.0, &g), -1.0);
    }

    fn fwd(cycle: u64, from: usize) -> ForwardMessage {
        ForwardMessage {
            cycle,
            from,
            positions: vec![0.0; 22],
            controls: vec![0.0; 22],
            sender_length: 18.0,
        }
    }

    fn bwd(cycle: u64, from: usize) -> BackwardMessage {
        BackwardMessage {
            cycle,
            from,
            state: TruckState::at_speed(0.0, 25.0, 9),
            mass: 38_000.0,
            p_max: 330.0e3,
            tau_max: 2500.0,
            gear_ratios: TruckParams::tractor(38_000.0).gear_ratios,
        }
    }

    #[test]
    fn exchange_delivers_with_one_cycle_delay() {
        let mut bus = MessageBus::new(3, 0.0, ChaCha8Rng::seed_from_u64(1));
        bus.send_forward(fwd(0, 0));
        bus.send_forward(fwd(0, 1));
        bus.send_backward(bwd(0, 1));
        bus.send_backward(bwd(0, 2));
        // Nothing delivered before the exchange point.
        assert!(bus.inbox(1).forward.payload.is_none());
        bus.exchange();
        assert_eq!(bus.inbox(1).forward.payload.as_ref().unwrap().cycle, 0);
        assert_eq!(bus.inbox(2).forward.payload.as_ref().unwrap().from, 1);
        assert_eq!(bus.inbox(0).backward.payload.as_ref().unwrap().from, 1);
        assert_eq!(bus.inbox(1).backward.payload.as_ref().unwrap().from, 2);
        assert_eq!(bus.inbox(1).forward.staleness, 1);
        // No new messages: staleness grows.
        bus.exchange();
        assert_eq!(bus.inbox(1).forward.staleness, 2);
    }

    #[test]
    fn full_drop_only_ages_the_inboxes() {
        let mut bus = MessageBus::new(2, 1.0, ChaCha8Rng::seed_from_u64(1));
        for cycle in 0..10 {
            bus.send_forward(fwd(cycle, 0));
            bus.exchange();
            assert!(bus.inbox(1).forward.payload.is_none());
        }
        assert_eq!(bus.delivered, 0);
        assert_eq!(bus.dropped, 10);
    }

    #[test]
    fn seeded_drop_rate_matches_probability() {
        let mut bus = MessageBus::new(2, 0.2, ChaCha8Rng::seed_from_u64(42));
        for cycle in 0..1000 {
            bus.send_forward(fwd(cycle, 0));
            bus.exchange();
        }
        let frac = bus.delivered as f64 / 1000.0;
        assert!((frac - 0.8).abs() <= 0.03, "delivered fraction {frac}");
    }

    fn drag() -> DragReductionModel {
        fit_drag_reduction(&DRAG_DATA).unwrap().model
    }

    fn flat_profile() -> GradeProfile {
        GradeProfile::new(vec![(-5000.0, 0.0), (200_000.0, 0.0)]).unwrap()
    }

    fn eq_accel(params: &TruckParams, v: f64, gap: Option<f64>) -> f64 {
        let beta = gap.map_or(1.0, |d| drag().eval(d));
        (0.5 * params.rho * params.a_f * params.c_d * beta * v * v
            + params.m * params.grav * params.c_r)
            / params.m
    }

    fn pace_neutral_cfg() -> OcpConfig {
        OcpConfig {
            s_f: 150.0e3,
            t_f: 150.0e3 / 25.0,
            ..OcpConfig::default()
        }
    }

    /// Considerate leader with an equilibrium follower: applied control and
    /// broadcast suggestion sit at the respective equilibria, and the
    /// suggestion equals the joint solution's follower block, stage for stage.
    #[test]
    fn considerate_step_at_equilibrium() {
        let cfg = pace_neutral_cfg();
        let params = TruckParams::tractor(14_000.0);
        let mut state = TruckState::at_speed(0.0, 25.0, params.cruise_gear(25.0));
        state.a_t = eq_accel(&params, 25.0, None);
        let mut ctrl = TruckController::new(
            0,
            false,
            ControllerKind::Considerate,
            params,
            cfg,
            CaccGains::default(),
        );

        let f_params = TruckParams::tractor(38_000.0);
        let gap = 0.72 * 25.0;
        let mut f_state = TruckState::at_speed(-(18.0 + gap), 25.0, f_params.cruise_gear(25.0));
        f_state.a_t = eq_accel(&f_params, 25.0, Some(gap));
        let mut inbox = Inbox::default();
        inbox.backward.payload = Some(BackwardMessage {
            cycle: 0,
            from: 1,
            state: f_state,
            mass: 38_000.0,
            p_max: f_params.p_max,
            tau_max: f_params.tau_max,
            gear_ratios: f_params.gear_ratios.clone(),
        });
        inbox.backward.staleness = 1;

        let profile = flat_profile();
        let d = drag();
        let input = StepInput {
            cycle: 1,
            t_now: 0.2,
            state,
            profile: &profile,
            drag: &d,
            inbox: &inbox,
            gap_measured: None,
            closing_rate: None,
            dt_ctrl: 0.2,
        };
        let out = ctrl.step(&input);
        assert!(!out.stats.degraded && !out.stats.fallback);
        let u_eq_ego = eq_accel(&ctrl.params, 25.0, None);
        let u_eq_fol = eq_accel(&f_params, 25.0, Some(gap));
        assert!(
            (out.u - u_eq_ego).abs() < 0.02,
            "u {} vs ego equilibrium {}",
            out.u,
            u_eq_ego
        );
        let fwd_msg = out.forward.unwrap();
        assert!(
            (fwd_msg.controls[0] - u_eq_fol).abs() < 0.03,
            "suggestion {} vs follower equilibrium {}",
            fwd_msg.controls[0],
            u_eq_fol
        );
        let prev = ctrl.prev_solution.as_ref().unwrap();
        assert_eq!(prev.controls.len(), 2);
        assert_eq!(fwd_msg.controls, prev.controls[1]);
        assert_eq!(fwd_msg.positions[0], prev.positions[0][0]);
    }

    /// Anticipative follower with a constant-speed leader plan on the
    /// headway curve: the first control sits near the drafting equilibrium
    /// (slightly above it, by the drafting gradient).
    #[test]
    fn anticipative_step_near_equilibrium() {
        let cfg = pace_neutral_cfg();
        let params = TruckParams::tractor(38_000.0);
        let gap = 0.72 * 25.0;
        let mut state = TruckState::at_speed(0.0, 25.0, params.cruise_gear(25.0));
        state.a_t = eq_accel(&params, 25.0, Some(gap));
        let mut ctrl = TruckController::new(
            1,
            true,
            ControllerKind::Anticipative,
            params,
            cfg.clone(),
            CaccGains::default(),
        );
        let mut inbox = Inbox::default();
        // Plan sent one cycle ago; after the 0.2 s shift it passes exactly
        // through the current leader position.
        let positions: Vec<f64> = (0..cfg.n_stages)
            .map(|i| gap + 18.0 - 25.0 * 0.2 + 25.0 * cfg.dt * i as f64)
            .collect();
        inbox.forward.payload = Some(ForwardMessage {
            cycle: 0,
            from: 0,
            positions,
            controls: vec![0.1; cfg.n_stages],
            sender_length: 18.0,
        });
        inbox.forward.staleness = 1;
        let profile = flat_profile();
        let d = drag();
        let input = StepInput {
            cycle: 1,
            t_now: 0.2,
            state,
            profile: &profile,
            drag: &d,
            inbox: &inbox,
            gap_measured: Some(gap),
            closing_rate: Some(0.0),
            dt_ctrl: 0.2,
        };
        let out = ctrl.step(&input);
        assert!(!out.stats.fallback);
        let u_eq = eq_accel(&ctrl.params, 25.0, Some(gap));
        assert!(
            (out.u - u_eq).abs() < 0.02,
            "u {} vs drafting equilibrium {}",
            out.u,
            u_eq
        );
    }

    /// Resampling a one-cycle-old plan shifts it by the control period.
    #[test]
    fn plan_resampling_accounts_for_age() {
        let cfg = OcpConfig::default();
        let ctrl = TruckController::new(
            1,
            true,
            ControllerKind::Anticipative,
            TruckParams::tractor(38_000.0),
            cfg.clone(),
            CaccGains::default(),
        );
        let msg = ForwardMessage {
            cycle: 0,
            from: 0,
            positions: (0..cfg.n_stages).map(|i| 100.0 + 12.5 * i as f64).collect(),
            controls: (0..cfg.n_stages).map(|i| i as f64).collect(),
            sender_length: 18.0,
        };
        let plan = ctrl.resample_plan(&msg, 1, 0.2);
        // 0.2 s shift along a 25 m/s plan.
        assert_relative_eq!(plan.positions[0], 105.0, epsilon = 1e-9);
        assert_relative_eq!(plan.positions[1], 117.5, epsilon = 1e-9);
        // Piecewise-constant controls pick the covering stage.
        assert_eq!(plan.controls[0], 0.0);
        assert_eq!(plan.controls[1], 1.0);
    }

    /// Forced solver failure exercises the shift fallback, then the coast
    /// and disengage latch.
    #[test]
    fn solver_failure_falls_back_then_disengages() {
        let cfg = pace_neutral_cfg();
        let params = TruckParams::tractor(14_000.0);
        let mut state = TruckState::at_speed(0.0, 25.0, params.cruise_gear(25.0));
        state.a_t = eq_accel(&params, 25.0, None);
        let mut ctrl = TruckController::new(
            0,
            true,
            ControllerKind::Anticipative,
            params,
            cfg,
            CaccGains::default(),
        );
        let profile = flat_profile();
        let d = drag();
        let inbox = Inbox::default();
        let input = StepInput {
            cycle: 1,
            t_now: 0.2,
            state,
            profile: &profile,
            drag: &d,
            inbox: &inbox,
            gap_measured: None,
            closing_rate: None,
            dt_ctrl: 0.2,
        };
        let good = ctrl.step(&input);
        assert!(!good.stats.fallback);
        let expected_second = ctrl.prev_solution.as_ref().unwrap().controls[0][1];

        // Starve the solver so it cannot converge.
        ctrl.sqp.max_iter = 1;
        let out = ctrl.step(&input);
        assert!(out.stats.fallback);
        assert!(out.forward.is_none());
        assert_relative_eq!(out.u, expected_second, epsilon = 1e-12);
        assert!(!ctrl.disengaged);

        let out = ctrl.step(&input);
        assert!(out.stats.fallback);
        assert_eq!(out.u, 0.0);
        assert!(ctrl.disengaged);
    }

    /// CACC saturation: the demanded acceleration exceeds the admissible set
    /// and gets clamped, leaving a speed deficit it cannot remove.
    #[test]
    fn cacc_saturates_under_authority_limits() {
        let gains = CaccGains::default();
        let params = TruckParams::tractor(38_000.0);
        let (u_lo, u_hi) = admissible_control_set(24.0, params.n_gears() - 1, &params);
        let demanded = cacc_law(10.0, 24.0, 27.0, 0.5, &gains);
        let applied = demanded.clamp(u_lo, u_hi);
        assert!(demanded > u_hi, "demanded {demanded} vs cap {u_hi}");
        assert!(applied < demanded);
        assert!(u_hi < 0.5);
    }
}
