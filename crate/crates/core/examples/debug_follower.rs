// Scratch diagnostics for the solo follower fixture (not part of the deliverable).
use platoon_core::nlp::{self, SqpOptions};
use platoon_core::ocp::*;
use platoon_core::powertrain::{fit_drag_reduction, TruckParams, TruckState, DRAG_DATA};
use platoon_core::road::LegendrePreview;

fn main() {
    let drag = fit_drag_reduction(&DRAG_DATA).unwrap().model;
    let flat = LegendrePreview { c: [0.0; 4], s_start: -1000.0, s_plus: 5000.0 };
    let cfg = OcpConfig { s_f: 100.0e3, t_f: 100.0e3 / 25.0, ..OcpConfig::default() };

    let params = TruckParams::tractor(38_000.0);
    let v = 25.0;
    let gap = 0.72 * 25.0;
    let beta = drag.eval(gap);
    let u_eq = (0.5 * params.rho * params.a_f * params.c_d * beta * v * v
        + params.m * params.grav * params.c_r) / params.m;
    let leader_len = params.length;
    let positions: Vec<f64> = (0..cfg.n_stages)
        .map(|i| gap + leader_len + v * cfg.dt * i as f64)
        .collect();
    let mut state = TruckState::at_speed(0.0, v, params.cruise_gear(v));
    state.a_t = u_eq;
    let ego = EgoContext {
        role: Role::Last,
        state,
        params,
        preview: flat,
        leader_plan: Some(LeaderPlan { positions: positions.clone(), controls: vec![u_eq; cfg.n_stages], leader_length: leader_len }),
        t_now: 0.0,
    };
    let p = build_solo(&ego, drag, &cfg, false).unwrap();
    let report = nlp::solve(&p, &cold_start(&p), &SqpOptions::default());
    println!("status {:?} iters {} kkt {:.2e}", report.status, report.iterations, report.kkt_residual());
    let sol = extract_solution(&p, &report);
    println!("u_eq = {u_eq}, beta = {beta}");
    println!("u: {:?}", &sol.controls[0][..8]);
    println!("v: {:?}", &sol.velocities[0][..8]);
    let gaps: Vec<f64> = (0..cfg.n_stages)
        .map(|i| positions[i] - leader_len - sol.positions[0][i])
        .collect();
    println!("gap: {:?}", &gaps[..8]);
    println!("gap err d-Tv: {:?}", (0..8).map(|i| gaps[i] - 0.72 * sol.velocities[0][i]).collect::<Vec<_>>());
    println!("terminal v {}, gap {}", sol.velocities[0][22], gaps[21]);
}
