// Scratch diagnostics for the OCP solves (not part of the deliverable).
use platoon_core::nlp::{self, Evaluation, NlpProblem, SqpOptions};
use platoon_core::ocp::dynamics::equilibrium_accel;
use platoon_core::ocp::*;
use platoon_core::powertrain::{fit_drag_reduction, TruckParams, TruckState, DRAG_DATA};
use platoon_core::road::LegendrePreview;

fn main() {
    let drag = fit_drag_reduction(&DRAG_DATA).unwrap().model;
    let flat = LegendrePreview {
        c: [0.0; 4],
        s_start: -1000.0,
        s_plus: 5000.0,
    };
    let cfg = OcpConfig {
        s_f: 100.0e3,
        t_f: 100.0e3 / 25.0,
        ..OcpConfig::default()
    };

    // Leader fixture.
    let params = TruckParams::tractor(14_000.0);
    let v = 25.0;
    let beta = 1.0;
    let a_eq = (0.5 * params.rho * params.a_f * params.c_d * beta * v * v
        + params.m * params.grav * params.c_r)
        / params.m;
    let mut state = TruckState::at_speed(0.0, v, params.cruise_gear(v));
    state.a_t = a_eq;
    let ego = EgoContext {
        role: Role::Leader,
        state,
        params,
        preview: flat,
        leader_plan: None,
        t_now: 0.0,
    };
    let p = build_solo(&ego, drag, &cfg, false).unwrap();
    let opts = SqpOptions {
        trace_path: Some("/tmp/leader_trace.txt".into()),
        ..SqpOptions::default()
    };
    let report = nlp::solve(&p, &cold_start(&p), &opts);
    println!(
        "leader: status {:?} iters {} kkt {:?}",
        report.status, report.iterations, report.kkt
    );
    let sol = extract_solution(&p, &report);
    println!("leader u[0..6] {:?}", &sol.controls[0][..6]);
    println!("leader v full {:?}", &sol.velocities[0]);
    println!("eq = {a_eq}");

    // Evaluate objective on solution vs pure equilibrium rollout guess.
    let mut ws = Evaluation::sized(&p);
    p.eval(&report.x, &mut ws);
    println!(
        "J(sol) = {}, eq-feas = {:.2e}",
        nlp::objective(&p, &ws, &report.x),
        ws.eq.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    );
    let x_eq = cold_start(&p);
    p.eval(&x_eq, &mut ws);
    println!(
        "J(cold rollout guess) = {} (defect {:.2e})",
        nlp::objective(&p, &ws, &x_eq),
        ws.eq.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    );
    let trace = std::fs::read_to_string("/tmp/leader_trace.txt").unwrap();
    for line in trace.lines().take(12) {
        println!("  {line}");
    }
    println!("  ... last:");
    for line in trace.lines().rev().take(3).collect::<Vec<_>>().iter().rev() {
        println!("  {line}");
    }
}

// Follower diagnostics appended below via include trick in main -- see debug_follower.
