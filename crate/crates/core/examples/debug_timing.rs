// Scratch timing for warm/cold solves (not part of the deliverable).
use platoon_core::nlp::{self, SqpOptions};
use platoon_core::ocp::*;
use platoon_core::powertrain::{fit_drag_reduction, TruckParams, TruckState, DRAG_DATA};
use platoon_core::road::{fit_preview, standard_s_road};
use std::time::Instant;

fn main() {
    let drag = fit_drag_reduction(&DRAG_DATA).unwrap().model;
    let road = standard_s_road();
    let cfg = OcpConfig {
        s_f: 35.0e3,
        t_f: 35.0e3 / 25.0 + 120.0,
        ..OcpConfig::default()
    };

    // Considerate pair entering the downhill.
    let params_e = TruckParams::tractor(14_000.0);
    let params_f = TruckParams::tractor(38_000.0);
    let s_e = 4.6e3;
    let s_f_pos = s_e - params_e.length - 18.0;
    let preview_e = fit_preview(&road, s_e - 10.0, 25.0 * 11.0 + 200.0, 20).unwrap();
    let preview_f = fit_preview(&road, s_f_pos - 10.0, 25.0 * 11.0 + 200.0, 20).unwrap();
    let mut st_e = TruckState::at_speed(s_e, 25.0, params_e.cruise_gear(25.0));
    st_e.a_t = 0.23;
    let mut st_f = TruckState::at_speed(s_f_pos, 25.0, params_f.cruise_gear(25.0));
    st_f.a_t = 0.12;
    let ego = EgoContext {
        role: Role::Leader,
        state: st_e,
        params: params_e,
        preview: preview_e,
        leader_plan: None,
        t_now: 0.0,
    };
    let follower = FollowerContext {
        state: st_f,
        params: params_f,
        preview: preview_f,
        mu: Some(vec![0.1; cfg.n_stages]),
    };
    let p = build_considerate(&ego, &follower, drag, &cfg).unwrap();
    let opts = SqpOptions::default();

    let t0 = Instant::now();
    let cold_report = nlp::solve(&p, &cold_start(&p), &opts);
    println!(
        "cold considerate: {:?} iters {} in {:.2} ms",
        cold_report.status,
        cold_report.iterations,
        t0.elapsed().as_secs_f64() * 1e3
    );
    let sol = extract_solution(&p, &cold_report);

    // Warm: same problem from the shifted previous solution, repeated.
    let n_rep = 200;
    let guess = warm_start(&sol, &p, 0.2);
    let t0 = Instant::now();
    let mut iters = 0;
    for _ in 0..n_rep {
        let r = nlp::solve(&p, &guess, &opts);
        iters += r.iterations;
        assert!(r.converged());
    }
    let warm_ms = t0.elapsed().as_secs_f64() * 1e3 / n_rep as f64;
    println!(
        "warm considerate: {:.3} ms avg, {:.1} iters avg",
        warm_ms,
        iters as f64 / n_rep as f64
    );

    // Solo (anticipative) timing.
    let plan: Vec<f64> = (0..cfg.n_stages)
        .map(|i| s_e + 25.0 * 0.5 * i as f64)
        .collect();
    let ego_f = EgoContext {
        role: Role::Last,
        state: st_f,
        params: TruckParams::tractor(38_000.0),
        preview: preview_f,
        leader_plan: Some(LeaderPlan {
            positions: plan,
            controls: vec![0.1; cfg.n_stages],
            leader_length: 18.0,
        }),
        t_now: 0.0,
    };
    let ps = build_solo(&ego_f, drag, &cfg, false).unwrap();
    let solo_cold = nlp::solve(&ps, &cold_start(&ps), &opts);
    let solo_sol = extract_solution(&ps, &solo_cold);
    let guess_s = warm_start(&solo_sol, &ps, 0.2);
    let t0 = Instant::now();
    for _ in 0..n_rep {
        let r = nlp::solve(&ps, &guess_s, &opts);
        assert!(r.converged());
    }
    println!(
        "warm solo: {:.3} ms avg",
        t0.elapsed().as_secs_f64() * 1e3 / n_rep as f64
    );
}
