use domo::fedopt::{method_from_name, run, Experiment, Sampling, ServerState, Simulator};
use domo::objectives::{ClientObjective, Problem, Sample};
use domo::trace::Trace;
use domo::ParamVec;

/// Clients `½xᵀAx − b_iᵀx` sharing a diagonal `A`, one centre per client.
fn quadratic_problem(centres: &[Vec<f64>], curvature: &[f64], samples: usize) -> Problem {
    let d = curvature.len();
    let mut hessian = vec![0.0; d * d];
    for (i, a) in curvature.iter().enumerate() {
        hessian[i * d + i] = *a;
    }
    let clients = centres
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let samples = (0..samples)
                .map(|i| {
                    let jitter = 0.1 * ((i + k) as f64).sin();
                    Sample::new(c.iter().map(|v| v + jitter).collect(), 0.0)
                })
                .collect();
            ClientObjective::quadratic(hessian.clone(), samples, 0.0).unwrap()
        })
        .collect();
    Problem::new(clients).unwrap()
}

fn centres(k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| (0..d).map(|i| ((c * d + i) as f64 * 0.7).cos() * 2.0).collect())
        .collect()
}

#[test]
fn resume_from_serialized_state_is_bitwise_identical() {
    let problem = quadratic_problem(&centres(4, 3), &[0.5, 1.0, 2.0], 6);
    for name in ["domo", "fedavgslm"] {
        let cfg = method_from_name(name).unwrap();
        let mut exp = Experiment::new(&problem, name, cfg, 10);
        exp.sampling = Sampling::Batch(2);
        exp.seed = 17;
        exp.x0 = ParamVec::from_vec(vec![1.0, -1.0, 0.5]);
        let straight = run(exp.clone()).unwrap();

        let mut sim = Simulator::new(exp.clone()).unwrap();
        for _ in 0..4 {
            sim.step().unwrap();
        }
        let saved = serde_json::to_string(sim.server()).unwrap();
        let buffer = sim.avg_buffer().clone();
        drop(sim);
        let server: ServerState = serde_json::from_str(&saved).unwrap();
        let mut resumed = Simulator::resume(exp, server, Some(buffer)).unwrap();
        let mut last = None;
        for _ in 4..10 {
            last = Some(resumed.step().unwrap());
        }
        let (state, _) = resumed.finish();
        assert_eq!(state.x_cur, straight.final_model, "{name}");
        assert_eq!(last.as_ref(), straight.metrics.last(), "{name}");
    }
}

#[test]
fn non_participants_do_not_enter_aggregation() {
    let mut cs = centres(4, 2);
    let problem = quadratic_problem(&cs, &[1.0, 0.5], 1);
    let mut cfg = method_from_name("fedavgsm").unwrap();
    cfg.participation = Some(2);
    let mut exp = Experiment::new(&problem, "fedavgsm", cfg.clone(), 1);
    exp.seed = 3;
    exp.record_trace = true;
    let out = run(exp).unwrap();
    let trace = out.trace.unwrap();
    let chosen = &trace.meta.participants[0];
    assert_eq!(chosen.len(), 2);

    // Moving the absent clients' data leaves the round unchanged.
    for (k, c) in cs.iter_mut().enumerate() {
        if !chosen.contains(&k) {
            c.iter_mut().for_each(|v| *v += 1e3);
        }
    }
    let shifted = quadratic_problem(&cs, &[1.0, 0.5], 1);
    let mut exp = Experiment::new(&shifted, "fedavgsm", cfg, 1);
    exp.seed = 3;
    let other = run(exp).unwrap();
    assert_eq!(other.final_model, out.final_model);
}

#[test]
fn single_client_single_step_is_sgd() {
    let problem = quadratic_problem(&centres(1, 2), &[1.0, 3.0], 5);
    let mut cfg = method_from_name("fedavg").unwrap();
    cfg.local_steps = 1;
    cfg.eta = 0.1;
    let mut exp = Experiment::new(&problem, "fedavg", cfg, 20);
    exp.x0 = ParamVec::from_vec(vec![2.0, -1.0]);
    let out = run(exp).unwrap();

    let client = &problem.clients()[0];
    let mut x = ParamVec::from_vec(vec![2.0, -1.0]);
    for _ in 0..20 {
        let g = client.full_grad(&x).unwrap();
        x.axpy(-0.1, &g);
    }
    assert!(x.dist_sq(&out.final_model).sqrt() <= 1e-14);
}

#[test]
fn fusion_does_not_change_divergence_under_constant_gradients() {
    // Zero curvature: every gradient is the negated client centre.
    let cs = centres(3, 2);
    let problem = quadratic_problem(&cs, &[0.0, 0.0], 1);
    let divergence = |beta: f64| {
        let mut cfg = method_from_name("domo").unwrap();
        cfg.beta = beta;
        let exp = Experiment::new(&problem, "domo", cfg, 5);
        run(exp)
            .unwrap()
            .metrics
            .iter()
            .map(|m| m.divergence)
            .collect::<Vec<_>>()
    };
    let (a, b) = (divergence(0.2), divergence(0.9));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{a:?} vs {b:?}");
    }
}

#[test]
fn trace_round_trips_through_disk() {
    let problem = quadratic_problem(&centres(3, 2), &[1.0, 0.2], 4);
    let cfg = method_from_name("domo").unwrap();
    let mut exp = Experiment::new(&problem, "domo", cfg, 3);
    exp.sampling = Sampling::Batch(2);
    exp.record_trace = true;
    exp.context = serde_json::json!({"data_seed": 4});
    let trace = run(exp).unwrap().trace.unwrap();
    assert!(trace.mean_consistency() <= 1e-15);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("domo.trace");
    trace.write(&path).unwrap();
    assert_eq!(Trace::read(&path).unwrap(), trace);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    let err = Trace::read(&path).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
}

#[test]
fn trace_cap_is_enforced() {
    let problem = quadratic_problem(&centres(2, 2), &[1.0, 1.0], 1);
    let cfg = method_from_name("fedavg").unwrap();
    let mut exp = Experiment::new(&problem, "fedavg", cfg, 100);
    exp.record_trace = true;
    exp.trace_cap = 10;
    assert!(run(exp).is_err());
}
