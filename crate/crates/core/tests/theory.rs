use domo::fedopt::{method_from_name, run, Boundary, Experiment, MethodConfig, Sampling};
use domo::objectives::{ClientObjective, Problem, ProblemConstants, Sample};
use domo::theory::{
    check_lemma1, lemma1_residual, reconstruct_z, theorem1_sigma_term, Status,
};
use domo::trace::Trace;
use domo::ParamVec;

/// 1-D clients `½x² − b_k x`.
fn scalar_problem(centres: &[f64]) -> Problem {
    let clients = centres
        .iter()
        .map(|&b| ClientObjective::quadratic(vec![1.0], vec![Sample::new(vec![b], 0.0)], 0.0).unwrap())
        .collect();
    Problem::new(clients).unwrap()
}

fn hand_config() -> MethodConfig {
    let mut cfg = method_from_name("domo").unwrap();
    cfg.mu_s = 0.5;
    cfg.mu_l = 0.5;
    cfg.alpha = 0.5;
    cfg.beta = 0.5;
    cfg.eta = 0.1;
    cfg.local_steps = 2;
    cfg
}

/// Plain scalar replay of two fused rounds and of `z` built from its definition.
fn scalar_replay(centres: &[f64], x0: f64) -> Vec<[f64; 3]> {
    let (mu_s, mu_l, alpha, beta, eta, steps) = (0.5, 0.5, 0.5, 0.5, 0.1, 2usize);
    let k = centres.len() as f64;
    let c = alpha * eta / ((1.0 - mu_s) * k);
    let (mut x_prev, mut x_cur, mut m_s) = (x0, x0, 0.0);
    let mut out = Vec::new();
    for _ in 0..2 {
        let m_r = (x_prev - x_cur) / (alpha * eta * steps as f64);
        // momenta[p] = Σ_k m^{(k)}_{r,p}
        let mut momenta = vec![0.0; steps + 1];
        let mut mean_d = 0.0;
        for &b in centres {
            let mut x = x_cur - eta * beta * steps as f64 * m_r;
            let mut m = 0.0;
            let mut d = 0.0;
            for p in 0..steps {
                m = mu_l * m + (x - b);
                x -= eta * m;
                momenta[p + 1] += m;
                d += m / steps as f64;
            }
            mean_d += d / k;
        }
        let y = x_cur - mu_s / (1.0 - mu_s) * alpha * eta * steps as f64 * m_s;
        let mut yhat = y;
        let mut z = [0.0; 3];
        for p in 0..=steps {
            if p > 0 {
                yhat -= c * momenta[p];
            }
            z[p] = yhat - mu_l * c / (1.0 - mu_l) * momenta[p];
        }
        out.push(z);
        m_s = mu_s * m_s + mean_d;
        x_prev = x_cur;
        x_cur -= alpha * eta * steps as f64 * m_s;
    }
    out
}

fn hand_trace() -> Trace {
    let problem = scalar_problem(&[1.0, -0.5]);
    let mut exp = Experiment::new(&problem, "domo", hand_config(), 2);
    exp.x0 = ParamVec::from_vec(vec![1.0]);
    exp.record_trace = true;
    run(exp).unwrap().trace.unwrap()
}

#[test]
fn two_round_z_matches_scalar_replay() {
    let trace = hand_trace();
    let aux = reconstruct_z(&trace).unwrap();
    let oracle = scalar_replay(&[1.0, -0.5], 1.0);
    for (r, zs) in oracle.iter().enumerate() {
        for (p, z) in zs.iter().enumerate() {
            assert!((aux.z(r, p)[0] - z).abs() <= 1e-14, "z[{r}][{p}]");
        }
    }
    assert_eq!(check_lemma1(&trace, &aux).status, Status::Pass);
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut trace = hand_trace();
    let clean = lemma1_residual(&trace, &reconstruct_z(&trace).unwrap()).0;
    assert!(clean <= 1e-14);
    trace.perturb_gradient(1, 0, 1, 0, 1e-3);
    let aux = reconstruct_z(&trace).unwrap();
    let (dirty, _) = lemma1_residual(&trace, &aux);
    assert!(dirty >= 1e-5, "residual {dirty}");
    assert_eq!(check_lemma1(&trace, &aux).status, Status::Fail);
}

#[test]
fn update_rule_holds_on_stochastic_averaged_runs() {
    let problem = Problem::new(
        (0..4)
            .map(|k| {
                let samples = (0..5)
                    .map(|i| Sample::new(vec![(k + i) as f64 * 0.3, 1.0 - k as f64], 0.0))
                    .collect();
                ClientObjective::quadratic(vec![1.0, 0.2, 0.2, 0.5], samples, 0.0).unwrap()
            })
            .collect(),
    )
    .unwrap();
    let mut cfg = method_from_name("domo").unwrap();
    cfg.boundary = Boundary::Average;
    cfg.alpha = 0.3;
    cfg.beta = cfg.mu_s * cfg.alpha / (1.0 - cfg.mu_s);
    let mut exp = Experiment::new(&problem, "domo", cfg, 6);
    exp.sampling = Sampling::Batch(2);
    exp.record_trace = true;
    exp.seed = 8;
    let trace = run(exp).unwrap().trace.unwrap();
    let check = check_lemma1(&trace, &reconstruct_z(&trace).unwrap());
    assert_eq!(check.status, Status::Pass, "{check:?}");
}

#[test]
fn sigma_term_scales_inversely_with_clients() {
    let constants = ProblemConstants {
        smoothness: 2.0,
        sigma2: 0.7,
        g2: 1.0,
        f_star: None,
        estimated: false,
    };
    let cfg = method_from_name("domo").unwrap();
    let four = theorem1_sigma_term(&cfg, 4, &constants);
    let sixteen = theorem1_sigma_term(&cfg, 16, &constants);
    assert!((four / sixteen - 4.0).abs() <= 1e-12);
}
