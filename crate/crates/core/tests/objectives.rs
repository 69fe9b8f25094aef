use domo::objectives::{constants, ClientObjective, ConstantsOptions, Problem, Sample};
use domo::rng::{Purpose, StreamKey};
use domo::ParamVec;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn central_difference(obj: &ClientObjective, x: &ParamVec, h: f64) -> Vec<f64> {
    let n = obj.num_samples();
    let loss = |v: &ParamVec| (0..n).map(|i| obj.sample_loss(v, i)).sum::<f64>() / n as f64;
    (0..x.len())
        .map(|i| {
            let mut up = x.clone();
            let mut down = x.clone();
            up.as_mut_slice()[i] += h;
            down.as_mut_slice()[i] -= h;
            (loss(&up) - loss(&down)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn gaussian_vec(seed: u64, client: usize, n: usize) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, Purpose::Problem).client(client).rng();
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn logistic_gradient_matches_finite_differences_at_zero() {
    let samples = vec![
        Sample::new(vec![1.0, -0.5], 0.0),
        Sample::new(vec![0.3, 2.0], 1.0),
        Sample::new(vec![-1.2, 0.7], 2.0),
    ];
    let obj = ClientObjective::logistic(samples, 3, 0.0).unwrap();
    let x = ParamVec::zeros(obj.dim());
    let g = obj.full_grad(&x).unwrap();
    let fd = central_difference(&obj, &x, 1e-6);
    assert!(rel_err(g.as_slice(), &fd) <= 1e-6, "{g:?} vs {fd:?}");
}

#[test]
fn mlp2_gradient_matches_finite_differences() {
    let samples: Vec<Sample> = (0..6)
        .map(|i| Sample::new(gaussian_vec(3, i, 4), (i % 3) as f64))
        .collect();
    let obj = ClientObjective::mlp2(samples, 5, 3, 1e-3).unwrap();
    let x = ParamVec::from_vec(gaussian_vec(4, 0, obj.dim()).iter().map(|v| 0.5 * v).collect());
    let g = obj.full_grad(&x).unwrap();
    let fd = central_difference(&obj, &x, 1e-6);
    assert!(rel_err(g.as_slice(), &fd) <= 1e-5);
}

#[test]
fn least_squares_smoothness_matches_dense_eigensolver() {
    for seed in 0..10u64 {
        let clients: Vec<ClientObjective> = (0..3)
            .map(|k| {
                let samples = (0..8)
                    .map(|i| Sample::new(gaussian_vec(seed, 8 * k + i, 8), 0.0))
                    .collect();
                ClientObjective::least_squares(samples, 0.0).unwrap()
            })
            .collect();
        let oracle = clients
            .iter()
            .map(|c| {
                let rows: Vec<f64> = c.samples().iter().flat_map(|s| s.features.clone()).collect();
                let a = DMatrix::from_row_slice(8, 8, &rows);
                let h = a.transpose() * &a / 8.0;
                h.symmetric_eigenvalues().max()
            })
            .fold(0.0f64, f64::max);
        let problem = Problem::new(clients).unwrap();
        let opts = ConstantsOptions {
            batch_size: None,
            ..ConstantsOptions::default()
        };
        let c = constants(&problem, &[ParamVec::zeros(8)], &opts).unwrap();
        // The global Hessian is a mean of client Hessians, so its top
        // eigenvalue never exceeds the clients' maximum.
        assert!((c.smoothness - oracle).abs() <= 1e-8 * oracle, "seed {seed}");
    }
}

#[test]
fn stochastic_gradient_is_unbiased() {
    let samples: Vec<Sample> = (0..5)
        .map(|i| Sample::new(gaussian_vec(9, i, 3), i as f64))
        .collect();
    let obj = ClientObjective::least_squares(samples, 0.1).unwrap();
    let x = ParamVec::from_vec(vec![0.3, -0.2, 1.0]);
    // Mean over every single-index batch is the full gradient.
    let mut acc = ParamVec::zeros(3);
    for i in 0..5 {
        acc.add_assign(&obj.stochastic_grad(&x, &[i]).unwrap());
    }
    acc.scale(0.2);
    let full = obj.full_grad(&x).unwrap();
    assert!(acc.dist_sq(&full).sqrt() <= 1e-12);
}

proptest! {
    #[test]
    fn logistic_gradient_matches_finite_differences(seed in 0u64..1000, scale in 0.1f64..2.0) {
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample::new(gaussian_vec(seed, i, 3), (i % 2) as f64))
            .collect();
        let obj = ClientObjective::logistic(samples, 2, 0.01).unwrap();
        let x = ParamVec::from_vec(gaussian_vec(seed + 1, 0, obj.dim()).iter().map(|v| scale * v).collect());
        let g = obj.full_grad(&x).unwrap();
        let fd = central_difference(&obj, &x, 1e-6);
        prop_assert!(rel_err(g.as_slice(), &fd) <= 1e-6);
    }

    #[test]
    fn quadratic_batch_gradient_is_mean_of_samples(seed in 0u64..1000, batch in prop::collection::vec(0usize..4, 1..8)) {
        let samples: Vec<Sample> = (0..4).map(|i| Sample::new(gaussian_vec(seed, i, 2), 0.0)).collect();
        let obj = ClientObjective::quadratic(vec![2.0, 0.5, 0.5, 1.0], samples, 0.0).unwrap();
        let x = ParamVec::from_vec(gaussian_vec(seed, 9, 2));
        let g = obj.stochastic_grad(&x, &batch).unwrap();
        let mut acc = ParamVec::zeros(2);
        for &i in &batch {
            acc.add_assign(&obj.sample_grad(&x, i).unwrap());
        }
        acc.scale(1.0 / batch.len() as f64);
        prop_assert!(g.dist_sq(&acc).sqrt() <= 1e-12);
    }
}
