use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::{ClientObjective, Problem, Sample};
use crate::partition::{
    label_purity, load_csv, make_synthetic, partition_similarity, tv_from_uniform, Dataset,
    Partition,
};
use crate::rng::{self, Purpose, StreamKey};
use crate::vector::ParamVec;

use super::spec::{DatasetSpec, ExperimentSpec, ObjectiveName, ProblemSpec};

/// A problem instance together with how its data was dealt.
#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub problem: Problem,
    pub partition: Option<Partition>,
    pub dataset: Option<Dataset>,
    /// SHA-256 over every client's samples; equal digests mean equal data.
    pub digest: String,
}

impl BuiltProblem {
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.problem
            .clients()
            .iter()
            .map(|c| c.num_samples())
            .collect()
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic {
            classes,
            per_class,
            dim,
            separation,
            noise,
        } => make_synthetic(*classes, *per_class, *dim, *separation, *noise, seed),
        DatasetSpec::Csv { path } => load_csv(path),
    }
}

/// Builds the problem of `spec` for one data seed.
pub fn build_problem(spec: &ExperimentSpec, data_seed: u64) -> Result<BuiltProblem> {
    let p = &spec.problem;
    let clients = spec.clients;
    let (problem, partition, dataset) = match &p.dataset {
        Some(ds) => {
            let data = load_dataset(ds, data_seed)?;
            let s = spec.similarity.unwrap_or(super::spec::DEFAULT_SIMILARITY);
            let part = partition_similarity(&data, clients, s, data_seed)?;
            let objectives = part
                .shards
                .iter()
                .map(|shard| dataset_objective(p, &data, shard))
                .collect::<Result<Vec<_>>>()?;
            (Problem::new(objectives)?, Some(part), Some(data))
        }
        None => (generated(p, clients, data_seed)?, None, None),
    };
    let digest = problem_digest(&problem);
    Ok(BuiltProblem {
        problem,
        partition,
        dataset,
        digest,
    })
}

fn dataset_objective(p: &ProblemSpec, data: &Dataset, shard: &[usize]) -> Result<ClientObjective> {
    let samples = data.to_samples(shard);
    match p.objective {
        ObjectiveName::LeastSquares => ClientObjective::least_squares(samples, p.l2),
        ObjectiveName::Logistic => ClientObjective::logistic(samples, data.num_classes, p.l2),
        ObjectiveName::Mlp2 => {
            let hidden = p.hidden.unwrap_or(super::spec::DEFAULT_HIDDEN);
            ClientObjective::mlp2(samples, hidden, data.num_classes, p.l2)
        }
        ObjectiveName::Quadratic => Err(Error::InvalidConfig(
            "quadratic objectives are generated, not dataset-backed".into(),
        )),
    }
}

/// Heterogeneous quadratic or least-squares clients.
///
/// Quadratic: shared curvature `A = Q diag(λ) Qᵀ`, client centre
/// `c_k = c̄ + heterogeneity·ξ_k`, sample linear terms `b_i = A c_k + noise·ε_i`.
/// Least squares: `w_k = w̄ + heterogeneity·ξ_k`, `a_i ~ N(0, I)`,
/// `y_i = a_iᵀ w_k + noise·ε_i`.
fn generated(p: &ProblemSpec, clients: usize, seed: u64) -> Result<Problem> {
    let d = p.dim.unwrap_or(super::spec::DEFAULT_DIM);
    let n = p
        .samples_per_client
        .unwrap_or(super::spec::DEFAULT_SAMPLES_PER_CLIENT);
    let het = p.heterogeneity.unwrap_or(super::spec::DEFAULT_HETEROGENEITY);
    let noise = p.noise.unwrap_or(super::spec::DEFAULT_NOISE);
    let mut rng = rng::stream(seed, Purpose::Problem);
    let objectives = match p.objective {
        ObjectiveName::Quadratic => {
            let hessian = random_spd(&mut rng, d, p.eig_min.unwrap_or(0.1), p.eig_max.unwrap_or(1.0));
            let centre = gaussian(&mut rng, d);
            (0..clients)
                .map(|_| {
                    let shift = gaussian(&mut rng, d);
                    let c: Vec<f64> = centre.iter().zip(&shift).map(|(a, s)| a + het * s).collect();
                    let ac = matvec(&hessian, &c);
                    let samples = (0..n)
                        .map(|_| {
                            let e = gaussian(&mut rng, d);
                            let b = ac.iter().zip(&e).map(|(a, e)| a + noise * e).collect();
                            Sample::new(b, 0.0)
                        })
                        .collect();
                    ClientObjective::quadratic(hessian.clone(), samples, p.l2)
                })
                .collect::<Result<Vec<_>>>()?
        }
        ObjectiveName::LeastSquares => {
            let w_bar = gaussian(&mut rng, d);
            (0..clients)
                .map(|_| {
                    let shift = gaussian(&mut rng, d);
                    let w: Vec<f64> = w_bar.iter().zip(&shift).map(|(a, s)| a + het * s).collect();
                    let samples = (0..n)
                        .map(|_| {
                            let a = gaussian(&mut rng, d);
                            let eps: f64 = rng.sample(StandardNormal);
                            let y = a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + noise * eps;
                            Sample::new(a, y)
                        })
                        .collect();
                    ClientObjective::least_squares(samples, p.l2)
                })
                .collect::<Result<Vec<_>>>()?
        }
        ObjectiveName::Logistic | ObjectiveName::Mlp2 => {
            return Err(Error::InvalidConfig(
                "classification objectives need a dataset".into(),
            ))
        }
    };
    Problem::new(objectives)
}

fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
        .collect()
}

/// Random orthogonal basis with eigenvalues evenly spaced in `[lo, hi]`.
fn random_spd(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let eig: Vec<f64> = (0..d)
        .map(|i| {
            if d == 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (d - 1) as f64
            }
        })
        .collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = (0..d).map(|t| q[(i, t)] * eig[t] * q[(j, t)]).sum();
            a[i * d + j] = v;
            a[j * d + i] = v;
        }
    }
    a
}

fn problem_digest(problem: &Problem) -> String {
    let mut h = Sha256::new();
    for c in problem.clients() {
        h.update((c.num_samples() as u64).to_le_bytes());
        for s in c.samples() {
            for v in &s.features {
                h.update(v.to_le_bytes());
            }
            h.update(s.target.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Initial model of a run seed.
pub fn initial_model(spec: &ExperimentSpec, problem: &Problem, seed: u64) -> ParamVec {
    let scale = spec.problem.init_scale.unwrap_or(0.0);
    let d = problem.dim();
    if scale == 0.0 {
        return ParamVec::zeros(d);
    }
    let mut rng = StreamKey::new(seed, Purpose::Init).rng();
    ParamVec::from_vec(gaussian(&mut rng, d).into_iter().map(|v| scale * v).collect())
}

/// Label statistics of one shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardStats {
    pub client: usize,
    pub size: usize,
    pub histogram: Vec<usize>,
    pub purity: f64,
    pub tv_from_uniform: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub seed: u64,
    pub similarity: f64,
    pub digest: String,
    pub shards: Vec<ShardStats>,
    pub mean_purity: f64,
    pub mean_tv_from_uniform: f64,
}

/// Per-shard label histograms of a dataset-backed spec.
pub fn partition_stats(spec: &ExperimentSpec, data_seed: u64) -> Result<PartitionStats> {
    let built = build_problem(spec, data_seed)?;
    let (Some(part), Some(data)) = (built.partition, built.dataset) else {
        return Err(Error::InvalidConfig(
            "partition statistics need a dataset-backed problem".into(),
        ));
    };
    let shards: Vec<ShardStats> = part
        .shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let histogram = data.label_histogram(shard);
            ShardStats {
                client: k,
                size: shard.len(),
                purity: label_purity(&histogram),
                tv_from_uniform: tv_from_uniform(&histogram),
                histogram,
            }
        })
        .collect();
    let n = shards.len() as f64;
    Ok(PartitionStats {
        seed: data_seed,
        similarity: part.similarity,
        digest: part.digest(),
        mean_purity: shards.iter().map(|s| s.purity).sum::<f64>() / n,
        mean_tv_from_uniform: shards.iter().map(|s| s.tv_from_uniform).sum::<f64>() / n,
        shards,
    })
}
