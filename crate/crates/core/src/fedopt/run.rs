use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{ClientObjective, Problem};
use crate::partition::sample_batch;
use crate::rng::{Purpose, StreamKey};
use crate::trace::{Trace, TraceMeta};
use crate::vector::ParamVec;

use super::config::{Boundary, MethodConfig};
use super::round::{
    infer_server_momentum, local_round, sample_participants, server_round, ClientState,
    LocalOutput, RoundResult, ServerState,
};

/// Default cap on stored trace reals.
pub const DEFAULT_TRACE_CAP: u128 = 100_000_000;

/// How each local step samples its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Exact local gradient (σ² = 0).
    FullBatch,
    /// `b` shard samples drawn uniformly with replacement.
    Batch(usize),
}

impl Sampling {
    pub fn batch_size(self) -> Option<usize> {
        match self {
            Sampling::FullBatch => None,
            Sampling::Batch(b) => Some(b),
        }
    }
}

/// `P = ceil(E · n / b)` with `n` the largest shard, so every client runs the
/// same number of steps.
pub fn local_steps_from_epochs(epochs: f64, shard_sizes: &[usize], sampling: Sampling) -> Result<usize> {
    if !(epochs > 0.0 && epochs.is_finite()) {
        return Err(Error::InvalidConfig(format!("local_epochs must be positive, got {epochs}")));
    }
    let n = shard_sizes.iter().copied().max().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let b = sampling.batch_size().unwrap_or(n);
    Ok(((epochs * n as f64 / b as f64).ceil() as usize).max(1))
}

/// Floats moved per participant per round.
pub fn floats_per_participant(cfg: &MethodConfig, dim: usize) -> u64 {
    2 * dim as u64 * cfg.comm_multiplier()
}

#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub problem: &'a Problem,
    pub method: String,
    pub config: MethodConfig,
    pub rounds: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub x0: ParamVec,
    pub record_trace: bool,
    pub trace_cap: u128,
    /// Copied into the trace sidecar.
    pub context: serde_json::Value,
}

impl<'a> Experiment<'a> {
    pub fn new(problem: &'a Problem, method: &str, config: MethodConfig, rounds: usize) -> Self {
        Experiment {
            problem,
            method: method.to_string(),
            config,
            rounds,
            sampling: Sampling::FullBatch,
            seed: 0,
            x0: ParamVec::zeros(problem.dim()),
            record_trace: false,
            trace_cap: DEFAULT_TRACE_CAP,
            context: serde_json::Value::Null,
        }
    }
}

/// End-of-round metrics, evaluated at `x̄_{r,P}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based count of completed rounds.
    pub round: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    /// `(1/S)Σ_k‖x̄_{r,P} − x^{(k)}_{r,P}‖²`.
    pub divergence: f64,
    /// Cumulative floats communicated.
    pub comm_floats: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_model: ParamVec,
    pub server: ServerState,
    pub metrics: Vec<RoundMetrics>,
    pub trace: Option<Trace>,
}

/// Round-by-round driver. Between rounds the only state is the server state
/// plus, under `boundary = average`, the averaged local buffer.
pub struct Simulator<'a> {
    exp: Experiment<'a>,
    shards: Vec<Vec<usize>>,
    server: ServerState,
    avg_buffer: ParamVec,
    comm: u64,
    trace: Option<Trace>,
}

impl<'a> Simulator<'a> {
    pub fn new(exp: Experiment<'a>) -> Result<Self> {
        let server = ServerState::new(exp.x0.clone());
        let mut sim = Self::resume(exp, server, None)?;
        if sim.exp.record_trace {
            sim.trace = Some(sim.new_trace()?);
        }
        Ok(sim)
    }

    /// Continues a run from a saved server state; traces are not recorded.
    pub fn resume(
        exp: Experiment<'a>,
        server: ServerState,
        avg_buffer: Option<ParamVec>,
    ) -> Result<Self> {
        let k = exp.problem.num_clients();
        let d = exp.problem.dim();
        exp.config.validate(k)?;
        exp.x0.ensure_len(d)?;
        server.x_cur.ensure_len(d)?;
        if exp.sampling == Sampling::Batch(0) {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let shards = exp
            .problem
            .clients()
            .iter()
            .map(|c| (0..c.num_samples()).collect())
            .collect();
        let comm = server.round as u64
            * exp.config.participants(k) as u64
            * floats_per_participant(&exp.config, d);
        Ok(Simulator {
            shards,
            avg_buffer: avg_buffer.unwrap_or_else(|| ParamVec::zeros(d)),
            server,
            comm,
            trace: None,
            exp,
        })
    }

    fn new_trace(&self) -> Result<Trace> {
        let e = &self.exp;
        let s = e.config.participants(e.problem.num_clients());
        let size = Trace::size_estimate(e.rounds, e.config.local_steps, s, e.problem.dim());
        if size > e.trace_cap {
            return Err(Error::InvalidConfig(format!(
                "trace would hold {size} values, above the cap of {}",
                e.trace_cap
            )));
        }
        let mut trace = Trace::new(TraceMeta {
            method: e.method.clone(),
            config: e.config.clone(),
            sampling: e.sampling,
            rounds: e.rounds,
            steps: e.config.local_steps,
            clients: s,
            population: e.problem.num_clients(),
            dim: e.problem.dim(),
            seed: e.seed,
            loss_x0: e.problem.loss(&e.x0)?,
            participants: Vec::with_capacity(e.rounds),
            context: e.context.clone(),
        });
        trace.set_server(0, self.server.x_cur.as_slice(), self.server.m_server.as_slice());
        Ok(trace)
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn avg_buffer(&self) -> &ParamVec {
        &self.avg_buffer
    }

    pub fn participants(&self, round: usize) -> Result<Vec<usize>> {
        let k = self.exp.problem.num_clients();
        let s = self.exp.config.participants(k);
        let mut rng = StreamKey::new(self.exp.seed, Purpose::Participants)
            .round(round)
            .rng();
        sample_participants(k, s, &mut rng)
    }

    /// Executes one round.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let cfg = &self.exp.config;
        let problem = self.exp.problem;
        let r = self.server.round;
        let d = problem.dim();
        let participants = self.participants(r)?;
        let m_r = infer_server_momentum(
            &self.server.x_prev,
            &self.server.x_cur,
            cfg.alpha,
            cfg.eta,
            cfg.local_steps,
        )?;
        let init_buffer = match cfg.boundary {
            Boundary::Reset => ParamVec::zeros(d),
            Boundary::Average => self.avg_buffer.clone(),
        };
        let record = self.trace.is_some();
        let (seed, sampling) = (self.exp.seed, self.exp.sampling);
        let x_recv = &self.server.x_cur;
        let shards = &self.shards;

        let outputs: Vec<Result<LocalOutput>> = participants
            .par_iter()
            .map(|&k| {
                let client = ClientState {
                    client_id: k,
                    x_local: x_recv.clone(),
                    m_local: init_buffer.clone(),
                };
                let grad = client_gradients(&problem.clients()[k], &shards[k], sampling, seed, k, r);
                local_round(client, cfg, &m_r, r, grad, record)
            })
            .collect();
        let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

        let finals: Vec<ParamVec> = outputs.iter().map(|o| o.state.x_local.clone()).collect();
        let x_bar = ParamVec::mean(&finals);
        let divergence =
            finals.iter().map(|x| x.dist_sq(&x_bar)).sum::<f64>() / finals.len() as f64;

        if let Some(trace) = self.trace.as_mut() {
            record_round(trace, problem, r, &outputs)?;
            trace.meta.participants.push(participants.clone());
        }

        if cfg.boundary == Boundary::Average {
            let buffers: Vec<ParamVec> = outputs.iter().map(|o| o.state.m_local.clone()).collect();
            self.avg_buffer = ParamVec::mean(&buffers);
        }

        let per = floats_per_participant(cfg, d);
        let s = participants.len() as u64;
        let results = RoundResult {
            updates: outputs.into_iter().map(|o| o.update).collect(),
            participants,
            floats_sent_up: s * per / 2,
            floats_sent_down: s * per / 2,
        };
        self.server = server_round(&self.server, &results, cfg)?;
        self.comm += results.floats_sent_up + results.floats_sent_down;
        if let Some(trace) = self.trace.as_mut() {
            trace.set_server(
                self.server.round,
                self.server.x_cur.as_slice(),
                self.server.m_server.as_slice(),
            );
        }

        let finite = |metric, v: Result<f64>| match v {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::NonFinite { .. }) => Err(Error::MetricDivergence { round: r, metric }),
            Err(e) => Err(e),
        };
        Ok(RoundMetrics {
            round: r + 1,
            loss: finite("loss", problem.loss(&x_bar))?,
            grad_norm_sq: finite("gradient norm", problem.grad(&x_bar).map(|g| g.norm_sq()))?,
            divergence: finite("divergence", Ok(divergence))?,
            comm_floats: self.comm,
        })
    }

    pub fn finish(self) -> (ServerState, Option<Trace>) {
        (self.server, self.trace)
    }
}

/// Gradient source for one client in one round. Batches come from the
/// `(seed, client, round)` stream, consumed step by step.
fn client_gradients<'o>(
    obj: &'o ClientObjective,
    shard: &'o [usize],
    sampling: Sampling,
    seed: u64,
    client: usize,
    round: usize,
) -> impl FnMut(usize, &ParamVec) -> Result<ParamVec> + 'o {
    let mut rng = StreamKey::new(seed, Purpose::Batch)
        .client(client)
        .round(round)
        .rng();
    move |_, x| match sampling {
        Sampling::FullBatch => obj.full_grad(x),
        Sampling::Batch(b) => {
            let batch = sample_batch(shard, b, &mut rng)?;
            obj.stochastic_grad(x, &batch)
        }
    }
}

fn record_round(trace: &mut Trace, problem: &Problem, r: usize, outputs: &[LocalOutput]) -> Result<()> {
    let steps = trace.steps();
    for (slot, out) in outputs.iter().enumerate() {
        let rec = out.record.as_ref().expect("recording enabled");
        for p in 0..=steps {
            trace.set_local(r, p, slot, rec.models[p].as_slice(), rec.momenta[p].as_slice());
        }
        for p in 0..steps {
            trace.set_gradient(r, p, slot, rec.gradients[p].as_slice());
        }
    }
    for p in 0..=steps {
        let models: Vec<ParamVec> = outputs
            .iter()
            .map(|o| o.record.as_ref().expect("recording enabled").models[p].clone())
            .collect();
        let mean = ParamVec::mean(&models);
        let gns = if p < steps {
            Some(problem.grad(&mean)?.norm_sq())
        } else {
            None
        };
        trace.set_mean(r, p, mean.as_slice(), gns);
    }
    Ok(())
}

/// Runs all rounds of an experiment.
pub fn run(exp: Experiment<'_>) -> Result<RunOutput> {
    let rounds = exp.rounds;
    let mut sim = Simulator::new(exp)?;
    let mut metrics = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        metrics.push(sim.step()?);
    }
    let (server, trace) = sim.finish();
    Ok(RunOutput {
        final_model: server.x_cur.clone(),
        server,
        metrics,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedopt::method_from_name;

    #[test]
    fn steps_from_epochs_use_largest_shard() {
        assert_eq!(local_steps_from_epochs(1.0, &[10, 33], Sampling::Batch(8)).unwrap(), 5);
        assert_eq!(local_steps_from_epochs(0.01, &[10], Sampling::Batch(8)).unwrap(), 1);
        assert_eq!(local_steps_from_epochs(2.0, &[10], Sampling::FullBatch).unwrap(), 2);
        assert!(local_steps_from_epochs(0.0, &[10], Sampling::FullBatch).is_err());
        assert!(local_steps_from_epochs(1.0, &[], Sampling::FullBatch).is_err());
    }

    #[test]
    fn averaging_doubles_traffic() {
        let d = 100;
        let plain = floats_per_participant(&method_from_name("fedavg").unwrap(), d);
        assert_eq!(plain, 200);
        assert_eq!(floats_per_participant(&method_from_name("domo").unwrap(), d), plain);
        assert_eq!(floats_per_participant(&method_from_name("fedavglm").unwrap(), d), 2 * plain);
    }
}
