use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedopt::{run, Experiment, MethodConfig};
use crate::objectives::{constants, ConstantsOptions};
use crate::theory::{evaluation_points, verify, TheoryReport};
use crate::trace::Trace;

use super::build::{build_problem, initial_model, BuiltProblem};
use super::spec::ExperimentSpec;

/// Trajectory points used to evaluate `σ²` and `G²` for the theory checks.
pub const CONSTANT_POINTS: usize = 64;

/// One CSV row: a method, a run seed and a completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub divergence: f64,
    pub comm_floats: u64,
}

/// Sample mean and standard deviation (`n − 1` denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(MeanStd { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub config: MethodConfig,
    pub final_loss: Option<MeanStd>,
    pub final_grad_norm_sq: Option<MeanStd>,
    pub final_divergence: Option<MeanStd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub seed: u64,
    pub error: String,
}

/// JSON summary of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub spec: ExperimentSpec,
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<CellFailure>,
    /// Data digest per data seed; every method of a seed saw the same data.
    pub digests: BTreeMap<u64, String>,
}

/// Result of one method under one run seed.
#[derive(Debug, Clone)]
pub struct Cell {
    pub method: String,
    pub seed: u64,
    pub data_seed: u64,
    pub outcome: std::result::Result<CellRun, String>,
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub rows: Vec<MetricRow>,
    pub trace: Option<Trace>,
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub rows: Vec<MetricRow>,
    pub summary: Summary,
    pub cells: Vec<Cell>,
}

impl ExperimentSpec {
    /// Data seed of run seed `seed`.
    pub fn data_seed_for(&self, seed: u64) -> u64 {
        self.data_seed.unwrap_or(seed)
    }
}

/// Runs one method under one seed on an already built problem.
pub fn run_cell(spec: &ExperimentSpec, built: &BuiltProblem, method: &str, seed: u64) -> Result<CellRun> {
    let problem = &built.problem;
    let cfg = spec.method_config(method, &built.shard_sizes())?;
    let mut exp = Experiment::new(problem, method, cfg, spec.rounds);
    exp.sampling = spec.sampling();
    exp.seed = seed;
    exp.x0 = initial_model(spec, problem, seed);
    exp.record_trace = spec.trace;
    exp.context = serde_json::json!({
        "spec": spec,
        "data_seed": spec.data_seed_for(seed),
    });
    let out = run(exp)?;
    let rows = out
        .metrics
        .into_iter()
        .map(|m| MetricRow {
            method: method.to_string(),
            seed,
            round: m.round,
            loss: m.loss,
            grad_norm_sq: m.grad_norm_sq,
            divergence: m.divergence,
            comm_floats: m.comm_floats,
        })
        .collect();
    Ok(CellRun {
        rows,
        trace: out.trace,
    })
}

/// Builds each distinct data seed's problem once.
fn build_all(spec: &ExperimentSpec) -> Result<BTreeMap<u64, BuiltProblem>> {
    let mut seeds: Vec<u64> = spec.seeds.iter().map(|&s| spec.data_seed_for(s)).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .into_par_iter()
        .map(|ds| build_problem(spec, ds).map(|b| (ds, b)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Runs every (method, seed) cell. All methods of a seed share the same
/// problem and partition. A failing cell is recorded and the rest continue.
pub fn compare(spec: &ExperimentSpec) -> Result<CompareOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| compare_in_pool(spec))
}

fn compare_in_pool(spec: &ExperimentSpec) -> Result<CompareOutput> {
    let problems = build_all(spec)?;
    let grid: Vec<(String, u64)> = spec
        .methods
        .iter()
        .flat_map(|m| spec.seeds.iter().map(move |&s| (m.clone(), s)))
        .collect();
    let cells: Vec<Cell> = grid
        .into_par_iter()
        .map(|(method, seed)| {
            let data_seed = spec.data_seed_for(seed);
            let outcome =
                run_cell(spec, &problems[&data_seed], &method, seed).map_err(|e| e.to_string());
            Cell {
                method,
                seed,
                data_seed,
                outcome,
            }
        })
        .collect();

    if let Some(dir) = &spec.outputs.trace_dir {
        write_traces(&cells, dir)?;
    }

    let rows: Vec<MetricRow> = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok())
        .flat_map(|r| r.rows.iter().cloned())
        .collect();
    let failures = cells
        .iter()
        .filter_map(|c| {
            c.outcome.as_ref().err().map(|e| CellFailure {
                method: c.method.clone(),
                seed: c.seed,
                error: e.clone(),
            })
        })
        .collect();

    let mut methods = Vec::with_capacity(spec.methods.len());
    for name in &spec.methods {
        let first = problems.values().next().expect("at least one seed");
        let config = spec.method_config(name, &first.shard_sizes())?;
        let runs: Vec<&CellRun> = cells
            .iter()
            .filter(|c| &c.method == name)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect();
        let last = |f: fn(&MetricRow) -> f64| -> Option<MeanStd> {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.rows.last().map(f)).collect();
            MeanStd::of(&v)
        };
        let theory = if spec.theory && !runs.is_empty() {
            Some(method_theory(spec, &problems, &runs)?)
        } else {
            None
        };
        methods.push(MethodSummary {
            method: name.clone(),
            config,
            final_loss: last(|r| r.loss),
            final_grad_norm_sq: last(|r| r.grad_norm_sq),
            final_divergence: last(|r| r.divergence),
            theory,
        });
    }

    let summary = Summary {
        spec: spec.clone(),
        methods,
        failures,
        digests: problems
            .iter()
            .map(|(&s, b)| (s, b.digest.clone()))
            .collect(),
    };
    Ok(CompareOutput {
        rows,
        summary,
        cells,
    })
}

/// Theory report of one method. Constants need a single problem, so they are
/// computed only when every seed shares the same data.
fn method_theory(
    spec: &ExperimentSpec,
    problems: &BTreeMap<u64, BuiltProblem>,
    runs: &[&CellRun],
) -> Result<TheoryReport> {
    let traces: Vec<Trace> = runs
        .iter()
        .map(|r| r.trace.clone().expect("theory implies trace"))
        .collect();
    let constants = if problems.len() == 1 {
        let built = problems.values().next().expect("one problem");
        Some(problem_constants(spec, built, &traces)?)
    } else {
        None
    };
    verify(&traces, constants.as_ref())
}

/// Analysis constants of `built`, evaluated along the given trajectories.
pub fn problem_constants(
    spec: &ExperimentSpec,
    built: &BuiltProblem,
    traces: &[Trace],
) -> Result<crate::objectives::ProblemConstants> {
    let points = evaluation_points(traces, CONSTANT_POINTS);
    let opts = ConstantsOptions {
        batch_size: spec.sampling().batch_size(),
        ..ConstantsOptions::default()
    };
    constants(&built.problem, &points, &opts)
}

fn write_traces(cells: &[Cell], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in cells {
        if let Ok(CellRun {
            trace: Some(t), ..
        }) = &c.outcome
        {
            t.write(dir.join(format!("{}_seed{}.trace", c.method, c.seed)))?;
        }
    }
    Ok(())
}

/// Writes rows as CSV with a fixed header.
pub fn write_csv(rows: &[MetricRow], out: impl Write) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no metrics to write".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
        .map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn write_json(summary: &Summary, out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, summary)?;
    Ok(())
}

/// Writes the configured CSV and JSON outputs, if any.
pub fn emit(output: &CompareOutput, spec: &ExperimentSpec) -> Result<()> {
    if let Some(path) = &spec.outputs.csv {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_csv(&output.rows, f)?;
    }
    if let Some(path) = &spec.outputs.json {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_json(&output.summary, f)?;
    }
    Ok(())
}
