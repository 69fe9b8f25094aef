use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use domo::harness::{
    build_problem, compare, parse_config, partition_stats, problem_constants, run_cell,
    write_csv, write_json, ExperimentSpec,
};
use domo::theory::{verify, TheoryReport};
use domo::trace::Trace;
use domo::Error;

#[derive(Parser)]
#[command(name = "domo", version, about = "Federated double-momentum simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method under one seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Method to run; defaults to the first one in the config.
        #[arg(long)]
        method: Option<String>,
        /// Run seed; defaults to the first one in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the run's trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Run every method under every seed of a config.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Destination of the `--format` output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-cell traces.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check the theory identities and bounds on stored traces of one configuration.
    Verify {
        #[arg(long, required = true, num_args = 1..)]
        trace: Vec<PathBuf>,
        /// Exit with status 1 if any applicable check fails.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label histograms of each client shard.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
        /// Data seed; defaults to the config's data seed or first run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::UnknownMethod(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn output(path: Option<&Path>) -> domo::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_pretty(value: &impl Serialize, path: Option<&Path>) -> domo::Result<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::Io {
        path: path.map(Path::to_path_buf).unwrap_or_else(|| "<stdout>".into()),
        source: e,
    })
}

/// Returns whether everything requested completed (and, for strict
/// verification, passed).
fn dispatch(cmd: Command) -> domo::Result<bool> {
    match cmd {
        Command::Run {
            config,
            method,
            seed,
            out,
            trace,
            format,
        } => {
            let mut spec = parse_config(&config)?;
            spec.trace = trace.is_some();
            let method = method.unwrap_or_else(|| spec.methods[0].clone());
            let seed = seed.unwrap_or(spec.seeds[0]);
            let built = build_problem(&spec, spec.data_seed_for(seed))?;
            let cell = run_cell(&spec, &built, &method, seed)?;
            if let (Some(path), Some(t)) = (&trace, &cell.trace) {
                t.write(path)?;
            }
            match format {
                Format::Csv => write_csv(&cell.rows, output(out.as_deref())?)?,
                Format::Json => write_pretty(&cell.rows, out.as_deref())?,
            }
            Ok(true)
        }
        Command::Compare {
            config,
            seed,
            out,
            trace,
            format,
            workers,
        } => {
            let mut spec = parse_config(&config)?;
            if let Some(s) = seed {
                spec.seeds = vec![s];
            }
            if let Some(dir) = trace {
                spec.trace = true;
                spec.outputs.trace_dir = Some(dir);
            }
            if workers.is_some() {
                spec.workers = workers;
            }
            let spec = spec.resolve()?;
            let result = compare(&spec)?;
            domo::harness::emit(&result, &spec)?;
            for f in &result.summary.failures {
                eprintln!("{} seed {}: {}", f.method, f.seed, f.error);
            }
            if !result.rows.is_empty() || out.is_some() {
                match format {
                    Format::Csv => write_csv(&result.rows, output(out.as_deref())?)?,
                    Format::Json => write_json(&result.summary, output(out.as_deref())?)?,
                }
            }
            Ok(result.summary.failures.is_empty())
        }
        Command::Verify { trace, strict, out } => {
            let traces = trace
                .iter()
                .map(Trace::read)
                .collect::<domo::Result<Vec<_>>>()?;
            let report = verify_traces(&traces)?;
            write_pretty(&report, out.as_deref())?;
            Ok(!strict || report.all_pass())
        }
        Command::PartitionStats {
            config,
            seed,
            out,
            format,
        } => {
            let spec = parse_config(&config)?;
            let seed = seed.unwrap_or_else(|| spec.data_seed_for(spec.seeds[0]));
            let stats = partition_stats(&spec, seed)?;
            match format {
                Format::Json => write_pretty(&stats, out.as_deref())?,
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(output(out.as_deref())?);
                    w.write_record(["client", "size", "purity", "tv_from_uniform", "histogram"])?;
                    for s in &stats.shards {
                        let hist: Vec<String> = s.histogram.iter().map(usize::to_string).collect();
                        w.write_record([
                            s.client.to_string(),
                            s.size.to_string(),
                            s.purity.to_string(),
                            s.tv_from_uniform.to_string(),
                            hist.join(";"),
                        ])?;
                    }
                    w.flush().map_err(|e| Error::Io {
                        path: "<csv output>".into(),
                        source: e,
                    })?;
                }
            }
            Ok(true)
        }
    }
}

/// Rebuilds the problem from the trace context when all traces share one
/// dataset, so the bound checks get constants.
fn verify_traces(traces: &[Trace]) -> domo::Result<TheoryReport> {
    let spec: Option<ExperimentSpec> = traces
        .first()
        .and_then(|t| t.meta.context.get("spec"))
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let data_seeds: Vec<Option<u64>> = traces
        .iter()
        .map(|t| t.meta.context.get("data_seed").and_then(|v| v.as_u64()))
        .collect();
    let shared = data_seeds
        .first()
        .copied()
        .flatten()
        .filter(|s| data_seeds.iter().all(|d| *d == Some(*s)));
    let constants = match (spec, shared) {
        (Some(spec), Some(seed)) => {
            let built = build_problem(&spec, seed)?;
            Some(problem_constants(&spec, &built, traces)?)
        }
        _ => None,
    };
    verify(traces, constants.as_ref())
}
