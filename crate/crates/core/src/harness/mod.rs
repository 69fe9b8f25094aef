//! Experiment grids: JSON configs, problem construction, seeded runs of
//! every method on shared data, CSV/JSON reporting and theory checks.

mod build;
mod compare;
mod spec;

pub use build::{
    build_problem, initial_model, partition_stats, BuiltProblem, PartitionStats, ShardStats,
};
pub use compare::{
    compare, emit, problem_constants, run_cell, write_csv, write_json, Cell, CellFailure, CellRun,
    CompareOutput, MeanStd, MethodSummary, MetricRow, Summary, CONSTANT_POINTS,
};
pub use spec::{
    parse_config, parse_config_str, ConfigOverride, DatasetSpec, ExperimentSpec, ObjectiveName,
    Outputs, ProblemSpec, ALL_METHODS, DEFAULT_BATCH, DEFAULT_DIM, DEFAULT_HETEROGENEITY,
    DEFAULT_HIDDEN, DEFAULT_NOISE, DEFAULT_SAMPLES_PER_CLIENT, DEFAULT_SIMILARITY,
};
