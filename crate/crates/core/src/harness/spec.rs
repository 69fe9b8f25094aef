use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedopt::{
    local_steps_from_epochs, method_from_name, Boundary, Fusion, MethodConfig, Sampling,
    DEFAULT_ETA,
};

pub const DEFAULT_SIMILARITY: f64 = 0.1;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_DIM: usize = 10;
pub const DEFAULT_SAMPLES_PER_CLIENT: usize = 32;
pub const DEFAULT_HETEROGENEITY: f64 = 1.0;
pub const DEFAULT_NOISE: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 16;

/// Key in `overrides` that applies to every method.
pub const ALL_METHODS: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    Quadratic,
    LeastSquares,
    Logistic,
    Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        noise: f64,
    },
    Csv {
        path: PathBuf,
    },
}

/// What each client optimizes.
///
/// Without a `dataset`, quadratic and least-squares clients are generated
/// directly: `dim`, `samples_per_client`, `heterogeneity` (spread of client
/// optima) and `noise` (per-sample gradient noise) shape them, and
/// quadratic curvature eigenvalues are spread evenly over
/// `[eig_min, eig_max]`. With a `dataset`, samples are dealt to clients by
/// the similarity protocol; logistic and mlp2 require one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub objective: ObjectiveName,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub samples_per_client: Option<usize>,
    #[serde(default)]
    pub heterogeneity: Option<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub eig_min: Option<f64>,
    #[serde(default)]
    pub eig_max: Option<f64>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub l2: f64,
    /// Standard deviation of the random initial model.
    #[serde(default)]
    pub init_scale: Option<f64>,
}

/// Per-method replacement of [`MethodConfig`] fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Boundary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Fusion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl ConfigOverride {
    fn apply(&self, cfg: &mut MethodConfig) {
        if let Some(v) = self.mu_s {
            cfg.mu_s = v;
        }
        if let Some(v) = self.mu_l {
            cfg.mu_l = v;
        }
        if let Some(v) = self.boundary {
            cfg.boundary = v;
        }
        if let Some(v) = self.fusion {
            cfg.fusion = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
    /// Directory receiving one trace per cell when `trace` is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_dir: Option<PathBuf>,
}

/// An experiment grid. After [`parse_config`] every defaulted field is
/// filled in, and serializing the result yields an equivalent config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: ProblemSpec,
    #[serde(alias = "K")]
    pub clients: usize,
    #[serde(alias = "s", default)]
    pub similarity: Option<f64>,
    /// Seed of dataset, problem and partition. When absent each run seed
    /// plays this role, so seeds differ in data as well as sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    pub methods: Vec<String>,
    #[serde(default)]
    pub overrides: BTreeMap<String, ConfigOverride>,
    #[serde(alias = "R")]
    pub rounds: usize,
    #[serde(alias = "P", default, skip_serializing_if = "Option::is_none")]
    pub local_steps: Option<usize>,
    #[serde(alias = "E", default, skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<f64>,
    #[serde(alias = "b", default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(alias = "S", default, skip_serializing_if = "Option::is_none")]
    pub participation: Option<usize>,
    #[serde(default)]
    pub trace: bool,
    /// Run the theory checks per method (implies `trace`).
    #[serde(default)]
    pub theory: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub outputs: Outputs,
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::InvalidConfig(format!("at `{path}`: {}", e.into_inner()))
    })?;
    spec.resolve()
}

impl ExperimentSpec {
    /// Fills defaults and checks cross-field invariants.
    pub fn resolve(mut self) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.methods.is_empty() {
            return bad("`methods` must name at least one method".into());
        }
        if self.clients == 0 {
            return bad("`clients` must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("`rounds` must be at least 1".into());
        }
        match (self.local_steps, self.local_epochs) {
            (Some(_), Some(_)) => {
                return bad("give exactly one of `local_steps` and `local_epochs`".into())
            }
            (None, None) => self.local_steps = Some(crate::fedopt::DEFAULT_LOCAL_STEPS),
            (Some(0), None) => return bad("`local_steps` must be at least 1".into()),
            _ => {}
        }
        match (self.seed.take(), self.seeds.is_empty()) {
            (Some(_), false) => return bad("give exactly one of `seed` and `seeds`".into()),
            (Some(s), true) => self.seeds = vec![s],
            (None, true) => self.seeds = vec![0],
            (None, false) => {}
        }
        if self.full_batch {
            if self.batch_size.is_some() {
                return bad("`batch_size` conflicts with `full_batch`".into());
            }
        } else if self.batch_size == Some(0) {
            return bad("`batch_size` must be at least 1".into());
        } else {
            self.batch_size.get_or_insert(DEFAULT_BATCH);
        }
        let s = *self.similarity.get_or_insert(DEFAULT_SIMILARITY);
        if !(0.0..=1.0).contains(&s) {
            return bad(format!("`similarity` must lie in [0, 1], got {s}"));
        }
        self.eta.get_or_insert(DEFAULT_ETA);
        if self.theory {
            self.trace = true;
        }
        if self.workers == Some(0) {
            return bad("`workers` must be at least 1".into());
        }
        self.problem.resolve()?;
        for key in self.overrides.keys() {
            if key != ALL_METHODS && method_from_name(key).is_err() {
                return bad(format!("`overrides` names unknown method `{key}`"));
            }
        }
        for name in &self.methods {
            let cfg = self.method_config(name, &[1])?;
            cfg.validate(self.clients)
                .map_err(|e| Error::InvalidConfig(format!("method `{name}`: {e}")))?;
        }
        Ok(self)
    }

    pub fn sampling(&self) -> Sampling {
        match self.batch_size {
            Some(b) if !self.full_batch => Sampling::Batch(b),
            _ => Sampling::FullBatch,
        }
    }

    /// Configuration of `name` after defaults, top-level settings and
    /// overrides (`all` first, then the method's own).
    pub fn method_config(&self, name: &str, shard_sizes: &[usize]) -> Result<MethodConfig> {
        let mut cfg = method_from_name(name)?;
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        cfg.local_steps = match (self.local_steps, self.local_epochs) {
            (Some(p), _) => p,
            (None, Some(e)) => local_steps_from_epochs(e, shard_sizes, self.sampling())?,
            (None, None) => crate::fedopt::DEFAULT_LOCAL_STEPS,
        };
        cfg.participation = self.participation;
        if let Some(o) = self.overrides.get(ALL_METHODS) {
            o.apply(&mut cfg);
        }
        if let Some(o) = self.overrides.get(name) {
            o.apply(&mut cfg);
        }
        Ok(cfg)
    }
}

impl ProblemSpec {
    fn resolve(&mut self) -> Result<()> {
        let needs_data = matches!(self.objective, ObjectiveName::Logistic | ObjectiveName::Mlp2);
        if needs_data && self.dataset.is_none() {
            return Err(Error::InvalidConfig(format!(
                "`problem.dataset` is required for {:?} objectives",
                self.objective
            )));
        }
        if self.dataset.is_none() {
            self.dim.get_or_insert(DEFAULT_DIM);
            self.samples_per_client.get_or_insert(DEFAULT_SAMPLES_PER_CLIENT);
            self.heterogeneity.get_or_insert(DEFAULT_HETEROGENEITY);
            self.noise.get_or_insert(DEFAULT_NOISE);
        }
        if self.objective == ObjectiveName::Quadratic {
            if self.dataset.is_some() {
                return Err(Error::InvalidConfig(
                    "quadratic objectives are generated, not dataset-backed".into(),
                ));
            }
            let lo = *self.eig_min.get_or_insert(0.1);
            let hi = *self.eig_max.get_or_insert(1.0);
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidConfig(format!(
                    "need 0 < eig_min <= eig_max, got {lo} and {hi}"
                )));
            }
        }
        if self.objective == ObjectiveName::Mlp2 {
            self.hidden.get_or_insert(DEFAULT_HIDDEN);
        }
        let init = if self.objective == ObjectiveName::Mlp2 { 0.1 } else { 0.0 };
        self.init_scale.get_or_insert(init);
        if self.dim == Some(0) || self.samples_per_client == Some(0) {
            return Err(Error::InvalidConfig(
                "`dim` and `samples_per_client` must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "problem": {"objective": "quadratic"},
        "K": 4, "s": 0.1, "methods": ["fedavg"], "R": 3, "seed": 7
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let spec = parse_config_str(MINIMAL).unwrap();
        assert_eq!(spec.clients, 4);
        assert_eq!(spec.seeds, vec![7]);
        assert_eq!(spec.local_steps, Some(5));
        assert_eq!(spec.batch_size, Some(32));
        assert_eq!(spec.eta, Some(DEFAULT_ETA));
        assert_eq!(spec.problem.dim, Some(DEFAULT_DIM));
        assert_eq!(spec.problem.eig_max, Some(1.0));
    }

    #[test]
    fn resolved_spec_round_trips() {
        let spec = parse_config_str(MINIMAL).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), spec);
    }

    #[test]
    fn steps_and_epochs_conflict() {
        let text = MINIMAL.replace("\"R\": 3", "\"R\": 3, \"P\": 2, \"E\": 1.0");
        assert!(matches!(parse_config_str(&text), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("\"objective\"", "\"colour\": 1, \"objective\"");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("problem") && err.contains("colour"), "{err}");
    }

    #[test]
    fn beta_override() {
        let text = MINIMAL.replace(
            "[\"fedavg\"]",
            "[\"domo\"], \"overrides\": {\"domo\": {\"beta\": 0.8}}",
        );
        let spec = parse_config_str(&text).unwrap();
        let cfg = spec.method_config("domo", &[10]).unwrap();
        let mut expected = method_from_name("domo").unwrap();
        expected.beta = 0.8;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn override_of_unknown_method_rejected() {
        let text = MINIMAL.replace(
            "[\"fedavg\"]",
            "[\"fedavg\"], \"overrides\": {\"sgd\": {\"beta\": 0.8}}",
        );
        assert!(parse_config_str(&text).is_err());
    }

    #[test]
    fn classification_needs_data() {
        let text = MINIMAL.replace("quadratic", "logistic");
        assert!(parse_config_str(&text).is_err());
    }
}
