use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MU_S: f64 = 0.9;
pub const DEFAULT_MU_L: f64 = 0.6;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.9;
/// Desk-scale local learning rate.
pub const DEFAULT_ETA: f64 = 0.05;
pub const DEFAULT_LOCAL_STEPS: usize = 5;

/// What happens to local momentum buffers between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Every client restarts from a zero buffer.
    Reset,
    /// Every client restarts from the mean of last round's final buffers.
    Average,
}

/// How the server buffer is injected into local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    None,
    /// Once before the first local step, coefficient `ηβP`.
    Pre,
    /// After every local step, coefficient `ηβ`.
    Intra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub mu_s: f64,
    pub mu_l: f64,
    pub boundary: Boundary,
    pub fusion: Fusion,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub local_steps: usize,
    #[serde(default)]
    pub participation: Option<usize>,
}

impl MethodConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.mu_s) {
            return bad(format!("mu_s must lie in [0, 1), got {}", self.mu_s));
        }
        if !(0.0..1.0).contains(&self.mu_l) {
            return bad(format!("mu_l must lie in [0, 1), got {}", self.mu_l));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be nonnegative, got {}", self.beta));
        }
        if self.local_steps == 0 {
            return bad("local_steps must be at least 1".into());
        }
        if self.fusion != Fusion::None && self.mu_s == 0.0 {
            return bad("momentum fusion requires mu_s > 0".into());
        }
        if let Some(s) = self.participation {
            if s == 0 || s > clients {
                return bad(format!("participation {s} must lie in [1, {clients}]"));
            }
            if s < clients && self.boundary == Boundary::Average {
                return bad("boundary=average needs full participation".into());
            }
        }
        Ok(())
    }

    pub fn participants(&self, clients: usize) -> usize {
        self.participation.unwrap_or(clients)
    }

    /// Averaging local buffers costs an extra model-sized message each way.
    pub fn comm_multiplier(&self) -> u64 {
        match self.boundary {
            Boundary::Reset => 1,
            Boundary::Average => 2,
        }
    }
}

/// The eight named methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    FedAvg,
    FedAvgSm,
    FedAvgLm,
    FedAvgLmZ,
    FedAvgSlm,
    FedAvgSlmZ,
    Domo,
    DomoS,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::FedAvg,
        Method::FedAvgSm,
        Method::FedAvgLm,
        Method::FedAvgLmZ,
        Method::FedAvgSlm,
        Method::FedAvgSlmZ,
        Method::Domo,
        Method::DomoS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedAvgSm => "fedavgsm",
            Method::FedAvgLm => "fedavglm",
            Method::FedAvgLmZ => "fedavglm-z",
            Method::FedAvgSlm => "fedavgslm",
            Method::FedAvgSlmZ => "fedavgslm-z",
            Method::Domo => "domo",
            Method::DomoS => "domo-s",
        }
    }

    /// Default configuration of the method.
    pub fn config(self) -> MethodConfig {
        let (mu_s, mu_l, boundary, fusion) = match self {
            Method::FedAvg => (0.0, 0.0, Boundary::Reset, Fusion::None),
            Method::FedAvgSm => (DEFAULT_MU_S, 0.0, Boundary::Reset, Fusion::None),
            Method::FedAvgLm => (0.0, DEFAULT_MU_L, Boundary::Average, Fusion::None),
            Method::FedAvgLmZ => (0.0, DEFAULT_MU_L, Boundary::Reset, Fusion::None),
            Method::FedAvgSlm => (DEFAULT_MU_S, DEFAULT_MU_L, Boundary::Average, Fusion::None),
            Method::FedAvgSlmZ => (DEFAULT_MU_S, DEFAULT_MU_L, Boundary::Reset, Fusion::None),
            Method::Domo => (DEFAULT_MU_S, DEFAULT_MU_L, Boundary::Reset, Fusion::Pre),
            Method::DomoS => (DEFAULT_MU_S, DEFAULT_MU_L, Boundary::Reset, Fusion::Intra),
        };
        MethodConfig {
            mu_s,
            mu_l,
            boundary,
            fusion,
            alpha: DEFAULT_ALPHA,
            beta: if fusion == Fusion::None { 0.0 } else { DEFAULT_BETA },
            eta: DEFAULT_ETA,
            local_steps: DEFAULT_LOCAL_STEPS,
            participation: None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(name: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }
}

pub fn method_from_name(name: &str) -> Result<MethodConfig> {
    Ok(name.parse::<Method>()?.config())
}
