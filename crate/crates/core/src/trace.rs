//! Full per-step record of a run.
//!
//! On disk a trace is two files: a binary body and a JSON sidecar
//! (`<body>.json`) holding [`TraceMeta`]. The body is
//!
//! ```text
//! magic    8 bytes  "DOMOTRC1"
//! version  u32 LE   1
//! reserved u32 LE   0
//! R, P, K, d        u64 LE each
//! then f64 LE sections, row-major, in this order:
//!   server_models        [R+1][d]        x_r
//!   server_momentum      [R+1][d]        m_r
//!   local_models         [R][P+1][K][d]  x^(k)_{r,p}, p = 0 after pre-fusion
//!   local_momentum       [R][P+1][K][d]  m^(k)_{r,p}, p = 0 is the round's initial buffer
//!   gradients            [R][P][K][d]    sampled gradient used at (r,p,k)
//!   mean_models          [R][P+1][d]     x̄_{r,p}
//!   grad_norm_sq_at_mean [R][P]          ‖∇f(x̄_{r,p})‖²
//! ```
//!
//! `K` is the number of participants per round.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedopt::{MethodConfig, Sampling};

const MAGIC: &[u8; 8] = b"DOMOTRC1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub method: String,
    pub config: MethodConfig,
    pub sampling: Sampling,
    pub rounds: usize,
    pub steps: usize,
    /// Participants per round.
    pub clients: usize,
    /// Total number of clients.
    pub population: usize,
    pub dim: usize,
    pub seed: u64,
    /// `f(x_0)`.
    pub loss_x0: f64,
    pub participants: Vec<Vec<usize>>,
    /// Harness context needed to rebuild the problem (config echo, data seed).
    #[serde(default)]
    pub context: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    server_models: Vec<f64>,
    server_momentum: Vec<f64>,
    local_models: Vec<f64>,
    local_momentum: Vec<f64>,
    gradients: Vec<f64>,
    mean_models: Vec<f64>,
    grad_norm_sq_at_mean: Vec<f64>,
}

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        let (r, p, k, d) = (meta.rounds, meta.steps, meta.clients, meta.dim);
        Trace {
            server_models: vec![0.0; (r + 1) * d],
            server_momentum: vec![0.0; (r + 1) * d],
            local_models: vec![0.0; r * (p + 1) * k * d],
            local_momentum: vec![0.0; r * (p + 1) * k * d],
            gradients: vec![0.0; r * p * k * d],
            mean_models: vec![0.0; r * (p + 1) * d],
            grad_norm_sq_at_mean: vec![0.0; r * p],
            meta,
        }
    }

    /// Number of stored reals; used against the storage cap.
    pub fn size_estimate(rounds: usize, steps: usize, clients: usize, dim: usize) -> u128 {
        let (r, p, k, d) = (rounds as u128, steps as u128, clients as u128, dim as u128);
        2 * (r + 1) * d + 2 * r * (p + 1) * k * d + r * p * k * d + r * (p + 1) * d + r * p
    }

    pub fn rounds(&self) -> usize {
        self.meta.rounds
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn clients(&self) -> usize {
        self.meta.clients
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn config(&self) -> &MethodConfig {
        &self.meta.config
    }

    fn local_index(&self, r: usize, p: usize, k: usize) -> usize {
        let m = &self.meta;
        debug_assert!(r < m.rounds && p <= m.steps && k < m.clients);
        ((r * (m.steps + 1) + p) * m.clients + k) * m.dim
    }

    fn grad_index(&self, r: usize, p: usize, k: usize) -> usize {
        let m = &self.meta;
        debug_assert!(r < m.rounds && p < m.steps && k < m.clients);
        ((r * m.steps + p) * m.clients + k) * m.dim
    }

    fn mean_index(&self, r: usize, p: usize) -> usize {
        (r * (self.meta.steps + 1) + p) * self.meta.dim
    }

    pub fn server_model(&self, r: usize) -> &[f64] {
        let d = self.meta.dim;
        &self.server_models[r * d..(r + 1) * d]
    }

    pub fn server_momentum(&self, r: usize) -> &[f64] {
        let d = self.meta.dim;
        &self.server_momentum[r * d..(r + 1) * d]
    }

    pub fn local_model(&self, r: usize, p: usize, k: usize) -> &[f64] {
        let i = self.local_index(r, p, k);
        &self.local_models[i..i + self.meta.dim]
    }

    pub fn local_momentum(&self, r: usize, p: usize, k: usize) -> &[f64] {
        let i = self.local_index(r, p, k);
        &self.local_momentum[i..i + self.meta.dim]
    }

    pub fn gradient(&self, r: usize, p: usize, k: usize) -> &[f64] {
        let i = self.grad_index(r, p, k);
        &self.gradients[i..i + self.meta.dim]
    }

    pub fn mean_model(&self, r: usize, p: usize) -> &[f64] {
        let i = self.mean_index(r, p);
        &self.mean_models[i..i + self.meta.dim]
    }

    pub fn grad_norm_sq_at_mean(&self, r: usize, p: usize) -> f64 {
        self.grad_norm_sq_at_mean[r * self.meta.steps + p]
    }

    pub fn set_server(&mut self, r: usize, model: &[f64], momentum: &[f64]) {
        let d = self.meta.dim;
        self.server_models[r * d..(r + 1) * d].copy_from_slice(model);
        self.server_momentum[r * d..(r + 1) * d].copy_from_slice(momentum);
    }

    pub fn set_local(&mut self, r: usize, p: usize, k: usize, model: &[f64], momentum: &[f64]) {
        let i = self.local_index(r, p, k);
        let d = self.meta.dim;
        self.local_models[i..i + d].copy_from_slice(model);
        self.local_momentum[i..i + d].copy_from_slice(momentum);
    }

    pub fn set_gradient(&mut self, r: usize, p: usize, k: usize, grad: &[f64]) {
        let i = self.grad_index(r, p, k);
        let d = self.meta.dim;
        self.gradients[i..i + d].copy_from_slice(grad);
    }

    /// Perturbs one stored gradient entry (fault injection for detector tests).
    pub fn perturb_gradient(&mut self, r: usize, p: usize, k: usize, coord: usize, delta: f64) {
        let i = self.grad_index(r, p, k);
        self.gradients[i + coord] += delta;
    }

    pub fn set_mean(&mut self, r: usize, p: usize, mean: &[f64], grad_norm_sq: Option<f64>) {
        let i = self.mean_index(r, p);
        let d = self.meta.dim;
        self.mean_models[i..i + d].copy_from_slice(mean);
        if let Some(g) = grad_norm_sq {
            self.grad_norm_sq_at_mean[r * self.meta.steps + p] = g;
        }
    }

    /// Largest `|x̄_{r,p} − mean_k x^{(k)}_{r,p}|` entry.
    pub fn mean_consistency(&self) -> f64 {
        let (d, k_count) = (self.meta.dim, self.meta.clients);
        let mut worst: f64 = 0.0;
        for r in 0..self.meta.rounds {
            for p in 0..=self.meta.steps {
                let stored = self.mean_model(r, p);
                for i in 0..d {
                    let mut acc = 0.0;
                    for k in 0..k_count {
                        acc += self.local_model(r, p, k)[i];
                    }
                    worst = worst.max((acc / k_count as f64 - stored[i]).abs());
                }
            }
        }
        worst
    }

    pub fn sidecar_path(body: &Path) -> PathBuf {
        let mut name = body.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&0u32.to_le_bytes()).map_err(io)?;
        let m = &self.meta;
        for dim in [m.rounds, m.steps, m.clients, m.dim] {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
        }
        for section in self.sections() {
            for v in section {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        let sidecar = Self::sidecar_path(path);
        let json = serde_json::to_vec_pretty(&self.meta)?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Trace> {
        let path = path.as_ref();
        let sidecar = Self::sidecar_path(path);
        let meta_bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: TraceMeta = serde_json::from_slice(&meta_bytes)?;
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::TraceFormat("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::TraceFormat(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word).map_err(io)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(io)?;
            *d = u64::from_le_bytes(buf) as usize;
        }
        if dims != [meta.rounds, meta.steps, meta.clients, meta.dim] {
            return Err(Error::TraceFormat(format!(
                "header dims {dims:?} disagree with sidecar"
            )));
        }
        let mut trace = Trace::new(meta);
        for section in trace.sections_mut() {
            for v in section.iter_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::TraceFormat(format!("{} trailing bytes", rest.len())));
        }
        Ok(trace)
    }

    fn sections(&self) -> [&[f64]; 7] {
        [
            &self.server_models,
            &self.server_momentum,
            &self.local_models,
            &self.local_momentum,
            &self.gradients,
            &self.mean_models,
            &self.grad_norm_sq_at_mean,
        ]
    }

    fn sections_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.server_models,
            &mut self.server_momentum,
            &mut self.local_models,
            &mut self.local_momentum,
            &mut self.gradients,
            &mut self.mean_models,
            &mut self.grad_norm_sq_at_mean,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedopt::method_from_name;

    #[test]
    fn size_estimate_counts_every_section() {
        let meta = TraceMeta {
            method: "domo".into(),
            config: method_from_name("domo").unwrap(),
            sampling: Sampling::FullBatch,
            rounds: 3,
            steps: 2,
            clients: 4,
            population: 4,
            dim: 5,
            seed: 0,
            loss_x0: 0.0,
            participants: Vec::new(),
            context: serde_json::Value::Null,
        };
        let t = Trace::new(meta);
        let stored: usize = t.sections().iter().map(|s| s.len()).sum();
        assert_eq!(stored as u128, Trace::size_estimate(3, 2, 4, 5));
    }

    #[test]
    fn sidecar_sits_next_to_body() {
        let p = Trace::sidecar_path(Path::new("/tmp/a.trace"));
        assert_eq!(p, PathBuf::from("/tmp/a.trace.json"));
    }
}
