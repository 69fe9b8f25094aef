//! Reconstruction of the auxiliary sequences from a trace and numerical
//! checks of the update rule, the inconsistency closed form and bound, the
//! divergence bound and the convergence theorem.
//!
//! With `c = αη/((1−μ_s)K)` and `K` the participants per round:
//!
//! ```text
//! y_r      = x_r − (μ_s/(1−μ_s)) αηP m_r
//! ŷ_{r,0}  = y_r,   ŷ_{r,p+1} = ŷ_{r,p} − c Σ_k m^{(k)}_{r,p+1}
//! z_{r,p}  = ŷ_{r,p} − (μ_l c/(1−μ_l)) Σ_k m^{(k)}_{r,p}     p = 0..P
//! ```
//!
//! `z_{r,p}` uses the round's own initial buffer at `p = 0`, so the update
//! rule `z_{r,p+1} − z_{r,p} = −(c/(1−μ_l)) Σ_k g^{(k)}_{r,p}` holds at every
//! step. Under averaged buffers this also gives `z_{r,P} = z_{r+1,0}`; under
//! reset buffers the two differ by `(μ_l c/(1−μ_l)) Σ_k m^{(k)}_{r,P}`, which
//! the stitching check reports.
//!
//! # Report schema
//!
//! [`TheoryReport`] serializes to JSON with these fields:
//!
//! | field | content |
//! |---|---|
//! | `method`, `traces` | method name, ensemble size |
//! | `lemma1` | [`ResidualCheck`] of the update rule |
//! | `stitching` | [`StitchingCheck`] of `z_{r,P} = z_{r+1,0}` |
//! | `lemma2_closed_form` | [`Lemma2Check`] of `z − x̄` |
//! | `inconsistency` | [`InconsistencyCheck`] |
//! | `divergence`, `theorem1` | [`BoundCheck`] |
//! | `constants` | [`ProblemConstants`] used, if any |
//! | `precondition_flags` | every named precondition and its value |
//!
//! A `rhs` is present only when every precondition of its check holds;
//! otherwise `status` is `not_applicable` and `failing_preconditions` names
//! the culprits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedopt::{method_from_name, Fusion, MethodConfig};
use crate::objectives::ProblemConstants;
use crate::trace::Trace;
use crate::vector::ParamVec;

/// Relative tolerance of the update-rule check, scaled by `1 + max‖g‖`.
pub const LEMMA1_TOL: f64 = 1e-10;
/// Relative tolerance of the stitching check, scaled by `1 + max‖z‖`.
pub const STITCH_TOL: f64 = 1e-12;
/// Relative tolerance of the closed-form check, scaled by `1 + max‖x̄‖`.
pub const LEMMA2_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

impl Status {
    fn from_bool(ok: bool) -> Status {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCheck {
    pub status: Status,
    pub max_residual: Option<f64>,
    pub tolerance: Option<f64>,
    pub failing_preconditions: Vec<String>,
}

impl ResidualCheck {
    fn not_applicable(failing: Vec<String>) -> Self {
        ResidualCheck {
            status: Status::NotApplicable,
            max_residual: None,
            tolerance: None,
            failing_preconditions: failing,
        }
    }

    fn measured(residual: f64, tolerance: f64) -> Self {
        ResidualCheck {
            status: Status::from_bool(residual <= tolerance),
            max_residual: Some(residual),
            tolerance: Some(tolerance),
            failing_preconditions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchingCheck {
    pub status: Status,
    /// `max_r ‖z_{r,P} − z_{r+1,0}‖`.
    pub max_residual: f64,
    pub tolerance: f64,
    /// `max_r ‖ŷ_{r,P} − y_{r+1}‖`, recomputed from the server models.
    pub yhat_max_residual: f64,
    /// Largest boundary buffer jump `(μ_l c/(1−μ_l))‖Σ_k m_{r,P} − Σ_k m_{r+1,0}‖`.
    pub max_buffer_jump: f64,
    /// Stitching residual left after removing the buffer jump.
    pub unexplained_max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraTermCheck {
    /// `max ‖(z − x̄) − D + (μ_s/(1−μ_s))αηP m_r‖`, `D` the fused form.
    pub derived_sign_max_residual: f64,
    /// Same with the term added instead of subtracted.
    pub added_sign_max_residual: f64,
    pub max_term_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Check {
    pub status: Status,
    pub max_residual: Option<f64>,
    pub tolerance: Option<f64>,
    /// Residual with second-term coefficient `μ_l η/((1−μ_l)K)`.
    pub alternate_max_residual: Option<f64>,
    pub extra_term: Option<ExtraTermCheck>,
    pub failing_preconditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub status: Status,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    /// `rhs / lhs`; absent when `lhs = 0`.
    pub slack: Option<f64>,
    pub failing_preconditions: Vec<String>,
}

impl BoundCheck {
    fn not_applicable(lhs: Option<f64>, failing: Vec<String>) -> Self {
        BoundCheck {
            status: Status::NotApplicable,
            lhs,
            rhs: None,
            slack: None,
            failing_preconditions: failing,
        }
    }

    fn measured(lhs: f64, rhs: f64, floor: f64) -> Self {
        BoundCheck {
            status: Status::from_bool(lhs <= rhs + floor),
            lhs: Some(lhs),
            rhs: Some(rhs),
            slack: (lhs > 0.0).then(|| rhs / lhs),
            failing_preconditions: Vec::new(),
        }
    }
}

/// Per-step coefficients of the inconsistency bound.
///
/// `h1_definition` and `h2_definition` evaluate the sums over `p'` term by
/// term; `*_simplified` are the closed forms those sums are claimed to equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientAudit {
    pub h: Vec<f64>,
    pub h1_definition: Vec<f64>,
    pub h1_simplified: Vec<f64>,
    /// Indexed by `j = t − τ` in `1..P`; entry 0 unused (NaN is not JSON, so 0).
    pub h2_definition: Vec<f64>,
    pub h2_simplified: Vec<f64>,
    pub h1_max_gap: f64,
    pub h2_max_gap: f64,
    /// Steps `p` at which `h1_simplified > h`.
    pub h1_exceeds_h_at: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyCheck {
    pub bound: BoundCheck,
    /// `η²/(1−μ_l) · Σ_p h² μ_l^p/(1−μ_l^P)`.
    pub coefficient: Option<f64>,
    /// `Σ_{r,p} ‖(1/K)Σ_k g‖²`.
    pub mean_grad_sq_sum: f64,
    pub audit: Option<CoefficientAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub method: String,
    pub traces: usize,
    pub lemma1: ResidualCheck,
    pub stitching: StitchingCheck,
    pub lemma2_closed_form: Lemma2Check,
    pub inconsistency: InconsistencyCheck,
    pub divergence: BoundCheck,
    pub theorem1: BoundCheck,
    pub constants: Option<ProblemConstants>,
    pub precondition_flags: BTreeMap<String, bool>,
}

/// `ŷ` and `z` for every `(r, p)`, `p = 0..P`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxSequences {
    steps: usize,
    dim: usize,
    yhat: Vec<f64>,
    z: Vec<f64>,
}

impl AuxSequences {
    fn at(&self, r: usize, p: usize) -> std::ops::Range<usize> {
        let i = (r * (self.steps + 1) + p) * self.dim;
        i..i + self.dim
    }

    pub fn yhat(&self, r: usize, p: usize) -> &[f64] {
        &self.yhat[self.at(r, p)]
    }

    pub fn z(&self, r: usize, p: usize) -> &[f64] {
        &self.z[self.at(r, p)]
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// `Σ_k` of a per-client slice accessor, in ascending client order.
fn client_sum<'t>(trace: &'t Trace, f: impl Fn(usize) -> &'t [f64]) -> Vec<f64> {
    let mut acc = vec![0.0; trace.dim()];
    for k in 0..trace.clients() {
        for (a, v) in acc.iter_mut().zip(f(k)) {
            *a += v;
        }
    }
    acc
}

fn check_complete(trace: &Trace) -> Result<()> {
    let m = &trace.meta;
    if m.rounds == 0 || m.steps == 0 || m.clients == 0 {
        return Err(Error::TraceFormat("trace has an empty dimension".into()));
    }
    if m.participants.len() != m.rounds || m.participants.iter().any(|p| p.len() != m.clients) {
        return Err(Error::TraceFormat("trace is incomplete".into()));
    }
    Ok(())
}

pub fn reconstruct_z(trace: &Trace) -> Result<AuxSequences> {
    check_complete(trace)?;
    let cfg = trace.config();
    let (rounds, steps, d) = (trace.rounds(), trace.steps(), trace.dim());
    let k = trace.clients() as f64;
    let c = cfg.alpha * cfg.eta / ((1.0 - cfg.mu_s) * k);
    let buf = cfg.mu_l * c / (1.0 - cfg.mu_l);
    let server_shift = cfg.mu_s / (1.0 - cfg.mu_s) * cfg.alpha * cfg.eta * steps as f64;

    let mut yhat = Vec::with_capacity(rounds * (steps + 1) * d);
    let mut z = Vec::with_capacity(rounds * (steps + 1) * d);
    for r in 0..rounds {
        let mut y: Vec<f64> = trace
            .server_model(r)
            .iter()
            .zip(trace.server_momentum(r))
            .map(|(x, m)| x - server_shift * m)
            .collect();
        for p in 0..=steps {
            if p > 0 {
                let s = client_sum(trace, |kk| trace.local_momentum(r, p, kk));
                for (yi, si) in y.iter_mut().zip(&s) {
                    *yi -= c * si;
                }
            }
            let m = client_sum(trace, |kk| trace.local_momentum(r, p, kk));
            yhat.extend_from_slice(&y);
            z.extend(y.iter().zip(&m).map(|(yi, mi)| yi - buf * mi));
        }
    }
    Ok(AuxSequences {
        steps,
        dim: d,
        yhat,
        z,
    })
}

fn beta_matches(cfg: &MethodConfig) -> bool {
    let target = cfg.mu_s * cfg.alpha / (1.0 - cfg.mu_s);
    (cfg.beta - target).abs() <= 1e-12 * target.max(1.0)
}

/// Fused with `β = μ_sα/(1−μ_s)`, or no server momentum at all.
fn fused_scope(cfg: &MethodConfig) -> Vec<String> {
    match cfg.fusion {
        Fusion::Intra => vec!["fusion_not_intra".into()],
        Fusion::Pre if !beta_matches(cfg) => vec!["beta_eq_mu_s_alpha_over_one_minus_mu_s".into()],
        Fusion::None if cfg.mu_s != 0.0 => vec!["server_momentum_fused".into()],
        _ => Vec::new(),
    }
}

/// Update-rule residual over every step, without scope restrictions.
/// Returns `(max residual, max ‖g‖)`.
pub fn lemma1_residual(trace: &Trace, aux: &AuxSequences) -> (f64, f64) {
    let cfg = trace.config();
    let k = trace.clients() as f64;
    let coef = cfg.alpha * cfg.eta / ((1.0 - cfg.mu_l) * (1.0 - cfg.mu_s) * k);
    let mut worst: f64 = 0.0;
    let mut max_g: f64 = 0.0;
    for r in 0..trace.rounds() {
        for p in 0..trace.steps() {
            for kk in 0..trace.clients() {
                max_g = max_g.max(norm_sq(trace.gradient(r, p, kk)).sqrt());
            }
            let g = client_sum(trace, |kk| trace.gradient(r, p, kk));
            let (z0, z1) = (aux.z(r, p), aux.z(r, p + 1));
            let res: f64 = (0..trace.dim())
                .map(|i| (z1[i] - z0[i] + coef * g[i]).powi(2))
                .sum();
            worst = worst.max(res.sqrt());
        }
    }
    (worst, max_g)
}

/// Update rule `z_{r,p+1} = z_{r,p} − (αη/((1−μ_l)(1−μ_s)K)) Σ_k g`.
pub fn check_lemma1(trace: &Trace, aux: &AuxSequences) -> ResidualCheck {
    let failing = fused_scope(trace.config());
    if !failing.is_empty() {
        return ResidualCheck::not_applicable(failing);
    }
    let (res, max_g) = lemma1_residual(trace, aux);
    ResidualCheck::measured(res, LEMMA1_TOL * (1.0 + max_g))
}

pub fn check_stitching(trace: &Trace, aux: &AuxSequences) -> StitchingCheck {
    let cfg = trace.config();
    let (steps, d) = (trace.steps(), trace.dim());
    let k = trace.clients() as f64;
    let c = cfg.alpha * cfg.eta / ((1.0 - cfg.mu_s) * k);
    let buf = cfg.mu_l * c / (1.0 - cfg.mu_l);
    let server_shift = cfg.mu_s / (1.0 - cfg.mu_s) * cfg.alpha * cfg.eta * steps as f64;

    let mut max_z: f64 = 0.0;
    for r in 0..trace.rounds() {
        for p in 0..=steps {
            max_z = max_z.max(norm_sq(aux.z(r, p)).sqrt());
        }
    }
    let (mut worst, mut worst_y, mut jump, mut unexplained) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for r in 0..trace.rounds() {
        let y_next: Vec<f64> = trace
            .server_model(r + 1)
            .iter()
            .zip(trace.server_momentum(r + 1))
            .map(|(x, m)| x - server_shift * m)
            .collect();
        let dy: f64 = (0..d).map(|i| (aux.yhat(r, steps)[i] - y_next[i]).powi(2)).sum();
        worst_y = worst_y.max(dy.sqrt());
        if r + 1 == trace.rounds() {
            continue;
        }
        let end = client_sum(trace, |kk| trace.local_momentum(r, steps, kk));
        let start = client_sum(trace, |kk| trace.local_momentum(r + 1, 0, kk));
        let (mut dz, mut dj, mut du) = (0.0, 0.0, 0.0);
        for i in 0..d {
            let diff = aux.z(r, steps)[i] - aux.z(r + 1, 0)[i];
            let predicted = buf * (start[i] - end[i]);
            dz += diff * diff;
            dj += predicted * predicted;
            du += (diff - predicted).powi(2);
        }
        worst = worst.max(dz.sqrt());
        jump = jump.max(dj.sqrt());
        unexplained = unexplained.max(du.sqrt());
    }
    let tolerance = STITCH_TOL * (1.0 + max_z);
    StitchingCheck {
        status: Status::from_bool(worst <= tolerance && worst_y <= tolerance),
        max_residual: worst,
        tolerance,
        yhat_max_residual: worst_y,
        max_buffer_jump: jump,
        unexplained_max_residual: unexplained,
    }
}

/// Measured `z − x̄` against its closed form.
pub fn check_lemma2_closed_form(trace: &Trace, aux: &AuxSequences) -> Lemma2Check {
    let cfg = trace.config().clone();
    let mut failing = Vec::new();
    match cfg.fusion {
        Fusion::Intra => failing.push("fusion_not_intra".to_string()),
        Fusion::Pre if !beta_matches(&cfg) => {
            failing.push("beta_eq_mu_s_alpha_over_one_minus_mu_s".to_string())
        }
        _ => {}
    }
    if !failing.is_empty() {
        return Lemma2Check {
            status: Status::NotApplicable,
            max_residual: None,
            tolerance: None,
            alternate_max_residual: None,
            extra_term: None,
            failing_preconditions: failing,
        };
    }
    let (steps, d) = (trace.steps(), trace.dim());
    let k = trace.clients() as f64;
    let a = cfg.alpha / (1.0 - cfg.mu_s);
    let first = (1.0 - a) * cfg.eta / k;
    let second = cfg.mu_l * cfg.alpha * cfg.eta / ((1.0 - cfg.mu_l) * (1.0 - cfg.mu_s) * k);
    let second_alt = cfg.mu_l * cfg.eta / ((1.0 - cfg.mu_l) * k);
    let extra = cfg.mu_s / (1.0 - cfg.mu_s) * cfg.alpha * cfg.eta * steps as f64;
    let unfused = cfg.fusion == Fusion::None;

    let (mut worst, mut worst_alt, mut worst_minus, mut worst_plus, mut term_max) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut max_xbar: f64 = 0.0;
    for r in 0..trace.rounds() {
        let m_r = trace.server_momentum(r);
        let mut partial = vec![0.0; d];
        for p in 0..=steps {
            if p > 0 {
                let s = client_sum(trace, |kk| trace.local_momentum(r, p, kk));
                for (a, v) in partial.iter_mut().zip(&s) {
                    *a += v;
                }
            }
            let m = client_sum(trace, |kk| trace.local_momentum(r, p, kk));
            let xbar = trace.mean_model(r, p);
            max_xbar = max_xbar.max(norm_sq(xbar).sqrt());
            let z = aux.z(r, p);
            let (mut e, mut e_alt, mut e_minus, mut e_plus, mut t) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..d {
                let measured = z[i] - xbar[i];
                let fused = first * partial[i] - second * m[i];
                let fused_alt = first * partial[i] - second_alt * m[i];
                let term = extra * m_r[i];
                let predicted = if unfused { fused - term } else { fused };
                e += (measured - predicted).powi(2);
                e_alt += (measured - if unfused { fused_alt - term } else { fused_alt }).powi(2);
                e_minus += (measured - fused + term).powi(2);
                e_plus += (measured - fused - term).powi(2);
                t += term * term;
            }
            worst = worst.max(e.sqrt());
            worst_alt = worst_alt.max(e_alt.sqrt());
            worst_minus = worst_minus.max(e_minus.sqrt());
            worst_plus = worst_plus.max(e_plus.sqrt());
            term_max = term_max.max(t.sqrt());
        }
    }
    let tolerance = LEMMA2_TOL * (1.0 + max_xbar);
    Lemma2Check {
        status: Status::from_bool(worst <= tolerance),
        max_residual: Some(worst),
        tolerance: Some(tolerance),
        alternate_max_residual: Some(worst_alt),
        extra_term: (unfused && cfg.mu_s > 0.0).then_some(ExtraTermCheck {
            derived_sign_max_residual: worst_minus,
            added_sign_max_residual: worst_plus,
            max_term_norm: term_max,
        }),
        failing_preconditions: Vec::new(),
    }
}

/// `h_p` of the bound: `μ_l/(1−μ_l)` when `α = 1 − μ_s`, otherwise
/// `(α/(1−μ_s))(1+μ_l−μ_l^p)/(1−μ_l) − 1`.
pub fn bound_h(alpha: f64, mu_s: f64, mu_l: f64, p: usize) -> f64 {
    let a = alpha / (1.0 - mu_s);
    if (a - 1.0).abs() <= 1e-12 {
        mu_l / (1.0 - mu_l)
    } else {
        a * (1.0 + mu_l - mu_l.powi(p as i32)) / (1.0 - mu_l) - 1.0
    }
}

/// `η²/(1−μ_l) · Σ_{p<P} h_p² μ_l^p/(1−μ_l^P)`.
pub fn inconsistency_coefficient(alpha: f64, mu_s: f64, mu_l: f64, eta: f64, steps: usize) -> f64 {
    let denom = 1.0 - mu_l.powi(steps as i32);
    let sum: f64 = (0..steps)
        .map(|p| bound_h(alpha, mu_s, mu_l, p).powi(2) * mu_l.powi(p as i32) / denom)
        .sum();
    eta * eta / (1.0 - mu_l) * sum
}

/// Term-by-term `h1`, `h2` against their stated closed forms. `None` when
/// `μ_l = 0`, where the sums involve `μ_l^{−n}`.
pub fn coefficient_audit(alpha: f64, mu_s: f64, mu_l: f64, steps: usize) -> Option<CoefficientAudit> {
    if mu_l == 0.0 {
        return None;
    }
    let a = alpha / (1.0 - mu_s);
    let lead = mu_l / (1.0 - mu_l) * a;
    // Σ_{p'=p−n}^{p−1} μ^{−p+p'+1} = Σ_{i=0}^{n−1} μ^{−i}
    let neg_sum = |n: usize| (0..n).map(|i| mu_l.powi(-(i as i32))).sum::<f64>();
    let closed = |n: usize| {
        let q = mu_l.powi(n as i32);
        a * (1.0 + mu_l - q) / (1.0 - mu_l) - (1.0 - q) / (1.0 - mu_l)
    };
    let h: Vec<f64> = (0..steps)
        .map(|p| a * (1.0 + mu_l - mu_l.powi(p as i32)) / (1.0 - mu_l) - 1.0)
        .collect();
    let h1_definition: Vec<f64> = (0..steps).map(|p| lead - (1.0 - a) * neg_sum(p)).collect();
    let h1_simplified: Vec<f64> = (0..steps).map(closed).collect();
    let mut h2_definition = vec![0.0];
    let mut h2_simplified = vec![0.0];
    for j in 1..steps {
        h2_definition.push(lead - (1.0 - a) * neg_sum(j));
        h2_simplified.push(closed(j));
    }
    let gap = |u: &[f64], v: &[f64]| {
        u.iter()
            .zip(v)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };
    Some(CoefficientAudit {
        h1_max_gap: gap(&h1_definition, &h1_simplified),
        h2_max_gap: gap(&h2_definition, &h2_simplified),
        h1_exceeds_h_at: (0..steps)
            .filter(|&p| h1_simplified[p] > h[p] + 1e-12)
            .collect(),
        h,
        h1_definition,
        h1_simplified,
        h2_definition,
        h2_simplified,
    })
}

/// Ratio of the bound coefficient at `α = (1−μ_s)(1−μ_l)` to the one of
/// local momentum SGD (`α = 1`, `μ_s = 0`). Independent of `μ_s` and `η`.
pub fn inconsistency_coefficient_ratio(mu_l: f64, steps: usize) -> f64 {
    let fused = inconsistency_coefficient(1.0 - mu_l, 0.0, mu_l, 1.0, steps);
    let local = inconsistency_coefficient(1.0, 0.0, mu_l, 1.0, steps);
    fused / local
}

fn inconsistency_flags(cfg: &MethodConfig) -> Vec<(String, bool)> {
    vec![
        ("fusion_not_intra".into(), cfg.fusion != Fusion::Intra),
        (
            "beta_eq_mu_s_alpha_over_one_minus_mu_s".into(),
            cfg.fusion != Fusion::Pre || beta_matches(cfg),
        ),
        (
            "server_momentum_fused".into(),
            cfg.fusion != Fusion::None || cfg.mu_s == 0.0,
        ),
        (
            "alpha_ge_one_minus_mu_s_times_one_minus_mu_l".into(),
            cfg.alpha >= (1.0 - cfg.mu_s) * (1.0 - cfg.mu_l) * (1.0 - 1e-12),
        ),
    ]
}

/// `Σ‖z − x̄‖² ≤ η²/(1−μ_l)·Σ_p h²μ_l^p/(1−μ_l^P) · Σ‖(1/K)Σ_k g‖²`.
pub fn check_inconsistency_bound(trace: &Trace, aux: &AuxSequences) -> InconsistencyCheck {
    let cfg = trace.config();
    let (steps, d) = (trace.steps(), trace.dim());
    let k = trace.clients() as f64;
    let mut lhs = 0.0;
    let mut grad_sum = 0.0;
    let mut max_x: f64 = 0.0;
    for r in 0..trace.rounds() {
        for p in 0..steps {
            let xbar = trace.mean_model(r, p);
            max_x = max_x.max(max_abs(xbar));
            let z = aux.z(r, p);
            lhs += (0..d).map(|i| (z[i] - xbar[i]).powi(2)).sum::<f64>();
            let g = client_sum(trace, |kk| trace.gradient(r, p, kk));
            grad_sum += g.iter().map(|v| (v / k).powi(2)).sum::<f64>();
        }
    }
    let failing: Vec<String> = inconsistency_flags(cfg)
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n)
        .collect();
    let audit = coefficient_audit(cfg.alpha, cfg.mu_s, cfg.mu_l, steps);
    if !failing.is_empty() {
        return InconsistencyCheck {
            bound: BoundCheck::not_applicable(Some(lhs), failing),
            coefficient: None,
            mean_grad_sq_sum: grad_sum,
            audit,
        };
    }
    let coefficient = inconsistency_coefficient(cfg.alpha, cfg.mu_s, cfg.mu_l, cfg.eta, steps);
    let terms = (trace.rounds() * steps * d) as f64;
    let floor = terms * (1e-13 * (1.0 + max_x)).powi(2);
    InconsistencyCheck {
        bound: BoundCheck::measured(lhs, coefficient * grad_sum, floor),
        coefficient: Some(coefficient),
        mean_grad_sq_sum: grad_sum,
        audit,
    }
}

/// `(1/(KRP)) Σ_{r,p<P} Σ_k ‖x̄_{r,p} − x^{(k)}_{r,p}‖²` of one trace.
pub fn mean_divergence(trace: &Trace) -> f64 {
    let (steps, d) = (trace.steps(), trace.dim());
    let mut total = 0.0;
    for r in 0..trace.rounds() {
        for p in 0..steps {
            let xbar = trace.mean_model(r, p);
            for kk in 0..trace.clients() {
                let x = trace.local_model(r, p, kk);
                total += (0..d).map(|i| (xbar[i] - x[i]).powi(2)).sum::<f64>();
            }
        }
    }
    total / (trace.clients() * trace.rounds() * steps) as f64
}

/// `(1/(RP)) Σ_{r,p<P} ‖∇f(x̄_{r,p})‖²` of one trace.
pub fn mean_grad_norm_sq(trace: &Trace) -> f64 {
    let steps = trace.steps();
    let mut total = 0.0;
    for r in 0..trace.rounds() {
        for p in 0..steps {
            total += trace.grad_norm_sq_at_mean(r, p);
        }
    }
    total / (trace.rounds() * steps) as f64
}

fn ensemble_shape(traces: &[Trace]) -> Result<&Trace> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty trace ensemble".into()))?;
    for t in traces {
        check_complete(t)?;
        let same = t.rounds() == first.rounds()
            && t.steps() == first.steps()
            && t.clients() == first.clients()
            && t.dim() == first.dim()
            && t.config() == first.config();
        if !same {
            return Err(Error::InvalidArgument(
                "trace ensemble mixes shapes or configurations".into(),
            ));
        }
    }
    Ok(first)
}

fn flag(flags: &mut Vec<(String, bool)>, name: &str, value: bool) {
    flags.push((name.to_string(), value));
}

fn failing(flags: &[(String, bool)]) -> Vec<String> {
    flags
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n.clone())
        .collect()
}

fn divergence_flags(trace: &Trace, constants: &ProblemConstants) -> Vec<(String, bool)> {
    let cfg = trace.config();
    let mut flags = Vec::new();
    flag(
        &mut flags,
        "steps_le_one_minus_mu_l_over_six_eta_l",
        trace.steps() as f64 <= (1.0 - cfg.mu_l) / (6.0 * cfg.eta * constants.smoothness),
    );
    flag(
        &mut flags,
        "full_participation",
        trace.clients() == trace.meta.population,
    );
    flag(&mut flags, "exact_constants", !constants.estimated);
    flags
}

/// Seed-mean divergence against `3η²Pσ²/(1−μ_l)² + 9η²P²G²/(1−μ_l)²`.
pub fn check_divergence_bound(traces: &[Trace], constants: &ProblemConstants) -> Result<BoundCheck> {
    let first = ensemble_shape(traces)?;
    let lhs = traces.iter().map(mean_divergence).sum::<f64>() / traces.len() as f64;
    let flags = divergence_flags(first, constants);
    let bad = failing(&flags);
    if !bad.is_empty() {
        return Ok(BoundCheck::not_applicable(Some(lhs), bad));
    }
    let cfg = first.config();
    let p = first.steps() as f64;
    let q = (1.0 - cfg.mu_l).powi(2);
    let rhs = 3.0 * cfg.eta.powi(2) * p * constants.sigma2 / q
        + 9.0 * cfg.eta.powi(2) * p * p * constants.g2 / q;
    Ok(BoundCheck::measured(lhs, rhs, 0.0))
}

fn theorem1_flags(trace: &Trace, constants: &ProblemConstants) -> Vec<(String, bool)> {
    let cfg = trace.config();
    let (eta, l, mu_l) = (cfg.eta, constants.smoothness, cfg.mu_l);
    let alpha_ok = (cfg.alpha - (1.0 - cfg.mu_s)).abs() <= 1e-12;
    let beta_ok = match cfg.fusion {
        Fusion::Pre => (cfg.beta - cfg.mu_s).abs() <= 1e-12,
        Fusion::None => cfg.mu_s == 0.0,
        Fusion::Intra => false,
    };
    let mut flags = Vec::new();
    flag(&mut flags, "alpha_eq_one_minus_mu_s", alpha_ok);
    flag(&mut flags, "beta_eq_mu_s", beta_ok);
    flags.extend(divergence_flags(trace, constants));
    flag(
        &mut flags,
        "descent_condition",
        1.0 - 2.0 * eta * l - 4.0 * mu_l.powi(2) * eta.powi(2) * l.powi(2) / (1.0 - mu_l).powi(4)
            >= 0.0,
    );
    flag(&mut flags, "f_star_known", constants.f_star.is_some());
    flags
}

/// Seed-mean `(1/RP)ΣΣ‖∇f(x̄)‖²` against the convergence bound.
pub fn check_theorem1(traces: &[Trace], constants: &ProblemConstants) -> Result<BoundCheck> {
    let first = ensemble_shape(traces)?;
    let lhs = traces.iter().map(mean_grad_norm_sq).sum::<f64>() / traces.len() as f64;
    let flags = theorem1_flags(first, constants);
    let bad = failing(&flags);
    if !bad.is_empty() {
        return Ok(BoundCheck::not_applicable(Some(lhs), bad));
    }
    let cfg = first.config();
    let f_star = constants.f_star.expect("flag checked");
    let f0 = traces.iter().map(|t| t.meta.loss_x0).sum::<f64>() / traces.len() as f64;
    let rhs = theorem1_rhs(
        cfg,
        first.rounds(),
        first.clients(),
        f0 - f_star,
        constants,
    );
    Ok(BoundCheck::measured(lhs, rhs, 0.0))
}

/// Right-hand side of the convergence bound.
pub fn theorem1_rhs(
    cfg: &MethodConfig,
    rounds: usize,
    clients: usize,
    gap: f64,
    constants: &ProblemConstants,
) -> f64 {
    let (eta, l, mu) = (cfg.eta, constants.smoothness, cfg.mu_l);
    let (p, r, k) = (cfg.local_steps as f64, rounds as f64, clients as f64);
    let om = 1.0 - mu;
    2.0 * om * gap / (eta * r * p)
        + 9.0 * eta.powi(2) * l.powi(2) * p.powi(2) * constants.g2 / om.powi(2)
        + eta * l * constants.sigma2 / om
            * (1.0 / k + 3.0 * eta * l * p / (2.0 * om) + 2.0 * mu.powi(2) * eta * l / (om.powi(4) * k))
}

/// σ²-part of the convergence bound (the part that shrinks with `K`).
pub fn theorem1_sigma_term(cfg: &MethodConfig, clients: usize, constants: &ProblemConstants) -> f64 {
    let (eta, l, mu) = (cfg.eta, constants.smoothness, cfg.mu_l);
    let k = clients as f64;
    let om = 1.0 - mu;
    eta * l * constants.sigma2 / om * (1.0 / k + 2.0 * mu.powi(2) * eta * l / (om.powi(4) * k))
}

/// Total floats moved: `2d` per participant per round, doubled for
/// methods that average local buffers.
pub fn comm_cost(method: &str, dim: usize, rounds: usize, clients: usize, participants: Option<usize>) -> Result<u64> {
    let cfg = method_from_name(method)?;
    let s = participants.unwrap_or(clients);
    if s == 0 || s > clients {
        return Err(Error::InvalidArgument(format!(
            "participation {s} must lie in [1, {clients}]"
        )));
    }
    Ok(2 * dim as u64 * cfg.comm_multiplier() * rounds as u64 * s as u64)
}

/// Trajectory points for evaluating `σ²` and `G²`: every mean model and
/// local model, thinned by a uniform stride to at most `max_points`.
pub fn evaluation_points(traces: &[Trace], max_points: usize) -> Vec<ParamVec> {
    let mut all = Vec::new();
    for t in traces {
        for r in 0..t.rounds() {
            for p in 0..=t.steps() {
                all.push(t.mean_model(r, p));
                for k in 0..t.clients() {
                    all.push(t.local_model(r, p, k));
                }
            }
        }
        all.push(t.server_model(t.rounds()));
    }
    let stride = all.len().div_ceil(max_points.max(1)).max(1);
    all.into_iter()
        .step_by(stride)
        .map(|x| ParamVec::from_vec(x.to_vec()))
        .collect()
}

/// All checks on an ensemble of traces of one configuration. Per-trace
/// residuals are maxima over the ensemble.
pub fn verify(traces: &[Trace], constants: Option<&ProblemConstants>) -> Result<TheoryReport> {
    let first = ensemble_shape(traces)?;
    let mut lemma1 = None::<ResidualCheck>;
    let mut stitching = None::<StitchingCheck>;
    let mut lemma2 = None::<Lemma2Check>;
    let mut inconsistency = None::<InconsistencyCheck>;
    for t in traces {
        let aux = reconstruct_z(t)?;
        let l1 = check_lemma1(t, &aux);
        let st = check_stitching(t, &aux);
        let l2 = check_lemma2_closed_form(t, &aux);
        let inc = check_inconsistency_bound(t, &aux);
        lemma1 = Some(match lemma1 {
            Some(prev) if worse_residual(&prev.max_residual, &l1.max_residual) => prev,
            _ => l1,
        });
        stitching = Some(match stitching {
            Some(prev) if prev.max_residual >= st.max_residual => prev,
            _ => st,
        });
        lemma2 = Some(match lemma2 {
            Some(prev) if worse_residual(&prev.max_residual, &l2.max_residual) => prev,
            _ => l2,
        });
        inconsistency = Some(match inconsistency {
            Some(prev) if worse_bound(&prev.bound, &inc.bound) => prev,
            _ => inc,
        });
    }

    let cfg = first.config();
    let mut flags: BTreeMap<String, bool> = inconsistency_flags(cfg).into_iter().collect();
    let (divergence, theorem1) = match constants {
        Some(c) => {
            flags.extend(theorem1_flags(first, c));
            (check_divergence_bound(traces, c)?, check_theorem1(traces, c)?)
        }
        None => {
            let missing = vec!["constants_available".to_string()];
            flags.insert("constants_available".into(), false);
            let div = traces.iter().map(mean_divergence).sum::<f64>() / traces.len() as f64;
            let gns = traces.iter().map(mean_grad_norm_sq).sum::<f64>() / traces.len() as f64;
            (
                BoundCheck::not_applicable(Some(div), missing.clone()),
                BoundCheck::not_applicable(Some(gns), missing),
            )
        }
    };

    Ok(TheoryReport {
        method: first.meta.method.clone(),
        traces: traces.len(),
        lemma1: lemma1.expect("nonempty"),
        stitching: stitching.expect("nonempty"),
        lemma2_closed_form: lemma2.expect("nonempty"),
        inconsistency: inconsistency.expect("nonempty"),
        divergence,
        theorem1,
        constants: constants.cloned(),
        precondition_flags: flags,
    })
}

fn worse_residual(prev: &Option<f64>, next: &Option<f64>) -> bool {
    match (prev, next) {
        (Some(a), Some(b)) => a >= b,
        (_, None) => true,
        (None, Some(_)) => false,
    }
}

/// True when `prev` is at least as close to violation as `next`.
fn worse_bound(prev: &BoundCheck, next: &BoundCheck) -> bool {
    if prev.status == Status::Fail {
        return true;
    }
    match (prev.slack, next.slack) {
        (Some(a), Some(b)) => a <= b,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => true,
    }
}

impl TheoryReport {
    /// True when no applicable check failed.
    pub fn all_pass(&self) -> bool {
        [
            self.lemma1.status,
            self.stitching.status,
            self.lemma2_closed_form.status,
            self.inconsistency.bound.status,
            self.divergence.status,
            self.theorem1.status,
        ]
        .iter()
        .all(|s| *s != Status::Fail)
    }
}
