//! Per-client finite-sum gradient oracles and the analysis constants.
//!
//! Each client owns a [`ClientObjective`]: a list of samples and a loss kind.
//! The client loss is the mean of per-sample losses plus `½·l2·‖x‖²`, so the
//! gradient over the full sample set equals the mean of per-sample gradients.
//!
//! Parameter packing:
//! - quadratic, least-squares: `x` has the feature dimension.
//! - logistic (softmax regression with `C` classes over `m` features):
//!   `W` row-major (`C × m`), then the bias (`C`).
//! - mlp2 (one `tanh` hidden layer of width `H`): `W1` row-major (`H × m`),
//!   `b1` (`H`), `W2` row-major (`C × H`), `b2` (`C`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ParamVec;

/// One training example. For quadratic objectives `features` is the linear
/// term `b_i` and `target` the constant `c_i` of `½xᵀAx − b_iᵀx + c_i`; for
/// classification kinds `target` holds the integer label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, target: f64) -> Self {
        Sample { features, target }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveKind {
    /// Shared curvature `A` (row-major, `d × d`, symmetric PSD).
    Quadratic { hessian: Vec<f64> },
    LeastSquares,
    Logistic { classes: usize },
    Mlp2 { hidden: usize, classes: usize },
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Quadratic { .. } => "quadratic",
            ObjectiveKind::LeastSquares => "least_squares",
            ObjectiveKind::Logistic { .. } => "logistic",
            ObjectiveKind::Mlp2 { .. } => "mlp2",
        }
    }

    /// Quadratic and least-squares objectives have a constant Hessian, so
    /// their constants are computed exactly.
    pub fn is_exact(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::Quadratic { .. } | ObjectiveKind::LeastSquares
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientObjective {
    kind: ObjectiveKind,
    samples: Vec<Sample>,
    l2: f64,
    features: usize,
    dim: usize,
}

/// `f(x) = ½xᵀHx − linearᵀx + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub dim: usize,
    pub hessian: Vec<f64>,
    pub linear: Vec<f64>,
    pub constant: f64,
}

impl QuadraticForm {
    fn zero(dim: usize) -> Self {
        QuadraticForm {
            dim,
            hessian: vec![0.0; dim * dim],
            linear: vec![0.0; dim],
            constant: 0.0,
        }
    }

    fn add_scaled(&mut self, a: f64, other: &QuadraticForm) {
        for (h, o) in self.hessian.iter_mut().zip(&other.hessian) {
            *h += a * o;
        }
        for (l, o) in self.linear.iter_mut().zip(&other.linear) {
            *l += a * o;
        }
        self.constant += a * other.constant;
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                self.hessian[i * d..(i + 1) * d]
                    .iter()
                    .zip(v)
                    .map(|(h, x)| h * x)
                    .sum()
            })
            .collect()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let hx = self.matvec(x);
        let quad: f64 = hx.iter().zip(x).map(|(a, b)| a * b).sum();
        let lin: f64 = self.linear.iter().zip(x).map(|(a, b)| a * b).sum();
        0.5 * quad - lin + self.constant
    }
}

impl ClientObjective {
    /// `f(x) = mean_i(½xᵀAx − b_iᵀx + c_i) + ½·l2·‖x‖²`.
    pub fn quadratic(hessian: Vec<f64>, samples: Vec<Sample>, l2: f64) -> Result<Self> {
        let dim = first_feature_len(&samples)?;
        if hessian.len() != dim * dim {
            return Err(Error::InvalidArgument(format!(
                "hessian has {} entries, expected {}",
                hessian.len(),
                dim * dim
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if (hessian[i * dim + j] - hessian[j * dim + i]).abs()
                    > 1e-12 * (1.0 + hessian[i * dim + j].abs())
                {
                    return Err(Error::InvalidArgument("hessian is not symmetric".into()));
                }
            }
        }
        Self::build(ObjectiveKind::Quadratic { hessian }, samples, l2, dim, dim)
    }

    /// `f(x) = mean_i ½(a_iᵀx − y_i)² + ½·l2·‖x‖²`.
    pub fn least_squares(samples: Vec<Sample>, l2: f64) -> Result<Self> {
        let m = first_feature_len(&samples)?;
        Self::build(ObjectiveKind::LeastSquares, samples, l2, m, m)
    }

    /// Softmax cross-entropy over `classes` labels.
    pub fn logistic(samples: Vec<Sample>, classes: usize, l2: f64) -> Result<Self> {
        let m = first_feature_len(&samples)?;
        if classes < 2 {
            return Err(Error::InvalidArgument("logistic needs at least 2 classes".into()));
        }
        check_labels(&samples, classes)?;
        Self::build(
            ObjectiveKind::Logistic { classes },
            samples,
            l2,
            m,
            classes * (m + 1),
        )
    }

    /// Two-layer perceptron with a `tanh` hidden layer and softmax output.
    pub fn mlp2(samples: Vec<Sample>, hidden: usize, classes: usize, l2: f64) -> Result<Self> {
        let m = first_feature_len(&samples)?;
        if classes < 2 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "mlp2 needs at least 2 classes and 1 hidden unit".into(),
            ));
        }
        check_labels(&samples, classes)?;
        let dim = hidden * m + hidden + classes * hidden + classes;
        Self::build(ObjectiveKind::Mlp2 { hidden, classes }, samples, l2, m, dim)
    }

    fn build(
        kind: ObjectiveKind,
        samples: Vec<Sample>,
        l2: f64,
        features: usize,
        dim: usize,
    ) -> Result<Self> {
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::InvalidArgument(format!("l2 must be nonnegative, got {l2}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != features {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has {} features, expected {features}",
                    s.features.len()
                )));
            }
            if !s.target.is_finite() || s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("sample {i}"),
                });
            }
        }
        Ok(ClientObjective {
            kind,
            samples,
            l2,
            features,
            dim,
        })
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    fn check_x(&self, x: &ParamVec) -> Result<()> {
        x.ensure_len(self.dim)
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let len = self.samples.len();
        match batch.iter().find(|&&i| i >= len) {
            Some(&index) => Err(Error::IndexOutOfRange { index, len }),
            None => Ok(()),
        }
    }

    /// Loss of one sample, regularization included.
    pub fn sample_loss(&self, x: &ParamVec, i: usize) -> f64 {
        let s = &self.samples[i];
        let x = x.as_slice();
        let data = match &self.kind {
            ObjectiveKind::Quadratic { hessian } => {
                let d = self.dim;
                let mut quad = 0.0;
                for r in 0..d {
                    let row: f64 = hessian[r * d..(r + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(h, v)| h * v)
                        .sum();
                    quad += row * x[r];
                }
                0.5 * quad - dot(&s.features, x) + s.target
            }
            ObjectiveKind::LeastSquares => {
                let r = dot(&s.features, x) - s.target;
                0.5 * r * r
            }
            ObjectiveKind::Logistic { classes } => {
                let logits = logistic_logits(x, &s.features, *classes);
                cross_entropy(&logits, s.target as usize)
            }
            ObjectiveKind::Mlp2 { hidden, classes } => {
                let (_, logits) = mlp_forward(x, &s.features, *hidden, *classes);
                cross_entropy(&logits, s.target as usize)
            }
        };
        data + 0.5 * self.l2 * x.iter().map(|v| v * v).sum::<f64>()
    }

    /// Adds the gradient of sample `i`'s data term (no regularization) into `out`.
    fn accumulate_sample_grad(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let s = &self.samples[i];
        match &self.kind {
            ObjectiveKind::Quadratic { hessian } => {
                let d = self.dim;
                for r in 0..d {
                    let row: f64 = hessian[r * d..(r + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(h, v)| h * v)
                        .sum();
                    out[r] += row - s.features[r];
                }
            }
            ObjectiveKind::LeastSquares => {
                let r = dot(&s.features, x) - s.target;
                for (o, a) in out.iter_mut().zip(&s.features) {
                    *o += r * a;
                }
            }
            ObjectiveKind::Logistic { classes } => {
                let c = *classes;
                let m = self.features;
                let probs = softmax(&logistic_logits(x, &s.features, c));
                let label = s.target as usize;
                for k in 0..c {
                    let delta = probs[k] - if k == label { 1.0 } else { 0.0 };
                    for (o, a) in out[k * m..(k + 1) * m].iter_mut().zip(&s.features) {
                        *o += delta * a;
                    }
                    out[c * m + k] += delta;
                }
            }
            ObjectiveKind::Mlp2 { hidden, classes } => {
                mlp_backward(x, &s.features, *hidden, *classes, s.target as usize, out);
            }
        }
    }

    fn grad_over(&self, x: &ParamVec, indices: &[usize]) -> ParamVec {
        let mut g = vec![0.0; self.dim];
        for &i in indices {
            self.accumulate_sample_grad(x.as_slice(), i, &mut g);
        }
        let inv = 1.0 / indices.len() as f64;
        for (gi, xi) in g.iter_mut().zip(x.as_slice()) {
            *gi = *gi * inv + self.l2 * xi;
        }
        ParamVec::from_vec(g)
    }

    /// Mean gradient over `batch` (indices may repeat) plus the regularization gradient.
    pub fn stochastic_grad(&self, x: &ParamVec, batch: &[usize]) -> Result<ParamVec> {
        self.check_x(x)?;
        self.check_batch(batch)?;
        let g = self.grad_over(x, batch);
        g.ensure_finite("stochastic gradient")?;
        Ok(g)
    }

    /// Gradient over the full sample set.
    pub fn full_grad(&self, x: &ParamVec) -> Result<ParamVec> {
        self.check_x(x)?;
        let all: Vec<usize> = (0..self.samples.len()).collect();
        let g = self.grad_over(x, &all);
        g.ensure_finite("full gradient")?;
        Ok(g)
    }

    /// Gradient of one sample, regularization included.
    pub fn sample_grad(&self, x: &ParamVec, i: usize) -> Result<ParamVec> {
        self.stochastic_grad(x, &[i])
    }

    pub fn loss(&self, x: &ParamVec) -> Result<f64> {
        self.check_x(x)?;
        let n = self.samples.len() as f64;
        let total: f64 = (0..self.samples.len()).map(|i| self.sample_loss(x, i)).sum();
        let value = total / n;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite {
                context: "loss".into(),
            })
        }
    }

    /// Exact `(1/n)Σ_i‖∇ℓ_i(x) − ∇f(x)‖²`, the variance of a single uniformly
    /// drawn sample gradient.
    pub fn single_sample_variance(&self, x: &ParamVec) -> Result<f64> {
        let full = self.full_grad(x)?;
        let mut total = 0.0;
        for i in 0..self.samples.len() {
            let mut g = vec![0.0; self.dim];
            self.accumulate_sample_grad(x.as_slice(), i, &mut g);
            let reg = self.l2;
            total += g
                .iter()
                .zip(x.as_slice())
                .zip(full.as_slice())
                .map(|((gi, xi), fi)| {
                    let diff = gi + reg * xi - fi;
                    diff * diff
                })
                .sum::<f64>();
        }
        Ok(total / self.samples.len() as f64)
    }

    /// The exact quadratic form of quadratic and least-squares objectives.
    pub fn quadratic_form(&self) -> Option<QuadraticForm> {
        let d = self.dim;
        let n = self.samples.len() as f64;
        let mut form = QuadraticForm::zero(d);
        match &self.kind {
            ObjectiveKind::Quadratic { hessian } => {
                form.hessian.copy_from_slice(hessian);
                for s in &self.samples {
                    for (l, b) in form.linear.iter_mut().zip(&s.features) {
                        *l += b / n;
                    }
                    form.constant += s.target / n;
                }
            }
            ObjectiveKind::LeastSquares => {
                for s in &self.samples {
                    let a = &s.features;
                    for i in 0..d {
                        for j in 0..d {
                            form.hessian[i * d + j] += a[i] * a[j] / n;
                        }
                        form.linear[i] += a[i] * s.target / n;
                    }
                    form.constant += 0.5 * s.target * s.target / n;
                }
            }
            _ => return None,
        }
        for i in 0..d {
            form.hessian[i * d + i] += self.l2;
        }
        Some(form)
    }
}

fn first_feature_len(samples: &[Sample]) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    if first.features.is_empty() {
        return Err(Error::InvalidArgument("samples need at least one feature".into()));
    }
    Ok(first.features.len())
}

fn check_labels(samples: &[Sample], classes: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let t = s.target;
        if t < 0.0 || t.fract() != 0.0 || t as usize >= classes {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has label {t}, expected an integer in [0, {classes})"
            )));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logistic_logits(x: &[f64], features: &[f64], classes: usize) -> Vec<f64> {
    let m = features.len();
    (0..classes)
        .map(|k| dot(&x[k * m..(k + 1) * m], features) + x[classes * m + k])
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

struct MlpLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

fn mlp_layout(m: usize, hidden: usize, classes: usize) -> MlpLayout {
    let w1 = 0;
    let b1 = w1 + hidden * m;
    let w2 = b1 + hidden;
    let b2 = w2 + classes * hidden;
    MlpLayout { w1, b1, w2, b2 }
}

fn mlp_forward(x: &[f64], a: &[f64], hidden: usize, classes: usize) -> (Vec<f64>, Vec<f64>) {
    let m = a.len();
    let lay = mlp_layout(m, hidden, classes);
    let h: Vec<f64> = (0..hidden)
        .map(|j| (dot(&x[lay.w1 + j * m..lay.w1 + (j + 1) * m], a) + x[lay.b1 + j]).tanh())
        .collect();
    let logits = (0..classes)
        .map(|k| dot(&x[lay.w2 + k * hidden..lay.w2 + (k + 1) * hidden], &h) + x[lay.b2 + k])
        .collect();
    (h, logits)
}

fn mlp_backward(
    x: &[f64],
    a: &[f64],
    hidden: usize,
    classes: usize,
    label: usize,
    out: &mut [f64],
) {
    let m = a.len();
    let lay = mlp_layout(m, hidden, classes);
    let (h, logits) = mlp_forward(x, a, hidden, classes);
    let probs = softmax(&logits);
    let mut dh = vec![0.0; hidden];
    for k in 0..classes {
        let delta = probs[k] - if k == label { 1.0 } else { 0.0 };
        let row = lay.w2 + k * hidden;
        for j in 0..hidden {
            out[row + j] += delta * h[j];
            dh[j] += x[row + j] * delta;
        }
        out[lay.b2 + k] += delta;
    }
    for j in 0..hidden {
        let dz = dh[j] * (1.0 - h[j] * h[j]);
        let row = lay.w1 + j * m;
        for (o, ai) in out[row..row + m].iter_mut().zip(a) {
            *o += dz * ai;
        }
        out[lay.b1 + j] += dz;
    }
}

/// The global objective `f = (1/K)Σ_k f^{(k)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    clients: Vec<ClientObjective>,
}

impl Problem {
    pub fn new(clients: Vec<ClientObjective>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::InvalidArgument("problem has no clients".into()))?;
        for (k, c) in clients.iter().enumerate() {
            if c.dim() != first.dim()
                || std::mem::discriminant(c.kind()) != std::mem::discriminant(first.kind())
            {
                return Err(Error::InvalidArgument(format!(
                    "client {k} differs in kind or dimension from client 0"
                )));
            }
        }
        Ok(Problem { clients })
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn kind(&self) -> &ObjectiveKind {
        self.clients[0].kind()
    }

    pub fn loss(&self, x: &ParamVec) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.clients {
            total += c.loss(x)?;
        }
        Ok(total / self.clients.len() as f64)
    }

    pub fn grad(&self, x: &ParamVec) -> Result<ParamVec> {
        let mut acc = ParamVec::zeros(self.dim());
        for c in &self.clients {
            acc.add_assign(&c.full_grad(x)?);
        }
        acc.scale(1.0 / self.clients.len() as f64);
        Ok(acc)
    }

    /// `(1/K)Σ_k‖∇f^{(k)}(x) − ∇f(x)‖²`.
    pub fn heterogeneity(&self, x: &ParamVec) -> Result<f64> {
        let grads = self
            .clients
            .iter()
            .map(|c| c.full_grad(x))
            .collect::<Result<Vec<_>>>()?;
        let mean = ParamVec::mean(&grads);
        Ok(grads.iter().map(|g| g.dist_sq(&mean)).sum::<f64>() / grads.len() as f64)
    }

    /// Averaged quadratic form, when every client has one.
    pub fn quadratic_form(&self) -> Option<QuadraticForm> {
        let mut total = QuadraticForm::zero(self.dim());
        let w = 1.0 / self.clients.len() as f64;
        for c in &self.clients {
            total.add_scaled(w, &c.quadratic_form()?);
        }
        Some(total)
    }
}

/// Smoothness, variance and heterogeneity constants of a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    #[serde(rename = "L")]
    pub smoothness: f64,
    pub sigma2: f64,
    #[serde(rename = "G2")]
    pub g2: f64,
    pub f_star: Option<f64>,
    /// True when `L`, `σ²` or `G²` come from sampling rather than closed forms.
    pub estimated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsOptions {
    /// Batch size of the stochastic oracle; `None` means full-batch (σ² = 0).
    pub batch_size: Option<usize>,
    pub power_tol: f64,
    pub power_max_iter: usize,
    /// Points at which `L` is estimated for non-quadratic kinds.
    pub max_curvature_points: usize,
}

impl Default for ConstantsOptions {
    fn default() -> Self {
        ConstantsOptions {
            batch_size: Some(32),
            power_tol: 1e-10,
            power_max_iter: 200_000,
            max_curvature_points: 16,
        }
    }
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
///
/// Converged when the Rayleigh quotient changes by at most `tol` (relative)
/// and the eigen-residual is below `sqrt(tol)` relative.
pub fn power_iteration(
    dim: usize,
    tol: f64,
    max_iter: usize,
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<f64> {
    // Fixed, non-degenerate start vector.
    let mut v: Vec<f64> = (0..dim)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    normalize(&mut v);
    let mut lambda = f64::NAN;
    for _ in 0..max_iter {
        let w = apply(&v);
        let rq = dot(&v, &w);
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - rq * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let settled = (rq - lambda).abs() <= tol * rq.abs();
        lambda = rq;
        if settled && residual <= tol.sqrt() * rq.abs() {
            return Ok(lambda);
        }
        v = w.into_iter().map(|wi| wi / norm).collect();
    }
    Err(Error::PowerIteration {
        iterations: max_iter,
    })
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    for x in v {
        *x /= n;
    }
}

/// Analysis constants of `problem` evaluated along `points`.
///
/// For quadratic and least-squares problems `L` is the largest Hessian
/// eigenvalue over the global objective and every client, and `f_*` solves the
/// normal equations. `σ²` is the worst single-sample variance over clients
/// and points divided by the batch size; `G²` is the worst heterogeneity over
/// the points. Other kinds estimate `L` from finite-difference
/// Hessian-vector products and report `estimated = true`.
pub fn constants(
    problem: &Problem,
    points: &[ParamVec],
    opts: &ConstantsOptions,
) -> Result<ProblemConstants> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no evaluation points".into()));
    }
    for p in points {
        p.ensure_len(problem.dim())?;
    }
    let exact = problem.kind().is_exact();

    let smoothness = if exact {
        let mut l: f64 = 0.0;
        let mut forms: Vec<QuadraticForm> = problem
            .clients()
            .iter()
            .map(|c| c.quadratic_form().expect("exact kind"))
            .collect();
        forms.push(problem.quadratic_form().expect("exact kind"));
        for form in &forms {
            let top = power_iteration(form.dim, opts.power_tol, opts.power_max_iter, |v| {
                form.matvec(v)
            })?;
            l = l.max(top);
        }
        l
    } else {
        estimate_smoothness(problem, points, opts.max_curvature_points)?
    };

    let sigma2 = match opts.batch_size {
        None => 0.0,
        Some(b) => {
            let mut worst: f64 = 0.0;
            let constant_variance = matches!(problem.kind(), ObjectiveKind::Quadratic { .. });
            let eval: &[ParamVec] = if constant_variance { &points[..1] } else { points };
            for x in eval {
                for c in problem.clients() {
                    worst = worst.max(c.single_sample_variance(x)?);
                }
            }
            worst / b as f64
        }
    };

    let mut g2: f64 = 0.0;
    for x in points {
        g2 = g2.max(problem.heterogeneity(x)?);
    }

    let f_star = if exact {
        problem.quadratic_form().and_then(|form| minimum_value(&form))
    } else {
        None
    };

    Ok(ProblemConstants {
        smoothness,
        sigma2,
        g2,
        f_star,
        estimated: !exact,
    })
}

/// Minimum of a quadratic form with positive-definite Hessian.
fn minimum_value(form: &QuadraticForm) -> Option<f64> {
    let d = form.dim;
    let h = nalgebra::DMatrix::from_row_slice(d, d, &form.hessian);
    let rhs = nalgebra::DVector::from_column_slice(&form.linear);
    let chol = h.cholesky()?;
    let x = chol.solve(&rhs);
    let value = form.value(x.as_slice());
    value.is_finite().then_some(value)
}

fn estimate_smoothness(problem: &Problem, points: &[ParamVec], max_points: usize) -> Result<f64> {
    let stride = points.len().div_ceil(max_points.max(1));
    let mut worst: f64 = 0.0;
    for x in points.iter().step_by(stride.max(1)) {
        for c in problem.clients() {
            worst = worst.max(hvp_top_eigen(x, |y| c.full_grad(y))?);
        }
        worst = worst.max(hvp_top_eigen(x, |y| problem.grad(y))?);
    }
    Ok(worst)
}

/// Top curvature at `x` by power iteration on central-difference
/// Hessian-vector products. Fixed iteration count: this is an estimate.
fn hvp_top_eigen(x: &ParamVec, grad: impl Fn(&ParamVec) -> Result<ParamVec>) -> Result<f64> {
    const STEP: f64 = 1e-5;
    const ITERS: usize = 60;
    let d = x.len();
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    normalize(&mut v);
    let mut lambda: f64 = 0.0;
    for _ in 0..ITERS {
        let mut plus = x.clone();
        let mut minus = x.clone();
        let dir = ParamVec::from_vec(v.clone());
        plus.axpy(STEP, &dir);
        minus.axpy(-STEP, &dir);
        let hv: Vec<f64> = grad(&plus)?
            .sub(&grad(&minus)?)
            .into_vec()
            .into_iter()
            .map(|g| g / (2.0 * STEP))
            .collect();
        let norm = dot(&hv, &hv).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        lambda = lambda.max(norm);
        v = hv.into_iter().map(|h| h / norm).collect();
    }
    Ok(lambda)
}
