//! Multinomial logistic-regression linear probe.
//!
//! Trained full-batch with L-BFGS and an Armijo backtracking line search on
//! mean softmax cross-entropy plus `(λ/2)‖W‖²_F` (the bias is not penalized).
//! Training starts from zero parameters and is fully deterministic.

use std::collections::VecDeque;
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model_io::{self, PayloadReader};

/// Regularization strengths tried when the validation sweep is enabled.
pub const LAMBDA_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

const LBFGS_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpTrainConfig {
    pub l2_strength: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub seed: u64,
    pub l2_normalize_inputs: bool,
    /// Pick `l2_strength` from [`LAMBDA_GRID`] by held-out accuracy.
    pub lambda_sweep: bool,
    pub validation_fraction: f64,
}

impl Default for LpTrainConfig {
    fn default() -> Self {
        Self {
            l2_strength: 1e-3,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            seed: 0,
            l2_normalize_inputs: false,
            lambda_sweep: false,
            validation_fraction: 0.1,
        }
    }
}

impl LpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return Err(Error::InvalidConfig(
                "l2_strength must be a finite value >= 0".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if self.gradient_tolerance.is_nan() || self.gradient_tolerance <= 0.0 {
            return Err(Error::InvalidConfig(
                "gradient_tolerance must be > 0".into(),
            ));
        }
        if self.lambda_sweep && !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0)
        {
            return Err(Error::InvalidConfig(
                "validation_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the gradient at the returned parameters.
    pub gradient_norm: f64,
    pub final_loss: f64,
    /// The regularization strength actually used.
    pub l2_strength: f64,
    /// Objective value after every accepted step, starting with the initial point.
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeModel {
    /// Row-major `K × D`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    class_count: usize,
    dim: usize,
    config: LpTrainConfig,
    report: Option<TrainReport>,
}

/// Gradient of the training objective with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LpGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LpGradient {
    pub fn max_norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the first maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn l2_normalized(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter().map(|v| v / norm).collect()
    } else {
        x.to_vec()
    }
}

/// Training data flattened to `N × D` with dense labels.
struct Design {
    xs: Vec<f64>,
    ys: Vec<usize>,
    n: usize,
    dim: usize,
    classes: usize,
}

impl Design {
    fn new(set: &EmbeddingSet, classes: usize, normalize: bool) -> Result<Self> {
        let dim = set.dim();
        let mut xs = Vec::with_capacity(set.len() * dim);
        let mut ys = Vec::with_capacity(set.len());
        for (i, r) in set.records().iter().enumerate() {
            if r.label < 0 || r.label as usize >= classes {
                return Err(Error::InvalidLabel {
                    record: i,
                    label: r.label,
                });
            }
            let v = r.to_f64();
            if normalize {
                xs.extend(l2_normalized(&v));
            } else {
                xs.extend(v);
            }
            ys.push(r.label as usize);
        }
        Ok(Self {
            xs,
            ys,
            n: set.len(),
            dim,
            classes,
        })
    }

    fn subset(&self, rows: &[usize]) -> Self {
        let mut xs = Vec::with_capacity(rows.len() * self.dim);
        let mut ys = Vec::with_capacity(rows.len());
        for &r in rows {
            xs.extend_from_slice(&self.xs[r * self.dim..(r + 1) * self.dim]);
            ys.push(self.ys[r]);
        }
        Self {
            xs,
            ys,
            n: rows.len(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    /// Objective and gradient at flat parameters `[W row-major, b]`.
    fn objective(&self, theta: &[f64], lambda: f64, grad: &mut [f64]) -> f64 {
        let (k, d) = (self.classes, self.dim);
        let (w, b) = theta.split_at(k * d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for i in 0..self.n {
            let x = self.row(i);
            for c in 0..k {
                z[c] = b[c] + dot(&w[c * d..(c + 1) * d], x);
            }
            let lse = log_sum_exp(&z);
            loss += lse - z[self.ys[i]];
            for c in 0..k {
                let mut r = (z[c] - lse).exp();
                if c == self.ys[i] {
                    r -= 1.0;
                }
                let gw = &mut grad[c * d..(c + 1) * d];
                for (g, xv) in gw.iter_mut().zip(x) {
                    *g += r * xv;
                }
                grad[k * d + c] += r;
            }
        }
        let inv_n = 1.0 / self.n as f64;
        grad.iter_mut().for_each(|g| *g *= inv_n);
        loss *= inv_n;
        let mut penalty = 0.0;
        for (g, wv) in grad[..k * d].iter_mut().zip(w) {
            *g += lambda * wv;
            penalty += wv * wv;
        }
        loss + 0.5 * lambda * penalty
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// L-BFGS with Armijo backtracking. Falls back to steepest descent whenever
/// the quasi-Newton direction is not a descent direction or its line search
/// fails.
fn minimize(design: &Design, lambda: f64, config: &LpTrainConfig) -> (Vec<f64>, TrainReport) {
    let n_params = design.classes * design.dim + design.classes;
    let mut theta = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut loss = design.objective(&theta, lambda, &mut grad);
    let mut trace = vec![loss];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trial = vec![0.0; n_params];
    let mut trial_grad = vec![0.0; n_params];
    let mut iterations = 0;
    let mut converged = max_abs(&grad) < config.gradient_tolerance;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let mut accepted = false;
        for attempt in 0..2 {
            let steepest = attempt == 1 || history.is_empty();
            let dir = if steepest {
                grad.iter().map(|g| -g).collect::<Vec<_>>()
            } else {
                two_loop(&grad, &history)
            };
            let slope = dot(&grad, &dir);
            if slope >= 0.0 {
                history.clear();
                continue;
            }
            let mut step = if steepest && history.is_empty() {
                1.0 / max_abs(&grad).max(1.0)
            } else {
                1.0
            };
            for _ in 0..MAX_BACKTRACKS {
                for ((t, x), d) in trial.iter_mut().zip(&theta).zip(&dir) {
                    *t = x + step * d;
                }
                let f = design.objective(&trial, lambda, &mut trial_grad);
                if f.is_finite() && f <= loss + ARMIJO_C1 * step * slope {
                    let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                        if history.len() == LBFGS_MEMORY {
                            history.pop_front();
                        }
                        history.push_back((s, y, 1.0 / sy));
                    }
                    std::mem::swap(&mut theta, &mut trial);
                    std::mem::swap(&mut grad, &mut trial_grad);
                    loss = f;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if accepted {
                break;
            }
            history.clear();
            if steepest {
                break;
            }
        }
        if !accepted {
            debug!("line search stalled at iteration {iterations}");
            break;
        }
        trace.push(loss);
        converged = max_abs(&grad) < config.gradient_tolerance;
    }

    let report = TrainReport {
        converged,
        iterations,
        gradient_norm: max_abs(&grad),
        final_loss: loss,
        l2_strength: lambda,
        loss_trace: trace,
    };
    (theta, report)
}

fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn accuracy_on(design: &Design, theta: &[f64]) -> f64 {
    let (k, d) = (design.classes, design.dim);
    let (w, b) = theta.split_at(k * d);
    let correct = (0..design.n)
        .filter(|&i| {
            let x = design.row(i);
            let z: Vec<f64> = (0..k)
                .map(|c| b[c] + dot(&w[c * d..(c + 1) * d], x))
                .collect();
            argmax(&z) == design.ys[i]
        })
        .count();
    correct as f64 / design.n.max(1) as f64
}

fn sweep_lambda(design: &Design, config: &LpTrainConfig) -> f64 {
    let mut rows: Vec<usize> = (0..design.n).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_val = ((design.n as f64) * config.validation_fraction).ceil() as usize;
    let (val_rows, train_rows) = rows.split_at(n_val.min(design.n));
    let train = design.subset(train_rows);
    let val = design.subset(val_rows);
    let mut present = vec![false; design.classes];
    train.ys.iter().for_each(|&y| present[y] = true);
    if val.n == 0 || present.iter().any(|p| !p) {
        warn!(
            "validation split leaves a class without training data; using l2_strength = {}",
            config.l2_strength
        );
        return config.l2_strength;
    }
    let mut best = (f64::NEG_INFINITY, config.l2_strength);
    for &lambda in &LAMBDA_GRID {
        let (theta, _) = minimize(&train, lambda, config);
        let acc = accuracy_on(&val, &theta);
        debug!("lambda {lambda}: validation accuracy {acc}");
        if acc > best.0 {
            best = (acc, lambda);
        }
    }
    best.1
}

/// Trains the probe on dense-labelled data. Non-convergence is not an error:
/// the model is returned with `report().converged == false` and a warning.
pub fn train_lp(train: &EmbeddingSet, config: &LpTrainConfig) -> Result<LinearProbeModel> {
    config.validate()?;
    let classes = train.class_count();
    if classes < 2 {
        return Err(Error::SingleClass);
    }
    if let Some((class, _)) = train
        .class_sizes()
        .iter()
        .enumerate()
        .find(|(_, &n)| n == 0)
    {
        return Err(Error::TooFewSamples {
            class: class as i32,
            count: 0,
            required: 1,
        });
    }
    let design = Design::new(train, classes, config.l2_normalize_inputs)?;
    let lambda = if config.lambda_sweep {
        sweep_lambda(&design, config)
    } else {
        config.l2_strength
    };
    let (theta, report) = minimize(&design, lambda, config);
    if !report.converged {
        warn!(
            "linear probe did not converge in {} iterations (gradient max-norm {:.3e})",
            report.iterations, report.gradient_norm
        );
    }
    let (w, b) = theta.split_at(classes * design.dim);
    Ok(LinearProbeModel {
        weights: w.to_vec(),
        bias: b.to_vec(),
        class_count: classes,
        dim: design.dim,
        config: config.clone(),
        report: Some(report),
    })
}

#[derive(Serialize, Deserialize)]
struct LpHeader {
    kind: String,
    class_count: usize,
    dim: usize,
    config: LpTrainConfig,
    report: Option<TrainReport>,
}

const LP_KIND: &str = "linear_probe";

impl LinearProbeModel {
    /// Builds a model from explicit parameters; `weights` has one row per class.
    pub fn from_parts(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let class_count = weights.len();
        if class_count < 2 {
            return Err(Error::SingleClass);
        }
        if bias.len() != class_count {
            return Err(Error::DimensionMismatch {
                expected: class_count,
                found: bias.len(),
            });
        }
        let dim = weights[0].len();
        if dim == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        let mut flat = Vec::with_capacity(class_count * dim);
        for row in weights {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            flat.extend(row);
        }
        if flat.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite linear probe parameter".into()));
        }
        Ok(Self {
            weights: flat,
            bias,
            class_count,
            dim,
            config: LpTrainConfig::default(),
            report: None,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn config(&self) -> &LpTrainConfig {
        &self.config
    }

    pub fn report(&self) -> Option<&TrainReport> {
        self.report.as_ref()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// `W·x + b`, after optional input normalization.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let normalized;
        let x = if self.config.l2_normalize_inputs {
            normalized = l2_normalized(x);
            &normalized[..]
        } else {
            x
        };
        Ok((0..self.class_count)
            .map(|c| dot(self.weights_row(c), x) + self.bias[c])
            .collect())
    }

    /// Maximum logit.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .logits(x)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Mean cross-entropy plus `(λ/2)‖W‖²` over `batch` at the current
    /// parameters, and its analytic gradient.
    pub fn loss_and_gradient(
        &self,
        batch: &EmbeddingSet,
        lambda: f64,
    ) -> Result<(f64, LpGradient)> {
        if batch.is_empty() {
            return Err(Error::EmptySet);
        }
        if batch.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: batch.dim(),
            });
        }
        let design = Design::new(batch, self.class_count, self.config.l2_normalize_inputs)?;
        let theta: Vec<f64> = self.weights.iter().chain(&self.bias).copied().collect();
        let mut grad = vec![0.0; theta.len()];
        let loss = design.objective(&theta, lambda, &mut grad);
        let bias = grad.split_off(self.class_count * self.dim);
        Ok((
            loss,
            LpGradient {
                weights: grad,
                bias,
            },
        ))
    }

    pub fn training_accuracy(&self, set: &EmbeddingSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut correct = 0;
        for r in set.records() {
            if self.predict(&r.to_f64())? as i32 == r.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / set.len() as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = LpHeader {
            kind: LP_KIND.into(),
            class_count: self.class_count,
            dim: self.dim,
            config: self.config.clone(),
            report: self.report.clone(),
        };
        let payload: Vec<f64> = self.weights.iter().chain(&self.bias).copied().collect();
        model_io::encode(&header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (LpHeader, _) = model_io::decode(bytes)?;
        if header.kind != LP_KIND {
            return Err(Error::Malformed(format!(
                "expected a {LP_KIND} model, found {}",
                header.kind
            )));
        }
        let mut reader = PayloadReader::new(&payload);
        let weights = reader.take(header.class_count * header.dim)?.to_vec();
        let bias = reader.take(header.class_count)?.to_vec();
        reader.finish()?;
        Ok(Self {
            weights,
            bias,
            class_count: header.class_count,
            dim: header.dim,
            config: header.config,
            report: header.report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
