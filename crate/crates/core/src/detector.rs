//! Calibrated ID/OOD detector in the two-dimensional LP × NM score space.
//!
//! For every class `k` an embedding `x` is mapped to the point
//! `(logit_k(x), similarity_k(x))`. Each class gets a bivariate Gaussian
//! fitted on its own training points, and a single broad zero-mean Gaussian
//! stands in for the unknown OOD score distribution. A class accepts `x` when
//! the log-likelihood ratio of the two densities exceeds a threshold `μ_k(ε)`
//! chosen so that a fraction `ε` of the class's own Gaussian mass is rejected.
//! Thresholds come from seeded Monte-Carlo quantiles of the ratio and are
//! interpolated linearly between grid points.
//!
//! The overall verdict is ID as soon as any class accepts. The continuous
//! score is `max_k F_k(log r_k(x))` with `F_k` the fraction of class-`k`
//! calibration samples strictly below the argument, so `score >= ε` agrees
//! with the verdict at every grid value of `ε`.

use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linear_probe::LinearProbeModel;
use crate::model_io::{self, PayloadReader};
use crate::nearest_mean::NearestMeanModel;

/// Smallest Monte-Carlo sample count accepted by [`calibrate`].
pub const MIN_MC_SAMPLES: usize = 1000;
/// Eigenvalue below which a fitted covariance is regularized.
pub const MIN_EIGENVALUE: f64 = 1e-9;
/// Floor for the OOD prior standard deviations.
pub const MIN_OOD_SIGMA: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub lp: f64,
    pub nm: f64,
}

impl ScorePoint {
    pub fn new(lp: f64, nm: f64) -> Self {
        Self { lp, nm }
    }

    fn as_array(self) -> [f64; 2] {
        [self.lp, self.nm]
    }
}

/// Symmetric 2×2 matrix stored as `[xx, xy, yy]`.
pub type Sym2 = [f64; 3];

fn det(c: &Sym2) -> f64 {
    c[0] * c[2] - c[1] * c[1]
}

/// Eigenvalues in ascending order.
pub fn eigenvalues(c: &Sym2) -> [f64; 2] {
    let half_trace = 0.5 * (c[0] + c[2]);
    let r = (0.25 * (c[0] - c[2]).powi(2) + c[1] * c[1]).sqrt();
    [half_trace - r, half_trace + r]
}

/// Gaussian log-density with explicit 2×2 inverse.
fn gaussian_log_pdf(mean: [f64; 2], cov: &Sym2, p: [f64; 2]) -> f64 {
    let d = det(cov);
    let dx = p[0] - mean[0];
    let dy = p[1] - mean[1];
    let maha = (cov[2] * dx * dx - 2.0 * cov[1] * dx * dy + cov[0] * dy * dy) / d;
    -LN_2PI - 0.5 * d.ln() - 0.5 * maha
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub class_index: usize,
    pub mean: [f64; 2],
    pub cov: Sym2,
    /// Set when the sample covariance was (near-)singular and had a ridge added.
    pub degenerate: bool,
}

impl ClassGaussian {
    pub fn new(class_index: usize, mean: [f64; 2], cov: Sym2) -> Result<Self> {
        if eigenvalues(&cov)[0] <= 0.0 || mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "covariance of class {class_index} is not positive definite"
            )));
        }
        Ok(Self {
            class_index,
            mean,
            cov,
            degenerate: false,
        })
    }

    pub fn log_pdf(&self, p: ScorePoint) -> f64 {
        gaussian_log_pdf(self.mean, &self.cov, p.as_array())
    }

    /// Lower Cholesky factor `[l11, l21, l22]`.
    fn cholesky(&self) -> [f64; 3] {
        let l11 = self.cov[0].sqrt();
        let l21 = self.cov[1] / l11;
        let l22 = (self.cov[2] - l21 * l21).max(0.0).sqrt();
        [l11, l21, l22]
    }

    /// Draws `n` points from this Gaussian.
    pub fn sample(&self, n: usize, rng: &mut impl rand::Rng) -> Vec<ScorePoint> {
        let [l11, l21, l22] = self.cholesky();
        (0..n)
            .map(|_| {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                ScorePoint::new(self.mean[0] + l11 * z1, self.mean[1] + l21 * z1 + l22 * z2)
            })
            .collect()
    }
}

/// Maximum-likelihood mean and covariance (normalized by `N`).
pub fn sample_moments(points: &[ScorePoint]) -> ([f64; 2], Sym2) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.lp).sum::<f64>() / n;
    let my = points.iter().map(|p| p.nm).sum::<f64>() / n;
    let mut c = [0.0; 3];
    for p in points {
        let dx = p.lp - mx;
        let dy = p.nm - my;
        c[0] += dx * dx;
        c[1] += dx * dy;
        c[2] += dy * dy;
    }
    c.iter_mut().for_each(|v| *v /= n);
    ([mx, my], c)
}

/// Fits one class Gaussian, adding `max(1e-9, 1e-6·trace/2)·I` when the
/// smallest eigenvalue is below `1e-9`.
pub fn fit_class_gaussian(class_index: usize, points: &[ScorePoint]) -> Result<ClassGaussian> {
    if points.len() < 2 {
        return Err(Error::TooFewSamples {
            class: class_index as i32,
            count: points.len(),
            required: 2,
        });
    }
    let (mean, mut cov) = sample_moments(points);
    let mut degenerate = false;
    if eigenvalues(&cov)[0] < MIN_EIGENVALUE {
        let ridge = MIN_EIGENVALUE.max(1e-6 * 0.5 * (cov[0] + cov[2]));
        cov[0] += ridge;
        cov[2] += ridge;
        degenerate = true;
        warn!("class {class_index}: degenerate score covariance, added ridge {ridge:.3e}");
    }
    let mut g = ClassGaussian::new(class_index, mean, cov)?;
    g.degenerate = degenerate;
    Ok(g)
}

/// Zero-mean diagonal Gaussian standing in for OOD scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodGaussian {
    variances: [f64; 2],
}

impl OodGaussian {
    pub fn new(variances: [f64; 2]) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Numeric("OOD variances must be positive".into()));
        }
        Ok(Self { variances })
    }

    pub fn from_sigmas(sigmas: [f64; 2]) -> Result<Self> {
        Self::new([sigmas[0] * sigmas[0], sigmas[1] * sigmas[1]])
    }

    pub fn variances(&self) -> [f64; 2] {
        self.variances
    }

    pub fn sigmas(&self) -> [f64; 2] {
        [self.variances[0].sqrt(), self.variances[1].sqrt()]
    }

    pub fn log_pdf(&self, p: ScorePoint) -> f64 {
        gaussian_log_pdf(
            [0.0, 0.0],
            &[self.variances[0], 0.0, self.variances[1]],
            p.as_array(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodPriorConfig {
    pub range_quantile: f64,
    pub range_multiplier: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for OodPriorConfig {
    fn default() -> Self {
        Self {
            range_quantile: 0.90,
            range_multiplier: 3.0,
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

impl OodPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_quantile > 0.0 && self.range_quantile < 1.0) {
            return Err(Error::InvalidConfig(
                "range_quantile must be in (0, 1)".into(),
            ));
        }
        if !(self.range_multiplier >= 1.0 && self.range_multiplier.is_finite()) {
            return Err(Error::InvalidConfig("range_multiplier must be >= 1".into()));
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::InvalidConfig(format!(
                "mc_samples must be at least {MIN_MC_SAMPLES}, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }
}

/// Smallest count `c ≥ 1` with `c / n ≥ q`, evaluated in the same floating
/// point arithmetic that [`ClassStrategy::cdf`] uses.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut c = ((q * nf).ceil() as usize).clamp(1, n);
    while c > 1 && (c - 1) as f64 / nf >= q {
        c -= 1;
    }
    while c < n && (c as f64) / nf < q {
        c += 1;
    }
    c
}

/// Nearest-rank quantile of an ascending slice.
pub fn quantile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    sorted[nearest_rank(q, sorted.len()) - 1]
}

pub fn build_ood_model(points: &[ScorePoint], config: &OodPriorConfig) -> Result<OodGaussian> {
    if points.is_empty() {
        return Err(Error::EmptySet);
    }
    let sigma = |axis: fn(&ScorePoint) -> f64| {
        let mut v: Vec<f64> = points.iter().map(|p| axis(p).abs()).collect();
        v.sort_by(f64::total_cmp);
        (config.range_multiplier * quantile_nearest_rank(&v, config.range_quantile))
            .max(MIN_OOD_SIGMA)
    };
    OodGaussian::from_sigmas([sigma(|p| p.lp), sigma(|p| p.nm)])
}

pub fn log_likelihood_ratio(id: &ClassGaussian, ood: &OodGaussian, p: ScorePoint) -> f64 {
    id.log_pdf(p) - ood.log_pdf(p)
}

/// 50 log-spaced values from 1e-3 to 0.5, then 0.6, 0.7, 0.8, 0.9, 0.99.
pub fn default_epsilon_grid() -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), 0.5f64.ln());
    let mut grid: Vec<f64> = (0..50)
        .map(|i| match i {
            0 => 1e-3,
            49 => 0.5,
            _ => (lo + (hi - lo) * i as f64 / 49.0).exp(),
        })
        .collect();
    grid.extend([0.6, 0.7, 0.8, 0.9, 0.99]);
    grid
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("epsilon grid is empty".into()));
    }
    if grid.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::InvalidConfig(
            "epsilon grid values must lie in (0, 1)".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "epsilon grid must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Per-class threshold table `μ_k(ε)` and the sorted Monte-Carlo sample it
/// was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStrategy {
    pub class_index: usize,
    pub epsilon_grid: Vec<f64>,
    pub mu_values: Vec<f64>,
    pub cdf_samples: Vec<f64>,
}

impl ClassStrategy {
    fn from_samples(class_index: usize, mut samples: Vec<f64>, grid: &[f64]) -> Self {
        samples.sort_by(f64::total_cmp);
        let mu_values = grid
            .iter()
            .map(|&e| quantile_nearest_rank(&samples, e))
            .collect();
        Self {
            class_index,
            epsilon_grid: grid.to_vec(),
            mu_values,
            cdf_samples: samples,
        }
    }

    /// `μ(ε)`, exact at grid points, linear in between, clamped outside.
    pub fn threshold(&self, epsilon: f64) -> f64 {
        let grid = &self.epsilon_grid;
        let j = grid.partition_point(|&g| g < epsilon);
        if j == 0 {
            return self.mu_values[0];
        }
        if j == grid.len() {
            return self.mu_values[j - 1];
        }
        if grid[j] == epsilon {
            return self.mu_values[j];
        }
        let t = (epsilon - grid[j - 1]) / (grid[j] - grid[j - 1]);
        self.mu_values[j - 1] + t * (self.mu_values[j] - self.mu_values[j - 1])
    }

    /// Fraction of calibration samples strictly below `llr`.
    pub fn cdf(&self, llr: f64) -> f64 {
        let below = self.cdf_samples.partition_point(|&s| s < llr);
        below as f64 / self.cdf_samples.len() as f64
    }

    pub fn accepts(&self, llr: f64, epsilon: f64) -> bool {
        llr > self.threshold(epsilon)
    }
}

/// Monte-Carlo calibration of every class. Class `k` draws from stream `k`
/// of a ChaCha8 generator seeded with `config.seed`.
pub fn calibrate(
    class_gaussians: &[ClassGaussian],
    ood: &OodGaussian,
    epsilon_grid: &[f64],
    config: &OodPriorConfig,
) -> Result<Vec<ClassStrategy>> {
    config.validate()?;
    validate_grid(epsilon_grid)?;
    Ok(class_gaussians
        .iter()
        .map(|g| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(g.class_index as u64);
            let samples = g
                .sample(config.mc_samples, &mut rng)
                .into_iter()
                .map(|p| log_likelihood_ratio(g, ood, p))
                .collect();
            ClassStrategy::from_samples(g.class_index, samples, epsilon_grid)
        })
        .collect())
}

pub fn score_point(
    lp: &LinearProbeModel,
    nm: &NearestMeanModel,
    x: &[f64],
    k: usize,
) -> Result<ScorePoint> {
    let count = lp.class_count();
    if k >= count {
        return Err(Error::ClassOutOfRange { index: k, count });
    }
    Ok(score_points(lp, nm, x)?[k])
}

/// Class-conditional score points for every class.
pub fn score_points(
    lp: &LinearProbeModel,
    nm: &NearestMeanModel,
    x: &[f64],
) -> Result<Vec<ScorePoint>> {
    check_pair(lp, nm)?;
    let logits = lp.logits(x)?;
    let sims = nm.similarities(x)?;
    Ok(logits
        .into_iter()
        .zip(sims)
        .map(|(l, s)| ScorePoint::new(l, s))
        .collect())
}

fn check_pair(lp: &LinearProbeModel, nm: &NearestMeanModel) -> Result<()> {
    if lp.dim() != nm.dim() {
        return Err(Error::ModelMismatch(format!(
            "linear probe has dimension {}, nearest mean has {}",
            lp.dim(),
            nm.dim()
        )));
    }
    if lp.class_count() != nm.class_count() {
        return Err(Error::ModelMismatch(format!(
            "linear probe has {} classes, nearest mean has {}",
            lp.class_count(),
            nm.class_count()
        )));
    }
    Ok(())
}

/// Class-`k` score points of the class-`k` training records.
pub fn class_score_points(
    lp: &LinearProbeModel,
    nm: &NearestMeanModel,
    id_train: &EmbeddingSet,
) -> Result<Vec<Vec<ScorePoint>>> {
    check_pair(lp, nm)?;
    let mut per_class = vec![Vec::new(); lp.class_count()];
    for r in id_train.records() {
        if r.label < 0 || r.label as usize >= per_class.len() {
            return Err(Error::ClassOutOfRange {
                index: r.label.max(0) as usize,
                count: per_class.len(),
            });
        }
        let k = r.label as usize;
        per_class[k].push(score_point(lp, nm, &r.to_f64(), k)?);
    }
    Ok(per_class)
}

pub fn fit_class_gaussians(
    lp: &LinearProbeModel,
    nm: &NearestMeanModel,
    id_train: &EmbeddingSet,
) -> Result<Vec<ClassGaussian>> {
    class_score_points(lp, nm, id_train)?
        .iter()
        .enumerate()
        .map(|(k, pts)| fit_class_gaussian(k, pts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Id(usize),
    Ood,
}

/// Everything the detector computes for one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEvaluation {
    pub points: Vec<ScorePoint>,
    pub log_ratios: Vec<f64>,
    pub score: f64,
    pub predicted: usize,
}

impl PointEvaluation {
    pub fn accepted(&self, model: &GroodModel, epsilon: f64) -> bool {
        self.log_ratios
            .iter()
            .zip(&model.strategies)
            .any(|(&llr, s)| s.accepts(llr, epsilon))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroodModel {
    lp: LinearProbeModel,
    nm: NearestMeanModel,
    class_gaussians: Vec<ClassGaussian>,
    ood: OodGaussian,
    strategies: Vec<ClassStrategy>,
    prior: OodPriorConfig,
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GroodHeader {
    kind: String,
    class_count: usize,
    grid_len: usize,
    prior: OodPriorConfig,
    degenerate: Vec<bool>,
    class_names: Vec<String>,
}

const GROOD_KIND: &str = "grood";
pub const LP_FILE: &str = "lp.gmdl";
pub const NM_FILE: &str = "nm.gmdl";
pub const GROOD_FILE: &str = "grood.gmdl";

impl GroodModel {
    /// Fits class Gaussians and the OOD prior on `id_train`, then calibrates.
    pub fn fit(
        lp: LinearProbeModel,
        nm: NearestMeanModel,
        id_train: &EmbeddingSet,
        epsilon_grid: &[f64],
        prior: &OodPriorConfig,
    ) -> Result<Self> {
        prior.validate()?;
        validate_grid(epsilon_grid)?;
        let per_class = class_score_points(&lp, &nm, id_train)?;
        let class_gaussians = per_class
            .iter()
            .enumerate()
            .map(|(k, pts)| fit_class_gaussian(k, pts))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<ScorePoint> = per_class.into_iter().flatten().collect();
        let ood = build_ood_model(&all, prior)?;
        let strategies = calibrate(&class_gaussians, &ood, epsilon_grid, prior)?;
        let class_names = (0..lp.class_count()).map(|k| k.to_string()).collect();
        Ok(Self {
            lp,
            nm,
            class_gaussians,
            ood,
            strategies,
            prior: prior.clone(),
            class_names,
        })
    }

    pub fn from_parts(
        lp: LinearProbeModel,
        nm: NearestMeanModel,
        class_gaussians: Vec<ClassGaussian>,
        ood: OodGaussian,
        strategies: Vec<ClassStrategy>,
        prior: OodPriorConfig,
    ) -> Result<Self> {
        check_pair(&lp, &nm)?;
        let k = lp.class_count();
        if class_gaussians.len() != k || strategies.len() != k {
            return Err(Error::ModelMismatch(format!(
                "{k} classes but {} Gaussians and {} strategies",
                class_gaussians.len(),
                strategies.len()
            )));
        }
        Ok(Self {
            lp,
            nm,
            class_gaussians,
            ood,
            strategies,
            prior,
            class_names: (0..k).map(|i| i.to_string()).collect(),
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.class_count() {
            return Err(Error::ModelMismatch(format!(
                "{} class names for {} classes",
                names.len(),
                self.class_count()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Re-runs calibration with a new grid or prior configuration.
    pub fn recalibrate(&mut self, epsilon_grid: &[f64], prior: &OodPriorConfig) -> Result<()> {
        self.strategies = calibrate(&self.class_gaussians, &self.ood, epsilon_grid, prior)?;
        self.prior = prior.clone();
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_gaussians.len()
    }

    pub fn dim(&self) -> usize {
        self.lp.dim()
    }

    pub fn lp(&self) -> &LinearProbeModel {
        &self.lp
    }

    pub fn nm(&self) -> &NearestMeanModel {
        &self.nm
    }

    pub fn class_gaussians(&self) -> &[ClassGaussian] {
        &self.class_gaussians
    }

    pub fn ood(&self) -> &OodGaussian {
        &self.ood
    }

    pub fn strategies(&self) -> &[ClassStrategy] {
        &self.strategies
    }

    pub fn prior(&self) -> &OodPriorConfig {
        &self.prior
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn epsilon_grid(&self) -> &[f64] {
        &self.strategies[0].epsilon_grid
    }

    /// Clamps `epsilon` into the calibrated grid range; the flag reports
    /// whether clamping happened.
    pub fn clamp_epsilon(&self, epsilon: f64) -> (f64, bool) {
        let grid = self.epsilon_grid();
        let (lo, hi) = (grid[0], grid[grid.len() - 1]);
        if epsilon.is_nan() {
            return (lo, true);
        }
        if epsilon < lo {
            (lo, true)
        } else if epsilon > hi {
            (hi, true)
        } else {
            (epsilon, false)
        }
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.class_count() {
            return Err(Error::ClassOutOfRange {
                index: k,
                count: self.class_count(),
            });
        }
        Ok(())
    }

    pub fn score_point(&self, x: &[f64], k: usize) -> Result<ScorePoint> {
        self.check_class(k)?;
        score_point(&self.lp, &self.nm, x, k)
    }

    pub fn log_likelihood_ratio(&self, k: usize, p: ScorePoint) -> Result<f64> {
        self.check_class(k)?;
        Ok(log_likelihood_ratio(&self.class_gaussians[k], &self.ood, p))
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<PointEvaluation> {
        let points = score_points(&self.lp, &self.nm, x)?;
        let log_ratios: Vec<f64> = points
            .iter()
            .zip(&self.class_gaussians)
            .map(|(&p, g)| log_likelihood_ratio(g, &self.ood, p))
            .collect();
        let score = log_ratios
            .iter()
            .zip(&self.strategies)
            .map(|(&llr, s)| s.cdf(llr))
            .fold(0.0, f64::max);
        let mut predicted = 0;
        let mut best = f64::NEG_INFINITY;
        for (k, (&p, g)) in points.iter().zip(&self.class_gaussians).enumerate() {
            let lp = g.log_pdf(p);
            if lp > best {
                best = lp;
                predicted = k;
            }
        }
        Ok(PointEvaluation {
            points,
            log_ratios,
            score,
            predicted,
        })
    }

    /// Evaluates many embeddings in parallel; output order matches input.
    pub fn evaluate_many(&self, xs: &[Vec<f64>]) -> Result<Vec<PointEvaluation>> {
        xs.par_iter().map(|x| self.evaluate(x)).collect()
    }

    /// ID if any class strategy accepts at `epsilon` (clamped to the grid).
    pub fn decide(&self, x: &[f64], epsilon: f64) -> Result<Verdict> {
        let (eps, clamped) = self.clamp_epsilon(epsilon);
        if clamped {
            warn!("epsilon {epsilon} outside calibrated range, clamped to {eps}");
        }
        let eval = self.evaluate(x)?;
        Ok(if eval.accepted(self, eps) {
            Verdict::Id(eval.predicted)
        } else {
            Verdict::Ood
        })
    }

    pub fn calibrated_score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x)?.score)
    }

    /// Argmax of the class Gaussian log-densities, lowest index on ties.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(self.evaluate(x)?.predicted)
    }

    fn grood_bytes(&self) -> Result<Vec<u8>> {
        let grid = self.epsilon_grid();
        let header = GroodHeader {
            kind: GROOD_KIND.into(),
            class_count: self.class_count(),
            grid_len: grid.len(),
            prior: self.prior.clone(),
            degenerate: self.class_gaussians.iter().map(|g| g.degenerate).collect(),
            class_names: self.class_names.clone(),
        };
        let mut payload = Vec::new();
        for g in &self.class_gaussians {
            payload.extend(g.mean);
            payload.extend(g.cov);
        }
        payload.extend(self.ood.variances);
        payload.extend_from_slice(grid);
        for s in &self.strategies {
            payload.extend_from_slice(&s.mu_values);
            payload.extend_from_slice(&s.cdf_samples);
        }
        model_io::encode(&header, &payload)
    }

    fn from_grood_bytes(lp: LinearProbeModel, nm: NearestMeanModel, bytes: &[u8]) -> Result<Self> {
        let (header, payload): (GroodHeader, _) = model_io::decode(bytes)?;
        if header.kind != GROOD_KIND {
            return Err(Error::Malformed(format!(
                "expected a {GROOD_KIND} model, found {}",
                header.kind
            )));
        }
        let k = header.class_count;
        if header.degenerate.len() != k || header.class_names.len() != k {
            return Err(Error::Malformed(
                "per-class header lists have the wrong length".into(),
            ));
        }
        let mut reader = PayloadReader::new(&payload);
        let mut class_gaussians = Vec::with_capacity(k);
        for (i, &degenerate) in header.degenerate.iter().enumerate() {
            let m = reader.take(2)?;
            let c = reader.take(3)?;
            class_gaussians.push(ClassGaussian {
                class_index: i,
                mean: [m[0], m[1]],
                cov: [c[0], c[1], c[2]],
                degenerate,
            });
        }
        let v = reader.take(2)?;
        let ood = OodGaussian::new([v[0], v[1]])?;
        let grid = reader.take(header.grid_len)?.to_vec();
        let mut strategies = Vec::with_capacity(k);
        for i in 0..k {
            let mu_values = reader.take(header.grid_len)?.to_vec();
            let cdf_samples = reader.take(header.prior.mc_samples)?.to_vec();
            strategies.push(ClassStrategy {
                class_index: i,
                epsilon_grid: grid.clone(),
                mu_values,
                cdf_samples,
            });
        }
        reader.finish()?;
        Self::from_parts(lp, nm, class_gaussians, ood, strategies, header.prior)?
            .with_class_names(header.class_names)
    }

    /// Writes `lp.gmdl`, `nm.gmdl` and `grood.gmdl` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.lp.save(&dir.join(LP_FILE))?;
        self.nm.save(&dir.join(NM_FILE))?;
        let path = dir.join(GROOD_FILE);
        std::fs::write(&path, self.grood_bytes()?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let lp = LinearProbeModel::load(&dir.join(LP_FILE))?;
        let nm = NearestMeanModel::load(&dir.join(NM_FILE))?;
        let path = dir.join(GROOD_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_grood_bytes(lp, nm, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_lp() -> LinearProbeModel {
        LinearProbeModel::from_parts(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn score_point_composition() {
        let nm = NearestMeanModel::from_means(vec![vec![5.0, 0.0], vec![5.0, -4.0]]).unwrap();
        let lp = identity_lp();
        assert_eq!(
            score_point(&lp, &nm, &[5.0, 0.0], 0).unwrap(),
            ScorePoint::new(5.0, 1.0)
        );
        assert_eq!(
            score_point(&lp, &nm, &[5.0, 0.0], 1).unwrap(),
            ScorePoint::new(0.0, 0.2)
        );
        assert!(matches!(
            score_point(&lp, &nm, &[5.0, 0.0], 2),
            Err(Error::ClassOutOfRange { index: 2, count: 2 })
        ));
    }

    #[test]
    fn moments_of_square() {
        let pts: Vec<ScorePoint> = [(1.0, 1.0), (1.0, 3.0), (3.0, 1.0), (3.0, 3.0)]
            .iter()
            .map(|&(a, b)| ScorePoint::new(a, b))
            .collect();
        let g = fit_class_gaussian(0, &pts).unwrap();
        assert_eq!(g.mean, [2.0, 2.0]);
        assert_eq!(g.cov, [1.0, 0.0, 1.0]);
        assert!(!g.degenerate);
    }

    #[test]
    fn identical_points_are_regularized() {
        let pts = vec![ScorePoint::new(2.0, 0.5); 2];
        let g = fit_class_gaussian(0, &pts).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.cov, [1e-9, 0.0, 1e-9]);
    }

    #[test]
    fn one_sample_is_an_error() {
        assert!(matches!(
            fit_class_gaussian(3, &[ScorePoint::new(0.0, 0.1)]),
            Err(Error::TooFewSamples {
                class: 3,
                count: 1,
                required: 2
            })
        ));
    }

    #[test]
    fn ood_model_from_constant_scores() {
        let pts = vec![ScorePoint::new(10.0, 0.5); 7];
        let ood = build_ood_model(&pts, &OodPriorConfig::default()).unwrap();
        assert_eq!(ood.sigmas(), [30.0, 1.5]);
    }

    #[test]
    fn ood_model_nearest_rank() {
        let pts: Vec<ScorePoint> = (1..=100).map(|i| ScorePoint::new(i as f64, 0.5)).collect();
        let ood = build_ood_model(&pts, &OodPriorConfig::default()).unwrap();
        assert_eq!(ood.sigmas()[0], 270.0);
        assert!(matches!(
            build_ood_model(&[], &OodPriorConfig::default()),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn ood_sigma_is_floored() {
        let pts = vec![ScorePoint::new(0.0, 0.0); 3];
        let ood = build_ood_model(&pts, &OodPriorConfig::default()).unwrap();
        assert_eq!(ood.sigmas(), [MIN_OOD_SIGMA, MIN_OOD_SIGMA]);
    }

    #[test]
    fn nearest_rank_edges() {
        assert_eq!(nearest_rank(0.9, 100), 90);
        assert_eq!(nearest_rank(0.5, 4), 2);
        assert_eq!(nearest_rank(1e-9, 10), 1);
        assert_eq!(nearest_rank(0.999_999, 10), 10);
        for n in [7usize, 100, 1000, 100_000] {
            for e in default_epsilon_grid() {
                let c = nearest_rank(e, n);
                assert!(c as f64 / n as f64 >= e);
                assert!(c == 1 || ((c - 1) as f64 / n as f64) < e);
            }
        }
    }

    #[test]
    fn log_ratio_of_identical_densities_is_zero() {
        let g = ClassGaussian::new(0, [0.0, 0.0], [4.0, 0.0, 9.0]).unwrap();
        let ood = OodGaussian::new([4.0, 9.0]).unwrap();
        for p in [(0.0, 0.0), (3.0, -2.0), (100.0, 7.0)] {
            let llr = log_likelihood_ratio(&g, &ood, ScorePoint::new(p.0, p.1));
            assert!(llr.abs() < 1e-12);
        }
    }

    #[test]
    fn log_ratio_at_origin() {
        let g = ClassGaussian::new(0, [0.0, 0.0], [1.0, 0.0, 1.0]).unwrap();
        let ood = OodGaussian::new([100.0, 100.0]).unwrap();
        // direct quotient of the two densities at the origin
        let pdf_id = 1.0 / (2.0 * std::f64::consts::PI);
        let pdf_ood = 1.0 / (2.0 * std::f64::consts::PI * 100.0);
        let expected = (pdf_id / pdf_ood).ln();
        let at_origin = log_likelihood_ratio(&g, &ood, ScorePoint::new(0.0, 0.0));
        assert!((at_origin - expected).abs() < 1e-12);
        assert!((at_origin - 4.605_170_185_988_092).abs() < 1e-12);
        let far = log_likelihood_ratio(&g, &ood, ScorePoint::new(1000.0, 0.0));
        assert!(far < at_origin);
    }

    #[test]
    fn default_grid_shape() {
        let g = default_epsilon_grid();
        assert_eq!(g.len(), 55);
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[49], 0.5);
        assert_eq!(*g.last().unwrap(), 0.99);
        validate_grid(&g).unwrap();
    }

    #[test]
    fn calibration_rejects_small_mc() {
        let g = ClassGaussian::new(0, [0.0, 0.0], [1.0, 0.0, 1.0]).unwrap();
        let ood = OodGaussian::new([100.0, 100.0]).unwrap();
        let cfg = OodPriorConfig {
            mc_samples: 999,
            ..Default::default()
        };
        assert!(matches!(
            calibrate(&[g], &ood, &[0.1], &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn median_and_monotone_thresholds() {
        let g = ClassGaussian::new(0, [1.0, 0.5], [2.0, 0.3, 0.5]).unwrap();
        let ood = OodGaussian::new([50.0, 4.0]).unwrap();
        let cfg = OodPriorConfig {
            mc_samples: 10_001,
            ..Default::default()
        };
        let s = &calibrate(&[g], &ood, &[0.01, 0.05, 0.1, 0.5], &cfg).unwrap()[0];
        assert_eq!(s.mu_values[3], s.cdf_samples[5000]);
        assert!(s.mu_values.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.cdf_samples.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(s.threshold(0.5), s.mu_values[3]);
        let mid = s.threshold(0.075);
        assert!((mid - 0.5 * (s.mu_values[1] + s.mu_values[2])).abs() < 1e-12);
        assert_eq!(s.cdf(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn identical_class_gaussians_predict_zero() {
        let nm = NearestMeanModel::from_means(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let g = |k| ClassGaussian::new(k, [0.0, 1.0], [1.0, 0.0, 1.0]).unwrap();
        let ood = OodGaussian::new([100.0, 100.0]).unwrap();
        let gs = vec![g(0), g(1)];
        let cfg = OodPriorConfig {
            mc_samples: 2000,
            ..Default::default()
        };
        let strategies = calibrate(&gs, &ood, &[0.1], &cfg).unwrap();
        let lp_sym =
            LinearProbeModel::from_parts(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![0.0, 0.0])
                .unwrap();
        let model = GroodModel::from_parts(lp_sym, nm, gs, ood, strategies, cfg).unwrap();
        assert_eq!(model.predict_class(&[0.3, -0.2]).unwrap(), 0);
    }
}
