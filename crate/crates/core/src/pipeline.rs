//! End-to-end steps shared by the CLI and the integration tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{apply_split, load_embeddings, EmbeddingSet, Split, SplitManifest};
use crate::detector::{nearest_rank, GroodModel, PointEvaluation, Verdict};
use crate::error::{Error, Result};
use crate::linear_probe::train_lp;
use crate::metrics::{self, EvalReport, RejectionPoint, ScoredSample};
use crate::nearest_mean::fit_nm_with;

pub fn load_split(config: &RunConfig) -> Result<Split> {
    let emb = config
        .paths
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no embeddings path given".into()))?;
    let man = config
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no manifest path given".into()))?;
    let set = load_embeddings(emb)?;
    let manifest = SplitManifest::load(man)?;
    apply_split(&set, &manifest)
}

/// Trains both classifiers on the ID training split and fits the detector.
pub fn fit_split(split: &Split, config: &RunConfig) -> Result<GroodModel> {
    let lp = train_lp(&split.id_train, &config.lp)?;
    let nm = fit_nm_with(&split.id_train, config.lp.l2_normalize_inputs)?;
    let names = (0..split.class_count())
        .map(|k| split.class_name(k))
        .collect();
    GroodModel::fit(
        lp,
        nm,
        &split.id_train,
        &config.epsilon_grid,
        &config.ood_prior,
    )?
    .with_class_names(names)
}

/// JSON summary of a fitted model.
pub fn fit_summary(model: &GroodModel) -> serde_json::Value {
    let report = model.lp().report();
    let classes: Vec<_> = model
        .class_gaussians()
        .iter()
        .map(|g| {
            json!({
                "class": model.class_names()[g.class_index],
                "mean": g.mean,
                "cov": [[g.cov[0], g.cov[1]], [g.cov[1], g.cov[2]]],
                "degenerate": g.degenerate,
            })
        })
        .collect();
    json!({
        "class_count": model.class_count(),
        "dim": model.dim(),
        "linear_probe": report.map(|r| json!({
            "converged": r.converged,
            "iterations": r.iterations,
            "gradient_max_norm": r.gradient_norm,
            "final_loss": r.final_loss,
            "l2_strength": r.l2_strength,
        })),
        "class_gaussians": classes,
        "ood_sigma": model.ood().sigmas(),
        "epsilon_grid_len": model.epsilon_grid().len(),
        "mc_samples": model.prior().mc_samples,
    })
}

pub fn check_compatible(model: &GroodModel, set: &EmbeddingSet) -> Result<()> {
    if set.dim() != model.dim() {
        return Err(Error::ModelMismatch(format!(
            "model dimension {} but embeddings have {}",
            model.dim(),
            set.dim()
        )));
    }
    Ok(())
}

/// Dense ID labels must index the model's classes.
fn check_labels(model: &GroodModel, set: &EmbeddingSet) -> Result<()> {
    if let Some(r) = set
        .records()
        .iter()
        .find(|r| r.label < 0 || r.label >= model.class_count() as i32)
    {
        return Err(Error::ModelMismatch(format!(
            "label {} but model has {} classes",
            r.label,
            model.class_count()
        )));
    }
    Ok(())
}

pub fn evaluate_set(model: &GroodModel, set: &EmbeddingSet) -> Result<Vec<PointEvaluation>> {
    check_compatible(model, set)?;
    model.evaluate_many(&set.vectors_f64())
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub roc: Vec<(f64, f64, f64)>,
}

/// Calibrated-score metrics on the ID and OOD test splits. Per-class rejection
/// curves are read at `eval_epsilons`, where a calibrated score of `ε` is the
/// decision threshold for rejection level `ε`.
pub fn evaluate(
    model: &GroodModel,
    id_test: &EmbeddingSet,
    ood_test: &EmbeddingSet,
    eval_epsilons: &[f64],
) -> Result<Evaluation> {
    if id_test.is_empty() {
        return Err(Error::InvalidConfig("id_test split is empty".into()));
    }
    if ood_test.is_empty() {
        return Err(Error::InvalidConfig("ood_test split is empty".into()));
    }
    check_labels(model, id_test)?;
    let id_eval = evaluate_set(model, id_test)?;
    let ood_eval = evaluate_set(model, ood_test)?;
    let id_samples: Vec<ScoredSample> = id_eval
        .iter()
        .zip(id_test.records())
        .map(|(e, r)| ScoredSample::new(e.score, r.label, e.predicted as i32))
        .collect();
    let ood_scores: Vec<f64> = ood_eval.iter().map(|e| e.score).collect();
    let id_scores: Vec<f64> = id_samples.iter().map(|s| s.score).collect();
    Ok(Evaluation {
        report: EvalReport::compute(&id_samples, &ood_scores, eval_epsilons)?,
        roc: metrics::roc_curve(&id_scores, &ood_scores)?,
    })
}

/// One `index<TAB>verdict<TAB>score` line per record.
pub fn decide_lines(model: &GroodModel, set: &EmbeddingSet, epsilon: f64) -> Result<String> {
    let (eps, _) = model.clamp_epsilon(epsilon);
    let evals = evaluate_set(model, set)?;
    let mut out = String::new();
    for (i, e) in evals.iter().enumerate() {
        let verdict = if e.accepted(model, eps) {
            Verdict::Id(e.predicted)
        } else {
            Verdict::Ood
        };
        let label = match verdict {
            Verdict::Id(k) => model.class_names()[k].as_str(),
            Verdict::Ood => "OOD",
        };
        let _ = writeln!(out, "{i}\t{label}\t{}", e.score);
    }
    Ok(out)
}

/// One `index<TAB>predicted class<TAB>score<TAB>log-ratio...` line per record.
pub fn score_lines(model: &GroodModel, set: &EmbeddingSet) -> Result<String> {
    let evals = evaluate_set(model, set)?;
    let mut out = String::from("index\tpredicted\tscore");
    for name in model.class_names() {
        let _ = write!(out, "\tllr_{name}");
    }
    out.push('\n');
    for (i, e) in evals.iter().enumerate() {
        let _ = write!(
            out,
            "{i}\t{}\t{}",
            model.class_names()[e.predicted],
            e.score
        );
        for llr in &e.log_ratios {
            let _ = write!(out, "\t{llr}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per-class rejection of raw max-logit scores at one shared threshold next
/// to the calibrated scores at the matched rejection level.
#[derive(Debug, Clone, Serialize)]
pub struct MiscalibrationRow {
    pub epsilon: f64,
    /// Shared max-logit threshold rejecting a fraction `epsilon` of all ID samples.
    pub logit_threshold: f64,
    pub logit_rejection: Vec<f64>,
    pub calibrated_rejection: Vec<f64>,
    pub logit_spread: f64,
    pub calibrated_spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub classes: Vec<String>,
    pub rows: Vec<MiscalibrationRow>,
    /// AUROC of max-logit, max-similarity and calibrated scores, when OOD data
    /// was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complementarity: Option<BTreeMap<String, f64>>,
    pub threshold_convention: String,
}

fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// Baseline scores for one set: (max logit, max NM similarity).
pub fn baseline_scores(model: &GroodModel, set: &EmbeddingSet) -> Result<(Vec<f64>, Vec<f64>)> {
    check_compatible(model, set)?;
    let mut lp = Vec::with_capacity(set.len());
    let mut nm = Vec::with_capacity(set.len());
    for r in set.records() {
        let x = r.to_f64();
        lp.push(model.lp().score(&x)?);
        nm.push(model.nm().score(&x)?);
    }
    Ok((lp, nm))
}

pub fn calibration_report(
    model: &GroodModel,
    id_test: &EmbeddingSet,
    ood_test: Option<&EmbeddingSet>,
    epsilons: &[f64],
) -> Result<CalibrationReport> {
    if id_test.is_empty() {
        return Err(Error::InvalidConfig("id_test split is empty".into()));
    }
    check_labels(model, id_test)?;
    let evals = evaluate_set(model, id_test)?;
    let (logits, sims) = baseline_scores(model, id_test)?;
    let labels: Vec<usize> = id_test.records().iter().map(|r| r.label as usize).collect();
    let group = |scores: &[f64]| {
        let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (&k, &s) in labels.iter().zip(scores) {
            by.entry(k).or_default().push(s);
        }
        by
    };
    let calibrated: Vec<f64> = evals.iter().map(|e| e.score).collect();
    let mut pooled = logits.clone();
    pooled.sort_by(f64::total_cmp);
    let logit_thresholds: Vec<f64> = epsilons
        .iter()
        .map(|&e| pooled[nearest_rank(e, pooled.len()) - 1])
        .collect();
    let logit_curves = metrics::per_class_rejection_curve(&group(&logits), &logit_thresholds)?;
    let cal_curves = metrics::per_class_rejection_curve(&group(&calibrated), epsilons)?;
    let column = |curves: &BTreeMap<usize, Vec<RejectionPoint>>, i: usize| -> Vec<f64> {
        curves.values().map(|c| c[i].rejection).collect()
    };
    let rows = epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let lr = column(&logit_curves, i);
            let cr = column(&cal_curves, i);
            MiscalibrationRow {
                epsilon: eps,
                logit_threshold: logit_thresholds[i],
                logit_spread: spread(&lr),
                calibrated_spread: spread(&cr),
                logit_rejection: lr,
                calibrated_rejection: cr,
            }
        })
        .collect();
    let complementarity = match ood_test {
        Some(ood) if !ood.is_empty() => {
            let (ood_lp, ood_nm) = baseline_scores(model, ood)?;
            let ood_cal: Vec<f64> = evaluate_set(model, ood)?.iter().map(|e| e.score).collect();
            Some(BTreeMap::from([
                ("max_logit".to_string(), metrics::auroc(&logits, &ood_lp)?),
                (
                    "max_similarity".to_string(),
                    metrics::auroc(&sims, &ood_nm)?,
                ),
                (
                    "calibrated".to_string(),
                    metrics::auroc(&calibrated, &ood_cal)?,
                ),
            ]))
        }
        _ => None,
    };
    let classes = logit_curves
        .keys()
        .map(|&k| model.class_names()[k].clone())
        .collect();
    Ok(CalibrationReport {
        classes,
        rows,
        complementarity,
        threshold_convention: metrics::THRESHOLD_CONVENTION.into(),
    })
}

impl CalibrationReport {
    /// `epsilon,source,threshold,class,rejection` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,source,threshold,class,rejection\n");
        for row in &self.rows {
            for (name, (l, c)) in self
                .classes
                .iter()
                .zip(row.logit_rejection.iter().zip(&row.calibrated_rejection))
            {
                let _ = writeln!(
                    out,
                    "{},max_logit,{},{name},{l}",
                    row.epsilon, row.logit_threshold
                );
                let _ = writeln!(out, "{},calibrated,{},{name},{c}", row.epsilon, row.epsilon);
            }
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>8} {:>10}", "epsilon", "source");
        for c in &self.classes {
            let _ = write!(out, " {c:>10}");
        }
        let _ = writeln!(out, " {:>10}", "spread");
        for row in &self.rows {
            for (source, rates, s) in [
                ("max_logit", &row.logit_rejection, row.logit_spread),
                (
                    "calibrated",
                    &row.calibrated_rejection,
                    row.calibrated_spread,
                ),
            ] {
                let _ = write!(out, "{:>8.4} {source:>10}", row.epsilon);
                for r in rates {
                    let _ = write!(out, " {r:>10.4}");
                }
                let _ = writeln!(out, " {s:>10.4}");
            }
        }
        out
    }
}
