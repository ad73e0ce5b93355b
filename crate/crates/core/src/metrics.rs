//! OOD evaluation metrics.
//!
//! Higher scores mean "more in-distribution". A sample is accepted at
//! threshold `τ` when `score >= τ` and rejected when `score < τ`; every metric
//! here uses that convention.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD_CONVENTION: &str =
    "accepted iff score >= threshold; rejected iff score < threshold";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub true_label: i32,
    pub predicted_label: i32,
}

impl ScoredSample {
    pub fn new(score: f64, true_label: i32, predicted_label: i32) -> Self {
        Self {
            score,
            true_label,
            predicted_label,
        }
    }

    pub fn correct(&self) -> bool {
        self.true_label >= 0 && self.true_label == self.predicted_label
    }
}

fn nonempty(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} scores are empty")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what} scores contain a non-finite value"
        )));
    }
    Ok(())
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mann-Whitney estimate of `P(id > ood) + ½·P(id = ood)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    nonempty(id_scores, "ID")?;
    nonempty(ood_scores, "OOD")?;
    let ood = sorted(ood_scores);
    // twice the pair statistic, kept integral
    let mut doubled: u64 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        doubled += 2 * below as u64 + (not_above - below) as u64;
    }
    let pairs = 2 * id_scores.len() as u64 * ood_scores.len() as u64;
    Ok(doubled as f64 / pairs as f64)
}

/// FPR at the largest threshold that accepts at least `tpr_target` of the ID
/// scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    nonempty(id_scores, "ID")?;
    nonempty(ood_scores, "OOD")?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tpr target {tpr_target} not in (0, 1]"
        )));
    }
    let mut id = sorted(id_scores);
    id.reverse();
    let n = id.len() as f64;
    let needed = (1..=id.len())
        .find(|&c| c as f64 / n >= tpr_target)
        .unwrap_or(id.len());
    let tau = id[needed - 1];
    Ok(fraction_at_least(ood_scores, tau))
}

fn fraction_at_least(scores: &[f64], tau: f64) -> f64 {
    scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64
}

/// ROC curve as `(threshold, fpr, tpr)` triples, one per distinct score in
/// descending order.
pub fn roc_curve(id_scores: &[f64], ood_scores: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    nonempty(id_scores, "ID")?;
    nonempty(ood_scores, "OOD")?;
    let mut events: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let tau = events[i].0;
        while i < events.len() && events[i].0 == tau {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tau, fp as f64 / n_ood, tp as f64 / n_id));
    }
    Ok(curve)
}

/// Area under the CCR–FPR curve.
///
/// The threshold sweeps every distinct observed score (ID and OOD) plus a
/// `-∞` sentinel; the curve is anchored at `(0, 0)` and integrated with the
/// trapezoidal rule in FPR order. CCR counts ID samples that are both
/// correctly classified and accepted, over all ID samples.
pub fn oscr(id_samples: &[ScoredSample], ood_scores: &[f64]) -> Result<f64> {
    if id_samples.is_empty() {
        return Err(Error::InvalidConfig("ID samples are empty".into()));
    }
    nonempty(ood_scores, "OOD")?;
    if let Some(s) = id_samples.iter().find(|s| s.true_label < 0) {
        return Err(Error::InvalidConfig(format!(
            "ID sample with score {} has no true label",
            s.score
        )));
    }
    if id_samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::Numeric(
            "ID scores contain a non-finite value".into(),
        ));
    }
    // (score, is_id, correct)
    let mut events: Vec<(f64, bool, bool)> = id_samples
        .iter()
        .map(|s| (s.score, true, s.correct()))
        .chain(ood_scores.iter().map(|&s| (s, false, false)))
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_id, n_ood) = (id_samples.len() as f64, ood_scores.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut cc, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let tau = events[i].0;
        while i < events.len() && events[i].0 == tau {
            let (_, is_id, correct) = events[i];
            if is_id && correct {
                cc += 1;
            } else if !is_id {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_ood, cc as f64 / n_id));
    }
    // -∞ accepts everything, which the last point already covers
    points.push(*points.last().unwrap());
    Ok(points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

pub fn accuracy(id_samples: &[ScoredSample]) -> Result<f64> {
    if id_samples.is_empty() {
        return Err(Error::InvalidConfig("ID samples are empty".into()));
    }
    Ok(id_samples.iter().filter(|s| s.correct()).count() as f64 / id_samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionPoint {
    pub threshold: f64,
    pub rejection: f64,
}

/// Per-class false-rejection rate `fraction(score < τ)` at each threshold.
pub fn per_class_rejection_curve(
    scores_by_class: &BTreeMap<usize, Vec<f64>>,
    thresholds: &[f64],
) -> Result<BTreeMap<usize, Vec<RejectionPoint>>> {
    scores_by_class
        .iter()
        .map(|(&class, scores)| {
            if scores.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "class {class} has no samples"
                )));
            }
            let s = sorted(scores);
            let curve = thresholds
                .iter()
                .map(|&t| RejectionPoint {
                    threshold: t,
                    rejection: s.partition_point(|&v| v < t) as f64 / s.len() as f64,
                })
                .collect();
            Ok((class, curve))
        })
        .collect()
}

/// Groups ID sample scores by true label.
pub fn scores_by_class(id_samples: &[ScoredSample]) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in id_samples.iter().filter(|s| s.true_label >= 0) {
        out.entry(s.true_label as usize).or_default().push(s.score);
    }
    out
}

/// Largest minus smallest per-class rejection at the `index`-th threshold.
pub fn rejection_spread(curves: &BTreeMap<usize, Vec<RejectionPoint>>, index: usize) -> f64 {
    let rates = curves.values().map(|c| c[index].rejection);
    let (lo, hi) = rates.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r), hi.max(r))
    });
    hi - lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub oscr: f64,
    pub acc: f64,
    pub per_class_rejection: BTreeMap<usize, Vec<RejectionPoint>>,
    pub threshold_convention: String,
}

impl EvalReport {
    /// Computes every metric from scored ID samples and OOD scores; the
    /// rejection curves are evaluated at `thresholds`.
    pub fn compute(
        id_samples: &[ScoredSample],
        ood_scores: &[f64],
        thresholds: &[f64],
    ) -> Result<Self> {
        let id_scores: Vec<f64> = id_samples.iter().map(|s| s.score).collect();
        Ok(Self {
            auroc: auroc(&id_scores, ood_scores)?,
            fpr95: fpr_at_tpr(&id_scores, ood_scores, 0.95)?,
            oscr: oscr(id_samples, ood_scores)?,
            acc: accuracy(id_samples)?,
            per_class_rejection: per_class_rejection_curve(
                &scores_by_class(id_samples),
                thresholds,
            )?,
            threshold_convention: THRESHOLD_CONVENTION.into(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `class,threshold,rejection` rows.
    pub fn rejection_csv(&self) -> String {
        rejection_csv(&self.per_class_rejection, None)
    }
}

/// CSV rendering of rejection curves; `names` maps class index to a label.
pub fn rejection_csv(
    curves: &BTreeMap<usize, Vec<RejectionPoint>>,
    names: Option<&[String]>,
) -> String {
    let mut out = String::from("class,threshold,rejection\n");
    for (&class, curve) in curves {
        let name = names
            .and_then(|n| n.get(class).cloned())
            .unwrap_or_else(|| class.to_string());
        for p in curve {
            let _ = writeln!(out, "{name},{},{}", p.threshold, p.rejection);
        }
    }
    out
}

pub fn roc_csv(curve: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for (t, f, r) in curve {
        let _ = writeln!(out, "{t},{f},{r}");
    }
    out
}
