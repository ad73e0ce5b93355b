//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints one `[PASS]`/`[FAIL]` line with its measured values.

mod common;

use std::time::Instant;

use grood::config::RunConfig;
use grood::detector::{calibrate, ClassGaussian, OodGaussian, OodPriorConfig};
use grood::linear_probe::{train_lp, LinearProbeModel, LpTrainConfig};
use grood::metrics::{self, ScoredSample};
use grood::synthetic::GaussianCloud;
use grood::{EmbeddingRecord, EmbeddingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{axis_clouds, synthetic_split};

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn criterion_1_calibration_fidelity() -> bool {
    let start = Instant::now();
    let clouds = axis_clouds(16, 3.0, &[0.3, 0.3, 0.3]);
    let split = synthetic_split(&clouds, &[], 5000, 50_000, 0, 11);
    let config = RunConfig::default();
    let model = common::fit(&split, &config);
    let evals = grood::pipeline::evaluate_set(&model, &split.id_test).unwrap();
    let labels = split.id_test.labels();

    let mut pass = true;
    let mut detail = Vec::new();
    for eps in [0.01f64, 0.05, 0.10] {
        let tol = f64::max(0.01, 3.0 * (eps * (1.0 - eps) / 50_000.0).sqrt());
        for k in 0..3 {
            let (mut n, mut rejected) = (0usize, 0usize);
            for (e, &l) in evals.iter().zip(&labels) {
                if l as usize == k {
                    n += 1;
                    if !e.accepted(&model, eps) {
                        rejected += 1;
                    }
                }
            }
            let rate = rejected as f64 / n as f64;
            pass &= (rate - eps).abs() <= tol;
            detail.push(format!(
                "eps={eps} class={k} rejection={rate:.4} (tol {tol:.4})"
            ));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 60.0;
    report(
        "calibration fidelity",
        pass,
        &format!("{}; runtime {elapsed:.1}s", detail.join(", ")),
    );
    pass
}

fn criterion_2_neyman_pearson_chi_square() -> bool {
    let id = ClassGaussian::new(0, [0.0, 0.0], [1.0, 0.0, 1.0]).unwrap();
    let ood = OodGaussian::new([100.0, 100.0]).unwrap();
    let prior = OodPriorConfig {
        mc_samples: 1_000_000,
        ..Default::default()
    };
    let grid = grood::detector::default_epsilon_grid();
    let strategy = &calibrate(&[id], &ood, &grid, &prior).unwrap()[0];
    let mu = strategy.threshold(0.05);
    // log r = ½ln(10⁴) − ½·0.99·‖p‖², accepted iff ‖p‖² < c
    let c = (0.5 * 10_000f64.ln() - mu) * 2.0 / 0.99;
    let chi2_95 = 5.991_464_547_107_979;
    let pass = (c - chi2_95).abs() < 0.05;
    report(
        "Neyman-Pearson chi-square radius",
        pass,
        &format!("radius^2 = {c:.4}, chi2(2) 0.95 quantile = {chi2_95:.4}"),
    );
    pass
}

fn pair_counting_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut gt = 0.0;
    let mut ties = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                gt += 1.0;
            } else if a == b {
                ties += 1.0;
            }
        }
    }
    (gt + 0.5 * ties) / (id.len() * ood.len()) as f64
}

fn sweep_oscr(id: &[ScoredSample], ood: &[f64]) -> f64 {
    let mut thetas: Vec<f64> = id
        .iter()
        .map(|s| s.score)
        .chain(ood.iter().copied())
        .collect();
    thetas.push(f64::INFINITY);
    thetas.push(f64::NEG_INFINITY);
    let mut pts: Vec<(f64, f64)> = thetas
        .iter()
        .map(|&t| {
            let cc = id.iter().filter(|s| s.correct() && s.score >= t).count();
            let fp = ood.iter().filter(|&&s| s >= t).count();
            (fp as f64 / ood.len() as f64, cc as f64 / id.len() as f64)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

fn sweep_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let frac = |v: &[f64], t: f64| v.iter().filter(|&&s| s >= t).count() as f64 / v.len() as f64;
    let tau = id
        .iter()
        .copied()
        .filter(|&t| frac(id, t) >= target)
        .fold(f64::NEG_INFINITY, f64::max);
    frac(ood, tau)
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // coarse grid so that ties are common
    (0..n)
        .map(|_| (rng.random::<f64>() * 50.0).round() / 10.0)
        .collect()
}

fn criterion_3_metric_oracles() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let n = rng.random_range(1..=1000);
        let m = rng.random_range(1..=1000);
        let id = random_scores(&mut rng, n);
        let ood: Vec<f64> = random_scores(&mut rng, m).iter().map(|s| s - 0.7).collect();
        worst[0] = worst[0]
            .max((metrics::auroc(&id, &ood).unwrap() - pair_counting_auroc(&id, &ood)).abs());
        let target = rng.random_range(0.05..=1.0);
        let fpr = metrics::fpr_at_tpr(&id, &ood, target).unwrap();
        worst[2] = worst[2].max((fpr - sweep_fpr(&id, &ood, target)).abs());
    }
    for _ in 0..100 {
        let n = rng.random_range(1..=120);
        let m = rng.random_range(1..=80);
        let id: Vec<ScoredSample> = random_scores(&mut rng, n)
            .into_iter()
            .map(|s| {
                let t = rng.random_range(0..4);
                let p = if rng.random::<f64>() < 0.7 {
                    t
                } else {
                    rng.random_range(0..4)
                };
                ScoredSample::new(s, t, p)
            })
            .collect();
        let ood: Vec<f64> = random_scores(&mut rng, m).iter().map(|s| s - 1.0).collect();
        worst[1] = worst[1].max((metrics::oscr(&id, &ood).unwrap() - sweep_oscr(&id, &ood)).abs());
    }
    let pass = worst[0] <= 1e-12 && worst[1] <= 1e-12 && worst[2] == 0.0;
    report(
        "metric oracles",
        pass,
        &format!(
            "max |auroc - oracle| = {:.1e}, max |oscr - oracle| = {:.1e}, max |fpr - oracle| = {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    );
    pass
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: i32) -> EmbeddingSet {
    let records = (0..n)
        .map(|i| {
            let label = (i as i32) % classes;
            let v = (0..dim)
                .map(|d| {
                    (rng.random::<f64>() * 2.0 - 1.0 + if d as i32 == label { 1.0 } else { 0.0 })
                        as f32
                })
                .collect();
            EmbeddingRecord::new(label, v)
        })
        .collect();
    EmbeddingSet::new(dim, records).unwrap()
}

fn criterion_4_linear_probe_correctness() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = random_set(&mut rng, 30, 4, 3);
    let lambda = 0.05;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let w: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = LinearProbeModel::from_parts(w.clone(), b.clone()).unwrap();
        let (_, grad) = model.loss_and_gradient(&batch, lambda).unwrap();
        let loss_at = |w: &[Vec<f64>], b: &[f64]| {
            let m = LinearProbeModel::from_parts(w.to_vec(), b.to_vec()).unwrap();
            m.loss_and_gradient(&batch, lambda).unwrap().0
        };
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for c in 0..3 {
            for d in 0..4 {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[c][d] += h;
                wm[c][d] -= h;
                num.push((loss_at(&wp, &b) - loss_at(&wm, &b)) / (2.0 * h));
                ana.push(grad.weights[c * 4 + d]);
            }
        }
        for c in 0..3 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[c] += h;
            bm[c] -= h;
            num.push((loss_at(&w, &bp) - loss_at(&w, &bm)) / (2.0 * h));
            ana.push(grad.bias[c]);
        }
        let diff = num
            .iter()
            .zip(&ana)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }

    let four = EmbeddingSet::new(
        1,
        [(0, -2.0), (0, -1.0), (1, 1.0), (1, 2.0)]
            .iter()
            .map(|&(l, x)| EmbeddingRecord::new(l, vec![x]))
            .collect(),
    )
    .unwrap();
    let cfg = LpTrainConfig {
        l2_strength: 0.01,
        ..Default::default()
    };
    let acc = train_lp(&four, &cfg)
        .unwrap()
        .training_accuracy(&four)
        .unwrap();

    let data = random_set(&mut rng, 300, 8, 4);
    let a = train_lp(&data, &LpTrainConfig::default()).unwrap();
    let b = train_lp(&data, &LpTrainConfig::default()).unwrap();
    let identical = a.to_bytes().unwrap() == b.to_bytes().unwrap();

    let pass = worst < 1e-6 && acc == 1.0 && identical;
    report(
        "linear probe correctness",
        pass,
        &format!("max gradient rel. error {worst:.2e}, 4-point accuracy {acc}, bit-identical retrain {identical}"),
    );
    pass
}

/// Random embeddings around and between the ID classes.
fn probe_points(rng: &mut ChaCha8Rng, dim: usize, n: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(-spread..spread))
                .collect()
        })
        .collect()
}

fn small_model() -> grood::GroodModel {
    let clouds = axis_clouds(6, 3.0, &[0.8, 1.0, 1.3]);
    let split = synthetic_split(&clouds, &[], 400, 10, 0, 5);
    common::fit(&split, &common::small_config(20_000))
}

fn criterion_5_monotone_nesting() -> bool {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let points = probe_points(&mut rng, 6, 1000, 4.0);
    let mut violations = 0;
    let (mut at_01, mut at_10) = (0, 0);
    for x in &points {
        let e = model.evaluate(x).unwrap();
        let strict = e.accepted(&model, 0.01);
        let loose = e.accepted(&model, 0.10);
        at_01 += strict as usize;
        at_10 += loose as usize;
        if loose && !strict {
            violations += 1;
        }
    }
    let pass = violations == 0 && at_10 > 0 && at_01 > at_10;
    report(
        "monotone nesting",
        pass,
        &format!("{violations} violations; accepted {at_01} at eps=0.01, {at_10} at eps=0.10"),
    );
    pass
}

fn criterion_6_score_decision_consistency() -> bool {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let points = probe_points(&mut rng, 6, 1000, 4.0);
    let grid = model.epsilon_grid().to_vec();
    let mut mismatches = 0;
    let mut accepted = 0;
    for x in &points {
        let score = model.calibrated_score(x).unwrap();
        for &eps in &grid {
            let by_score = score >= eps;
            let by_decide = matches!(model.decide(x, eps).unwrap(), grood::Verdict::Id(_));
            accepted += by_decide as usize;
            if by_score != by_decide {
                mismatches += 1;
            }
        }
    }
    let total = points.len() * grid.len();
    let pass = mismatches == 0 && accepted > 0 && accepted < total;
    report(
        "score/decision consistency",
        pass,
        &format!("{mismatches} mismatches over {total} (point, eps) pairs, {accepted} accepted"),
    );
    pass
}

struct ScenarioResult {
    lp: f64,
    nm: f64,
    calibrated: f64,
}

fn run_scenario(id: &[GaussianCloud], ood: &[GaussianCloud], seed: u64) -> ScenarioResult {
    let split = synthetic_split(id, ood, 2000, 2000, 3000, seed);
    let model = common::fit(&split, &common::small_config(100_000));
    let report =
        grood::pipeline::calibration_report(&model, &split.id_test, Some(&split.ood_test), &[0.05])
            .unwrap();
    let c = report.complementarity.unwrap();
    ScenarioResult {
        lp: c["max_logit"],
        nm: c["max_similarity"],
        calibrated: c["calibrated"],
    }
}

fn criterion_7_complementarity() -> bool {
    let dim = 16;
    let id = axis_clouds(dim, 4.0, &[1.0, 1.0, 1.0]);

    // (a) new classes at the same norm in directions the probe does not use,
    // but with a wide spread that hides them from the distance
    let near: Vec<GaussianCloud> = (3..6)
        .map(|k| {
            let mut m = vec![0.0; dim];
            m[k] = 4.0;
            GaussianCloud::isotropic(m, 0.8)
        })
        .collect();
    let a = run_scenario(&id, &near, 71);

    // (b) ID directions pushed out in norm: logits grow, distances grow too
    let far: Vec<GaussianCloud> = id
        .iter()
        .map(|c| GaussianCloud::isotropic(c.mean.iter().map(|m| m * 3.0).collect(), 1.0))
        .collect();
    let b = run_scenario(&id, &far, 72);

    let mut pass = true;
    let mut detail = Vec::new();
    for (name, r) in [("a: near-ID OOD", &a), ("b: norm-displaced OOD", &b)] {
        let ok = r.calibrated >= r.lp.max(r.nm) - 0.02;
        pass &= ok;
        detail.push(format!(
            "{name}: LP {:.4}, NM {:.4}, calibrated {:.4}",
            r.lp, r.nm, r.calibrated
        ));
    }
    // the two scenarios should favour different baselines
    detail.push(format!(
        "LP better in a: {}, NM better in b: {}",
        a.lp > a.nm,
        b.nm > b.lp
    ));
    report("LP/NM complementarity", pass, &detail.join("; "));
    pass
}

fn criterion_8_miscalibration_report() -> bool {
    let dim = 16;
    let id = axis_clouds(dim, 4.0, &[0.5, 1.0, 1.5]);
    let split = synthetic_split(&id, &[], 3000, 20_000, 0, 81);
    let model = common::fit(&split, &common::small_config(100_000));
    let eps = 0.10;
    let report = grood::pipeline::calibration_report(&model, &split.id_test, None, &[eps]).unwrap();
    let row = &report.rows[0];
    let pass = row.logit_spread >= 0.05 && row.calibrated_spread < 0.02;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|r| format!("{r:.4}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    report_line(pass, row, &fmt);
    pass
}

fn report_line(
    pass: bool,
    row: &grood::pipeline::MiscalibrationRow,
    fmt: &dyn Fn(&[f64]) -> String,
) {
    report(
        "mis-calibration report",
        pass,
        &format!(
            "eps={}: max-logit per-class rejection {} (spread {:.4}), calibrated {} (spread {:.4})",
            row.epsilon,
            fmt(&row.logit_rejection),
            row.logit_spread,
            fmt(&row.calibrated_rejection),
            row.calibrated_spread
        ),
    );
}

type Criterion = (&'static str, fn() -> bool);

fn main() {
    let criteria: [Criterion; 8] = [
        ("calibration fidelity", criterion_1_calibration_fidelity),
        (
            "Neyman-Pearson chi-square radius",
            criterion_2_neyman_pearson_chi_square,
        ),
        ("metric oracles", criterion_3_metric_oracles),
        (
            "linear probe correctness",
            criterion_4_linear_probe_correctness,
        ),
        ("monotone nesting", criterion_5_monotone_nesting),
        (
            "score/decision consistency",
            criterion_6_score_decision_consistency,
        ),
        ("LP/NM complementarity", criterion_7_complementarity),
        ("mis-calibration report", criterion_8_miscalibration_report),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let ok = std::panic::catch_unwind(run).unwrap_or_else(|_| {
            report(name, false, "panicked");
            false
        });
        failed += usize::from(!ok);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
