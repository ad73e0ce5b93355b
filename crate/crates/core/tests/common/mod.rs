#![allow(dead_code)]

use grood::config::RunConfig;
use grood::dataset::{EmbeddingRecord, EmbeddingSet, Split};
use grood::synthetic::{axis_means, draw, GaussianCloud};
use grood::GroodModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Isotropic clouds at `scale · e_k`, one per std value.
pub fn axis_clouds(dim: usize, scale: f64, stds: &[f64]) -> Vec<GaussianCloud> {
    axis_means(stds.len(), dim, scale)
        .into_iter()
        .zip(stds)
        .map(|(m, &s)| GaussianCloud::isotropic(m, s))
        .collect()
}

/// Builds a split directly from clouds: `n_train` and `n_test` records per ID
/// cloud and `n_ood` records from each OOD cloud.
pub fn synthetic_split(
    id: &[GaussianCloud],
    ood: &[GaussianCloud],
    n_train: usize,
    n_test: usize,
    n_ood: usize,
    seed: u64,
) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = id[0].mean.len();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, c) in id.iter().enumerate() {
        train.extend(draw(c, k as i32, n_train, &mut rng));
        test.extend(draw(c, k as i32, n_test, &mut rng));
    }
    let mut ood_records: Vec<EmbeddingRecord> = Vec::new();
    for c in ood {
        ood_records.extend(draw(c, -1, n_ood, &mut rng));
    }
    Split {
        id_train: EmbeddingSet::new(dim, train).unwrap(),
        id_test: EmbeddingSet::new(dim, test).unwrap(),
        ood_test: EmbeddingSet::new(dim, ood_records).unwrap(),
        class_map: (0..id.len() as i32).collect(),
    }
}

pub fn fit(split: &Split, config: &RunConfig) -> GroodModel {
    grood::pipeline::fit_split(split, config).unwrap()
}

pub fn small_config(mc_samples: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.ood_prior.mc_samples = mc_samples;
    c
}
