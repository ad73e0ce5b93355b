//! Seeded Gaussian embedding generators used by the CLI fixture and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{EmbeddingRecord, EmbeddingSet, SplitManifest};
use crate::error::Result;

/// Axis-aligned Gaussian cloud: `mean + std ⊙ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianCloud {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let std = vec![std; mean.len()];
        Self { mean, std }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                (m + s * z) as f32
            })
            .collect()
    }
}

/// `n` records from `cloud`, all carrying `label`.
pub fn draw(
    cloud: &GaussianCloud,
    label: i32,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<EmbeddingRecord> {
    (0..n)
        .map(|_| EmbeddingRecord::new(label, cloud.sample(rng)))
        .collect()
}

/// One labelled set with `n` records per cloud; cloud `k` gets label `k`.
pub fn labelled_set(clouds: &[GaussianCloud], n: usize, seed: u64) -> Result<EmbeddingSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = clouds[0].mean.len();
    let records = clouds
        .iter()
        .enumerate()
        .flat_map(|(k, c)| draw(c, k as i32, n, &mut rng))
        .collect();
    EmbeddingSet::new(dim, records)
}

/// `scale · e_k` for `k < count`, in `dim` dimensions.
pub fn axis_means(count: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let mut m = vec![0.0; dim];
            m[k] = scale;
            m
        })
        .collect()
}

/// `count` points evenly spaced on a circle of `radius`, starting at `(0, radius)`.
pub fn circle_means(count: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let a = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * k as f64 / count as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Small 2-D three-class fixture with a far-away OOD cloud, plus a manifest
/// that splits it into train, ID test and OOD test. Two dimensions keep a
/// class mean typical of its class in score space.
pub fn three_class_fixture(seed: u64) -> Result<(EmbeddingSet, SplitManifest)> {
    const DIM: usize = 2;
    const TRAIN: usize = 200;
    const TEST: usize = 100;
    let clouds: Vec<GaussianCloud> = circle_means(3, 4.0)
        .into_iter()
        .map(|m| GaussianCloud::isotropic(m, 0.2))
        .collect();
    let ood = GaussianCloud::isotropic(vec![10.0, 10.0], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut manifest = SplitManifest {
        name: "synthetic-3class".into(),
        id_train: Vec::new(),
        id_test: Vec::new(),
        ood_test: Vec::new(),
        class_names: Some(
            ["alpha", "beta", "gamma"]
                .iter()
                .enumerate()
                .map(|(k, n)| (k.to_string(), n.to_string()))
                .collect(),
        ),
    };
    for (k, cloud) in clouds.iter().enumerate() {
        for rec in draw(cloud, k as i32, TRAIN + TEST, &mut rng)
            .into_iter()
            .enumerate()
        {
            let idx = records.len();
            if rec.0 < TRAIN {
                manifest.id_train.push(idx);
            } else {
                manifest.id_test.push(idx);
            }
            records.push(rec.1);
        }
    }
    for rec in draw(&ood, 3, TEST, &mut rng) {
        manifest.ood_test.push(records.len());
        records.push(rec);
    }
    Ok((EmbeddingSet::new(DIM, records)?, manifest))
}
