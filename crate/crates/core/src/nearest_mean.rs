//! Nearest class-mean classifier and its `1 / (1 + d)` similarity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linear_probe::l2_normalized;
use crate::model_io::{self, PayloadReader};

#[derive(Debug, Clone, PartialEq)]
pub struct NearestMeanModel {
    /// Row-major `K × D`.
    means: Vec<f64>,
    class_count: usize,
    dim: usize,
    l2_normalize_inputs: bool,
}

/// Similarity used as the NM coordinate: `1 / (1 + d)`, in `(0, 1]`.
pub fn similarity_from_distance(d: f64) -> f64 {
    1.0 / (1.0 + d)
}

pub fn fit_nm(train: &EmbeddingSet) -> Result<NearestMeanModel> {
    fit_nm_with(train, false)
}

pub fn fit_nm_with(train: &EmbeddingSet, l2_normalize_inputs: bool) -> Result<NearestMeanModel> {
    let class_count = train.class_count();
    if class_count == 0 {
        return Err(Error::EmptySet);
    }
    let dim = train.dim();
    let mut sums = vec![0.0; class_count * dim];
    let mut counts = vec![0usize; class_count];
    for r in train.records() {
        if r.label < 0 {
            continue;
        }
        let k = r.label as usize;
        let mut v = r.to_f64();
        if l2_normalize_inputs {
            v = l2_normalized(&v);
        }
        for (s, x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(v) {
            *s += x;
        }
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::TooFewSamples {
            class: k as i32,
            count: 0,
            required: 1,
        });
    }
    for (k, &n) in counts.iter().enumerate() {
        sums[k * dim..(k + 1) * dim]
            .iter_mut()
            .for_each(|s| *s /= n as f64);
    }
    Ok(NearestMeanModel {
        means: sums,
        class_count,
        dim,
        l2_normalize_inputs,
    })
}

#[derive(Serialize, Deserialize)]
struct NmHeader {
    kind: String,
    class_count: usize,
    dim: usize,
    l2_normalize_inputs: bool,
}

const NM_KIND: &str = "nearest_mean";

impl NearestMeanModel {
    pub fn from_means(means: Vec<Vec<f64>>) -> Result<Self> {
        let class_count = means.len();
        if class_count == 0 {
            return Err(Error::EmptySet);
        }
        let dim = means[0].len();
        let mut flat = Vec::with_capacity(class_count * dim);
        for m in means {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.len(),
                });
            }
            flat.extend(m);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite class mean".into()));
        }
        Ok(Self {
            means: flat,
            class_count,
            dim,
            l2_normalize_inputs: false,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    pub fn distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let normalized;
        let x = if self.l2_normalize_inputs {
            normalized = l2_normalized(x);
            &normalized[..]
        } else {
            x
        };
        Ok((0..self.class_count)
            .map(|k| {
                self.mean(k)
                    .iter()
                    .zip(x)
                    .map(|(m, v)| (v - m) * (v - m))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    pub fn similarities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .distances(x)?
            .into_iter()
            .map(similarity_from_distance)
            .collect())
    }

    /// Maximum similarity over classes.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .similarities(x)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Class with the smallest distance, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let d = self.distances(x)?;
        let mut best = 0;
        for (k, &v) in d.iter().enumerate() {
            if v < d[best] {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = NmHeader {
            kind: NM_KIND.into(),
            class_count: self.class_count,
            dim: self.dim,
            l2_normalize_inputs: self.l2_normalize_inputs,
        };
        model_io::encode(&header, &self.means)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (NmHeader, _) = model_io::decode(bytes)?;
        if header.kind != NM_KIND {
            return Err(Error::Malformed(format!(
                "expected a {NM_KIND} model, found {}",
                header.kind
            )));
        }
        let mut reader = PayloadReader::new(&payload);
        let means = reader.take(header.class_count * header.dim)?.to_vec();
        reader.finish()?;
        Ok(Self {
            means,
            class_count: header.class_count,
            dim: header.dim,
            l2_normalize_inputs: header.l2_normalize_inputs,
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EmbeddingRecord;

    #[test]
    fn mean_of_two_points() {
        let set = EmbeddingSet::new(
            2,
            vec![
                EmbeddingRecord::new(0, vec![0.0, 0.0]),
                EmbeddingRecord::new(0, vec![2.0, 2.0]),
                EmbeddingRecord::new(1, vec![7.0, -1.0]),
            ],
        )
        .unwrap();
        let m = fit_nm(&set).unwrap();
        assert_eq!(m.mean(0), &[1.0, 1.0]);
        assert_eq!(m.mean(1), &[7.0, -1.0]);
    }

    #[test]
    fn empty_class_rejected() {
        let set = EmbeddingSet::new(1, vec![EmbeddingRecord::new(1, vec![0.0])]).unwrap();
        assert!(matches!(
            fit_nm(&set),
            Err(Error::TooFewSamples { class: 0, .. })
        ));
    }

    #[test]
    fn distances_and_similarities() {
        let m = NearestMeanModel::from_means(vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.distances(&[3.0, 4.0]).unwrap(), vec![5.0, 0.0]);
        let s = m.similarities(&[3.0, 4.0]).unwrap();
        assert!((s[0] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(s[1], 1.0);
        assert!(similarity_from_distance(1e9) < 1e-8);
        assert!(matches!(
            m.distances(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn predict_ties_to_lowest() {
        let m = NearestMeanModel::from_means(vec![vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        assert_eq!(m.predict(&[1.0, 0.0]).unwrap(), 0);
        assert_eq!(m.predict(&[5.0, 0.0]).unwrap(), 0);
        assert_eq!(m.predict(&[9.0, 0.0]).unwrap(), 1);
    }
}
