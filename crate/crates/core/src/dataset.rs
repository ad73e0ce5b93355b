//! Embedding sets, the `GEMB` binary container and split manifests.
//!
//! File layout (little-endian):
//!
//! ```text
//! "GEMB" | version u32 = 1 | dim u32 | count u64 | flags u32
//! count × ( [label i32 if flags & 1] dim × f32 )
//! ```
//!
//! Records without a stored label carry the OOD sentinel `-1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GEMB";
pub const VERSION: u32 = 1;
pub const FLAG_LABELS: u32 = 1;
/// Label carried by unlabeled and out-of-distribution records.
pub const OOD_LABEL: i32 = -1;

const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub label: i32,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(label: i32, vector: Vec<f32>) -> Self {
        Self { label, vector }
    }

    /// The vector promoted to `f64`, which is what all fitting works on.
    pub fn to_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    class_names: BTreeMap<i32, String>,
}

impl EmbeddingSet {
    /// Builds a set, checking dimensions, finiteness and labels. The set may be
    /// empty; [`load_embeddings`] is what rejects empty files.
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.vector.len(),
                });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { record: i });
            }
            if r.label < OOD_LABEL {
                return Err(Error::InvalidLabel {
                    record: i,
                    label: r.label,
                });
            }
        }
        Ok(Self {
            dim,
            records,
            class_names: BTreeMap::new(),
        })
    }

    pub fn with_class_names(mut self, names: BTreeMap<i32, String>) -> Self {
        self.class_names = names;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn class_names(&self) -> &BTreeMap<i32, String> {
        &self.class_names
    }

    /// Number of declared classes: one past the largest label, or the number
    /// of named classes if that is larger.
    pub fn class_count(&self) -> usize {
        let from_labels = self
            .records
            .iter()
            .filter(|r| r.label >= 0)
            .map(|r| r.label as usize + 1)
            .max()
            .unwrap_or(0);
        let from_names = self
            .class_names
            .keys()
            .filter(|&&k| k >= 0)
            .map(|&k| k as usize + 1)
            .max()
            .unwrap_or(0);
        from_labels.max(from_names)
    }

    /// Per-class record counts indexed by label, ignoring OOD records.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count()];
        for r in &self.records {
            if r.label >= 0 {
                sizes[r.label as usize] += 1;
            }
        }
        sizes
    }

    pub fn labels(&self) -> Vec<i32> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn vectors_f64(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(EmbeddingRecord::to_f64).collect()
    }

    pub fn has_labels(&self) -> bool {
        self.records.iter().any(|r| r.label != OOD_LABEL)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let labeled = self.has_labels();
        let rec_len = self.dim * 4 + if labeled { 4 } else { 0 };
        let mut out = Vec::with_capacity(HEADER_LEN + rec_len * self.records.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let flags = if labeled { FLAG_LABELS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for r in &self.records {
            if labeled {
                out.extend_from_slice(&r.label.to_le_bytes());
            }
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("missing magic".into()));
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!(
                "header needs {HEADER_LEN} bytes, file has {}",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let dim = u32_at(8) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let flags = u32_at(20);
        if dim == 0 {
            return Err(Error::Malformed("dimension is zero".into()));
        }
        if count == 0 {
            return Err(Error::EmptySet);
        }
        let labeled = flags & FLAG_LABELS != 0;
        let rec_len = dim * 4 + if labeled { 4 } else { 0 };
        let payload = &bytes[HEADER_LEN..];
        let expected = (count as u128) * (rec_len as u128);
        if (payload.len() as u128) < expected {
            return Err(Error::Truncated(format!(
                "{count} records of {rec_len} bytes need {expected} bytes, found {}",
                payload.len()
            )));
        }
        if (payload.len() as u128) > expected {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after last record",
                payload.len() as u128 - expected
            )));
        }
        let count = count as usize;
        let mut records = Vec::with_capacity(count);
        for (i, chunk) in payload.chunks_exact(rec_len).enumerate() {
            let (label, body) = if labeled {
                (
                    i32::from_le_bytes(chunk[..4].try_into().unwrap()),
                    &chunk[4..],
                )
            } else {
                (OOD_LABEL, chunk)
            };
            let vector: Vec<f32> = body
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { record: i });
            }
            if label < OOD_LABEL {
                return Err(Error::InvalidLabel { record: i, label });
            }
            records.push(EmbeddingRecord { label, vector });
        }
        Self::new(dim, records)
    }

    /// Subset by record index, keeping order and class names.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.records.get(i).ok_or(Error::IndexOutOfBounds {
                index: i,
                len: self.records.len(),
            })?;
            records.push(r.clone());
        }
        Ok(Self {
            dim: self.dim,
            records,
            class_names: self.class_names.clone(),
        })
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSet::from_bytes(&bytes)
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub id_train: Vec<usize>,
    pub id_test: Vec<usize>,
    pub ood_test: Vec<usize>,
    /// Names keyed by the original class index (JSON object keys are strings).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<BTreeMap<String, String>>,
}

impl SplitManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn parsed_class_names(&self) -> Result<BTreeMap<i32, String>> {
        let mut out = BTreeMap::new();
        if let Some(names) = &self.class_names {
            for (k, v) in names {
                let idx: i32 = k.parse().map_err(|_| {
                    Error::Malformed(format!("class_names key {k:?} is not an integer"))
                })?;
                out.insert(idx, v.clone());
            }
        }
        Ok(out)
    }

    /// Checks bounds, disjointness and the per-class training minimum.
    pub fn validate(&self, set: &EmbeddingSet) -> Result<()> {
        let len = set.len();
        let mut seen = BTreeSet::new();
        for &i in self
            .id_train
            .iter()
            .chain(&self.id_test)
            .chain(&self.ood_test)
        {
            if i >= len {
                return Err(Error::IndexOutOfBounds { index: i, len });
            }
            if !seen.insert(i) {
                return Err(Error::OverlappingSplit(i));
            }
        }
        let train_counts = self.train_class_counts(set)?;
        for (&class, &count) in &train_counts {
            if count < MIN_TRAIN_PER_CLASS {
                return Err(Error::TooFewSamples {
                    class,
                    count,
                    required: MIN_TRAIN_PER_CLASS,
                });
            }
        }
        for &i in &self.id_test {
            let label = set.records()[i].label;
            if !train_counts.contains_key(&label) {
                return Err(Error::ClassNotInTrain(label));
            }
        }
        Ok(())
    }

    fn train_class_counts(&self, set: &EmbeddingSet) -> Result<BTreeMap<i32, usize>> {
        let mut counts = BTreeMap::new();
        for &i in &self.id_train {
            let label = set.records()[i].label;
            if label < 0 {
                return Err(Error::InvalidLabel { record: i, label });
            }
            *counts.entry(label).or_insert(0) += 1;
        }
        Ok(counts)
    }
}

/// Minimum number of training records per in-distribution class.
pub const MIN_TRAIN_PER_CLASS: usize = 2;

/// Result of [`apply_split`]. The ID sets use dense labels `0..K`.
#[derive(Debug, Clone)]
pub struct Split {
    pub id_train: EmbeddingSet,
    pub id_test: EmbeddingSet,
    pub ood_test: EmbeddingSet,
    /// `class_map[dense] = original label`, ascending.
    pub class_map: Vec<i32>,
}

impl Split {
    pub fn class_count(&self) -> usize {
        self.class_map.len()
    }

    /// Display name for a dense class index: the manifest name if one was
    /// given, otherwise the original label.
    pub fn class_name(&self, dense: usize) -> String {
        self.id_train
            .class_names()
            .get(&(dense as i32))
            .cloned()
            .unwrap_or_else(|| self.class_map[dense].to_string())
    }
}

pub fn apply_split(set: &EmbeddingSet, manifest: &SplitManifest) -> Result<Split> {
    manifest.validate(set)?;
    let class_map: Vec<i32> = manifest.train_class_counts(set)?.into_keys().collect();
    let dense_of: BTreeMap<i32, i32> = class_map
        .iter()
        .enumerate()
        .map(|(d, &orig)| (orig, d as i32))
        .collect();

    let mut names = set.class_names().clone();
    names.extend(manifest.parsed_class_names()?);
    let dense_names: BTreeMap<i32, String> = names
        .iter()
        .filter_map(|(orig, name)| dense_of.get(orig).map(|&d| (d, name.clone())))
        .collect();

    let relabel = |indices: &[usize], ood: bool| -> Result<EmbeddingSet> {
        let records = indices
            .iter()
            .map(|&i| {
                let r = &set.records()[i];
                let label = if ood { OOD_LABEL } else { dense_of[&r.label] };
                EmbeddingRecord::new(label, r.vector.clone())
            })
            .collect();
        Ok(EmbeddingSet::new(set.dim(), records)?.with_class_names(dense_names.clone()))
    };

    Ok(Split {
        id_train: relabel(&manifest.id_train, false)?,
        id_test: relabel(&manifest.id_test, false)?,
        ood_test: relabel(&manifest.ood_test, true)?,
        class_map,
    })
}
