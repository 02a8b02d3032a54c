//! Type-cluster index: encoded training datapoints searched by k-nearest
//! neighbors, with neighbor votes weighted by inverse squared distance.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::CanonicalType;
use crate::embed::DatapointKind;
use crate::io::{read_f32_le, write_f32_le};
use crate::knn::{Backend, KnnIndex, Neighbor};

/// Keeps a zero distance from dividing by zero.
pub const EPSILON: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from an empty training set")]
    Empty,
    #[error("point {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, got: usize, expected: usize },
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index format: {0}")]
    Format(String),
}

#[derive(Debug, Clone)]
pub struct TypeClusterIndex {
    knn: KnnIndex,
    labels: Vec<CanonicalType>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Candidate types with probabilities, most likely first.
    pub ranked: Vec<(CanonicalType, f64)>,
    pub kind: Option<DatapointKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexManifest {
    dimension: usize,
    points: usize,
    backend: Backend,
    seed: u64,
}

impl TypeClusterIndex {
    pub fn build(points: Vec<(Vec<f32>, CanonicalType)>, backend: Backend, seed: u64) -> Result<Self, IndexError> {
        let dim = points.first().ok_or(IndexError::Empty)?.0.len();
        let mut rows = Vec::with_capacity(points.len() * dim);
        let mut labels = Vec::with_capacity(points.len());
        for (index, (v, label)) in points.into_iter().enumerate() {
            if v.len() != dim || dim == 0 {
                return Err(IndexError::Dimension {
                    index,
                    got: v.len(),
                    expected: dim,
                });
            }
            rows.extend(v);
            labels.push(label);
        }
        Ok(Self {
            knn: KnnIndex::build(dim, rows, backend, seed),
            labels,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.knn.dim()
    }

    pub fn labels(&self) -> &[CanonicalType] {
        &self.labels
    }

    pub fn neighbors(&self, query: &[f32], k: usize) -> Vec<Neighbor> {
        self.knn.knn(query, k)
    }

    /// Ranks candidate types among the `k` nearest points (`k` is clipped to
    /// the index size).
    pub fn predict(&self, query: &[f32], k: usize) -> Prediction {
        let neighbors = self.knn.knn(query, k.max(1));
        let votes: Vec<(&CanonicalType, f64)> = neighbors
            .iter()
            .map(|n| (&self.labels[n.index], n.distance))
            .collect();
        Prediction {
            ranked: rank_votes(&votes),
            kind: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir)?;
        write_f32_le(&dir.join("vectors.bin"), self.knn.rows())?;
        let mut labels = BufWriter::new(fs::File::create(dir.join("labels.jsonl"))?);
        for l in &self.labels {
            serde_json::to_writer(&mut labels, l).map_err(|e| IndexError::Format(e.to_string()))?;
            labels.write_all(b"\n")?;
        }
        labels.flush()?;
        let manifest = IndexManifest {
            dimension: self.dim(),
            points: self.len(),
            backend: self.knn.backend(),
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| IndexError::Format(e.to_string()))?;
        fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let manifest: IndexManifest = serde_json::from_slice(&fs::read(dir.join("index.json"))?)
            .map_err(|e| IndexError::Format(e.to_string()))?;
        let rows = read_f32_le(&dir.join("vectors.bin"))?;
        let mut labels = Vec::new();
        for line in BufReader::new(fs::File::open(dir.join("labels.jsonl"))?).lines() {
            labels.push(serde_json::from_str(&line?).map_err(|e| IndexError::Format(e.to_string()))?);
        }
        if rows.len() != manifest.dimension * manifest.points || labels.len() != manifest.points {
            return Err(IndexError::Format("vector and label counts disagree".into()));
        }
        Ok(Self {
            knn: KnnIndex::build(manifest.dimension, rows, manifest.backend, manifest.seed),
            labels,
            seed: manifest.seed,
        })
    }
}

/// Sums `1 / (d + ε)²` per type over the given neighbors, normalizes the
/// sums to probabilities and sorts by probability, then by type name.
pub fn rank_votes(votes: &[(&CanonicalType, f64)]) -> Vec<(CanonicalType, f64)> {
    let mut scores: BTreeMap<&CanonicalType, f64> = BTreeMap::new();
    for &(label, d) in votes {
        *scores.entry(label).or_default() += 1.0 / ((d + EPSILON) * (d + EPSILON));
    }
    let total: f64 = scores.values().sum();
    let mut ranked: Vec<(CanonicalType, f64)> = scores
        .into_iter()
        .map(|(t, s)| (t.clone(), s / total))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.canonical.cmp(&b.0.canonical)));
    ranked
}

/// The first `n` ranked types.
pub fn top_n(prediction: &Prediction, n: usize) -> &[(CanonicalType, f64)] {
    &prediction.ranked[..n.min(prediction.ranked.len())]
}
