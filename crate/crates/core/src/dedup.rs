//! Near-duplicate file removal.
//!
//! Files become TF-IDF vectors over the `d` terms with the highest
//! document frequency. Pairs whose cosine similarity reaches the threshold
//! are duplicate edges; connected components are clusters, and each
//! cluster keeps its lexicographically smallest path.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use rustpython_parser::Tok;
use serde::{Deserialize, Serialize};

use crate::extract::{CodeTokens, SourceFile};
use crate::knn::{Backend, KnnIndex};
use crate::tokenize::tokenize_identifier;

/// Above this many files the approximate neighbor search is used.
pub const EXACT_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Threshold {
    /// Duplicate iff cosine similarity ≥ value.
    Similarity(f64),
    /// Duplicate iff cosine distance (1 − similarity) ≤ value.
    CosineDistance(f64),
}

impl Threshold {
    pub fn as_similarity(self) -> f64 {
        match self {
            Threshold::Similarity(s) => s,
            Threshold::CosineDistance(d) => 1.0 - d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Brute force up to [`EXACT_LIMIT`] files, approximate above.
    Auto,
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedupParams {
    pub dimensions: usize,
    pub k: usize,
    pub threshold: Threshold,
    pub search: SearchMode,
    pub trees: usize,
    pub seed: u64,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            dimensions: 4096,
            k: 5,
            threshold: Threshold::Similarity(0.95),
            search: SearchMode::Auto,
            trees: 16,
            seed: 0,
        }
    }
}

/// Sparse unit-length TF-IDF vector, sorted by feature index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileVector {
    pub file_id: String,
    pub vector: Vec<(u32, f64)>,
}

impl FileVector {
    pub fn cosine(&self, other: &FileVector) -> f64 {
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < self.vector.len() && j < other.vector.len() {
            let (a, x) = self.vector[i];
            let (b, y) = other.vector[j];
            match a.cmp(&b) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += x * y;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot
    }

    fn dense(&self, dim: usize) -> Vec<f32> {
        let mut v = vec![0.0f32; dim];
        for &(i, x) in &self.vector {
            v[i as usize] = x as f32;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vectorized {
    pub vectors: Vec<FileVector>,
    /// Files with no usable tokens; never deduplicated.
    pub empty: Vec<String>,
    pub features: Vec<String>,
}

/// Tokens a file contributes to its TF-IDF vector: identifier sub-tokens,
/// keywords and literals. Punctuation and comments are dropped.
pub fn file_tokens(text: &str) -> Vec<String> {
    match CodeTokens::lex(text) {
        Ok(tokens) => {
            let mut out = Vec::new();
            for (tok, range) in tokens.all() {
                match tok {
                    Tok::Name { name } => out.extend(tokenize_identifier(name)),
                    Tok::String { value, .. } => out.push(value.clone()),
                    _ => {
                        let s = &text[*range];
                        if s.chars().next().is_some_and(|c| c.is_alphanumeric()) {
                            out.push(s.to_string());
                        }
                    }
                }
            }
            out
        }
        Err(_) => text
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|w| !w.is_empty())
            .flat_map(tokenize_identifier)
            .collect(),
    }
}

pub fn vectorize_files(files: &[SourceFile], dimensions: usize) -> Vectorized {
    let counts: Vec<BTreeMap<String, usize>> = files
        .par_iter()
        .map(|f| {
            let mut tf = BTreeMap::new();
            for t in file_tokens(&f.text) {
                *tf.entry(t).or_insert(0) += 1;
            }
            tf
        })
        .collect();

    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for tf in &counts {
        for term in tf.keys() {
            *df.entry(term).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(dimensions);
    ranked.sort_by(|a, b| a.0.cmp(b.0));

    let n = files.len() as f64;
    let features: Vec<String> = ranked.iter().map(|(t, _)| t.to_string()).collect();
    let idf: BTreeMap<&str, (u32, f64)> = ranked
        .iter()
        .enumerate()
        .map(|(i, &(t, d))| (t, (i as u32, (n / (1.0 + d as f64)).ln() + 1.0)))
        .collect();

    let mut vectors = Vec::new();
    let mut empty = Vec::new();
    for (file, tf) in files.iter().zip(&counts) {
        let mut v: Vec<(u32, f64)> = tf
            .iter()
            .filter_map(|(t, &c)| idf.get(t.as_str()).map(|&(i, w)| (i, c as f64 * w)))
            .collect();
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            empty.push(file.path.clone());
            continue;
        }
        v.sort_by_key(|&(i, _)| i);
        v.iter_mut().for_each(|(_, x)| *x /= norm);
        vectors.push(FileVector {
            file_id: file.path.clone(),
            vector: v,
        });
    }
    Vectorized {
        vectors,
        empty,
        features,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DuplicateClusters {
    /// Clusters with at least two files, each sorted; ordered by first member.
    pub clusters: Vec<Vec<String>>,
    /// Every file that survives: singletons plus one per cluster. Sorted.
    pub kept: Vec<String>,
    pub removed: Vec<String>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Duplicate pairs `(i, j)`, `i < j`, by brute force over all pairs.
fn exact_edges(vectors: &[FileVector], sim: f64) -> Vec<(usize, usize)> {
    (0..vectors.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..vectors.len())
                .filter(move |&j| vectors[i].cosine(&vectors[j]) >= sim)
                .map(move |j| (i, j))
        })
        .collect()
}

/// Duplicate pairs among each file's `k` approximate nearest neighbors.
fn approximate_edges(vectors: &[FileVector], params: &DedupParams, sim: f64) -> Vec<(usize, usize)> {
    let dim = vectors
        .iter()
        .flat_map(|v| v.vector.last().map(|&(i, _)| i as usize + 1))
        .max()
        .unwrap_or(1);
    let rows: Vec<f32> = vectors.iter().flat_map(|v| v.dense(dim)).collect();
    let backend = Backend::Forest {
        trees: params.trees,
        leaf_size: 32,
        search_k: 0,
    };
    let index = KnnIndex::build(dim, rows, backend, params.seed);
    let mut edges = Vec::new();
    for i in 0..vectors.len() {
        for nb in index.knn(index.row(i), params.k + 1) {
            if nb.index != i && vectors[i].cosine(&vectors[nb.index]) >= sim {
                edges.push((i.min(nb.index), i.max(nb.index)));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn find_duplicates(vectors: &[FileVector], params: &DedupParams) -> DuplicateClusters {
    find_duplicates_with_empty(vectors, &[], params)
}

/// Like [`find_duplicates`], with extra files that are always kept.
pub fn find_duplicates_with_empty(vectors: &[FileVector], always_kept: &[String], params: &DedupParams) -> DuplicateClusters {
    // Sorted input makes the union-find independent of caller order.
    let mut order: Vec<&FileVector> = vectors.iter().collect();
    order.sort_by(|a, b| a.file_id.cmp(&b.file_id));
    let sorted: Vec<FileVector> = order.into_iter().cloned().collect();

    let sim = params.threshold.as_similarity();
    let approximate = match params.search {
        SearchMode::Exact => false,
        SearchMode::Approximate => true,
        SearchMode::Auto => sorted.len() > EXACT_LIMIT,
    };
    let edges = if approximate {
        approximate_edges(&sorted, params, sim)
    } else {
        exact_edges(&sorted, sim)
    };

    let mut uf = UnionFind::new(sorted.len());
    for (a, b) in edges {
        uf.union(a, b);
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, v) in sorted.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(v.file_id.clone());
    }

    let mut out = DuplicateClusters::default();
    let mut kept: BTreeSet<String> = always_kept.iter().cloned().collect();
    for (_, members) in groups {
        kept.insert(members[0].clone());
        if members.len() > 1 {
            out.removed.extend(members[1..].iter().cloned());
            out.clusters.push(members);
        }
    }
    out.kept = kept.into_iter().collect();
    out.removed.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub criterion: String,
    pub params: DedupParams,
    pub files: usize,
    pub empty_files: Vec<String>,
    #[serde(flatten)]
    pub result: DuplicateClusters,
}

/// Vectorizes, clusters and reports in one call.
pub fn deduplicate(files: &[SourceFile], params: &DedupParams) -> DedupReport {
    let v = vectorize_files(files, params.dimensions);
    let result = find_duplicates_with_empty(&v.vectors, &v.empty, params);
    DedupReport {
        criterion: format!(
            "cosine similarity >= {} (cosine distance <= {})",
            params.threshold.as_similarity(),
            1.0 - params.threshold.as_similarity()
        ),
        params: *params,
        files: files.len(),
        empty_files: v.empty,
        result,
    }
}
