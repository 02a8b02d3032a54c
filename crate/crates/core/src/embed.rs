//! Token embeddings and fixed-length input sequences.
//!
//! One table serves identifier sub-tokens and code-context tokens alike.
//! Row 0 is `<pad>` and stays zero, row 1 is the separator placed between
//! identifier groups, row 2 is `<oov>`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::CanonicalType;
use crate::extract::{ArgumentRecord, FunctionRecord};
use crate::io::{read_f32_le, read_json, write_f32_le, write_json};

pub const PAD: &str = "<pad>";
pub const SEP: &str = "<sep>";
pub const OOV: &str = "<oov>";
pub const PAD_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const OOV_ID: u32 = 2;
const RESERVED: [&str; 3] = [PAD, SEP, OOV];

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no token reaches the minimum count of {min_count}")]
    EmptyVocabulary { min_count: usize },
    #[error("embedding io: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipGramParams {
    pub dim: usize,
    pub window: usize,
    pub negative: usize,
    pub min_count: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for SkipGramParams {
    fn default() -> Self {
        Self {
            dim: 100,
            window: 5,
            negative: 5,
            min_count: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    dim: usize,
    vectors: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TableSidecar {
    dim: usize,
    tokens: Vec<String>,
    params: SkipGramParams,
}

impl EmbeddingTable {
    fn from_parts(tokens: Vec<String>, dim: usize, vectors: Vec<f32>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            tokens,
            index,
            dim,
            vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Row of a token; unknown tokens map to `<oov>`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn row(&self, id: u32) -> &[f32] {
        let i = id as usize * self.dim;
        &self.vectors[i..i + self.dim]
    }

    pub fn vector(&self, token: &str) -> &[f32] {
        self.row(self.id(token))
    }

    /// Token ids truncated or right-padded with `<pad>` to `len`.
    pub fn ids<S: AsRef<str>>(&self, tokens: &[S], len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokens.iter().take(len).map(|t| self.id(t.as_ref())).collect();
        ids.resize(len, PAD_ID);
        ids
    }

    pub fn save(&self, dir: &Path, params: &SkipGramParams) -> Result<(), EmbedError> {
        fs::create_dir_all(dir)?;
        write_f32_le(&dir.join("embeddings.bin"), &self.vectors)?;
        write_json(
            &dir.join("embeddings.json"),
            &TableSidecar {
                dim: self.dim,
                tokens: self.tokens.clone(),
                params: *params,
            },
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EmbedError> {
        let sidecar: TableSidecar = read_json(&dir.join("embeddings.json"))?;
        let vectors = read_f32_le(&dir.join("embeddings.bin"))?;
        if vectors.len() != sidecar.tokens.len() * sidecar.dim {
            return Err(EmbedError::Format("row count does not match vocabulary".into()));
        }
        Ok(Self::from_parts(sidecar.tokens, sidecar.dim, vectors))
    }

    /// Table from explicit rows; `<pad>` is forced to zero.
    pub fn from_rows(extra_tokens: &[&str], dim: usize, mut vectors: Vec<f32>) -> Self {
        let tokens: Vec<String> = RESERVED.iter().chain(extra_tokens).map(|s| s.to_string()).collect();
        assert_eq!(vectors.len(), tokens.len() * dim);
        vectors[..dim].iter_mut().for_each(|x| *x = 0.0);
        Self::from_parts(tokens, dim, vectors)
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling, single-threaded and deterministic
/// for a given seed. Tokens below `min_count` are dropped from training
/// and resolve to `<oov>` at lookup.
pub fn train_embeddings<S: AsRef<str>>(sentences: &[Vec<S>], params: &SkipGramParams) -> Result<EmbeddingTable, EmbedError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= params.min_count && t != PAD && t != OOV)
        .collect();
    if vocab.is_empty() {
        return Err(EmbedError::EmptyVocabulary {
            min_count: params.min_count,
        });
    }
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut row_counts = vec![0usize; RESERVED.len()];
    for &(t, c) in &vocab {
        if t == SEP {
            row_counts[SEP_ID as usize] = c;
        } else {
            tokens.push(t.to_string());
            row_counts.push(c);
        }
    }
    let table_index: HashMap<&str, u32> = tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();

    let dim = params.dim;
    let rows = tokens.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut syn0: Vec<f32> = (0..rows * dim).map(|_| (rng.gen::<f32>() - 0.5) / dim as f32).collect();
    syn0[..dim].iter_mut().for_each(|x| *x = 0.0);
    let mut syn1 = vec![0.0f32; rows * dim];

    // Noise distribution ∝ count^0.75 over trained rows.
    let mut cumulative = Vec::with_capacity(rows);
    let mut acc = 0.0f64;
    for &c in &row_counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }

    let encoded: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|t| table_index.get(t.as_ref()).copied()).filter(|&i| row_counts[i as usize] > 0).collect())
        .collect();
    let words_per_epoch: usize = encoded.iter().map(Vec::len).sum();
    let total = (words_per_epoch * params.epochs).max(1) as f32;
    let min_lr = params.learning_rate * 1e-4;

    let mut processed = 0usize;
    let mut neu1e = vec![0.0f32; dim];
    for _ in 0..params.epochs {
        for sentence in &encoded {
            for (pos, &center) in sentence.iter().enumerate() {
                let lr = (params.learning_rate * (1.0 - processed as f32 / total)).max(min_lr);
                processed += 1;
                let reduced = rng.gen_range(0..params.window.max(1));
                let span = params.window.saturating_sub(reduced);
                let lo = pos.saturating_sub(span);
                let hi = (pos + span).min(sentence.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let input = sentence[ctx_pos] as usize * dim;
                    neu1e.iter_mut().for_each(|x| *x = 0.0);
                    for d in 0..=params.negative {
                        let (target, label) = if d == 0 {
                            (center as usize, 1.0)
                        } else {
                            let r = rng.gen::<f64>() * acc;
                            let t = cumulative.partition_point(|&c| c <= r).min(rows - 1);
                            if t == center as usize {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = target * dim;
                        let f: f32 = (0..dim).map(|k| syn0[input + k] * syn1[out + k]).sum();
                        let g = (label - sigmoid(f)) * lr;
                        for k in 0..dim {
                            neu1e[k] += g * syn1[out + k];
                            syn1[out + k] += g * syn0[input + k];
                        }
                    }
                    for k in 0..dim {
                        syn0[input + k] += neu1e[k];
                    }
                }
            }
        }
    }
    syn0[..dim].iter_mut().for_each(|x| *x = 0.0);
    Ok(EmbeddingTable::from_parts(tokens, dim, syn0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatapointKind {
    Argument,
    Return,
}

/// How long usage lists are cut down to the context sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextWindow {
    /// Center window of each statement, windows concatenated.
    PerStatement,
    /// Statements concatenated, then one center window.
    Concatenated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub identifier_len: usize,
    pub context_len: usize,
    pub window: usize,
    pub max_statements: usize,
    pub context_window: ContextWindow,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            identifier_len: 31,
            context_len: 49,
            window: 7,
            max_statements: 7,
            context_window: ContextWindow::PerStatement,
        }
    }
}

/// `N_arg ∘ <sep> ∘ N_f ∘ N_args`.
pub fn argument_identifier_tokens(arg: &ArgumentRecord, function: &FunctionRecord) -> Vec<String> {
    let mut out = arg.name_tokens.clone();
    out.push(SEP.to_string());
    out.extend(function.name_tokens.iter().cloned());
    out.extend(function.all_argument_tokens().cloned());
    out
}

/// `N_f ∘ <sep> ∘ N_args`.
pub fn return_identifier_tokens(function: &FunctionRecord) -> Vec<String> {
    let mut out = function.name_tokens.clone();
    out.push(SEP.to_string());
    out.extend(function.all_argument_tokens().cloned());
    out
}

pub fn build_argument_sequence(table: &EmbeddingTable, arg: &ArgumentRecord, function: &FunctionRecord, len: usize) -> Vec<u32> {
    table.ids(&argument_identifier_tokens(arg, function), len)
}

pub fn build_return_sequence(table: &EmbeddingTable, function: &FunctionRecord, len: usize) -> Vec<u32> {
    table.ids(&return_identifier_tokens(function), len)
}

/// The middle `n` items; when the overhang is odd the extra item comes
/// off the right end.
pub fn center_window<T>(seq: &[T], n: usize) -> &[T] {
    if seq.len() <= n {
        return seq;
    }
    let start = (seq.len() - n) / 2;
    &seq[start..start + n]
}

pub fn context_tokens(statements: &[Vec<String>], params: &SequenceParams) -> Vec<String> {
    let kept = &statements[..statements.len().min(params.max_statements)];
    match params.context_window {
        ContextWindow::PerStatement => kept
            .iter()
            .flat_map(|s| center_window(s, params.window).iter().cloned())
            .collect(),
        ContextWindow::Concatenated => {
            let all: Vec<String> = kept.concat();
            center_window(&all, params.window).to_vec()
        }
    }
}

pub fn build_context_sequence(table: &EmbeddingTable, statements: &[Vec<String>], params: &SequenceParams) -> Vec<u32> {
    table.ids(&context_tokens(statements, params), params.context_len)
}

/// Encoder input for one argument or return slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBundle {
    pub module_path: String,
    pub function: String,
    pub argument: Option<String>,
    pub kind: DatapointKind,
    pub identifier_seq: Vec<u32>,
    pub context_seq: Vec<u32>,
    /// Set positions of the visible-type mask.
    pub visible: Vec<usize>,
    pub mask_len: usize,
    pub label: Option<CanonicalType>,
}

impl SequenceBundle {
    pub fn mask(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.mask_len];
        for &i in &self.visible {
            m[i] = 1;
        }
        m
    }
}

/// Bundles for every non-receiver argument and, unless excluded, the
/// return slot of a function.
pub fn bundles_for_function(
    table: &EmbeddingTable,
    function: &FunctionRecord,
    visible: &[usize],
    mask_len: usize,
    params: &SequenceParams,
) -> Vec<SequenceBundle> {
    let mut out = Vec::new();
    let make = |kind, argument: Option<String>, identifier_seq, context_seq, label: Option<CanonicalType>| SequenceBundle {
        module_path: function.module_path.clone(),
        function: function.qualified_name.clone(),
        argument,
        kind,
        identifier_seq,
        context_seq,
        visible: visible.to_vec(),
        mask_len,
        label,
    };
    for arg in function.arguments.iter().filter(|a| !a.is_receiver) {
        out.push(make(
            DatapointKind::Argument,
            Some(arg.name.clone()),
            build_argument_sequence(table, arg, function, params.identifier_len),
            build_context_sequence(table, &arg.usage_sequences, params),
            arg.label.clone(),
        ));
    }
    if function.emit_return {
        out.push(make(
            DatapointKind::Return,
            None,
            build_return_sequence(table, function, params.identifier_len),
            build_context_sequence(table, &function.return_exprs, params),
            function.return_label.clone(),
        ));
    }
    out
}

/// Training sentences for the embedding: identifier sequences of every
/// slot plus every usage and return statement.
pub fn embedding_sentences<'a>(functions: impl IntoIterator<Item = &'a FunctionRecord>) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for f in functions {
        for arg in f.arguments.iter().filter(|a| !a.is_receiver) {
            out.push(argument_identifier_tokens(arg, f));
            out.extend(arg.usage_sequences.iter().cloned());
        }
        out.push(return_identifier_tokens(f));
        out.extend(f.return_exprs.iter().cloned());
    }
    out
}
