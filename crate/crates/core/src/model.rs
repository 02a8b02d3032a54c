//! Two-branch bidirectional LSTM encoder projected into the type-cluster
//! space, trained with a margin triplet loss.
//!
//! Parameters live in one flat `f64` buffer so the optimizer, gradient
//! check and checkpoint code can treat them uniformly. Layout: four LSTMs
//! (identifier forward/backward, context forward/backward), each holding
//! input weights `4H x d`, recurrent weights `4H x H` and bias `4H` with
//! gate rows ordered input, forget, candidate, output; then the projection
//! weights `D x (4H + T + 1)` and bias `D`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbeddingTable, SequenceBundle, PAD_ID};
use crate::io::{derive_seed, read_f32_le, read_json, write_f32_le, write_json};

/// Triplets per gradient chunk; chunks are summed in a fixed order so the
/// result does not depend on the number of worker threads.
const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration mismatch: {0}")]
    Config(String),
    #[error("no valid triplet: need two examples of one type and at least two distinct types")]
    UnminableTriplets,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden units per direction.
    pub hidden: usize,
    pub output_dim: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub clip_norm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            output_dim: 4096,
            dropout: 0.25,
            learning_rate: 0.002,
            epochs: 15,
            batch_size: 2536,
            margin: 2.0,
            clip_norm: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 32,
            output_dim: 128,
            batch_size: 64,
            ..Self::default()
        }
    }
}

/// Dimensions fixed at construction; every bundle must agree with them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub mask_len: usize,
    pub identifier_len: usize,
    pub context_len: usize,
}

impl Shape {
    fn lstm_size(&self) -> usize {
        let g = 4 * self.hidden;
        g * self.embedding_dim + g * self.hidden + g
    }

    pub fn features(&self) -> usize {
        4 * self.hidden + self.mask_len
    }

    pub fn param_count(&self) -> usize {
        4 * self.lstm_size() + self.output_dim * self.features() + self.output_dim
    }

    fn projection_offset(&self) -> usize {
        4 * self.lstm_size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    shape: Shape,
    params: Vec<f64>,
}

pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (margin + l2(a, p) - l2(a, n)).max(0.0)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Embedded branch input after dropout. `scale` holds the per-element
/// dropout factor and is empty when dropout is off.
struct BranchInput<'a> {
    ids: &'a [u32],
    x: Vec<f64>,
    scale: Vec<f64>,
}

/// Activations of one LSTM direction, in processing order.
struct Trace {
    order: Vec<usize>,
    gates: Vec<f64>,
    cells: Vec<f64>,
    hidden: Vec<f64>,
}

struct Forward<'a> {
    inputs: [BranchInput<'a>; 2],
    traces: [Trace; 4],
    features: Vec<f64>,
    output: Vec<f64>,
}

impl EncoderModel {
    /// Uniform initialization in `±1/sqrt(fan)`, per layer.
    pub fn new(shape: Shape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(shape.param_count());
        let k = 1.0 / (shape.hidden as f64).sqrt();
        for _ in 0..4 * shape.lstm_size() {
            params.push(rng.gen_range(-k..k));
        }
        let k = 1.0 / (shape.features() as f64).sqrt();
        for _ in 0..shape.output_dim * (shape.features() + 1) {
            params.push(rng.gen_range(-k..k));
        }
        Self { shape, params }
    }

    pub fn from_params(shape: Shape, params: Vec<f64>) -> Result<Self, ModelError> {
        if params.len() != shape.param_count() {
            return Err(ModelError::Config(format!(
                "{} parameters for a shape needing {}",
                params.len(),
                shape.param_count()
            )));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn check(&self, table: &EmbeddingTable, bundle: &SequenceBundle) -> Result<(), ModelError> {
        let s = &self.shape;
        if table.dim() != s.embedding_dim {
            return Err(ModelError::Config(format!(
                "embedding dimension {} but model expects {}",
                table.dim(),
                s.embedding_dim
            )));
        }
        let checks = [
            ("identifier sequence", bundle.identifier_seq.len(), s.identifier_len),
            ("context sequence", bundle.context_seq.len(), s.context_len),
            ("visible mask", bundle.mask_len, s.mask_len),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(ModelError::Config(format!("{what} has length {got}, expected {want}")));
            }
        }
        let rows = table.len() as u32;
        if bundle.identifier_seq.iter().chain(&bundle.context_seq).any(|&id| id >= rows) {
            return Err(ModelError::Config("token id outside the embedding table".into()));
        }
        if bundle.visible.iter().any(|&i| i >= s.mask_len) {
            return Err(ModelError::Config("visible index outside the mask".into()));
        }
        Ok(())
    }

    /// Inference-mode encoding (no dropout).
    pub fn forward(&self, table: &EmbeddingTable, bundle: &SequenceBundle) -> Result<Vec<f64>, ModelError> {
        self.check(table, bundle)?;
        Ok(self.run(table, bundle, None).output)
    }

    pub fn encode(&self, table: &EmbeddingTable, bundle: &SequenceBundle) -> Result<Vec<f32>, ModelError> {
        Ok(self.forward(table, bundle)?.into_iter().map(|v| v as f32).collect())
    }

    /// Encodes many bundles in parallel; output order matches input order.
    pub fn encode_all(&self, table: &EmbeddingTable, bundles: &[SequenceBundle]) -> Result<Vec<Vec<f32>>, ModelError> {
        bundles.par_iter().map(|b| self.encode(table, b)).collect()
    }

    fn lstm(&self, k: usize) -> &[f64] {
        let size = self.shape.lstm_size();
        &self.params[k * size..(k + 1) * size]
    }

    fn embed<'a>(&self, table: &EmbeddingTable, ids: &'a [u32], dropout: Option<(f64, &mut ChaCha8Rng)>) -> BranchInput<'a> {
        let d = self.shape.embedding_dim;
        let mut x = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            x.extend(table.row(id).iter().map(|&v| f64::from(v)));
        }
        let mut scale = Vec::new();
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                scale = (0..x.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
                x.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
            }
        }
        BranchInput { ids, x, scale }
    }

    fn run_lstm(&self, k: usize, input: &BranchInput, reverse: bool) -> Trace {
        let (d, h) = (self.shape.embedding_dim, self.shape.hidden);
        let g4 = 4 * h;
        let p = self.lstm(k);
        let (w_ih, rest) = p.split_at(g4 * d);
        let (w_hh, bias) = rest.split_at(g4 * h);
        let len = input.ids.len();
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        let mut gates = vec![0.0; len * g4];
        let mut cells = vec![0.0; len * h];
        let mut hidden = vec![0.0; len * h];
        let mut a = vec![0.0; g4];
        for (step, &pos) in order.iter().enumerate() {
            a.copy_from_slice(bias);
            if input.ids[pos] != PAD_ID {
                let x = &input.x[pos * d..(pos + 1) * d];
                for (r, ar) in a.iter_mut().enumerate() {
                    *ar += dot(&w_ih[r * d..(r + 1) * d], x);
                }
            }
            if step > 0 {
                let hp = &hidden[(step - 1) * h..step * h];
                for (r, ar) in a.iter_mut().enumerate() {
                    *ar += dot(&w_hh[r * h..(r + 1) * h], hp);
                }
            }
            let gs = &mut gates[step * g4..(step + 1) * g4];
            for j in 0..h {
                gs[j] = sigmoid(a[j]);
                gs[h + j] = sigmoid(a[h + j]);
                gs[2 * h + j] = a[2 * h + j].tanh();
                gs[3 * h + j] = sigmoid(a[3 * h + j]);
            }
            for j in 0..h {
                let prev = if step > 0 { cells[(step - 1) * h + j] } else { 0.0 };
                let c = gs[h + j] * prev + gs[j] * gs[2 * h + j];
                cells[step * h + j] = c;
                hidden[step * h + j] = gs[3 * h + j] * c.tanh();
            }
        }
        Trace {
            order,
            gates,
            cells,
            hidden,
        }
    }

    fn run<'a>(&self, table: &EmbeddingTable, bundle: &'a SequenceBundle, mut dropout: Option<(f64, &mut ChaCha8Rng)>) -> Forward<'a> {
        let s = self.shape;
        let id_in = self.embed(table, &bundle.identifier_seq, dropout.as_mut().map(|(rate, r)| (*rate, &mut **r)));
        let ctx_in = self.embed(table, &bundle.context_seq, dropout.as_mut().map(|(rate, r)| (*rate, &mut **r)));
        let traces = [
            self.run_lstm(0, &id_in, false),
            self.run_lstm(1, &id_in, true),
            self.run_lstm(2, &ctx_in, false),
            self.run_lstm(3, &ctx_in, true),
        ];
        let h = s.hidden;
        let mut features = Vec::with_capacity(s.features());
        for t in &traces {
            let len = t.order.len();
            if len == 0 {
                features.extend(std::iter::repeat(0.0).take(h));
            } else {
                features.extend_from_slice(&t.hidden[(len - 1) * h..len * h]);
            }
        }
        features.extend(bundle.mask().into_iter().map(f64::from));
        let f = s.features();
        let off = s.projection_offset();
        let (w, b) = self.params[off..].split_at(s.output_dim * f);
        let output = (0..s.output_dim).map(|r| b[r] + dot(&w[r * f..(r + 1) * f], &features)).collect();
        Forward {
            inputs: [id_in, ctx_in],
            traces,
            features,
            output,
        }
    }

    /// Accumulates the parameter gradient of `dy · output` into `grad`, and
    /// the embedding-row gradient into `emb` when given (the pad row is
    /// frozen and never receives gradient).
    fn backward(&self, fwd: &Forward, dy: &[f64], grad: &mut [f64], mut emb: Option<&mut [f64]>) {
        let s = self.shape;
        let (h, d, f) = (s.hidden, s.embedding_dim, s.features());
        let off = s.projection_offset();
        let w = &self.params[off..off + s.output_dim * f];
        let (gw, gb) = grad[off..].split_at_mut(s.output_dim * f);
        let mut dfeat = vec![0.0; f];
        for r in 0..s.output_dim {
            let g = dy[r];
            if g == 0.0 {
                continue;
            }
            gb[r] += g;
            let row = &mut gw[r * f..(r + 1) * f];
            for (gi, fi) in row.iter_mut().zip(&fwd.features) {
                *gi += g * fi;
            }
            for (df, wi) in dfeat.iter_mut().zip(&w[r * f..(r + 1) * f]) {
                *df += g * wi;
            }
        }
        let size = s.lstm_size();
        for k in 0..4 {
            let input = &fwd.inputs[k / 2];
            let mut dx = emb.as_ref().map(|_| vec![0.0; input.ids.len() * d]);
            self.backprop_lstm(
                k,
                input,
                &fwd.traces[k],
                &dfeat[k * h..(k + 1) * h],
                &mut grad[k * size..(k + 1) * size],
                dx.as_deref_mut(),
            );
            if let (Some(e), Some(dx)) = (emb.as_deref_mut(), dx) {
                for (pos, &id) in input.ids.iter().enumerate() {
                    if id == PAD_ID {
                        continue;
                    }
                    let row = &mut e[id as usize * d..(id as usize + 1) * d];
                    for j in 0..d {
                        let sc = if input.scale.is_empty() { 1.0 } else { input.scale[pos * d + j] };
                        row[j] += dx[pos * d + j] * sc;
                    }
                }
            }
        }
    }

    fn backprop_lstm(&self, k: usize, input: &BranchInput, trace: &Trace, dh_final: &[f64], grad: &mut [f64], mut dx: Option<&mut [f64]>) {
        let (d, h) = (self.shape.embedding_dim, self.shape.hidden);
        let g4 = 4 * h;
        let p = self.lstm(k);
        let w_ih = &p[..g4 * d];
        let w_hh = &p[g4 * d..g4 * d + g4 * h];
        let (g_ih, rest) = grad.split_at_mut(g4 * d);
        let (g_hh, g_b) = rest.split_at_mut(g4 * h);
        let len = trace.order.len();
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; h];
        let mut da = vec![0.0; g4];
        for step in (0..len).rev() {
            let gs = &trace.gates[step * g4..(step + 1) * g4];
            for j in 0..h {
                let c = trace.cells[step * h + j];
                let tc = c.tanh();
                let (i, fg, g, o) = (gs[j], gs[h + j], gs[2 * h + j], gs[3 * h + j]);
                let c_prev = if step > 0 { trace.cells[(step - 1) * h + j] } else { 0.0 };
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                da[j] = dcj * g * i * (1.0 - i);
                da[h + j] = dcj * c_prev * fg * (1.0 - fg);
                da[2 * h + j] = dcj * i * (1.0 - g * g);
                da[3 * h + j] = dh[j] * tc * o * (1.0 - o);
                dc[j] = dcj * fg;
            }
            for (gb, a) in g_b.iter_mut().zip(&da) {
                *gb += a;
            }
            let pos = trace.order[step];
            if input.ids[pos] != PAD_ID {
                let x = &input.x[pos * d..(pos + 1) * d];
                for (r, &a) in da.iter().enumerate() {
                    axpy(&mut g_ih[r * d..(r + 1) * d], a, x);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let out = &mut dx[pos * d..(pos + 1) * d];
                    for (r, &a) in da.iter().enumerate() {
                        axpy(out, a, &w_ih[r * d..(r + 1) * d]);
                    }
                }
            }
            dh.iter_mut().for_each(|v| *v = 0.0);
            if step > 0 {
                let hp = &trace.hidden[(step - 1) * h..step * h];
                for (r, &a) in da.iter().enumerate() {
                    axpy(&mut g_hh[r * h..(r + 1) * h], a, hp);
                    axpy(&mut dh, a, &w_hh[r * h..(r + 1) * h]);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Loss and gradients for one triplet.
#[derive(Debug, Clone)]
pub struct TripletGradient {
    pub loss: f64,
    pub params: Vec<f64>,
    /// Gradient per embedding-table row, row-major; only filled on request.
    pub embeddings: Vec<f64>,
}

/// Loss and parameter gradient for one triplet. `dropout` is a rate and
/// seed for training-mode input dropout.
pub fn triplet_gradient(
    model: &EncoderModel,
    table: &EmbeddingTable,
    triplet: [&SequenceBundle; 3],
    margin: f64,
    dropout: Option<(f64, u64)>,
    with_embeddings: bool,
) -> TripletGradient {
    let mut rng = dropout.map(|(rate, seed)| (rate, ChaCha8Rng::seed_from_u64(seed)));
    let fwd: Vec<Forward> = triplet
        .iter()
        .map(|b| model.run(table, b, rng.as_mut().map(|(rate, r)| (*rate, r))))
        .collect();
    let (a, p, n) = (&fwd[0].output, &fwd[1].output, &fwd[2].output);
    let (dp, dn) = (l2(a, p), l2(a, n));
    let loss = (margin + dp - dn).max(0.0);
    let mut params = vec![0.0; model.param_count()];
    let mut embeddings = if with_embeddings { vec![0.0; table.len() * table.dim()] } else { Vec::new() };
    if loss > 0.0 {
        let dim = a.len();
        let mut ga = vec![0.0; dim];
        let mut gp = vec![0.0; dim];
        let mut gn = vec![0.0; dim];
        for i in 0..dim {
            let up = if dp > 0.0 { (a[i] - p[i]) / dp } else { 0.0 };
            let un = if dn > 0.0 { (a[i] - n[i]) / dn } else { 0.0 };
            ga[i] = up - un;
            gp[i] = -up;
            gn[i] = un;
        }
        for (f, dy) in fwd.iter().zip([&ga, &gp, &gn]) {
            let emb = if with_embeddings { Some(embeddings.as_mut_slice()) } else { None };
            model.backward(f, dy, &mut params, emb);
        }
    }
    TripletGradient {
        loss,
        params,
        embeddings,
    }
}

fn inference_loss(model: &EncoderModel, table: &EmbeddingTable, triplet: [&SequenceBundle; 3], margin: f64) -> f64 {
    let out: Vec<Vec<f64>> = triplet.iter().map(|b| model.run(table, b, None).output).collect();
    triplet_loss(&out[0], &out[1], &out[2], margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub parameters: usize,
    pub loss: f64,
}

/// Compares the analytic gradient with central differences of step `h` for
/// every parameter. Relative error is `|a - n| / max(|a| + |n|, 1e-7)`.
pub fn gradient_check(
    model: &EncoderModel,
    table: &EmbeddingTable,
    triplet: [&SequenceBundle; 3],
    margin: f64,
    h: f64,
) -> GradientCheck {
    let analytic = triplet_gradient(model, table, triplet, margin, None, false);
    let mut probe = model.clone();
    let mut worst = (0.0, 0);
    for i in 0..model.param_count() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = inference_loss(&probe, table, triplet, margin);
        probe.params[i] = orig - h;
        let down = inference_loss(&probe, table, triplet, margin);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.params[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    GradientCheck {
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        parameters: model.param_count(),
        loss: analytic.loss,
    }
}

/// Samples, for each eligible anchor, a positive of the same type and a
/// negative of another type. Groups are ordered by first occurrence, so
/// renaming types consistently does not change the sampled triplets.
#[derive(Debug, Clone)]
pub struct TripletMiner {
    group_of: Vec<Option<usize>>,
    groups: Vec<Vec<usize>>,
    anchors: Vec<usize>,
}

impl TripletMiner {
    /// `labels[i]` is the type of datapoint `i`; unlabeled points are `None`
    /// and never take part.
    pub fn new(labels: Vec<Option<String>>) -> Result<Self, ModelError> {
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_of = Vec::with_capacity(labels.len());
        for (i, l) in labels.into_iter().enumerate() {
            group_of.push(l.map(|l| {
                let g = *ids.entry(l).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[g].push(i);
                g
            }));
        }
        let mut anchors: Vec<usize> = groups.iter().filter(|g| g.len() >= 2).flatten().copied().collect();
        if groups.len() < 2 || anchors.is_empty() {
            return Err(ModelError::UnminableTriplets);
        }
        anchors.sort_unstable();
        Ok(Self {
            group_of,
            groups,
            anchors,
        })
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn sample(&self, anchor: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let own = self.group_of[anchor].expect("anchor is labeled");
        let group = &self.groups[own];
        let at = group.binary_search(&anchor).expect("anchor belongs to its group");
        let mut j = rng.gen_range(0..group.len() - 1);
        if j >= at {
            j += 1;
        }
        let positive = group[j];
        let labeled: usize = self.groups.iter().map(Vec::len).sum();
        let mut r = rng.gen_range(0..labeled - group.len());
        let mut negative = 0;
        for (g, members) in self.groups.iter().enumerate() {
            if g == own {
                continue;
            }
            if r < members.len() {
                negative = members[r];
                break;
            }
            r -= members.len();
        }
        (positive, negative)
    }

    /// One triplet per anchor, anchors in shuffled order.
    pub fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<[usize; 3]> {
        let mut order = self.anchors.clone();
        order.shuffle(rng);
        order
            .into_iter()
            .map(|a| {
                let (p, n) = self.sample(a, rng);
                [a, p, n]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean validation loss per epoch; training loss is used when the
    /// validation set has no minable triplet.
    pub valid_losses: Vec<f64>,
    pub valid_from_train: bool,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub triplets_per_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mean gradient over a batch, summed chunk by chunk in a fixed order.
fn batch_gradient(
    model: &EncoderModel,
    table: &EmbeddingTable,
    bundles: &[SequenceBundle],
    batch: &[([usize; 3], u64)],
    margin: f64,
    dropout: f64,
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = vec![0.0; model.param_count()];
            let mut loss = 0.0;
            for &([a, p, n], seed) in chunk {
                let g = triplet_gradient(model, table, [&bundles[a], &bundles[p], &bundles[n]], margin, Some((dropout, seed)), false);
                loss += g.loss;
                axpy(&mut sum, 1.0, &g.params);
            }
            (loss, sum)
        })
        .collect();
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        axpy(&mut grad, 1.0, &g);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss, grad)
}

fn mean_loss(model: &EncoderModel, table: &EmbeddingTable, bundles: &[SequenceBundle], triplets: &[[usize; 3]], margin: f64) -> f64 {
    let losses: Vec<f64> = triplets
        .par_iter()
        .map(|&[a, p, n]| inference_loss(model, table, [&bundles[a], &bundles[p], &bundles[n]], margin))
        .collect();
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

/// Trains with Adam on resampled triplets and returns the parameters from
/// the epoch with the lowest validation loss. Validation triplets take
/// their anchors from `valid` and positives/negatives from both sets.
pub fn train(
    mut model: EncoderModel,
    table: &EmbeddingTable,
    train_set: &[SequenceBundle],
    valid_set: &[SequenceBundle],
    config: &ModelConfig,
    seed: u64,
) -> Result<(EncoderModel, TrainReport), ModelError> {
    for b in train_set.iter().chain(valid_set) {
        model.check(table, b)?;
    }
    let miner = TripletMiner::new(train_set.iter().map(|b| b.label.as_ref().map(|l| l.canonical.clone())).collect())?;

    let pooled: Vec<SequenceBundle> = train_set.iter().chain(valid_set).cloned().collect();
    let pooled_labels: Vec<Option<String>> = pooled.iter().map(|b| b.label.as_ref().map(|l| l.canonical.clone())).collect();
    let valid_triplets: Vec<[usize; 3]> = match TripletMiner::new(pooled_labels) {
        Ok(pool) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "valid-triplets"));
            pool.anchors()
                .iter()
                .filter(|&&a| a >= train_set.len())
                .map(|&a| {
                    let (p, n) = pool.sample(a, &mut rng);
                    [a, p, n]
                })
                .collect()
        }
        Err(_) => Vec::new(),
    };
    let valid_from_train = valid_triplets.is_empty();
    if valid_from_train {
        log::warn!("validation set has no minable triplet; selecting checkpoints by training loss");
    }

    let mut adam = Adam {
        m: vec![0.0; model.param_count()],
        v: vec![0.0; model.param_count()],
        t: 0,
    };
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        valid_losses: Vec::new(),
        valid_from_train,
        best_epoch: 0,
        best_valid_loss: f64::INFINITY,
        triplets_per_epoch: miner.anchors().len(),
    };
    let mut best = model.params.clone();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch-{epoch}")));
        let triplets: Vec<([usize; 3], u64)> = miner.epoch(&mut rng).into_iter().map(|t| (t, rng.gen())).collect();
        let mut total = 0.0;
        for batch in triplets.chunks(config.batch_size.max(1)) {
            let (loss, mut grad) = batch_gradient(&model, table, train_set, batch, config.margin, config.dropout);
            total += loss;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if config.clip_norm > 0.0 && norm > config.clip_norm {
                let s = config.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(&mut model.params, &grad, config.learning_rate);
        }
        let train_loss = total / triplets.len() as f64;
        let valid_loss = if valid_from_train {
            train_loss
        } else {
            mean_loss(&model, table, &pooled, &valid_triplets, config.margin)
        };
        log::info!("epoch {}: train loss {train_loss:.5}, valid loss {valid_loss:.5}", epoch + 1);
        report.epoch_losses.push(train_loss);
        report.valid_losses.push(valid_loss);
        if valid_loss < report.best_valid_loss {
            report.best_valid_loss = valid_loss;
            report.best_epoch = epoch + 1;
            best.copy_from_slice(&model.params);
        }
    }
    model.params = best;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub shape: Shape,
    pub param_count: usize,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub valid_loss: f64,
}

/// Writes `model.bin` (little-endian f32) and `model.json`.
pub fn save_checkpoint(dir: &Path, model: &EncoderModel, manifest: &CheckpointManifest) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let values: Vec<f32> = model.params.iter().map(|&v| v as f32).collect();
    write_f32_le(&dir.join("model.bin"), &values)?;
    write_json(&dir.join("model.json"), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(EncoderModel, CheckpointManifest), ModelError> {
    let manifest: CheckpointManifest = read_json(&dir.join("model.json")).map_err(|e| ModelError::Format(e.to_string()))?;
    let params: Vec<f64> = read_f32_le(&dir.join("model.bin"))?.into_iter().map(f64::from).collect();
    let model = EncoderModel::from_params(manifest.shape, params).map_err(|e| ModelError::Format(e.to_string()))?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::CanonicalType;
    use crate::embed::{DatapointKind, SEP_ID};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, prop_assert_ne, proptest};

    fn table(words: usize, dim: usize, seed: u64) -> EmbeddingTable {
        let names: Vec<String> = (0..words).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..(words + 3) * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        EmbeddingTable::from_rows(&refs, dim, rows)
    }

    fn shape() -> Shape {
        Shape {
            embedding_dim: 3,
            hidden: 3,
            output_dim: 4,
            mask_len: 3,
            identifier_len: 4,
            context_len: 5,
        }
    }

    fn bundle(ids: &[u32], ctx: &[u32], visible: &[usize], label: &str) -> SequenceBundle {
        SequenceBundle {
            module_path: "m.py".into(),
            function: "f".into(),
            argument: Some("x".into()),
            kind: DatapointKind::Argument,
            identifier_seq: ids.to_vec(),
            context_seq: ctx.to_vec(),
            visible: visible.to_vec(),
            mask_len: 3,
            label: Some(CanonicalType::from_canonical(label)),
        }
    }

    fn random_bundle(rng: &mut ChaCha8Rng, label: &str) -> SequenceBundle {
        let mut seq = |len: usize| -> Vec<u32> {
            let used = rng.gen_range(1..=len);
            (0..len).map(|i| if i < used { rng.gen_range(1..9) } else { PAD_ID }).collect()
        };
        let ids = seq(4);
        let ctx = seq(5);
        bundle(&ids, &ctx, &[rng.gen_range(0..3)], label)
    }

    #[test]
    fn loss_examples() {
        let a = [0.0, 0.0];
        assert_eq!(triplet_loss(&a, &a, &[3.0, 0.0], 2.0), 0.0);
        assert_eq!(triplet_loss(&a, &[1.0, 0.0], &[0.0, 1.0], 2.0), 2.0);
        assert_eq!(triplet_loss(&a, &[0.5, 0.0], &[0.0, 2.0], 2.0), 0.5);
    }

    proptest! {
        #[test]
        fn loss_is_hinge(v in prop::collection::vec(-5.0f64..5.0, 9), m in 0.0f64..4.0) {
            let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
            let loss = triplet_loss(a, p, n, m);
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, l2(a, n) >= m + l2(a, p));
        }

        #[test]
        fn mined_triplets_respect_labels(labels in prop::collection::vec(0u8..4, 3..40), seed in any::<u64>()) {
            let named: Vec<Option<String>> = labels.iter().map(|l| Some(format!("T{l}"))).collect();
            match TripletMiner::new(named) {
                Ok(miner) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    for [a, p, n] in miner.epoch(&mut rng) {
                        prop_assert!(a != p);
                        prop_assert_eq!(labels[a], labels[p]);
                        prop_assert_ne!(labels[a], labels[n]);
                    }
                }
                Err(ModelError::UnminableTriplets) => {
                    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
                    let repeated = distinct.iter().any(|l| labels.iter().filter(|x| x == l).count() >= 2);
                    prop_assert!(distinct.len() < 2 || !repeated);
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.learning_rate, c.dropout, c.margin), (0.002, 0.25, 2.0));
        assert_eq!((c.output_dim, c.epochs, c.batch_size), (4096, 15, 2536));
    }

    #[test]
    fn output_dimension_and_determinism() {
        let t = table(8, 3, 1);
        let m = EncoderModel::new(shape(), 2);
        let b = bundle(&[3, SEP_ID, 4, 0], &[5, 6, 0, 0, 0], &[1], "int");
        let y = m.forward(&t, &b).unwrap();
        assert_eq!(y.len(), 4);
        assert_eq!(y, m.forward(&t, &b.clone()).unwrap());
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn default_shape_outputs_4096() {
        let s = Shape {
            embedding_dim: 4,
            hidden: 4,
            output_dim: ModelConfig::default().output_dim,
            mask_len: 3,
            identifier_len: 4,
            context_len: 5,
        };
        let y = EncoderModel::new(s, 0).forward(&table(8, 4, 0), &bundle(&[3, 0, 0, 0], &[0; 5], &[0], "int")).unwrap();
        assert_eq!(y.len(), 4096);
    }

    #[test]
    fn padded_input_ignores_input_weights() {
        let t = table(8, 3, 1);
        let m = EncoderModel::new(shape(), 5);
        let empty = bundle(&[0; 4], &[0; 5], &[], "int");
        let y = m.forward(&t, &empty).unwrap();
        let s = shape();
        let size = s.lstm_size();
        let mut perturbed = m.clone();
        for k in 0..4 {
            perturbed.params[k * size..k * size + 4 * s.hidden * s.embedding_dim]
                .iter_mut()
                .for_each(|w| *w += 0.7);
        }
        assert_eq!(perturbed.forward(&t, &empty).unwrap(), y);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weights_and_input_give_projection_bias() {
        let t = table(8, 3, 1);
        let mut m = EncoderModel::new(shape(), 5);
        let off = shape().projection_offset();
        m.params[..off].fill(0.0);
        let y = m.forward(&t, &bundle(&[0; 4], &[0; 5], &[], "int")).unwrap();
        let bias = &m.params[m.param_count() - 4..];
        assert_eq!(y, bias);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = EncoderModel::new(shape(), 0);
        let b = bundle(&[3, 0, 0], &[0; 5], &[0], "int");
        assert!(matches!(m.forward(&table(8, 3, 0), &b), Err(ModelError::Config(_))));
        let b = bundle(&[3, 0, 0, 0], &[0; 5], &[0], "int");
        assert!(matches!(m.forward(&table(8, 2, 0), &b), Err(ModelError::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = table(8, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 3 {
            let m = EncoderModel::new(shape(), rng.gen());
            let tr = [random_bundle(&mut rng, "a"), random_bundle(&mut rng, "a"), random_bundle(&mut rng, "b")];
            let r = gradient_check(&m, &t, [&tr[0], &tr[1], &tr[2]], 2.0, 1e-4);
            if r.loss <= 0.0 {
                continue;
            }
            assert!(r.max_relative_error <= 1e-3, "{r:?}");
            checked += 1;
        }
    }

    #[test]
    fn inactive_margin_has_zero_gradient() {
        let t = table(8, 3, 3);
        let m = EncoderModel::new(shape(), 4);
        let b = bundle(&[3, 4, 0, 0], &[5, 0, 0, 0, 0], &[0], "a");
        let other = bundle(&[6, 7, 0, 0], &[8, 0, 0, 0, 0], &[2], "b");
        let g = triplet_gradient(&m, &t, [&b, &b, &other], 0.0, None, true);
        assert_eq!(g.loss, 0.0);
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_row_gets_no_gradient() {
        let t = table(8, 3, 3);
        let m = EncoderModel::new(shape(), 4);
        let a = bundle(&[0; 4], &[0; 5], &[0], "a");
        let p = bundle(&[3, 0, 0, 0], &[4, 4, 0, 0, 0], &[1], "a");
        let n = bundle(&[0; 4], &[0; 5], &[0], "b");
        let g = triplet_gradient(&m, &t, [&a, &p, &n], 50.0, Some((0.25, 9)), true);
        assert!(g.loss > 0.0);
        assert!(g.embeddings[..3].iter().all(|&v| v == 0.0));
        assert!(g.embeddings[3 * 3..4 * 3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encoding_is_per_example() {
        let t = table(8, 3, 1);
        let m = EncoderModel::new(shape(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bundles: Vec<_> = (0..6).map(|_| random_bundle(&mut rng, "a")).collect();
        let forward = m.encode_all(&t, &bundles).unwrap();
        let mut reversed = bundles.clone();
        reversed.reverse();
        let mut back = m.encode_all(&t, &reversed).unwrap();
        back.reverse();
        assert_eq!(forward, back);
    }

    #[test]
    fn single_type_is_unminable() {
        let labels = vec![Some("int".to_string()); 4];
        assert!(matches!(TripletMiner::new(labels), Err(ModelError::UnminableTriplets)));
        let singletons = vec![Some("int".to_string()), Some("str".to_string())];
        assert!(matches!(TripletMiner::new(singletons), Err(ModelError::UnminableTriplets)));
    }

    fn toy_sets(relabel: bool) -> (Vec<SequenceBundle>, Vec<SequenceBundle>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let names = if relabel { ["Z", "Y"] } else { ["int", "str"] };
        let mut make = |n: usize| -> Vec<SequenceBundle> {
            (0..n)
                .map(|i| {
                    let class = i % 2;
                    let word = 3 + class as u32 * 3 + rng.gen_range(0..3);
                    bundle(&[word, SEP_ID, 0, 0], &[word, 0, 0, 0, 0], &[class], names[class])
                })
                .collect()
        };
        (make(24), make(8))
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            hidden: 3,
            output_dim: 4,
            epochs: 5,
            batch_size: 8,
            learning_rate: 0.01,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let t = table(8, 3, 5);
        let (tr, va) = toy_sets(false);
        let run = || train(EncoderModel::new(shape(), 1), &t, &tr, &va, &toy_config(), 7).unwrap();
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(r1.epoch_losses.last() < r1.epoch_losses.first(), "{:?}", r1.epoch_losses);
        assert!(!r1.valid_from_train);
        assert_eq!(r1.valid_losses[r1.best_epoch - 1], r1.best_valid_loss);
    }

    #[test]
    fn relabeling_types_keeps_losses() {
        let t = table(8, 3, 5);
        let (tr, va) = toy_sets(false);
        let (tr2, va2) = toy_sets(true);
        let (_, a) = train(EncoderModel::new(shape(), 1), &t, &tr, &va, &toy_config(), 7).unwrap();
        let (_, b) = train(EncoderModel::new(shape(), 1), &t, &tr2, &va2, &toy_config(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = EncoderModel::new(shape(), 8);
        let manifest = CheckpointManifest {
            shape: shape(),
            param_count: m.param_count(),
            config: toy_config(),
            seed: 8,
            epoch: 3,
            valid_loss: 0.5,
        };
        save_checkpoint(dir.path(), &m, &manifest).unwrap();
        let (back, man) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(man, manifest);
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }
}
