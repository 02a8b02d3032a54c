//! End-to-end pipeline: extract, dedup, split, embed, train, index and
//! evaluate, each stage persisting its artifacts plus a manifest so later
//! stages (and reruns) can pick up from disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::CanonicalType;
use crate::dedup::{deduplicate, DedupParams};
use crate::embed::{
    bundles_for_function, embedding_sentences, train_embeddings, EmbeddingTable, SequenceBundle, SequenceParams,
    SkipGramParams, PAD_ID,
};
use crate::extract::{extract_corpus, parse_source, read_corpus, ParsedModule, SourceFile};
use crate::io::{derive_seed, file_sha256, read_json, read_jsonl, sha256_hex, write_json, write_jsonl};
use crate::knn::Backend;
use crate::metrics::{evaluate, label_counts, type_frequency_report, EvalReport, FrequencyReport};
use crate::model::{load_checkpoint, save_checkpoint, train, CheckpointManifest, EncoderModel, ModelConfig, Shape};
use crate::typecluster::TypeClusterIndex;
use crate::visible::{build_import_graph, module_id, ImportGraph, VisibleTypeVocab};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

trait StageResult<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: std::fmt::Display> StageResult<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Neighbors consulted per prediction.
    pub k: usize,
    pub backend: Backend,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            k: 10,
            backend: Backend::default_forest(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub top_n: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { top_n: vec![1, 3, 5, 10] }
    }
}

/// Which encoder inputs are kept. A disabled input is replaced by padding
/// (sequences) or by a mask holding only the `other` bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_identifiers: bool,
    pub use_context: bool,
    pub use_visible: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_identifiers: true,
            use_context: true,
            use_visible: true,
        }
    }
}

impl Ablation {
    pub fn is_full(&self) -> bool {
        self.use_identifiers && self.use_context && self.use_visible
    }

    fn disabled(&self) -> Vec<(&'static str, &'static str)> {
        let mut out = Vec::new();
        if !self.use_identifiers {
            out.push(("identifiers", "identifiers"));
        }
        if !self.use_context {
            out.push(("context", "code context"));
        }
        if !self.use_visible {
            out.push(("visible", "visible type hints"));
        }
        out
    }

    /// Directory suffix for stages that depend on the ablation.
    pub fn tag(&self) -> String {
        let d = self.disabled();
        if d.is_empty() {
            "full".into()
        } else {
            format!("no-{}", d.iter().map(|x| x.0).collect::<Vec<_>>().join("-"))
        }
    }

    /// Report label, e.g. "w/o identifiers".
    pub fn label(&self) -> String {
        let d = self.disabled();
        if d.is_empty() {
            "full model".into()
        } else {
            format!("w/o {}", d.iter().map(|x| x.1).collect::<Vec<_>>().join(", "))
        }
    }

    /// Disables one input by its short name (`identifiers`, `context`, `visible`).
    pub fn disable(&mut self, name: &str) -> Result<(), PipelineError> {
        match name {
            "identifiers" => self.use_identifiers = false,
            "context" => self.use_context = false,
            "visible" => self.use_visible = false,
            other => return Err(PipelineError::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    pub fn apply(&self, bundle: &mut SequenceBundle) {
        if !self.use_identifiers {
            bundle.identifier_seq.fill(PAD_ID);
        }
        if !self.use_context {
            bundle.context_seq.fill(PAD_ID);
        }
        if !self.use_visible {
            bundle.visible = vec![bundle.mask_len - 1];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(PipelineError::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub output: PathBuf,
    /// Root seed; every stage derives its own seed from it by name.
    pub seed: u64,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    pub threads: usize,
    /// Size of the visible-type vocabulary, excluding the `other` slot.
    pub visible_types: usize,
    pub dedup: DedupParams,
    pub split: SplitRatios,
    pub embedding: SkipGramParams,
    pub sequence: SequenceParams,
    pub model: ModelConfig,
    pub index: IndexConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            corpus: PathBuf::from("corpus"),
            output: PathBuf::from("out"),
            seed: 0,
            threads: 0,
            visible_types: 1024,
            dedup: DedupParams::default(),
            split: SplitRatios::default(),
            embedding: SkipGramParams::default(),
            sequence: SequenceParams::default(),
            model: ModelConfig::default(),
            index: IndexConfig::default(),
            eval: EvalConfig::default(),
            ablation: Ablation::default(),
        };
        match preset {
            Preset::Paper => base,
            Preset::Desk => Self {
                visible_types: 256,
                embedding: SkipGramParams {
                    dim: 32,
                    ..base.embedding
                },
                model: ModelConfig::desk(),
                ..base
            },
        }
    }

    /// Reads TOML on top of a preset: keys present in the file win.
    pub fn from_toml(text: &str, preset: Preset) -> Result<Self, PipelineError> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| PipelineError::Config(e.to_string()))?;
        merge(&mut base, overrides);
        let config: Self = base.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text, preset)?;
        // Relative paths are taken from the config file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.corpus, &mut config.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let r = self.split;
        if [r.train, r.valid, r.test].iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.train + r.valid + r.test - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {}/{}/{}",
                r.train, r.valid, r.test
            )));
        }
        let positive = [
            ("visible_types", self.visible_types),
            ("sequence.identifier_len", self.sequence.identifier_len),
            ("sequence.context_len", self.sequence.context_len),
            ("embedding.dim", self.embedding.dim),
            ("model.hidden", self.model.hidden),
            ("model.output_dim", self.model.output_dim),
            ("model.batch_size", self.model.batch_size),
            ("index.k", self.index.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(PipelineError::Config("model.dropout must be in [0, 1)".into()));
        }
        if self.eval.top_n.is_empty() || self.eval.top_n.contains(&0) {
            return Err(PipelineError::Config("eval.top_n needs positive entries".into()));
        }
        Ok(())
    }

    /// Hash of every setting except the corpus and output locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.corpus = PathBuf::new();
        c.output = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("need at least 3 files to split, got {0}")]
    TooFewFiles(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of the files, cut by the ratios (rounded, every split
/// non-empty). Each list is returned sorted.
pub fn split_dataset(files: &[String], ratios: SplitRatios, seed: u64) -> Result<Split, SplitError> {
    let n = files.len();
    if n < 3 {
        return Err(SplitError::TooFewFiles(n));
    }
    let mut shuffled: Vec<String> = files.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = ((n as f64 * ratios.valid).round() as usize).max(1);
    let mut test = ((n as f64 * ratios.test).round() as usize).max(1);
    while valid + test > n - 1 {
        if test >= valid {
            test -= 1;
        } else {
            valid -= 1;
        }
    }
    let train = n - valid - test;
    let mut take = |k: usize| {
        let mut part: Vec<String> = shuffled.drain(..k).collect();
        part.sort();
        part
    };
    Ok(Split {
        train: take(train),
        valid: take(valid),
        test: take(test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// Hash of the settings and inputs this stage depends on; a rerun with
    /// the same key and intact outputs is skipped.
    pub stage_key: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

/// Where a prediction is wanted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Argument(String),
    Return,
}

struct StageSpec {
    name: &'static str,
    dir: PathBuf,
    seed: u64,
    inputs: BTreeMap<String, String>,
    key: String,
}

pub struct Pipeline {
    config: PipelineConfig,
    pool: rayon::ThreadPool,
}

/// Corpus modules with their import graph and the visible-type vocabulary.
struct Dataset {
    modules: Vec<ParsedModule>,
    graph: ImportGraph,
    vocab: VisibleTypeVocab,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self { config, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.config.output.join(stage)
    }

    fn tagged(&self, stage: &str) -> PathBuf {
        self.dir(&format!("{stage}-{}", self.config.ablation.tag()))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.tagged("train")
    }

    pub fn index_dir(&self) -> PathBuf {
        self.tagged("index")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.tagged("eval")
    }

    fn spec(&self, name: &'static str, dir: PathBuf, settings: serde_json::Value, inputs: BTreeMap<String, String>) -> StageSpec {
        let seed = derive_seed(self.config.seed, name);
        let key_material = serde_json::json!({ "stage": name, "seed": seed, "settings": settings, "inputs": inputs });
        StageSpec {
            name,
            dir,
            seed,
            key: sha256_hex(key_material.to_string().as_bytes()),
            inputs,
        }
    }

    fn is_cached(&self, spec: &StageSpec) -> bool {
        let Ok(m) = read_json::<StageManifest>(&spec.dir.join("manifest.json")) else {
            return false;
        };
        m.stage_key == spec.key
            && m.outputs
                .iter()
                .all(|(name, hash)| file_sha256(&spec.dir.join(name)).is_ok_and(|h| &h == hash))
    }

    fn finish(&self, spec: &StageSpec) -> Result<(), PipelineError> {
        let mut outputs = BTreeMap::new();
        let mut names: Vec<String> = fs::read_dir(&spec.dir)
            .stage(spec.name)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.json")
            .collect();
        names.sort();
        for n in names {
            outputs.insert(n.clone(), file_sha256(&spec.dir.join(&n)).stage(spec.name)?);
        }
        let manifest = StageManifest {
            stage: spec.name.to_string(),
            config_hash: self.config.hash(),
            stage_key: spec.key.clone(),
            seed: spec.seed,
            inputs: spec.inputs.clone(),
            outputs,
        };
        write_json(&spec.dir.join("manifest.json"), &manifest).stage(spec.name)
    }

    /// Identifies a finished stage's outputs for downstream cache keys.
    fn outputs_hash(&self, stage: &'static str, upstream: &str, dir: &Path) -> Result<String, PipelineError> {
        let m: StageManifest = read_json(&dir.join("manifest.json")).map_err(|e| PipelineError::Stage {
            stage,
            message: format!("no {upstream} artifacts in {} ({e}); run `{upstream}` first", dir.display()),
        })?;
        Ok(sha256_hex(serde_json::to_string(&m.outputs).expect("map serializes").as_bytes()))
    }

    fn run_stage(&self, spec: StageSpec, body: impl FnOnce(&Path) -> Result<(), PipelineError> + Send) -> Result<StageStatus, PipelineError> {
        if self.is_cached(&spec) {
            log::info!("{}: up to date, skipped", spec.name);
            return Ok(StageStatus::Cached);
        }
        log::info!("{}: running", spec.name);
        fs::create_dir_all(&spec.dir).stage(spec.name)?;
        self.pool.install(|| body(&spec.dir))?;
        self.finish(&spec)?;
        Ok(StageStatus::Ran)
    }

    fn corpus(&self, stage: &'static str) -> Result<(Vec<SourceFile>, String), PipelineError> {
        let files = read_corpus(&self.config.corpus).stage(stage)?;
        let mut listing = Vec::new();
        for f in &files {
            listing.push((f.path.as_str(), sha256_hex(f.text.as_bytes())));
        }
        let hash = sha256_hex(serde_json::to_string(&listing).expect("listing serializes").as_bytes());
        Ok((files, hash))
    }

    pub fn extract(&self) -> Result<StageStatus, PipelineError> {
        let (files, corpus_hash) = self.corpus("extract")?;
        let spec = self.spec(
            "extract",
            self.dir("extract"),
            serde_json::json!({ "visible_types": self.config.visible_types }),
            BTreeMap::from([("corpus".to_string(), corpus_hash)]),
        );
        let size = self.config.visible_types;
        self.run_stage(spec, |dir| {
            let extraction = extract_corpus(&files);
            let graph = build_import_graph(&extraction.modules);
            let sets = graph.visible_sets();
            let vocab = VisibleTypeVocab::build(sets.values(), size);
            write_jsonl(&dir.join("modules.jsonl"), &extraction.modules).stage("extract")?;
            write_json(&dir.join("graph.json"), &graph).stage("extract")?;
            write_json(&dir.join("vocab.json"), &vocab).stage("extract")?;
            write_json(&dir.join("report.json"), &extraction.report).stage("extract")?;
            Ok(())
        })
    }

    pub fn dedup(&self) -> Result<StageStatus, PipelineError> {
        let (files, corpus_hash) = self.corpus("dedup")?;
        let params = DedupParams {
            seed: derive_seed(self.config.seed, "dedup"),
            ..self.config.dedup
        };
        let spec = self.spec(
            "dedup",
            self.dir("dedup"),
            serde_json::to_value(params).expect("params serialize"),
            BTreeMap::from([("corpus".to_string(), corpus_hash)]),
        );
        self.run_stage(spec, |dir| {
            let report = deduplicate(&files, &params);
            log::info!("dedup: {} of {} files removed", report.result.removed.len(), files.len());
            write_json(&dir.join("report.json"), &report).stage("dedup")
        })
    }

    pub fn split(&self) -> Result<StageStatus, PipelineError> {
        let inputs = BTreeMap::from([
            ("extract".to_string(), self.outputs_hash("split", "extract", &self.dir("extract"))?),
            ("dedup".to_string(), self.outputs_hash("split", "dedup", &self.dir("dedup"))?),
        ]);
        let spec = self.spec("split", self.dir("split"), serde_json::to_value(self.config.split).expect("ratios serialize"), inputs);
        let seed = spec.seed;
        let (extract_dir, dedup_dir) = (self.dir("extract"), self.dir("dedup"));
        let ratios = self.config.split;
        self.run_stage(spec, move |dir| {
            let modules: Vec<ParsedModule> = read_jsonl(&extract_dir.join("modules.jsonl")).stage("split")?;
            let report: crate::dedup::DedupReport = read_json(&dedup_dir.join("report.json")).stage("split")?;
            let kept: BTreeSet<&str> = report.result.kept.iter().map(String::as_str).collect();
            let files: Vec<String> = modules
                .iter()
                .map(|m| m.module_path.clone())
                .filter(|p| kept.contains(p.as_str()))
                .collect();
            let split = split_dataset(&files, ratios, seed).stage("split")?;
            write_json(&dir.join("split.json"), &split).stage("split")
        })
    }

    pub fn embed(&self) -> Result<StageStatus, PipelineError> {
        let inputs = BTreeMap::from([
            ("extract".to_string(), self.outputs_hash("embed", "extract", &self.dir("extract"))?),
            ("split".to_string(), self.outputs_hash("embed", "split", &self.dir("split"))?),
        ]);
        let spec = self.spec("embed", self.dir("embed"), serde_json::to_value(self.config.embedding).expect("params serialize"), inputs);
        let params = SkipGramParams {
            seed: spec.seed,
            ..self.config.embedding
        };
        self.run_stage(spec, |dir| {
            let (modules, split) = (self.modules("embed")?, self.load_split("embed")?);
            let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
            let functions = modules
                .iter()
                .filter(|m| train.contains(m.module_path.as_str()))
                .flat_map(|m| &m.functions);
            let table = train_embeddings(&embedding_sentences(functions), &params).stage("embed")?;
            log::info!("embed: {} tokens, dimension {}", table.len(), table.dim());
            table.save(dir, &params).stage("embed")
        })
    }

    fn modules(&self, stage: &'static str) -> Result<Vec<ParsedModule>, PipelineError> {
        read_jsonl(&self.dir("extract").join("modules.jsonl")).stage(stage)
    }

    fn load_split(&self, stage: &'static str) -> Result<Split, PipelineError> {
        read_json(&self.dir("split").join("split.json")).stage(stage)
    }

    fn dataset(&self, stage: &'static str) -> Result<Dataset, PipelineError> {
        let dir = self.dir("extract");
        Ok(Dataset {
            modules: self.modules(stage)?,
            graph: read_json(&dir.join("graph.json")).stage(stage)?,
            vocab: read_json(&dir.join("vocab.json")).stage(stage)?,
        })
    }

    fn table(&self, stage: &'static str) -> Result<EmbeddingTable, PipelineError> {
        EmbeddingTable::load(&self.dir("embed")).stage(stage)
    }

    /// Labeled bundles of the given files, with the ablation applied.
    fn bundles(&self, data: &Dataset, table: &EmbeddingTable, files: &[String]) -> Vec<SequenceBundle> {
        let wanted: BTreeSet<&str> = files.iter().map(String::as_str).collect();
        let mut out = Vec::new();
        for m in data.modules.iter().filter(|m| wanted.contains(m.module_path.as_str())) {
            let visible = data.graph.visible_types_for(&module_id(&m.module_path));
            let mask = data.vocab.mask_indices(visible.iter());
            for f in &m.functions {
                for mut b in bundles_for_function(table, f, &mask, data.vocab.mask_len(), &self.config.sequence) {
                    if b.label.is_some() {
                        self.config.ablation.apply(&mut b);
                        out.push(b);
                    }
                }
            }
        }
        out
    }

    fn shape(&self, table: &EmbeddingTable, vocab: &VisibleTypeVocab) -> Shape {
        Shape {
            embedding_dim: table.dim(),
            hidden: self.config.model.hidden,
            output_dim: self.config.model.output_dim,
            mask_len: vocab.mask_len(),
            identifier_len: self.config.sequence.identifier_len,
            context_len: self.config.sequence.context_len,
        }
    }

    fn dataset_inputs(&self, stage: &'static str) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut inputs = BTreeMap::new();
        for upstream in ["extract", "split", "embed"] {
            inputs.insert(upstream.to_string(), self.outputs_hash(stage, upstream, &self.dir(upstream))?);
        }
        Ok(inputs)
    }

    pub fn train(&self) -> Result<StageStatus, PipelineError> {
        let settings = serde_json::json!({
            "model": self.config.model,
            "sequence": self.config.sequence,
            "ablation": self.config.ablation,
        });
        let spec = self.spec("train", self.train_dir(), settings, self.dataset_inputs("train")?);
        let (init_seed, seed) = (derive_seed(self.config.seed, "model-init"), spec.seed);
        self.run_stage(spec, |dir| {
            let (data, split, table) = (self.dataset("train")?, self.load_split("train")?, self.table("train")?);
            let train_set = self.bundles(&data, &table, &split.train);
            let valid_set = self.bundles(&data, &table, &split.valid);
            log::info!("train: {} training and {} validation datapoints", train_set.len(), valid_set.len());
            let model = EncoderModel::new(self.shape(&table, &data.vocab), init_seed);
            log::info!("train: {} parameters", model.param_count());
            let (model, report) = train(model, &table, &train_set, &valid_set, &self.config.model, seed).stage("train")?;
            let manifest = CheckpointManifest {
                shape: model.shape(),
                param_count: model.param_count(),
                config: self.config.model.clone(),
                seed,
                epoch: report.best_epoch,
                valid_loss: report.best_valid_loss,
            };
            save_checkpoint(dir, &model, &manifest).stage("train")?;
            write_json(&dir.join("train_report.json"), &report).stage("train")
        })
    }

    pub fn index(&self) -> Result<StageStatus, PipelineError> {
        let mut inputs = self.dataset_inputs("index")?;
        inputs.insert("train".into(), self.outputs_hash("index", "train", &self.train_dir())?);
        let settings = serde_json::json!({ "index": self.config.index, "ablation": self.config.ablation });
        let spec = self.spec("index", self.index_dir(), settings, inputs);
        let seed = spec.seed;
        self.run_stage(spec, |dir| {
            let (data, split, table) = (self.dataset("index")?, self.load_split("index")?, self.table("index")?);
            let (model, _) = load_checkpoint(&self.train_dir()).stage("index")?;
            let bundles = self.bundles(&data, &table, &split.train);
            let vectors = model.encode_all(&table, &bundles).stage("index")?;
            let points = vectors
                .into_iter()
                .zip(bundles)
                .map(|(v, b)| (v, b.label.expect("bundles are labeled")))
                .collect();
            TypeClusterIndex::build(points, self.config.index.backend, seed)
                .stage("index")?
                .save(dir)
                .stage("index")
        })
    }

    pub fn evaluate(&self) -> Result<StageStatus, PipelineError> {
        let mut inputs = self.dataset_inputs("eval")?;
        inputs.insert("train".into(), self.outputs_hash("eval", "train", &self.train_dir())?);
        inputs.insert("index".into(), self.outputs_hash("eval", "index", &self.index_dir())?);
        let settings = serde_json::json!({ "eval": self.config.eval, "k": self.config.index.k, "ablation": self.config.ablation });
        let spec = self.spec("eval", self.eval_dir(), settings, inputs);
        self.run_stage(spec, |dir| {
            let (data, split, table) = (self.dataset("eval")?, self.load_split("eval")?, self.table("eval")?);
            let (model, _) = load_checkpoint(&self.train_dir()).stage("eval")?;
            let index = TypeClusterIndex::load(&self.index_dir()).stage("eval")?;
            let train_counts = label_counts(index.labels());
            let test = self.bundles(&data, &table, &split.test);
            let vectors = model.encode_all(&table, &test).stage("eval")?;
            let items: Vec<_> = vectors
                .iter()
                .zip(&test)
                .map(|(v, b)| {
                    let mut p = index.predict(v, self.config.index.k);
                    p.kind = Some(b.kind);
                    (p, b.label.clone().expect("bundles are labeled"))
                })
                .collect();
            let label = self.config.ablation.label();
            let reports = self
                .config
                .eval
                .top_n
                .iter()
                .map(|&n| evaluate(&items, n, &train_counts, &label))
                .collect::<Result<Vec<EvalReport>, _>>()
                .stage("eval")?;
            write_json(&dir.join("eval_report.json"), &reports).stage("eval")?;
            let text: String = reports.iter().map(|r| r.render() + "\n").collect();
            fs::write(dir.join("eval_report.txt"), text).stage("eval")
        })
    }

    /// Runs every stage in order; stages with unchanged inputs are skipped.
    pub fn run_all(&self) -> Result<Vec<(&'static str, StageStatus)>, PipelineError> {
        Ok(vec![
            ("extract", self.extract()?),
            ("dedup", self.dedup()?),
            ("split", self.split()?),
            ("embed", self.embed()?),
            ("train", self.train()?),
            ("index", self.index()?),
            ("eval", self.evaluate()?),
        ])
    }

    pub fn eval_reports(&self) -> Result<Vec<EvalReport>, PipelineError> {
        read_json(&self.eval_dir().join("eval_report.json")).stage("eval")
    }

    /// Ranked types for one argument or the return of a function in any
    /// Python file, using the built model and index.
    pub fn predict(&self, file: &Path, function: &str, slot: &Slot, top: usize) -> Result<Vec<(CanonicalType, f64)>, PipelineError> {
        let text = fs::read_to_string(file).stage("predict")?;
        let path = self.module_path(file);
        let module = parse_source(&text, &path).stage("predict")?;
        let data = self.dataset("predict")?;
        let table = self.table("predict")?;
        let (model, _) = load_checkpoint(&self.train_dir()).stage("predict")?;
        let index = TypeClusterIndex::load(&self.index_dir()).stage("predict")?;

        let f = module
            .functions
            .iter()
            .find(|f| f.qualified_name == function || f.name == function)
            .ok_or_else(|| PipelineError::Stage {
                stage: "predict",
                message: format!("no function `{function}` in {}", file.display()),
            })?;

        // Visible types come from the corpus graph with this file swapped in.
        let mut modules: Vec<ParsedModule> = data.modules.into_iter().filter(|m| m.module_path != path).collect();
        modules.push(module.clone());
        let graph = build_import_graph(&modules);
        let visible = graph.visible_types_for(&module_id(&path));
        let mask = data.vocab.mask_indices(visible.iter());

        let mut unlabeled = f.clone();
        unlabeled.return_label = None;
        unlabeled.emit_return = true;
        for a in &mut unlabeled.arguments {
            a.label = None;
        }
        let bundles = bundles_for_function(&table, &unlabeled, &mask, data.vocab.mask_len(), &self.config.sequence);
        let mut bundle = bundles
            .into_iter()
            .find(|b| match slot {
                Slot::Argument(name) => b.argument.as_deref() == Some(name),
                Slot::Return => b.argument.is_none(),
            })
            .ok_or_else(|| PipelineError::Stage {
                stage: "predict",
                message: match slot {
                    Slot::Argument(name) => format!("`{function}` has no argument `{name}`"),
                    Slot::Return => format!("`{function}` has no return slot"),
                },
            })?;
        self.config.ablation.apply(&mut bundle);
        let v = model.encode(&table, &bundle).stage("predict")?;
        let mut p = index.predict(&v, self.config.index.k);
        p.ranked.truncate(top);
        Ok(p.ranked)
    }

    fn module_path(&self, file: &Path) -> String {
        let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        let (file_abs, root) = (abs(file), abs(&self.config.corpus));
        let rel = file_abs.strip_prefix(&root).map(Path::to_path_buf).unwrap_or_else(|_| {
            PathBuf::from(file.file_name().unwrap_or_default())
        });
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Label frequencies of the training split, written next to the split.
    pub fn report(&self) -> Result<FrequencyReport, PipelineError> {
        let (modules, split) = (self.modules("report")?, self.load_split("report")?);
        let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
        let mut labels = Vec::new();
        for f in modules.iter().filter(|m| train.contains(m.module_path.as_str())).flat_map(|m| &m.functions) {
            labels.extend(f.arguments.iter().filter(|a| !a.is_receiver).filter_map(|a| a.label.as_ref()));
            if f.emit_return {
                labels.extend(f.return_label.as_ref());
            }
        }
        let report = type_frequency_report(labels);
        let dir = self.dir("report");
        fs::create_dir_all(&dir).stage("report")?;
        write_json(&dir.join("type_frequency.json"), &report).stage("report")?;
        Ok(report)
    }
}
