//! Generated corpora shared by the integration tests.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use typespace::pipeline::{PipelineConfig, Preset};

/// Argument-name suffix and the type it implies.
pub const SUFFIXES: [(&str, &str); 5] = [
    ("count", "int"),
    ("label", "str"),
    ("ratio", "float"),
    ("flag", "bool"),
    ("tags", "List[str]"),
];

const STEMS: [&str; 20] = [
    "user", "page", "item", "file", "order", "session", "token", "report", "widget", "cache", "queue", "member",
    "folder", "ticket", "device", "market", "sensor", "budget", "camera", "engine",
];

const VERBS: [&str; 12] = [
    "load", "store", "check", "render", "update", "build", "parse", "merge", "fetch", "apply", "clear", "track",
];

/// Writes `files * per_file` functions, each with one argument whose name
/// ends in a type-revealing suffix. Arguments are never used in the body
/// and every function returns the same local, so the type signal lives
/// only in the identifiers.
pub fn write_separable_corpus(root: &Path, files: usize, per_file: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(root).unwrap();
    for i in 0..files {
        let mut src = String::from("from typing import List\n");
        for j in 0..per_file {
            let (suffix, ty) = SUFFIXES[rng.gen_range(0..SUFFIXES.len())];
            let stem = STEMS.choose(&mut rng).unwrap();
            let verb = VERBS.choose(&mut rng).unwrap();
            let helper = VERBS.choose(&mut rng).unwrap();
            let n = i * per_file + j;
            src.push_str(&format!(
                "\n\ndef {verb}_{stem}_{suffix}_{n}({stem}_{suffix}: {ty}) -> {ty}:\n    result = {helper}_step({n})\n    return result\n"
            ));
        }
        fs::write(root.join(format!("module_{i:03}.py")), src).unwrap();
    }
}

/// Desk preset pointed at `corpus`, writing to `out`.
pub fn desk_config(corpus: &Path, out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::preset(Preset::Desk);
    c.corpus = corpus.to_path_buf();
    c.output = out.to_path_buf();
    c.seed = 17;
    c
}
