use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use typespace::io::read_json;
use typespace::model::CheckpointManifest;
use typespace::pipeline::{Pipeline, PipelineConfig, Preset, Slot};

const SUFFIXES: [(&str, &str); 3] = [("count", "int"), ("label", "str"), ("flag", "bool")];
const STEMS: [&str; 6] = ["user", "page", "item", "file", "order", "token"];

fn write_corpus(root: &Path) {
    fs::create_dir_all(root).unwrap();
    for i in 0..12 {
        let mut src = String::from("from typing import List\n");
        for j in 0..4 {
            let n = i * 4 + j;
            let (suffix, ty) = SUFFIXES[(i + j) % 3];
            let stem = STEMS[(i * 7 + j) % 6];
            src.push_str(&format!(
                "\n\ndef handle_{stem}_{suffix}_{n}({stem}_{suffix}: {ty}) -> {ty}:\n    value = step({n})\n    return value\n"
            ));
        }
        fs::write(root.join(format!("mod_{i:02}.py")), src).unwrap();
    }
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("typespace.toml");
    fs::write(
        &path,
        "corpus = \"corpus\"\noutput = \"out\"\nseed = 3\nthreads = 1\n\n[model]\nepochs = 3\nhidden = 8\noutput_dim = 16\n\n[index]\nbackend = { kind = \"exact\" }\n",
    )
    .unwrap();
    path
}

fn typespace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_typespace")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_run_resume_predict_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus"));
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();

    let first = typespace(&["--config", cfg, "run"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("full model (top-1)"));
    assert_eq!(stderr(&first).matches(": done").count(), 7);

    let again = typespace(&["--config", cfg, "run"]);
    assert!(again.status.success());
    assert_eq!(stderr(&again).matches(": up to date").count(), 7, "{}", stderr(&again));

    // Prediction through the binary agrees with the library on the same artifacts.
    let file = dir.path().join("corpus/mod_00.py");
    let out = typespace(&[
        "--config", cfg, "predict", "--file", file.to_str().unwrap(), "--function", "handle_user_count_0", "--arg", "user_count",
        "--top", "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert!(!lines.is_empty() && lines.len() <= 3, "{lines:?}");
    let pipeline = Pipeline::new(PipelineConfig::load(&config, Preset::Desk).unwrap()).unwrap();
    let ranked = pipeline.predict(&file, "handle_user_count_0", &Slot::Argument("user_count".into()), 3).unwrap();
    let expected: Vec<String> = ranked.iter().enumerate().map(|(i, (t, p))| format!("{}. {t}\t{p:.4}", i + 1)).collect();
    assert_eq!(lines, expected);
    assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(ranked.iter().map(|r| r.1).sum::<f64>() <= 1.0 + 1e-9);

    let ret = typespace(&["--config", cfg, "predict", "--file", file.to_str().unwrap(), "--function", "handle_user_count_0", "--return"]);
    assert!(ret.status.success(), "{}", stderr(&ret));

    let ablated = typespace(&["--config", cfg, "--ablate", "visible", "run"]);
    assert!(ablated.status.success(), "{}", stderr(&ablated));
    assert!(stdout(&ablated).contains("w/o visible type hints (top-1)"));
    // Upstream stages are shared; only the ablation-specific ones rerun.
    assert_eq!(stderr(&ablated).matches(": up to date").count(), 4);
    let full: CheckpointManifest = read_json(&dir.path().join("out/train-full/model.json")).unwrap();
    let masked: CheckpointManifest = read_json(&dir.path().join("out/train-no-visible/model.json")).unwrap();
    assert_eq!(full.shape, masked.shape);
    assert_eq!(full.param_count, masked.param_count);

    let report = typespace(&["--config", cfg, "report"]);
    assert!(report.status.success());
    assert!(stdout(&report).contains("top-10 share"));
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus"));
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();

    let out = typespace(&["--config", cfg, "train"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error: train:"), "{}", stderr(&out));

    let out = typespace(&["--config", cfg, "--corpus", dir.path().join("missing").to_str().unwrap(), "extract"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error: extract:"), "{}", stderr(&out));

    let out = typespace(&["--config", cfg, "--ablate", "everything", "run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown ablation"));
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus"));
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();
    for stage in ["extract", "dedup", "split", "embed", "train", "index", "eval"] {
        let out = typespace(&["--config", cfg, stage]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let split: typespace::pipeline::Split = read_json(&dir.path().join("out/split/split.json")).unwrap();
    assert_eq!((split.train.len(), split.valid.len(), split.test.len()), (9, 1, 2));
}

#[test]
fn config_prints_effective_settings() {
    let out = typespace(&["--preset", "paper", "--seed", "42", "config"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let parsed = PipelineConfig::from_toml(&text, Preset::Desk).unwrap();
    assert_eq!(parsed.seed, 42);
    assert_eq!(parsed.model.output_dim, 4096);
    assert!(!typespace(&["--preset", "huge", "config"]).status.success());
}
