//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use typespace::annotation::{normalize_annotation, CanonicalType};
use typespace::dedup::{find_duplicates, vectorize_files, DedupParams, SearchMode};
use typespace::embed::{DatapointKind, EmbeddingTable, SequenceBundle, PAD_ID};
use typespace::extract::{parse_source, SourceFile};
use typespace::io::read_json;
use typespace::knn::Backend;
use typespace::metrics::{evaluate, match_exact, match_parametric, EvalReport};
use typespace::model::{gradient_check, triplet_loss, EncoderModel, Shape, TrainReport};
use typespace::pipeline::{Pipeline, PipelineConfig};
use typespace::typecluster::{rank_votes, TypeClusterIndex, EPSILON};
use typespace::visible::{build_import_graph, mask_vector, VisibleTypeVocab};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed <= limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

/// Full-model run on the separable corpus, reused by the ablation check.
struct SeparableRun {
    _dir: TempDir,
    config: PipelineConfig,
    top1: f64,
}

#[derive(Default)]
struct Context {
    separable: Option<SeparableRun>,
}

fn t(s: &str) -> CanonicalType {
    normalize_annotation(s).unwrap()
}

fn c1_triplet_loss(_: &mut Context) -> Outcome {
    let start = Instant::now();
    let a = [0.0, 0.0];
    let got = [
        triplet_loss(&a, &a, &[3.0, 0.0], 2.0),
        triplet_loss(&a, &[1.0, 0.0], &[0.0, 1.0], 2.0),
        triplet_loss(&a, &[0.5, 0.0], &[0.0, 2.0], 2.0),
    ];
    check(got == [0.0, 2.0, 0.5], format!("examples gave {got:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let dim = rng.gen_range(1..16);
        let mut v = || (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect::<Vec<f64>>();
        let (a, p, n) = (v(), v(), v());
        let m = rng.gen_range(0.0..5.0);
        let l = triplet_loss(&a, &p, &n, m);
        check(l >= 0.0, format!("negative loss {l}"))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok("examples exact, 10000 random triplets non-negative".into())
}

fn random_table(words: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let names: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows = (0..(words + 3) * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    EmbeddingTable::from_rows(&refs, dim, rows)
}

fn random_bundle(rng: &mut ChaCha8Rng, len: usize, vocab: u32, mask_len: usize) -> SequenceBundle {
    let mut seq = || {
        let used = rng.gen_range(1..=len);
        (0..len).map(|i| if i < used { rng.gen_range(1..vocab) } else { PAD_ID }).collect::<Vec<u32>>()
    };
    let (identifier_seq, context_seq) = (seq(), seq());
    let mut visible: Vec<usize> = (0..mask_len).filter(|_| rng.gen_bool(0.4)).collect();
    if visible.is_empty() {
        visible.push(mask_len - 1);
    }
    SequenceBundle {
        module_path: "m.py".into(),
        function: "f".into(),
        argument: Some("x".into()),
        kind: DatapointKind::Argument,
        identifier_seq,
        context_seq,
        visible,
        mask_len,
        label: None,
    }
}

fn c2_gradients(_: &mut Context) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table = random_table(12, 4, &mut rng);
    let shape = Shape {
        embedding_dim: 4,
        hidden: 8,
        output_dim: 16,
        mask_len: 5,
        identifier_len: 6,
        context_len: 6,
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut params = 0;
    while checked < 20 {
        let model = EncoderModel::new(shape, rng.gen());
        let tr: Vec<SequenceBundle> = (0..3).map(|_| random_bundle(&mut rng, 6, 15, 5)).collect();
        let r = gradient_check(&model, &table, [&tr[0], &tr[1], &tr[2]], 2.0, 1e-4);
        if r.loss <= 0.0 {
            continue;
        }
        worst = worst.max(r.max_relative_error);
        params = r.parameters;
        checked += 1;
    }
    check(worst <= 1e-3, format!("max relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("20 active triplets x {params} parameters, max relative error {worst:.2e}"))
}

/// Brute-force neighbor vote, written independently of the index code.
fn oracle_predict(points: &[(Vec<f32>, String)], query: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, (p, _))| {
            let s: f64 = p.iter().zip(query).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
            (s.sqrt(), i)
        })
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for &(dist, i) in d.iter().take(k) {
        *scores.entry(points[i].1.clone()).or_insert(0.0) += 1.0 / (dist + 1e-10).powi(2);
    }
    let total: f64 = scores.values().sum();
    let mut out: Vec<(String, f64)> = scores.into_iter().map(|(t, s)| (t, s / total)).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

fn c3_vote_oracle(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let types = ["int", "str", "float", "bool", "List[int]", "Dict[str, int]", "bytes", "None"];
    let dim = 16;
    let points: Vec<(Vec<f32>, String)> = (0..1000)
        .map(|_| {
            let v = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            (v, types.choose(&mut rng).unwrap().to_string())
        })
        .collect();
    let labeled = |backend| {
        TypeClusterIndex::build(
            points.iter().map(|(v, l)| (v.clone(), CanonicalType::from_canonical(l))).collect(),
            backend,
            5,
        )
        .unwrap()
    };
    let exact = labeled(Backend::Exact);
    let forest = labeled(Backend::default_forest());
    let queries: Vec<Vec<f32>> = (0..1000).map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
    let mut agree = 0;
    for q in &queries {
        let got = exact.predict(q, 10);
        let want = oracle_predict(&points, q, 10);
        check(got.ranked.len() == want.len(), "ranking lengths differ")?;
        for ((gt, gp), (wt, wp)) in got.ranked.iter().zip(&want) {
            check(&gt.canonical == wt, format!("ranking differs: {} vs {wt}", gt.canonical))?;
            check((gp - wp).abs() <= 1e-12, format!("probability {gp} vs {wp}"))?;
        }
        if forest.neighbors(q, 1)[0].index == exact.neighbors(q, 1)[0].index {
            agree += 1;
        }
    }
    let (int, s) = (t("int"), t("str"));
    let worked = rank_votes(&[(&int, 1.0), (&int, 2.0), (&s, 3.0)]);
    let p_int = worked[0].1;
    let hand = {
        let a = 1.0 / (1.0 + EPSILON).powi(2) + 1.0 / (2.0 + EPSILON).powi(2);
        let b = 1.0 / (3.0 + EPSILON).powi(2);
        a / (a + b)
    };
    check(worked[0].0 == int && (p_int - 0.9184).abs() <= 1e-4 && (p_int - hand).abs() <= 1e-12, format!("P(int) = {p_int}"))?;
    check(agree >= 990, format!("forest top-1 agreement {agree}/1000"))?;
    Ok(format!("1000 queries match the oracle; P(int) = {p_int:.4}; forest top-1 agreement {agree}/1000"))
}

fn run_separable(ctx: &mut Context) -> Result<&SeparableRun, String> {
    if ctx.separable.is_none() {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let corpus = dir.path().join("corpus");
        common::write_separable_corpus(&corpus, 40, 5, 1);
        let config = common::desk_config(&corpus, &dir.path().join("out"));
        let pipeline = Pipeline::new(config.clone()).map_err(|e| e.to_string())?;
        pipeline.run_all().map_err(|e| e.to_string())?;
        let top1 = combined_top1(&pipeline)?;
        ctx.separable = Some(SeparableRun { _dir: dir, config, top1 });
    }
    Ok(ctx.separable.as_ref().unwrap())
}

fn combined_top1(p: &Pipeline) -> Result<f64, String> {
    let reports = p.eval_reports().map_err(|e| e.to_string())?;
    let r = reports.iter().find(|r| r.top_n == 1).ok_or("no top-1 report")?;
    Ok(r.task("combined").ok_or("no combined task")?.exact.all)
}

fn c4_separability(ctx: &mut Context) -> Outcome {
    let start = Instant::now();
    let run = run_separable(ctx)?;
    let elapsed = start.elapsed();
    let p = Pipeline::new(run.config.clone()).map_err(|e| e.to_string())?;
    let report: TrainReport = read_json(&p.train_dir().join("train_report.json")).map_err(|e| e.to_string())?;
    let first5 = &report.epoch_losses[..5];
    check(run.config.model.epochs <= 15, "too many epochs")?;
    check(first5.windows(2).all(|w| w[1] < w[0]), format!("epoch losses not strictly decreasing: {first5:?}"))?;
    check(run.top1 >= 95.0, format!("top-1 exact match {:.2}%", run.top1))?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!("top-1 exact match {:.2}%, first five epoch losses {first5:.3?}, {elapsed:.1?}", run.top1))
}

fn c9_ablation(ctx: &mut Context) -> Outcome {
    let run = run_separable(ctx)?;
    let (full, mut config) = (run.top1, run.config.clone());
    config.ablation.disable("identifiers").map_err(|e| e.to_string())?;
    let p = Pipeline::new(config).map_err(|e| e.to_string())?;
    p.run_all().map_err(|e| e.to_string())?;
    let ablated = combined_top1(&p)?;
    let label = &p.eval_reports().map_err(|e| e.to_string())?[0].label;
    check(label == "w/o identifiers", format!("report labeled {label:?}"))?;
    check(full - ablated >= 20.0, format!("full {full:.2}% vs ablated {ablated:.2}%"))?;
    Ok(format!("full {full:.2}% -> w/o identifiers {ablated:.2}% (drop {:.2} points)", full - ablated))
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    (0..rng.gen_range(5..9)).map(|_| letters[rng.gen_range(0..26)] as char).collect()
}

fn distinct_file(rng: &mut ChaCha8Rng) -> String {
    let mut src = String::new();
    for _ in 0..6 {
        let (f, a, b, c) = (random_word(rng), random_word(rng), random_word(rng), random_word(rng));
        let n = rng.gen_range(0..1000);
        src.push_str(&format!(
            "def {f}({a}, {b}):\n    {c} = {a} + {n}\n    if {c} > {b}:\n        return {c}\n    return {b}\n\n\n"
        ));
    }
    src
}

fn c5_dedup(_: &mut Context) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut files: Vec<SourceFile> = (0..50)
        .map(|i| SourceFile {
            path: format!("orig_{i:02}.py"),
            text: distinct_file(&mut rng),
        })
        .collect();
    let mut planted = Vec::new();
    let mut sources: Vec<usize> = (0..50).collect();
    sources.shuffle(&mut rng);
    for (j, &src) in sources.iter().take(20).enumerate() {
        let text = &files[src].text;
        let variant = match j % 3 {
            0 => text.clone(),
            1 => text.replace("\n\n\n", "\n\n\n\n").replace("    ", "  "),
            _ => {
                // Rename the first function.
                let name = text[4..text.find('(').unwrap()].to_string();
                text.replacen(&name, "renamed_function", 1)
            }
        };
        let path = format!("dup_{j:02}.py");
        planted.push((files[src].path.clone(), path.clone()));
        files.push(SourceFile { path, text: variant });
    }

    let vectors = vectorize_files(&files, 4096).vectors;
    let by_id: BTreeMap<&str, _> = vectors.iter().map(|v| (v.file_id.as_str(), v)).collect();
    for (a, b) in &planted {
        let sim = by_id[a.as_str()].cosine(by_id[b.as_str()]);
        check(sim >= 0.95, format!("fixture pair {a}/{b} has similarity {sim:.4}"))?;
    }

    let run = |search| find_duplicates(&vectors, &DedupParams { search, seed: 9, ..DedupParams::default() });
    let exact = run(SearchMode::Exact);
    let approx = run(SearchMode::Approximate);
    check(exact.clusters == approx.clusters, "exact and approximate clusters differ")?;
    let cluster_of: BTreeMap<&str, usize> = exact
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.iter().map(move |f| (f.as_str(), i)))
        .collect();
    let found = planted
        .iter()
        .filter(|(a, b)| cluster_of.get(a.as_str()).is_some_and(|c| cluster_of.get(b.as_str()) == Some(c)))
        .count();
    let merged_originals = exact
        .clusters
        .iter()
        .filter(|c| c.iter().filter(|f| f.starts_with("orig_")).count() > 1)
        .count();
    let recall = found as f64 / planted.len() as f64;
    check(recall >= 0.95, format!("recall {recall:.2}"))?;
    check(merged_originals == 0, format!("{merged_originals} clusters merge distinct files"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("recall {found}/{}, no distinct files merged, backends agree", planted.len()))
}

fn random_annotation(rng: &mut ChaCha8Rng, depth: u32) -> String {
    const LEAVES: [&str; 12] = ["int", "str", "Text", "None", "Any", "float", "np.ndarray", "typing.Any", "'Node'", "bytes", "list", "dict"];
    if depth == 0 || rng.gen_bool(0.4) {
        return LEAVES.choose(rng).unwrap().to_string();
    }
    let sp = if rng.gen_bool(0.3) { " " } else { "" };
    match rng.gen_range(0..6) {
        0 => format!("List[{sp}{}{sp}]", random_annotation(rng, depth - 1)),
        1 => format!("Dict[{}, {sp}{}]", random_annotation(rng, depth - 1), random_annotation(rng, depth - 1)),
        2 => format!("Optional[{}]", random_annotation(rng, depth - 1)),
        3 => format!("Union[{},{sp}{}]", random_annotation(rng, depth - 1), random_annotation(rng, depth - 1)),
        4 => format!("{}{sp}|{sp}{}", random_annotation(rng, depth - 1), random_annotation(rng, depth - 1)),
        _ => format!("Tuple[{}, ...]", random_annotation(rng, depth - 1)),
    }
}

fn c6_normalization(_: &mut Context) -> Outcome {
    for (raw, want) in [("[]", "List"), ("{}", "Dict"), ("Text", "str")] {
        let got = t(raw).canonical;
        check(got == want, format!("{raw} -> {got}, expected {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let raw = random_annotation(&mut rng, 4);
        let once = normalize_annotation(&raw).map_err(|e| format!("{raw}: {e}"))?;
        let twice = normalize_annotation(&once.canonical).map_err(|e| format!("{}: {e}", once.canonical))?;
        check(once == twice, format!("{raw}: {} then {}", once.canonical, twice.canonical))?;
    }
    Ok("alias table reproduced; 1000 fuzzed annotations idempotent".into())
}

fn c7_metrics(_: &mut Context) -> Outcome {
    let pool: Vec<CanonicalType> = ["int", "str", "List[int]", "List[str]", "Dict[str, int]", "Dict[int, int]", "Optional[str]", "Tuple[int, str]", "bool", "Set[int]"]
        .iter()
        .map(|s| t(s))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let (a, b) = (pool.choose(&mut rng).unwrap(), pool.choose(&mut rng).unwrap());
        check(!match_exact(a, b) || match_parametric(a, b), format!("{a} vs {b}"))?;
    }

    let items: Vec<_> = (0..300)
        .map(|_| {
            let mut ranked: Vec<CanonicalType> = pool.clone();
            ranked.shuffle(&mut rng);
            ranked.truncate(rng.gen_range(0..pool.len()));
            let kind = if rng.gen_bool(0.5) { DatapointKind::Argument } else { DatapointKind::Return };
            let prediction = typespace::typecluster::Prediction {
                ranked: ranked.into_iter().map(|r| (r, 0.1)).collect(),
                kind: Some(kind),
            };
            (prediction, pool.choose(&mut rng).unwrap().clone())
        })
        .collect();
    let counts = BTreeMap::from([("int".to_string(), 150)]);
    let reports: Vec<EvalReport> = (1..=10).map(|n| evaluate(&items, n, &counts, "x").unwrap()).collect();
    for w in reports.windows(2) {
        for (a, b) in w[0].tasks.iter().zip(&w[1].tasks) {
            check(b.exact.all >= a.exact.all && b.parametric.all >= a.parametric.all, "match rate fell as n grew")?;
        }
    }

    let fixture = vec![
        (typespace::typecluster::Prediction { ranked: vec![(t("int"), 1.0)], kind: None }, t("int")),
        (typespace::typecluster::Prediction { ranked: vec![(t("str"), 1.0)], kind: None }, t("int")),
        (typespace::typecluster::Prediction { ranked: vec![(t("str"), 1.0)], kind: None }, t("str")),
    ];
    let r = evaluate(&fixture, 1, &BTreeMap::new(), "x").unwrap();
    let c = r.task("combined").unwrap();
    let want_p = (2.0 * 1.0 + 1.0 * 0.5) / 3.0;
    let want_r = (2.0 * 0.5 + 1.0 * 1.0) / 3.0;
    let want_f1 = (2.0 * (2.0 / 3.0) + 1.0 * (2.0 / 3.0)) / 3.0;
    check((c.exact.all - 200.0 / 3.0).abs() <= 1e-9, format!("exact match {}", c.exact.all))?;
    check((c.weighted.precision - want_p).abs() <= 1e-9, format!("precision {}", c.weighted.precision))?;
    check((c.weighted.recall - want_r).abs() <= 1e-9, format!("recall {}", c.weighted.recall))?;
    check((c.weighted.f1 - want_f1).abs() <= 1e-9, format!("f1 {}", c.weighted.f1))?;
    Ok(format!(
        "10000 pairs coherent; monotone over n = 1..10; fixture P/R/F1 = {:.4}/{:.4}/{:.4}",
        c.weighted.precision, c.weighted.recall, c.weighted.f1
    ))
}

fn c8_visible(_: &mut Context) -> Outcome {
    let sources = [
        ("app.py", "import numpy as np\nfrom models import *\n\ndef run(x: np.ndarray, y: Wrapper) -> Base:\n    pass\n"),
        ("models.py", "from core import *\nfrom core import Base\n\nclass Wrapper:\n    pass\n"),
        ("core.py", "from typing import NewType\n\nclass Base:\n    pass\n\nUserId = NewType('UserId', int)\n"),
        ("empty.py", "x = 1\n"),
    ];
    let modules: Vec<_> = sources.iter().map(|(p, s)| parse_source(s, p).unwrap()).collect();
    let g = build_import_graph(&modules);
    let want: BTreeSet<String> = ["numpy.ndarray", "models.Wrapper", "core.Base", "core.UserId"].iter().map(|s| s.to_string()).collect();
    let got = g.visible_types_for("app");
    check(got == want, format!("visible set {got:?}"))?;
    check(g.resolve_name("app", "np.ndarray") == "numpy.ndarray", "np alias not resolved")?;
    let sets = g.visible_sets();
    for size in [1, 2, 8] {
        let vocab = VisibleTypeVocab::build(sets.values(), size);
        for (m, set) in &sets {
            let mask = mask_vector(set, &vocab);
            check(mask.len() == size + 1 && mask.contains(&1), format!("mask for {m} has no set bit"))?;
        }
    }
    Ok(format!("app sees {got:?}; every mask has a set bit"))
}

fn c10_determinism(_: &mut Context) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus");
    common::write_separable_corpus(&corpus, 15, 4, 10);
    let mut outputs: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for run in ["a", "b"] {
        let mut config = common::desk_config(&corpus, &dir.path().join(run));
        config.threads = 1;
        config.model.epochs = 3;
        let p = Pipeline::new(config).map_err(|e| e.to_string())?;
        p.run_all().map_err(|e| e.to_string())?;
        let read = |name: &str| std::fs::read(p.eval_dir().join(name)).map_err(|e| e.to_string());
        outputs.push((read("eval_report.json")?, read("eval_report.txt")?));
    }
    check(outputs[0] == outputs[1], "eval reports differ between identical runs")?;
    Ok(format!("two runs produced identical {}-byte eval reports", outputs[0].0.len()))
}

fn main() {
    let criteria: Vec<(u32, &str, fn(&mut Context) -> Outcome)> = vec![
        (1, "triplet loss", c1_triplet_loss),
        (2, "gradient fidelity", c2_gradients),
        (3, "neighbor vote oracle", c3_vote_oracle),
        (4, "end-to-end separability", c4_separability),
        (5, "deduplication", c5_dedup),
        (6, "annotation normalization", c6_normalization),
        (7, "metrics coherence", c7_metrics),
        (8, "visible-type graph", c8_visible),
        (9, "identifier ablation", c9_ablation),
        (10, "determinism", c10_determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Context::default();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name:<26} PASS  ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name:<26} FAIL  ({secs:.1}s) {detail}");
            }
        }
    }
    drop(ctx);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
