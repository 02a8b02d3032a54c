use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use typespace::pipeline::{Pipeline, PipelineConfig, PipelineError, Preset, Slot, StageStatus};

/// Type inference for Python functions by similarity learning.
#[derive(Parser)]
#[command(name = "typespace", version)]
struct Cli {
    /// TOML config; keys it sets override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base hyperparameters: `desk` (small, CPU) or `paper` (full size).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Root seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace an encoder input with padding: identifiers, context or visible.
    #[arg(long, global = true, value_name = "INPUT")]
    ablate: Vec<String>,
    /// Corpus directory (overrides the config).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, skipping those whose inputs are unchanged.
    Run,
    /// Parse the corpus into functions, labels and the import graph.
    Extract,
    /// Find near-duplicate files.
    Dedup,
    /// Split the deduplicated files into train/valid/test.
    Split,
    /// Train token embeddings on the training split.
    Embed,
    /// Train the encoder.
    Train,
    /// Encode training datapoints into the nearest-neighbor index.
    Index,
    /// Evaluate on the test split.
    Eval,
    /// Predict types for one argument or return value.
    Predict(PredictArgs),
    /// Show label frequencies of the training split.
    Report,
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    file: PathBuf,
    /// Function name, or `Class.method`.
    #[arg(long)]
    function: String,
    #[arg(long, conflicts_with = "return_slot", required_unless_present = "return_slot")]
    arg: Option<String>,
    #[arg(long = "return")]
    return_slot: bool,
    #[arg(long, default_value_t = 3)]
    top: usize,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let preset: Preset = cli.preset.parse()?;
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path, preset)?,
        None => PipelineConfig::preset(preset),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(corpus) = &cli.corpus {
        config.corpus = corpus.clone();
    }
    if let Some(output) = &cli.output {
        config.output = output.clone();
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    for input in &cli.ablate {
        config.ablation.disable(input)?;
    }
    config.validate()?;
    Ok(config)
}

fn status(stage: &str, s: StageStatus) {
    match s {
        StageStatus::Ran => eprintln!("{stage}: done"),
        StageStatus::Cached => eprintln!("{stage}: up to date"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let pipeline = Pipeline::new(config)?;
    match &cli.command {
        Command::Run => {
            for (stage, s) in pipeline.run_all()? {
                status(stage, s);
            }
            print_eval(&pipeline)?;
        }
        Command::Extract => status("extract", pipeline.extract()?),
        Command::Dedup => status("dedup", pipeline.dedup()?),
        Command::Split => status("split", pipeline.split()?),
        Command::Embed => status("embed", pipeline.embed()?),
        Command::Train => status("train", pipeline.train()?),
        Command::Index => status("index", pipeline.index()?),
        Command::Eval => {
            status("eval", pipeline.evaluate()?);
            print_eval(&pipeline)?;
        }
        Command::Predict(args) => {
            let slot = match &args.arg {
                Some(name) => Slot::Argument(name.clone()),
                None => Slot::Return,
            };
            let ranked = pipeline.predict(&args.file, &args.function, &slot, args.top)?;
            for (i, (t, p)) in ranked.iter().enumerate() {
                println!("{}. {t}\t{p:.4}", i + 1);
            }
        }
        Command::Report => print!("{}", pipeline.report()?.render(20)),
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn print_eval(pipeline: &Pipeline) -> anyhow::Result<()> {
    let path = pipeline.eval_dir().join("eval_report.txt");
    let text = std::fs::read_to_string(&path).with_context(|| format!("eval: reading {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
