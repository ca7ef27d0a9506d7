use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cmr_core::pipeline::{
    cmd_eval, cmd_featurize, cmd_gen_synthetic, cmd_infer, cmd_memorize, cmd_sweep, cmd_train, ExperimentConfig,
};

/// Train, memorize and evaluate retrieval-augmented multimodal knowledge
/// graph completion models.
#[derive(Debug, Parser)]
#[command(name = "cmr", version)]
struct Cli {
    /// JSON experiment config; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for encoding, retrieval and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic inductive dataset under <out>/data.
    GenSynthetic,
    /// Export hashed text and padded visual entity features.
    Featurize,
    /// Train the query and entity encoders.
    Train,
    /// Build the knowledge and entity stores from the trained encoders.
    Memorize,
    /// Predict tails for `head<TAB>relation` queries.
    Infer {
        #[arg(long)]
        queries: PathBuf,
    },
    /// Evaluate on the test split and write metrics.json.
    Eval,
    /// Select k and lambda on the validation split.
    Sweep,
}

fn init_logging() {
    let level = std::env::var("CMR_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }

    match cli.command {
        Command::GenSynthetic => {
            let (generated, _) = cmd_gen_synthetic(&cfg)?;
            println!("{}", generated.manifest.display());
        }
        Command::Featurize => {
            cmd_featurize(&cfg)?;
        }
        Command::Train => {
            cmd_train(&cfg)?;
        }
        Command::Memorize => {
            cmd_memorize(&cfg)?;
        }
        Command::Infer { queries } => {
            cmd_infer(&cfg, &queries)?;
        }
        Command::Eval => {
            let (report, _) = cmd_eval(&cfg)?;
            println!(
                "MRR {:.4}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}",
                report.full.mrr, report.full.hits1, report.full.hits3, report.full.hits10
            );
        }
        Command::Sweep => {
            let (result, _) = cmd_sweep(&cfg)?;
            println!("k = {}  lambda = {}", result.best_k, result.best_lambda);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
