//! `goalgauge` batch command line.
//!
//! Exit codes: 0 on success, 1 when a metric fails at run time, 2 when the
//! config file or an override is invalid.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use goalgauge::config::{Overrides, RunConfig};
use goalgauge::pipeline::{run_pipeline, Metric, PipelineError};

#[derive(Parser)]
#[command(
    name = "goalgauge",
    version,
    about = "Unsupervised metrics for multi-turn LLM interactions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize the datasets.
    Ingest(Common),
    /// Summarize, embed, cluster and merge user goals.
    Cluster(Common),
    /// Label interactions as complete or incomplete.
    Completion(Common),
    /// Build response trees and their statistics.
    Rtree(Common),
    /// Compare two clustering runs over the same summaries.
    Stability(Common),
    /// Free-form LLM labeling baseline.
    Baseline(Common),
    /// Export (input, target) fine-tuning pairs.
    ExportSft(Common),
    /// Run every metric.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Disable the response cache for this run.
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    /// End-tag patterns, comma separated.
    #[arg(long, value_delimiter = ',')]
    patterns: Option<Vec<String>>,
    #[arg(long)]
    max_continuation_tokens: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Keep budget- or depth-cut trees in the aggregates.
    #[arg(long)]
    include_cut: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            alpha: self.alpha,
            mode: self.mode.clone(),
            budget: self.budget,
            top_k: self.top_k,
            strategy: self.strategy.clone(),
            patterns: self.patterns.clone(),
            max_continuation_tokens: self.max_continuation_tokens,
            k1: self.k1,
            include_cut: self.include_cut,
            no_cache: self.no_cache,
        }
    }
}

fn run(common: &Common, metrics: &[Metric]) -> Result<(), PipelineError> {
    let mut config = RunConfig::load(&common.config)?;
    config.apply(&common.overrides());
    let manifest = run_pipeline(&config, metrics)?;
    println!(
        "wrote {} artifacts to {}",
        manifest.artifacts.len(),
        config.output_path().display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (common, metrics): (&Common, Vec<Metric>) = match &cli.command {
        Command::Ingest(c) => (c, vec![Metric::Ingest]),
        Command::Cluster(c) => (c, vec![Metric::Cluster]),
        Command::Completion(c) => (c, vec![Metric::Completion]),
        Command::Rtree(c) => (c, vec![Metric::Rtree]),
        Command::Stability(c) => (c, vec![Metric::Stability]),
        Command::Baseline(c) => (c, vec![Metric::Baseline]),
        Command::ExportSft(c) => (c, vec![Metric::ExportSft]),
        Command::Report(c) => (c, Metric::ALL.to_vec()),
    };
    match run(common, &metrics) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
