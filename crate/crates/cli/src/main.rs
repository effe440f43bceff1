//! `kvqa`: synthetic data, analysis reports, retrieval, training, evaluation
//! and single-instance prediction.
//!
//! Exit codes: 0 on success, 2 on invalid input or configuration, 3 when
//! some instances were skipped, 1 on any other failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvqa_core::similarity::ReferenceMode;

#[derive(Debug, Parser)]
#[command(
    name = "kvqa",
    version,
    about = "Uncertainty-gated knowledge fusion for knowledge-based VQA"
)]
struct Cli {
    /// Seed for synthetic data, splits and parameter initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with `synth`, `train` and `eval` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Lookup files shared by the model-facing commands.
#[derive(Debug, Args)]
pub struct Lookups {
    /// Knowledge triples as `head<TAB>relation<TAB>tail<TAB>source`.
    #[arg(long)]
    kb: PathBuf,
    /// `{"word", "vector"}` lines.
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    /// `{"sentence", "vector"}` lines with precomputed caption embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Stop words, one per line.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Object words and synonyms; synonyms also bind answers to graph nodes.
    #[arg(long)]
    hallucination: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset with every input file.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        consistency_rate: Option<f64>,
        /// How strongly member disagreement grows with hallucination.
        #[arg(long)]
        ep_coupling: Option<f64>,
    },
    /// Correlations, distributions and hallucination buckets as CSV files.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        hallucination: Option<PathBuf>,
        #[arg(long)]
        reference_mode: Option<ReferenceMode>,
    },
    /// Pearson correlations between similarity and both uncertainties.
    Correlate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        reference_mode: Option<ReferenceMode>,
    },
    /// Retrieved subgraph of each instance as JSON lines.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        hops: Option<usize>,
        /// Only this instance.
        #[arg(long)]
        id: Option<String>,
    },
    /// Fit a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        lookups: Lookups,
        /// Gate features, e.g. `sim,al`.
        #[arg(long)]
        selector: Option<String>,
        /// Pin both gate scores to 1.
        #[arg(long)]
        ungated: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Fraction held out, by seeded random split, for validation.
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        hops: Option<usize>,
        #[arg(long)]
        reference_mode: Option<ReferenceMode>,
    },
    /// Per-instance predictions and accuracy against a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        lookups: Lookups,
        #[arg(long)]
        model: PathBuf,
        /// Fail unless the checkpoint was trained with this selector.
        #[arg(long)]
        selector: Option<String>,
    },
    /// Answer one instance given as a JSON object.
    Predict {
        #[arg(long)]
        instance: PathBuf,
        #[command(flatten)]
        lookups: Lookups,
        #[arg(long)]
        model: PathBuf,
    },
}

/// How a successful run ended.
pub enum Status {
    Complete,
    Skipped(usize),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<kvqa_core::error::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Skipped(n)) => {
            eprintln!("warning: {n} instance(s) skipped");
            ExitCode::from(3)
        }
        Err(e) => {
            // causes already quoted by an outer message are not repeated
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
