//! Command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blm::BlmError;

/// Blank language model: train, fill templates, restore text, estimate perplexity.
#[derive(Parser, Debug)]
#[command(name = "blm", version, about)]
pub struct Cli {
    /// Where to write the run manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a corpus (one document per line).
    Train(TrainArgs),
    /// Fill `__` blanks in word templates.
    Infill(DecodeArgs),
    /// Restore `?` runs in character templates with a length-aware model.
    Restore(DecodeArgs),
    /// Draw several samples per template.
    Sample(DecodeArgs),
    /// Estimate perplexity with Monte-Carlo orders.
    Ppl(PplArgs),
    /// Score outputs.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Build templates by masking documents.
    MakeCanvas(MakeCanvasArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus file, one document per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for checkpoints, loss curve and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `word` or `char`.
    #[arg(long)]
    pub mode: Option<blm::Mode>,
    /// `plain` or `length-aware`.
    #[arg(long)]
    pub variant: Option<blm::Variant>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub tie_output: Option<bool>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// `sgd` (default) or `adam`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub momentum: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Template file, one canvas per line.
    #[arg(long)]
    pub templates: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `greedy`, `beam` or `sample`.
    #[arg(long)]
    pub strategy: Option<blm::decoding::Strategy>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
    /// Write each decode's step-by-step canvases here.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Write per-line joint log-probabilities here (CSV).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Reject adjacent blanks instead of merging them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct PplArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Orders sampled per sentence.
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sum over every order instead of sampling (short sentences only).
    #[arg(long)]
    pub exhaustive: bool,
    /// Per-sentence CSV (sentence_id, n, m, log_Xm).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Corpus BLEU of candidates against references.
    Bleu {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Map reference words outside this checkpoint's vocabulary to the unknown token.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Character error rate over the `?` slots of restoration templates.
    Cer {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Per-line CSV (line, errors, chars, length_ok).
        #[arg(long)]
        details: Option<PathBuf>,
    },
    /// Fraction of outputs that keep every fixed token and fill every blank.
    Validity {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value = "word")]
        mode: blm::Mode,
        /// Per-line CSV (line, valid).
        #[arg(long)]
        details: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct MakeCanvasArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Aligned original documents.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Fraction of tokens to mask.
    #[arg(long, default_value_t = 0.3)]
    pub ratio: f64,
    #[arg(long, default_value = "word")]
    pub mode: blm::Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cut this many length-annotated slots per document instead of masking a ratio (char mode).
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
}

/// Exit status for an error: 3 for numerical failure, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let diverged = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<BlmError>(), Some(BlmError::Diverged { .. })));
    if diverged {
        3
    } else {
        2
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
