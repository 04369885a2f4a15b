//! Flag parsing, config-file layering, and option resolution.
//!
//! Precedence: command-line flags > config file (`--config file.json`) >
//! built-in defaults. The resolved values are echoed to stderr at startup.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use prefix_dpo::analytics::OverallLenDef;
use prefix_dpo::error::{Error, Result};
use prefix_dpo::layout::dataset::TokenizerKind;
use prefix_dpo::model::ModelConfig;
use prefix_dpo::packing::Format;
use prefix_dpo::scalar::Precision;

#[derive(Parser)]
#[command(
    name = "prefix-dpo",
    about = "Prefix-shared preference optimization at desk scale",
    version
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Dataset token statistics and predicted token reduction.
    Stats(CommonOpts),
    /// Emit the First-Fit-Decreasing pack plan as JSON.
    PackPlan(CommonOpts),
    /// Verify paired-vs-shared log-prob equivalence on seeded random models.
    Verify(CommonOpts),
    /// Measure training throughput across the four format/packing configs.
    Bench(CommonOpts),
    /// Run DPO training steps and write metrics plus a checkpoint.
    Train(CommonOpts),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Stats(_) => "stats",
            Command::PackPlan(_) => "pack-plan",
            Command::Verify(_) => "verify",
            Command::Bench(_) => "bench",
            Command::Train(_) => "train",
        }
    }

    pub fn opts(&self) -> &CommonOpts {
        match self {
            Command::Stats(o)
            | Command::PackPlan(o)
            | Command::Verify(o)
            | Command::Bench(o)
            | Command::Train(o) => o,
        }
    }
}

/// Every knob; unset options fall back to the config file, then defaults.
#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommonOpts {
    /// JSONL dataset path.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Input token handling: pretokenized | bytes | whitespace.
    #[arg(long)]
    pub tokenizer: Option<String>,
    /// Sequence format: paired | shared.
    #[arg(long)]
    pub format: Option<String>,
    /// Pack units with FFD into fixed-capacity rows.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub packing: Option<bool>,
    /// Batch size (samples per step; packed capacity = bsz x max unit).
    #[arg(long)]
    pub bsz: Option<usize>,
    /// pack-plan: explicit bin capacity, overriding bsz x max unit.
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Left-truncate prompts longer than this.
    #[arg(long)]
    pub max_prompt_len: Option<usize>,
    /// Reject rows longer than this.
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// DPO beta.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training / benchmark step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Float width: f32 | f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Block size of the sparse attention mask.
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Output path (reports, plans, checkpoints).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format: json | csv | md.
    #[arg(long)]
    pub report: Option<String>,

    /// Vocabulary size; defaults to the dataset's maximum token id + 1.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub rope_theta: Option<f64>,

    /// Resume training from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// verify: number of seeded random models.
    #[arg(long)]
    pub models: Option<usize>,
    /// verify: number of dataset samples (taken from the front).
    #[arg(long)]
    pub samples: Option<usize>,
    /// bench: untimed warmup steps.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Reference log-probs: cached | per-step.
    #[arg(long)]
    pub ref_mode: Option<String>,
    /// train: seeded batch-order shuffle between epochs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shuffle: Option<bool>,
    /// Optimizer: adamw | sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// stats: overall-length definition: max | mean | shared.
    #[arg(long)]
    pub overall_len: Option<String>,

    /// Test hook: corrupt the block mask; verification must then fail.
    #[arg(long, action = ArgAction::SetTrue, hide = true)]
    #[serde(default)]
    pub corrupt_mask: bool,
    /// verify: dump the first batch's block mask as debug JSON.
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default)]
    pub dump_mask: bool,
}

macro_rules! merge_fields {
    ($cli:expr, $file:expr, $($field:ident),+ $(,)?) => {
        $( if $cli.$field.is_none() { $cli.$field = $file.$field.take(); } )+
    };
}

impl CommonOpts {
    /// Layer a config file underneath: flags win, file fills the gaps.
    pub fn layered_under(mut self, mut file: CommonOpts) -> CommonOpts {
        merge_fields!(
            self,
            file,
            dataset,
            tokenizer,
            format,
            packing,
            bsz,
            capacity,
            max_prompt_len,
            max_seq_len,
            beta,
            lr,
            steps,
            seed,
            precision,
            block_size,
            out,
            report,
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            rope_theta,
            checkpoint,
            models,
            samples,
            warmup,
            ref_mode,
            shuffle,
            optimizer,
            overall_len
        );
        self.corrupt_mask |= file.corrupt_mask;
        self.dump_mask |= file.dump_mask;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefMode {
    Cached,
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    AdamW,
    Sgd,
}

/// Fully resolved run configuration, echoed to stderr at startup.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub dataset: Option<PathBuf>,
    pub tokenizer: String,
    pub format: Format,
    pub packing: bool,
    pub bsz: usize,
    pub capacity: Option<usize>,
    pub max_prompt_len: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub beta: f64,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub block_size: usize,
    pub out: Option<PathBuf>,
    pub report: ReportFormat,
    pub vocab_size: Option<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub rope_theta: f64,
    pub checkpoint: Option<PathBuf>,
    pub models: usize,
    pub samples: usize,
    pub warmup: usize,
    pub ref_mode: RefMode,
    pub shuffle: bool,
    pub optimizer: OptimizerChoice,
    pub overall_len: String,
    pub corrupt_mask: bool,
    pub dump_mask: bool,
}

fn parse_choice<T: std::str::FromStr<Err = String>>(
    value: &Option<String>,
    what: &str,
    default: T,
) -> Result<T> {
    match value {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|e| Error::Config(format!("--{what}: {e}"))),
    }
}

impl RunConfig {
    pub fn resolve(command: &Command) -> Result<RunConfig> {
        let opts = command.opts().clone();
        let precision_default = match command {
            Command::Bench(_) => Precision::F32,
            _ => Precision::F64,
        };
        let steps_default = match command {
            Command::Bench(_) => 8,
            _ => 50,
        };
        let report_default = match command {
            Command::Bench(_) | Command::Stats(_) => ReportFormat::Md,
            _ => ReportFormat::Json,
        };
        let report = match opts.report.as_deref() {
            None => report_default,
            Some("json") => ReportFormat::Json,
            Some("csv") => ReportFormat::Csv,
            Some("md") => ReportFormat::Md,
            Some(other) => {
                return Err(Error::Config(format!(
                    "--report: unknown format {other:?}, expected json|csv|md"
                )))
            }
        };
        let ref_mode = match opts.ref_mode.as_deref() {
            None | Some("cached") => RefMode::Cached,
            Some("per-step") => RefMode::PerStep,
            Some(other) => {
                return Err(Error::Config(format!(
                    "--ref-mode: unknown mode {other:?}, expected cached|per-step"
                )))
            }
        };
        let optimizer = match opts.optimizer.as_deref() {
            None | Some("adamw") => OptimizerChoice::AdamW,
            Some("sgd") => OptimizerChoice::Sgd,
            Some(other) => {
                return Err(Error::Config(format!(
                    "--optimizer: unknown optimizer {other:?}, expected adamw|sgd"
                )))
            }
        };
        let overall_len = match opts.overall_len.as_deref() {
            None | Some("max") => "max",
            Some("mean") => "mean",
            Some("shared") => "shared",
            Some(other) => {
                return Err(Error::Config(format!(
                    "--overall-len: unknown definition {other:?}, expected max|mean|shared"
                )))
            }
        };
        let config = RunConfig {
            command: command.name().to_string(),
            dataset: opts.dataset,
            tokenizer: opts.tokenizer.unwrap_or_else(|| "pretokenized".into()),
            format: parse_choice(&opts.format, "format", Format::Shared)?,
            packing: opts.packing.unwrap_or(false),
            bsz: opts.bsz.unwrap_or(4),
            capacity: opts.capacity,
            max_prompt_len: opts.max_prompt_len,
            max_seq_len: opts.max_seq_len,
            beta: opts.beta.unwrap_or(0.1),
            lr: opts.lr.unwrap_or(1e-4),
            steps: opts.steps.unwrap_or(steps_default),
            seed: opts.seed.unwrap_or(0),
            precision: parse_choice(&opts.precision, "precision", precision_default)?,
            block_size: opts.block_size.unwrap_or(128),
            out: opts.out,
            report,
            vocab_size: opts.vocab_size,
            d_model: opts.d_model.unwrap_or(64),
            n_layers: opts.n_layers.unwrap_or(2),
            n_heads: opts.n_heads.unwrap_or(4),
            d_ff: opts.d_ff.unwrap_or(128),
            rope_theta: opts.rope_theta.unwrap_or(10_000.0),
            checkpoint: opts.checkpoint,
            models: opts.models.unwrap_or(3),
            samples: opts.samples.unwrap_or(8),
            warmup: opts
                .warmup
                .unwrap_or(prefix_dpo::analytics::DEFAULT_WARMUP_STEPS),
            ref_mode,
            shuffle: opts.shuffle.unwrap_or(false),
            optimizer,
            overall_len: overall_len.to_string(),
            corrupt_mask: opts.corrupt_mask,
            dump_mask: opts.dump_mask,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.bsz == 0 {
            return Err(Error::Config("--bsz must be >= 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("--block-size must be >= 1".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("--beta must be finite and >= 0".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("--lr must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn tokenizer_kind(&self) -> Result<TokenizerKind> {
        self.tokenizer
            .parse()
            .map_err(|e: String| Error::Config(format!("--tokenizer: {e}")))
    }

    pub fn overall_len_def(&self) -> OverallLenDef {
        match self.overall_len.as_str() {
            "mean" => OverallLenDef::PromptPlusMeanCompletion,
            "shared" => OverallLenDef::SharedLength,
            _ => OverallLenDef::PromptPlusMaxCompletion,
        }
    }

    /// Model dimensions with the vocabulary defaulted from the dataset.
    pub fn model_config(&self, dataset_vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size.unwrap_or(dataset_vocab.max(2)),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            rope_theta: self.rope_theta,
            rms_eps: 1e-6,
            init_std: 0.02,
            seed: self.seed,
        }
    }

    pub fn require_dataset(&self) -> Result<&PathBuf> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config("--dataset is required for this command".into()))
    }
}

/// Load the config file, if given.
pub fn load_file_config(path: &PathBuf) -> Result<CommonOpts> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}
