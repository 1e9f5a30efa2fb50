//! The `olhtr` command line: train, eval, infer, render and synth.
//!
//! Exit codes: 0 on success, 1 when an output cannot be written, 2 for a bad
//! configuration or unusable input, 3 when training diverges.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::synth::{generate, SynthConfig, DEFAULT_ALPHABET};
use crate::data::{load_dataset, parse_dataset, render, save_dataset, DataError, Vocabulary};
use crate::encoders::EncoderConfig;
use crate::p2sa::P2saConfig;
use crate::training::{
    load_checkpoint, save_checkpoint, split_dataset, train, CheckpointError, ModelConfig,
    ModelState, TrainConfig, TrainError,
};

/// File name of the checkpoint written by `train`.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Per-step JSONL log written by `train`.
pub const LOG_FILE: &str = "train_log.jsonl";
/// Per-epoch JSONL summary written by `train`.
pub const EPOCH_FILE: &str = "epochs.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Input(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(TrainError),
    #[error("{0} (last good checkpoint saved to {1})")]
    Diverged(TrainError, PathBuf),
    #[error("{path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output { .. } => 1,
            CliError::Diverged(..) => 3,
            _ => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => CliError::Input(d),
            e => CliError::Train(e),
        }
    }
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// Full configuration of a training run. Every field has a default, unknown
/// keys are rejected and command-line flags override file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training dataset (JSONL).
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint and logs.
    pub out: Option<PathBuf>,
    /// Output symbols; built from the training transcripts when absent.
    pub vocab: Option<String>,
    /// Ablation level 1..=5; replaces the on/off switches of `model.p2sa`.
    pub ablation: Option<u8>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Model configuration with the ablation level applied.
    pub fn resolved_model(&self) -> Result<ModelConfig, CliError> {
        let mut model = self.model.clone();
        if let Some(level) = self.ablation {
            let toggles = P2saConfig::ablation(level)
                .ok_or_else(|| CliError::Config(format!("ablation must be 1..=5, got {level}")))?;
            let p = &mut model.p2sa;
            p.use_transformer = toggles.use_transformer;
            p.use_rope = toggles.use_rope;
            p.use_align_loss = toggles.use_align_loss;
            p.use_stop_gradient = toggles.use_stop_gradient;
        }
        model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.resolved_model()?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "olhtr",
    version,
    about = "Online handwriting recognition with trajectory/image collaborative training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus JSONL logs.
    Train(TrainArgs),
    /// Print corpus metrics of a checkpoint on a dataset as JSON.
    Eval(EvalArgs),
    /// Print one transcript per input sequence.
    Infer(InferArgs),
    /// Write a PGM rendering of every sequence.
    Render(RenderArgs),
    /// Write a synthetic JSONL dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature width; rebuilds the encoder architecture at this width.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub ablation: Option<u8>,
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
}

impl TrainArgs {
    /// Config file (or defaults) with the flags applied on top.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            rc.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            rc.out = Some(o.clone());
        }
        if let Some(s) = self.seed {
            rc.train.seed = s;
        }
        if let Some(w) = self.width {
            rc.model.encoder = EncoderConfig::with_width(w);
        }
        if self.ablation.is_some() {
            rc.ablation = self.ablation;
        }
        if let Some(v) = &self.vocab {
            rc.vocab = Some(v.clone());
        }
        let t = &mut rc.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.max_steps = self.max_steps.or(t.max_steps);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.lr_max = self.lr_max.unwrap_or(t.lr_max);
        t.lr_min = self.lr_min.unwrap_or(t.lr_min);
        t.lambda_align = self.lambda.unwrap_or(t.lambda_align);
        t.val_fraction = self.val_fraction.unwrap_or(t.val_fraction);
        t.augment &= !self.no_augment;
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL sequences; `text` may be omitted.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    /// Alphabet to draw transcripts from.
    #[arg(long, default_value = DEFAULT_ALPHABET)]
    pub vocab: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

/// Runs one command, writing its standard output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.run_config()?, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Infer(a) => cmd_infer(&a, stdout),
        Command::Render(a) => cmd_render(&a, stdout),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn write_out(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout
        .write_all(text.as_bytes())
        .map_err(output_err(Path::new("<stdout>")))
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("log rows serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(output_err(path))
}

fn save(state: &ModelState, path: &Path) -> Result<(), CliError> {
    save_checkpoint(state, path).map_err(|e| match e {
        CheckpointError::Io { path, source } => CliError::Output { path, source },
        e => e.into(),
    })
}

/// Trains per `rc` and writes checkpoint, step log and epoch summaries into
/// its output directory.
pub fn cmd_train(rc: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data_path = rc
        .data
        .as_deref()
        .ok_or_else(|| CliError::Config("no training data given".into()))?;
    let out = rc
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("no output directory given".into()))?;
    let model = rc.resolved_model()?;
    let dataset = load_dataset(data_path)?;
    let vocab = match &rc.vocab {
        Some(v) => Vocabulary::from_symbols(v.chars())?,
        None => Vocabulary::build(&dataset)?,
    };
    let (train_set, val_set) = split_dataset(&dataset, rc.train.val_fraction, rc.train.seed);
    if train_set.is_empty() {
        return Err(CliError::Config(
            "validation split leaves no training data".into(),
        ));
    }
    fs::create_dir_all(out).map_err(output_err(out))?;
    let ckpt = out.join(CHECKPOINT_FILE);

    let mut state = ModelState::new(model, vocab, rc.train.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut log = Vec::new();
    let result = train(&mut state, &train_set, &val_set, &rc.train, |r| {
        log.push(*r)
    });
    write_jsonl(&out.join(LOG_FILE), &log)?;
    match result {
        Ok(report) => {
            write_jsonl(&out.join(EPOCH_FILE), &report.epochs)?;
            save(&state, &ckpt)?;
            let summary = serde_json::json!({
                "steps": report.steps,
                "parameters": state.num_parameters(),
                "checkpoint": ckpt,
                "final": report.log.last(),
            });
            write_out(stdout, &format!("{summary}\n"))
        }
        Err(e @ TrainError::Diverged { .. }) => {
            save(&state, &ckpt)?;
            Err(CliError::Diverged(e, ckpt))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let state = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let report = state.evaluate(&dataset)?;
    write_out(
        stdout,
        &format!(
            "{}\n",
            serde_json::to_string(&report).expect("report serializes")
        ),
    )
}

pub fn cmd_infer(a: &InferArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let state = load_checkpoint(&a.checkpoint)?;
    let text = fs::read_to_string(&a.input).map_err(|source| DataError::Io {
        path: a.input.clone(),
        source,
    })?;
    let mut out = String::new();
    for seq in parse_dataset(&text)? {
        out.push_str(&state.infer(&seq)?);
        out.push('\n');
    }
    write_out(stdout, &out)
}

/// Writes `NNNNNN.pgm` per sequence, numbered in input order.
pub fn cmd_render(a: &RenderArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(&a.input)?;
    fs::create_dir_all(&a.out).map_err(output_err(&a.out))?;
    for (i, seq) in dataset.iter().enumerate() {
        let img = render(&crate::data::normalize(seq)?);
        let path = a.out.join(format!("{i:06}.pgm"));
        let mut bytes = Vec::new();
        img.write_pgm(&mut bytes).map_err(output_err(&path))?;
        fs::write(&path, bytes).map_err(output_err(&path))?;
    }
    write_out(
        stdout,
        &format!("{} images written to {}\n", dataset.len(), a.out.display()),
    )
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        alphabet: a.vocab.clone(),
        min_len: a.min_len.unwrap_or(defaults.min_len),
        max_len: a.max_len.unwrap_or(defaults.max_len),
        ..defaults
    };
    Vocabulary::from_symbols(cfg.alphabet.chars())?;
    let data = generate(&cfg, a.n, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    save_dataset(&a.out, &data).map_err(|e| match e {
        DataError::Io { path, source } => CliError::Output { path, source },
        e => e.into(),
    })
}
