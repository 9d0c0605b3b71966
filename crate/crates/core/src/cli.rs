//! `qe` command-line front end.
//!
//! Each run reads one TOML file; flags override its values. Logs go to
//! stderr, results to stdout or files under the output directory.
//! Exit codes: 0 success, 2 configuration or usage, 3 data, 4 runtime.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, load_parallel_corpus, load_qe_dataset, write_qe_dataset, ColumnMap, QEPair};
use crate::encoder::{load_checkpoint, save_checkpoint, ArchitectureKind, EncoderConfig};
use crate::error::{Error, ErrorKind, Result};
use crate::eval::{evaluate_predictions, read_predictions, write_predictions};
use crate::models::{PoolingStrategy, QEModel};
use crate::strategies::{augment_dataset, ensemble_predict, grid_select_weight, AugmentPolicy, EnsembleSpec, LabelPolicy};
use crate::trainer::{train_with_log, TrainingConfig};

/// Names a directory searched for relative `--config` paths and for a
/// default `qe.toml`.
pub const CONFIG_DIR_ENV: &str = "QE_CONFIG_DIR";
pub const DEFAULT_CONFIG_NAME: &str = "qe.toml";

pub const CHECKPOINT_FILE: &str = "model.qef";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const ENSEMBLE_FILE: &str = "ensemble.tsv";
pub const AUGMENTED_FILE: &str = "augmented.tsv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Runtime => EXIT_RUNTIME,
    }
}

/// Encoder sizes; the vocabulary size comes from the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub max_vocab: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = EncoderConfig::toy(0);
        Self {
            d_model: t.d_model,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            max_len: t.max_len,
            dropout_rate: t.dropout_rate,
            max_vocab: 30_000,
        }
    }
}

impl ModelSection {
    pub fn encoder_config(&self, vocab_size: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub parallel: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureKind,
    /// Defaults to CLS for mono, MEAN for siamese.
    pub pooling: Option<PoolingStrategy>,
    pub share_weights: bool,
    pub model: ModelSection,
    pub training: TrainingConfig,
    pub columns: ColumnMap,
    pub paths: Paths,
    pub augment: AugmentPolicy,
    pub ensemble: EnsembleSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            architecture: ArchitectureKind::Mono,
            pooling: None,
            share_weights: false,
            model: ModelSection::default(),
            training: TrainingConfig::default(),
            columns: ColumnMap::default(),
            paths: Paths::default(),
            augment: AugmentPolicy::default(),
            ensemble: EnsembleSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))
    }

    /// Reads a config file. Failure to read it counts as a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn pooling(&self) -> PoolingStrategy {
        self.pooling.unwrap_or(match self.architecture {
            ArchitectureKind::Mono => PoolingStrategy::Cls,
            ArchitectureKind::Siamese => PoolingStrategy::Mean,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.augment.validate()?;
        self.ensemble.validate()?;
        self.model.encoder_config(1, 0).validate()
    }
}

#[derive(Debug, Parser)]
#[command(name = "qe", version, about = "Sentence-level translation quality estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training and initialization seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every file the command writes.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training TSV; overrides `paths.train`.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        architecture: Option<ArchitectureKind>,
    },
    /// Score a TSV with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// TSV to score; overrides `paths.test`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare a predictions file with gold z-scores.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Labelled TSV; overrides `paths.dev`.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Blend two prediction files.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long = "preds-a")]
        preds_a: PathBuf,
        #[arg(long = "preds-b")]
        preds_b: PathBuf,
        #[arg(long = "weight-a")]
        weight_a: Option<f64>,
        /// Pick the weight from the standard grid by Pearson r against this
        /// labelled TSV.
        #[arg(long = "select-on", conflicts_with = "weight_a")]
        select_on: Option<PathBuf>,
    },
    /// Append labelled parallel-corpus pairs to a training set.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        parallel: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// `max` or a fixed z-score.
        #[arg(long)]
        label: Option<String>,
    },
    /// Run the built-in gradient and metric checks.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

impl std::str::FromStr for LabelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(LabelPolicy::MaxObservedZ);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(LabelPolicy::Fixed(v)),
            _ => Err(Error::InvalidConfig(format!("label must be `max` or a finite number, got {s:?}"))),
        }
    }
}

/// Resolves the config file: an explicit path (tried as given, then under
/// `config_dir`), else `config_dir/qe.toml` when present.
pub fn resolve_config_path(explicit: Option<&Path>, config_dir: Option<&Path>) -> Option<PathBuf> {
    match explicit {
        Some(p) if p.is_relative() && !p.exists() => match config_dir {
            Some(dir) if dir.join(p).exists() => Some(dir.join(p)),
            _ => Some(p.to_path_buf()),
        },
        Some(p) => Some(p.to_path_buf()),
        None => config_dir.map(|d| d.join(DEFAULT_CONFIG_NAME)).filter(|p| p.exists()),
    }
}

struct Ctx<'a> {
    cfg: RunConfig,
    output: PathBuf,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn output_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output).map_err(|e| Error::io(&self.output, e))?;
        Ok(self.output.join(name))
    }

    fn say(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", line.as_ref());
    }

    fn log(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.err, "{}", line.as_ref());
    }
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::InvalidConfig(format!("no {what} path given")))
}

fn load_context<'a>(
    common: &Common,
    config_dir: Option<&Path>,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
) -> Result<Ctx<'a>> {
    let mut cfg = match resolve_config_path(common.config.as_deref(), config_dir) {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    let output = common.output.clone().or_else(|| cfg.paths.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    Ok(Ctx { cfg, output, out, err })
}

fn cmd_train(ctx: &mut Ctx<'_>, train: Option<PathBuf>, architecture: Option<ArchitectureKind>) -> Result<()> {
    if let Some(a) = architecture {
        ctx.cfg.architecture = a;
    }
    ctx.cfg.validate()?;
    let cfg = ctx.cfg.clone();
    let path = require(train.or(cfg.paths.train.clone()), "training data")?;
    let data = load_qe_dataset(&path, &cfg.columns)?;
    let texts: Vec<&str> = data.iter().flat_map(|p| [p.original.as_str(), p.translation.as_str()]).collect();
    let vocab = build_vocab(&texts, cfg.model.max_vocab)?;
    let enc = cfg.model.encoder_config(vocab.len(), cfg.training.seed);
    let model = match cfg.architecture {
        ArchitectureKind::Mono => QEModel::mono(enc, cfg.pooling())?,
        ArchitectureKind::Siamese => QEModel::siamese(enc, cfg.pooling(), cfg.share_weights)?,
    };
    ctx.log(format!(
        "training {:?} model: {} parameters, {} rows, vocab {}",
        cfg.architecture,
        model.num_parameters(),
        data.len(),
        vocab.len()
    ));
    let log_path = ctx.output_file(TRAIN_LOG_FILE)?;
    let mut log = String::from("round\tstep\ttrain_loss\teval_loss\tbest\n");
    let result = {
        let err = &mut *ctx.err;
        train_with_log(&model, &vocab, &data, &cfg.training, &mut |r| {
            let line = r.log_line();
            let _ = writeln!(err, "{line}");
            log.push_str(&line);
            log.push('\n');
        })?
    };
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let ckpt_path = ctx.output_file(CHECKPOINT_FILE)?;
    save_checkpoint(&result.checkpoint, &ckpt_path)?;
    let h = &result.history;
    ctx.say(format!("checkpoint={}", ckpt_path.display()));
    ctx.say(format!("best_eval_loss={}", h.best_eval_loss));
    ctx.say(format!("best_round={}", h.best_round));
    ctx.say(format!("steps={}", h.steps_run()));
    ctx.say(format!("stop_reason={}", h.stop_reason));
    Ok(())
}

fn columns_for_scoring(cfg: &RunConfig, explicit: bool) -> ColumnMap {
    if explicit {
        ColumnMap { score: None, z_score: None, ..cfg.columns.clone() }
    } else {
        ColumnMap::unlabelled()
    }
}

/// Loads a TSV to score; a zero-byte file is empty input.
fn load_inputs(path: &Path, map: &ColumnMap) -> Result<Vec<QEPair>> {
    match fs::metadata(path) {
        Ok(m) if m.len() == 0 => Ok(Vec::new()),
        _ => load_qe_dataset(path, map),
    }
}

fn cmd_predict(ctx: &mut Ctx<'_>, checkpoint: PathBuf, input: Option<PathBuf>, has_config: bool) -> Result<()> {
    let ckpt = load_checkpoint(&checkpoint)?;
    let (model, vocab) = QEModel::from_checkpoint(&ckpt)?;
    let path = require(input.or(ctx.cfg.paths.test.clone()), "input")?;
    let pairs = load_inputs(&path, &columns_for_scoring(&ctx.cfg, has_config))?;
    let preds = model.predict_pairs(&pairs, &vocab)?;
    let out = ctx.output_file(PREDICTIONS_FILE)?;
    write_predictions(&preds, &out)?;
    ctx.log(format!("scored {} rows", preds.len()));
    ctx.say(format!("predictions={}", out.display()));
    Ok(())
}

fn cmd_evaluate(ctx: &mut Ctx<'_>, predictions: PathBuf, gold: Option<PathBuf>) -> Result<()> {
    let preds = read_predictions(&predictions)?;
    let path = require(gold.or(ctx.cfg.paths.dev.clone()), "gold")?;
    let gold = load_qe_dataset(&path, &ctx.cfg.columns)?;
    let report = evaluate_predictions(&preds, &gold)?;
    let _ = write!(ctx.out, "{report}");
    Ok(())
}

fn cmd_ensemble(
    ctx: &mut Ctx<'_>,
    preds_a: PathBuf,
    preds_b: PathBuf,
    weight_a: Option<f64>,
    select_on: Option<PathBuf>,
) -> Result<()> {
    let mut a = read_predictions(&preds_a)?;
    let mut b = read_predictions(&preds_b)?;
    a.sort_by_key(|p| p.index);
    b.sort_by_key(|p| p.index);
    let spec = match (weight_a, select_on) {
        (Some(w), _) => EnsembleSpec::from_weight_a(w)?,
        (None, Some(gold)) => {
            let mut gold = load_qe_dataset(&gold, &ctx.cfg.columns)?;
            gold.sort_by_key(|p| p.index);
            crate::eval::check_aligned(a.iter().map(|p| p.index), gold.iter().map(|p| p.index))?;
            let golds: Vec<f64> = gold.iter().map(|p| p.z_score).collect();
            grid_select_weight(&a, &b, &golds, &EnsembleSpec::default_grid())?
        }
        (None, None) => ctx.cfg.ensemble,
    };
    spec.validate()?;
    let blended = ensemble_predict(&a, &b, &spec)?;
    let out = ctx.output_file(ENSEMBLE_FILE)?;
    write_predictions(&blended, &out)?;
    ctx.say(format!("weight_a={}", spec.weight_a));
    ctx.say(format!("weight_b={}", spec.weight_b));
    ctx.say(format!("predictions={}", out.display()));
    Ok(())
}

fn cmd_augment(
    ctx: &mut Ctx<'_>,
    train: Option<PathBuf>,
    parallel: Option<PathBuf>,
    n: Option<usize>,
    label: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    let mut policy = ctx.cfg.augment;
    if let Some(n) = n {
        policy.n_pairs = n;
    }
    if let Some(l) = label {
        policy.label_policy = l.parse()?;
    }
    if let Some(s) = seed {
        policy.seed = s;
    }
    policy.validate()?;
    let train = load_qe_dataset(require(train.or(ctx.cfg.paths.train.clone()), "training data")?, &ctx.cfg.columns)?;
    let corpus = load_parallel_corpus(require(parallel.or(ctx.cfg.paths.parallel.clone()), "parallel corpus")?)?;
    if corpus.skipped_blank > 0 {
        ctx.log(format!("skipped {} blank parallel lines", corpus.skipped_blank));
    }
    let augmented = augment_dataset(&train, &corpus.pairs, &policy)?;
    let out = ctx.output_file(AUGMENTED_FILE)?;
    write_qe_dataset(&out, &augmented)?;
    ctx.say(format!("rows={}", augmented.len()));
    ctx.say(format!("augmented={}", out.display()));
    Ok(())
}

fn cmd_selftest(ctx: &mut Ctx<'_>) -> Result<bool> {
    let mut ok = true;
    for c in crate::selftest::run_all()? {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        ok &= c.passed();
        ctx.say(format!("{status}\t{}\terror={:e}\ttolerance={:e}", c.name, c.error, c.tolerance));
    }
    Ok(ok)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, config_dir: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let sink: &mut dyn Write = if code == EXIT_OK { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, config_dir, &mut *out, &mut *err) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(e.kind())
        }
    }
}

fn dispatch(command: Command, config_dir: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    let common = match &command {
        Command::Train { common, .. }
        | Command::Predict { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Ensemble { common, .. }
        | Command::Augment { common, .. }
        | Command::Selftest { common } => common,
    };
    let has_config = resolve_config_path(common.config.as_deref(), config_dir).is_some();
    let seed = common.seed;
    let mut ctx = load_context(common, config_dir, out, err)?;
    match command {
        Command::Train { train, architecture, .. } => cmd_train(&mut ctx, train, architecture).map(|_| true),
        Command::Predict { checkpoint, input, .. } => cmd_predict(&mut ctx, checkpoint, input, has_config).map(|_| true),
        Command::Evaluate { predictions, gold, .. } => cmd_evaluate(&mut ctx, predictions, gold).map(|_| true),
        Command::Ensemble { preds_a, preds_b, weight_a, select_on, .. } => {
            cmd_ensemble(&mut ctx, preds_a, preds_b, weight_a, select_on).map(|_| true)
        }
        Command::Augment { train, parallel, n, label, .. } => {
            cmd_augment(&mut ctx, train, parallel, n, label, seed).map(|_| true)
        }
        Command::Selftest { .. } => cmd_selftest(&mut ctx),
    }
}
