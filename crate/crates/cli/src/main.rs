//! `sxl`: data generation, pretraining, finetuning, loss landscape and
//! attention dumps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sxl_core::analysis::{self, AnalysisError, DumpMode, LandscapeMeta, Objective};
use sxl_core::checkpoint::{peek_dtype, Checkpoint};
use sxl_core::features::{
    self, apply_cmvn, compute_global_cmvn, stack_frames, stack_labeled, CmvnStats, FeatureSequence,
    LabeledCorpus, SyntheticConfig, DEFAULT_VARIANCE_FLOOR,
};
use sxl_core::model::{Encoder, ModelConfig};
use sxl_core::optim::{NoamSchedule, Schedule};
use sxl_core::parallel;
use sxl_core::permutation::{sample_permutation, PermMode};
use sxl_core::rng::{self, Purpose};
use sxl_core::trainer::{self, TrainConfig, TrainError, TrainMode};
use sxl_core::{DType, Real};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.sxck";
const INIT_CHECKPOINT_FILE: &str = "init.sxck";
const METRICS_FILE: &str = "metrics.csv";
const CMVN_FILE: &str = "cmvn.json";

#[derive(Parser)]
#[command(name = "sxl", version, about = "Permutation-order pretraining for acoustic encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus (features.sxlf + labels.sxll).
    GenData(GenDataArgs),
    /// Pretrain an encoder on unlabeled features.
    Pretrain(TrainArgs),
    /// Train a frame classifier, optionally from a pretrained encoder.
    Finetune(TrainArgs),
    /// Loss along the line between two checkpoints.
    Landscape(LandscapeArgs),
    /// Per-head attention probabilities for one utterance.
    AttnDump(AttnArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    utts: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Precision {
    #[default]
    F32,
    F64,
}

/// Feature preprocessing applied before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    /// Global CMVN. Statistics come from `cmvn_stats` when set, otherwise
    /// from the training features.
    cmvn: bool,
    cmvn_stats: Option<PathBuf>,
    stack: usize,
    skip: usize,
    precision: Precision,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cmvn: true,
            cmvn_stats: None,
            stack: 1,
            skip: 1,
            precision: Precision::F32,
        }
    }
}

/// Everything a training run depends on. Echoed to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PermArg {
    Random,
    Identity,
}

impl From<PermArg> for PermMode {
    fn from(p: PermArg) -> Self {
        match p {
            PermArg::Random => PermMode::Random,
            PermArg::Identity => PermMode::Identity,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// SXLF feature file.
    #[arg(long)]
    features: PathBuf,
    /// SXLL label file (finetune).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Held-out features and labels (finetune). Without them a seeded
    /// fraction of the training set is held out.
    #[arg(long, requires = "dev_labels")]
    dev_features: Option<PathBuf>,
    #[arg(long, requires = "dev_features")]
    dev_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON config with `model`, `train` and `data` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset (toy, hybrid, e2e) applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    perm: Option<PermArg>,
    #[arg(long)]
    tail_fraction: Option<f64>,
    #[arg(long)]
    batch_frames: Option<usize>,
    #[arg(long)]
    accum_steps: Option<usize>,
    /// Peak learning rate of the linear schedule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    /// Switch to the Noam schedule with this multiplier.
    #[arg(long)]
    noam_k: Option<f64>,
    /// Noam with a positive d_model exponent.
    #[arg(long, requires = "noam_k")]
    paper_exact_noam: bool,
    /// Pretrained checkpoint for the encoder, or `none`.
    #[arg(long)]
    init_from: Option<String>,
    /// Glob over parameter names to keep fixed. Repeatable.
    #[arg(long)]
    freeze: Vec<String>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// CMVN statistics JSON to apply, or `none` to skip normalization.
    #[arg(long)]
    cmvn: Option<String>,
    /// Generic override, e.g. `--set model.d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long)]
    ckpt0: PathBuf,
    #[arg(long)]
    ckpt1: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// With labels the objective is frame cross-entropy, without it the
    /// pretraining loss.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = analysis::DEFAULT_ALPHA_MIN, allow_hyphen_values = true)]
    alpha_min: f64,
    #[arg(long, default_value_t = analysis::DEFAULT_ALPHA_MAX, allow_hyphen_values = true)]
    alpha_max: f64,
    #[arg(long, default_value_t = analysis::DEFAULT_POINTS)]
    points: usize,
    /// Parameters held at the second checkpoint. Defaults to the classifier.
    #[arg(long)]
    freeze: Vec<String>,
    #[arg(long, conflicts_with = "freeze")]
    no_freeze: bool,
    #[arg(long, value_enum, default_value = "random")]
    perm: PermArg,
    #[arg(long, default_value_t = 0.2)]
    tail_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cmvn: Option<String>,
    #[arg(long, default_value_t = 1)]
    stack: usize,
    #[arg(long, default_value_t = 1)]
    skip: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DumpArg {
    Pretrain,
    Finetune,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Utterance index in the feature file.
    #[arg(long, default_value_t = 0)]
    utt: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pretrain")]
    mode: DumpArg,
    #[arg(long, value_enum, default_value = "random")]
    perm: PermArg,
    #[arg(long, default_value_t = 0.2)]
    tail_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cmvn: Option<String>,
    #[arg(long, default_value_t = 1)]
    stack: usize,
    #[arg(long, default_value_t = 1)]
    skip: usize,
}

// ---------------------------------------------------------------------------
// Errors

enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        let numerical = e
            .chain()
            .any(|c| match c.downcast_ref::<TrainError>() {
                Some(t) => t.is_numerical(),
                None => matches!(c.downcast_ref::<AnalysisError>(), Some(AnalysisError::NonFinite(_)) | Some(AnalysisError::Train(TrainError::NonFiniteLoss { .. }))),
            });
        if numerical {
            Failure::Numerical(e)
        } else {
            Failure::Usage(e)
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = parallel::threads_from_env();
    let result = parallel::with_threads(threads, move || match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => train(a, TrainMode::Pretrain),
        Command::Finetune(a) => train(a, TrainMode::Finetune),
        Command::Landscape(a) => landscape(a),
        Command::AttnDump(a) => attn_dump(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}

// ---------------------------------------------------------------------------
// Config plumbing

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Deep-merges `patch` into `base`; objects merge key by key, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`. The value is parsed as JSON when possible, else taken as
/// a string.
fn apply_override(root: &mut Value, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {} is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn resolve_run_config(a: &TrainArgs, mode: TrainMode) -> anyhow::Result<RunConfig> {
    let mut base = RunConfig::default();
    if let Some(name) = &a.preset {
        base.model = ModelConfig::preset(name).ok_or_else(|| anyhow!("unknown preset {name:?} (toy, hybrid, e2e)"))?;
    }
    let mut root = serde_json::to_value(&base)?;
    if let Some(path) = &a.config {
        merge(&mut root, read_json(path)?);
    }
    for o in &a.overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).context("invalid config")?;

    let t = &mut cfg.train;
    t.mode = mode;
    if let Some(v) = a.steps {
        t.total_steps = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.perm {
        t.perm_mode = v.into();
    }
    if let Some(v) = a.tail_fraction {
        t.tail_fraction = v;
    }
    if let Some(v) = a.batch_frames {
        t.batch_frames = v;
    }
    if let Some(v) = a.accum_steps {
        t.accum_steps = v;
    }
    if let Some(v) = a.eval_interval {
        t.eval_interval = v;
    }
    if !a.freeze.is_empty() {
        t.freeze = a.freeze.clone();
    }
    match a.init_from.as_deref() {
        None => {}
        Some("none") => t.init_from = None,
        Some(p) => t.init_from = Some(PathBuf::from(p)),
    }
    if let Some(k) = a.noam_k {
        let warmup = a.warmup.unwrap_or(match t.schedule {
            Schedule::LinearWarmupDecay(s) => s.warmup_steps,
            Schedule::Noam(s) => s.warmup_steps,
        });
        let noam = NoamSchedule::new(k, cfg.model.d_model, warmup);
        t.schedule = Schedule::Noam(if a.paper_exact_noam { noam.paper_exact() } else { noam });
    } else if let Schedule::LinearWarmupDecay(s) = &mut t.schedule {
        if let Some(v) = a.lr {
            s.peak_lr = v;
        }
        if let Some(v) = a.warmup {
            s.warmup_steps = v;
        }
        // The decay horizon follows the run length unless the config pins it.
        if a.steps.is_some() {
            s.total_steps = t.total_steps;
        }
    } else if a.lr.is_some() {
        bail!("--lr applies to the linear schedule; the config selects noam");
    } else if let (Schedule::Noam(s), Some(w)) = (&mut t.schedule, a.warmup) {
        s.warmup_steps = w;
    }

    if let Some(p) = a.precision {
        cfg.data.precision = p;
    }
    match a.cmvn.as_deref() {
        None => {}
        Some("none") => {
            cfg.data.cmvn = false;
            cfg.data.cmvn_stats = None;
        }
        Some(p) => {
            cfg.data.cmvn = true;
            cfg.data.cmvn_stats = Some(PathBuf::from(p));
        }
    }
    if cfg.data.stack == 0 || cfg.data.skip == 0 {
        bail!("data.stack and data.skip must be at least 1");
    }
    cfg.train.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Features

/// CMVN source: explicit stats file, `none`, or computed from `reference`.
fn cmvn_stats(spec: Option<&str>, enabled: bool, reference: &[FeatureSequence]) -> anyhow::Result<Option<CmvnStats>> {
    if !enabled {
        return Ok(None);
    }
    match spec {
        Some("none") => Ok(None),
        Some(path) => {
            let v = read_json(Path::new(path))?;
            Ok(Some(serde_json::from_value(v).with_context(|| format!("CMVN stats in {path}"))?))
        }
        None => Ok(Some(compute_global_cmvn(reference)?)),
    }
}

fn normalize(seqs: &[FeatureSequence], stats: Option<&CmvnStats>) -> anyhow::Result<Vec<FeatureSequence>> {
    match stats {
        None => Ok(seqs.to_vec()),
        Some(s) => seqs
            .iter()
            .map(|q| apply_cmvn(q, s, DEFAULT_VARIANCE_FLOOR).map_err(Into::into))
            .collect(),
    }
}

fn stack_all(seqs: Vec<FeatureSequence>, stack: usize, skip: usize) -> Vec<FeatureSequence> {
    if stack == 1 && skip == 1 {
        return seqs;
    }
    seqs.iter().map(|s| stack_frames(s, stack, skip)).collect()
}

fn load_labeled(features: &Path, labels: &Path, num_classes: usize) -> anyhow::Result<LabeledCorpus> {
    let seqs = features::load_features(features)?;
    let labels = features::load_labels(labels)?;
    Ok(LabeledCorpus::new(seqs, labels, num_classes)?)
}

fn normalize_labeled(c: &LabeledCorpus, stats: Option<&CmvnStats>, stack: usize, skip: usize) -> anyhow::Result<LabeledCorpus> {
    let norm = LabeledCorpus::new(normalize(&c.sequences, stats)?, c.labels.clone(), c.num_classes)?;
    Ok(if stack == 1 && skip == 1 {
        norm
    } else {
        stack_labeled(&norm, stack, skip)
    })
}

fn input_dim(seqs: &[FeatureSequence]) -> anyhow::Result<usize> {
    seqs.first()
        .map(FeatureSequence::dim)
        .ok_or_else(|| anyhow!("feature file holds no utterances"))
}

// ---------------------------------------------------------------------------
// Commands

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut root = serde_json::to_value(SyntheticConfig::default())?;
    if let Some(path) = &a.config {
        merge(&mut root, read_json(path)?);
    }
    let mut cfg: SyntheticConfig = serde_json::from_value(root).context("invalid generator config")?;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.num_utts, a.utts);
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.min_frames, a.min_frames);
    set(&mut cfg.max_frames, a.max_frames);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    let corpus = features::gen_synthetic(&cfg)?;
    features::save_features(&a.out.join("features.sxlf"), &corpus.sequences)?;
    features::save_labels(&a.out.join("labels.sxll"), &corpus.labels)?;
    println!("utterances {} frames {}", corpus.len(), corpus.total_frames());
    Ok(())
}

fn train(a: TrainArgs, mode: TrainMode) -> CliResult {
    let mut cfg = resolve_run_config(&a, mode)?;
    let raw = features::load_features(&a.features)?;
    let d = cfg.data.clone();
    let stats = cmvn_stats(
        d.cmvn_stats.as_ref().map(|p| p.to_str().unwrap_or_default()),
        d.cmvn,
        &raw,
    )?;
    create_dir(&a.out)?;
    if let Some(s) = &stats {
        write_json(&a.out.join(CMVN_FILE), s)?;
    }
    match mode {
        TrainMode::Pretrain => {
            let seqs = stack_all(normalize(&raw, stats.as_ref())?, d.stack, d.skip);
            cfg.model.input_dim = input_dim(&seqs)?;
            cfg.model.validate()?;
            write_json(&a.out.join(CONFIG_FILE), &cfg)?;
            match d.precision {
                Precision::F32 => run_pretrain::<f32>(&seqs, &cfg, &a.out),
                Precision::F64 => run_pretrain::<f64>(&seqs, &cfg, &a.out),
            }
        }
        TrainMode::Finetune => {
            let labels = a.labels.as_ref().ok_or_else(|| anyhow!("finetune needs --labels"))?;
            let classes = cfg.model.num_classes;
            let prep = |c: LabeledCorpus| normalize_labeled(&c, stats.as_ref(), d.stack, d.skip);
            let train = prep(LabeledCorpus::new(raw, features::load_labels(labels)?, classes)?)?;
            let dev = match (&a.dev_features, &a.dev_labels) {
                (Some(f), Some(l)) => Some(prep(load_labeled(f, l, classes)?)?),
                _ => None,
            };
            cfg.model.input_dim = input_dim(&train.sequences)?;
            cfg.model.validate()?;
            write_json(&a.out.join(CONFIG_FILE), &cfg)?;
            match d.precision {
                Precision::F32 => run_finetune::<f32>(&train, dev.as_ref(), &cfg, &a.out),
                Precision::F64 => run_finetune::<f64>(&train, dev.as_ref(), &cfg, &a.out),
            }
        }
    }
}

fn run_pretrain<T: Real>(seqs: &[FeatureSequence], cfg: &RunConfig, out: &Path) -> CliResult {
    let ck = trainer::pretrain::<T>(seqs, &cfg.model, &cfg.train)?;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    trainer::write_metrics_csv(&out.join(METRICS_FILE), &ck.history)?;
    let first = ck.history.iter().find(|h| h.metric == "huber").map(|h| h.value);
    let last = trainer::smoothed(&ck.history, "train", "huber", 10);
    println!(
        "steps {} huber first {} last10 {}",
        ck.step,
        first.map_or("-".into(), |v| format!("{v:.6}")),
        last.map_or("-".into(), |v| format!("{v:.6}"))
    );
    Ok(())
}

fn run_finetune<T: Real>(train: &LabeledCorpus, dev: Option<&LabeledCorpus>, cfg: &RunConfig, out: &Path) -> CliResult {
    let outcome = trainer::finetune::<T>(train, dev, &cfg.model, &cfg.train)?;
    outcome.initial.save(&out.join(INIT_CHECKPOINT_FILE))?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    trainer::write_metrics_csv(&out.join(METRICS_FILE), &outcome.checkpoint.history)?;
    println!(
        "steps {} dev ce {:.6} accuracy {:.4}",
        outcome.checkpoint.step, outcome.dev.ce, outcome.dev.accuracy
    );
    Ok(())
}

fn landscape(a: LandscapeArgs) -> CliResult {
    let bytes = std::fs::read(&a.ckpt1).with_context(|| format!("reading {}", a.ckpt1.display()))?;
    match peek_dtype(&bytes) {
        Some(DType::F64) => landscape_as::<f64>(&a),
        _ => landscape_as::<f32>(&a),
    }
}

fn landscape_as<T: Real>(a: &LandscapeArgs) -> CliResult {
    let c0 = Checkpoint::<T>::load(&a.ckpt0)?;
    let c1 = Checkpoint::<T>::load(&a.ckpt1)?;
    let raw = features::load_features(&a.features)?;
    let stats = cmvn_stats(a.cmvn.as_deref(), true, &raw)?;
    let frozen: Vec<String> = if a.no_freeze {
        Vec::new()
    } else if a.freeze.is_empty() {
        analysis::DEFAULT_FROZEN.iter().map(|s| s.to_string()).collect()
    } else {
        a.freeze.clone()
    };
    let labeled;
    let seqs;
    let objective = match &a.labels {
        Some(l) => {
            let c = LabeledCorpus::new(raw, features::load_labels(l)?, c1.config.num_classes)?;
            labeled = normalize_labeled(&c, stats.as_ref(), a.stack, a.skip)?;
            Objective::Finetune { corpus: &labeled }
        }
        None => {
            seqs = stack_all(normalize(&raw, stats.as_ref())?, a.stack, a.skip);
            Objective::Pretrain {
                sequences: &seqs,
                perm_mode: a.perm.into(),
                tail_fraction: a.tail_fraction,
                seed: a.seed,
            }
        }
    };
    let meta = LandscapeMeta {
        checkpoint0: a.ckpt0.display().to_string(),
        checkpoint1: a.ckpt1.display().to_string(),
        dataset: a.features.display().to_string(),
        objective: objective.name().to_string(),
        frozen: Vec::new(),
    };
    let curve = analysis::loss_landscape(&c0, &c1, &objective, a.alpha_min, a.alpha_max, a.points, &frozen, meta)?;
    create_dir(&a.out)?;
    std::fs::write(a.out.join("landscape.csv"), analysis::landscape_csv(&curve))?;
    write_json(&a.out.join("landscape.json"), &curve.meta)?;
    println!("points {} objective {}", curve.alphas.len(), curve.meta.objective);
    Ok(())
}

fn attn_dump(a: AttnArgs) -> CliResult {
    let bytes = std::fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    match peek_dtype(&bytes) {
        Some(DType::F64) => attn_dump_as::<f64>(&a),
        _ => attn_dump_as::<f32>(&a),
    }
}

fn attn_dump_as<T: Real>(a: &AttnArgs) -> CliResult {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let raw = features::load_features(&a.features)?;
    let stats = cmvn_stats(a.cmvn.as_deref(), true, &raw)?;
    let seqs = stack_all(normalize(&raw, stats.as_ref())?, a.stack, a.skip);
    let seq = seqs
        .get(a.utt)
        .ok_or_else(|| anyhow!("utterance index {} out of range ({} utterances)", a.utt, seqs.len()))?;
    let enc = Encoder::new(ck.config.clone(), ck.params)?;
    let frames = seq.frames.cast::<T>();
    let (mode, order) = match a.mode {
        DumpArg::Finetune => (DumpMode::Finetune, None),
        DumpArg::Pretrain => {
            let mut r = rng::sequence_stream(a.seed, 0, a.utt as u64, Purpose::Permutation);
            let order = sample_permutation(frames.rows(), a.perm.into(), &mut r);
            let listed = order.order().to_vec();
            (
                DumpMode::Pretrain {
                    order,
                    fraction: a.tail_fraction,
                },
                Some(listed),
            )
        }
    };
    let maps = analysis::dump_attention(&enc, &frames, &mode)?;
    let meta = analysis::AttentionMeta {
        utterance: seq.id.clone(),
        mode: format!("{:?}", a.mode).to_lowercase(),
        length: frames.rows(),
        order,
        heads: Vec::new(),
    };
    let paths = analysis::write_attention_dump(&a.out, &maps, meta)?;
    println!("wrote {} files to {}", paths.len(), a.out.display());
    Ok(())
}
