//! Frame-budget batching and the pretrain / finetune loops.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, MetricRecord, RngState};
use crate::features::{FeatureSequence, LabeledCorpus};
use crate::model::{self, Encoder, ModelConfig, ModelError, ParamSet};
use crate::optim::{adam_step, AdamConfig, AdamState, GradAccumulator, LinearSchedule, OptimError, Schedule};
use crate::parallel;
use crate::permutation::{build_masks, sample_permutation, AttentionMasks, PermMode, PermutationError};
use crate::real::Real;
use crate::rng::{self, Purpose, SxlRng};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite loss at step {step} on utterance {utterance}")]
    NonFiniteLoss { step: u64, utterance: String },
    #[error("step {step}: {source}")]
    Optim { step: u64, source: OptimError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Permutation(#[from] PermutationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not fit the model: {0}")]
    InitMismatch(String),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::Optim {
                    source: OptimError::NonFinite(_),
                    ..
                }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub perm_mode: PermMode,
    pub tail_fraction: f64,
    pub batch_frames: usize,
    pub accum_steps: usize,
    pub total_steps: u64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub init_from: Option<PathBuf>,
    /// Glob patterns (`*`, `?`) over parameter names to hold fixed.
    pub freeze: Vec<String>,
    /// Finetune: evaluate on the dev split every this many steps (0 = only
    /// at the start and end).
    pub eval_interval: u64,
    /// Finetune: fraction of utterances held out when no dev set is given.
    pub dev_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            perm_mode: PermMode::Random,
            tail_fraction: 0.2,
            batch_frames: 2000,
            accum_steps: 1,
            total_steps: 200,
            schedule: Schedule::LinearWarmupDecay(LinearSchedule {
                peak_lr: 1e-3,
                warmup_steps: 20,
                total_steps: 200,
            }),
            adam: AdamConfig::hybrid(),
            seed: 0,
            init_from: None,
            freeze: Vec::new(),
            eval_interval: 50,
            dev_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.accum_steps == 0 {
            return bad("accum_steps must be at least 1".into());
        }
        if self.batch_frames == 0 {
            return bad("batch_frames must be positive".into());
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return bad(format!("tail_fraction {} outside (0, 1]", self.tail_fraction));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad(format!("dev_fraction {} outside [0, 1)", self.dev_fraction));
        }
        self.schedule
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        for p in &self.freeze {
            glob::Pattern::new(p).map_err(|e| TrainError::Config(format!("freeze pattern {p:?}: {e}")))?;
        }
        Ok(())
    }

    fn expect_mode(&self, mode: TrainMode) -> Result<(), TrainError> {
        if self.mode != mode {
            return Err(TrainError::Config(format!(
                "config mode is {:?}, expected {mode:?}",
                self.mode
            )));
        }
        Ok(())
    }
}

/// `true` for parameters not matched by any freeze pattern.
pub fn trainable_mask<T: Real>(params: &ParamSet<T>, freeze: &[String]) -> Result<Vec<bool>, TrainError> {
    let pats = freeze
        .iter()
        .map(|p| glob::Pattern::new(p).map_err(|e| TrainError::Config(format!("freeze pattern {p:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(params.names().map(|n| !pats.iter().any(|p| p.matches(n))).collect())
}

/// Greedy packing of utterances, shuffled per `(seed, epoch)`, into
/// batches of at most `budget` frames. Returns utterance indices.
pub fn batch_by_frames(
    seqs: &[FeatureSequence],
    budget: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if let Some(s) = seqs.iter().find(|s| s.num_frames() > budget) {
        return Err(TrainError::Input(format!(
            "utterance {} has {} frames, more than the batch budget of {budget}",
            s.id,
            s.num_frames()
        )));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, &[epoch]));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let n = seqs[i].num_frames();
        if used + n > budget && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Seeded held-out split. Returns sorted `(train, dev)` index lists; `dev`
/// holds `round(fraction * n)` utterances, at least one when `n >= 2` and
/// `fraction > 0`.
pub fn split_dev(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Split, &[]));
    let mut k = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut dev = idx.split_off(n - k);
    idx.sort_unstable();
    dev.sort_unstable();
    (idx, dev)
}

/// Deterministic batch iterator that reshuffles at every epoch boundary.
struct BatchStream<'a> {
    seqs: &'a [FeatureSequence],
    budget: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    batches: Vec<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    fn new(seqs: &'a [FeatureSequence], budget: usize, seed: u64) -> Result<Self, TrainError> {
        Ok(Self {
            batches: batch_by_frames(seqs, budget, seed, 0)?,
            seqs,
            budget,
            seed,
            epoch: 0,
            cursor: 0,
        })
    }

    fn next_batch(&mut self) -> Result<(u64, Vec<usize>), TrainError> {
        if self.cursor == self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.batches = batch_by_frames(self.seqs, self.budget, self.seed, self.epoch)?;
        }
        self.cursor += 1;
        Ok((self.epoch, self.batches[self.cursor - 1].clone()))
    }

    fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            epoch: self.epoch,
            cursor: self.cursor as u64,
        }
    }
}

/// One sequence's share of a pretraining micro-batch.
pub struct PretrainItem<'a, T> {
    pub id: &'a str,
    pub frames: &'a Tensor<T>,
    pub masks: AttentionMasks,
    /// `None` disables dropout.
    pub dropout: Option<SxlRng>,
}

/// Loss and gradients summed over a micro-batch.
pub struct BatchGrads<T> {
    pub loss: T,
    pub grads: Vec<Option<Tensor<T>>>,
}

fn reduce<T: Real>(
    slots: usize,
    results: Vec<Result<(T, Vec<Option<Tensor<T>>>), ModelError>>,
    ids: impl Fn(usize) -> String,
    step: u64,
) -> Result<BatchGrads<T>, TrainError> {
    let mut acc = GradAccumulator::new(slots);
    let mut loss = T::zero();
    for (i, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, utterance: ids(i) });
        }
        loss = loss + l;
        acc.add(g).expect("slot count fixed");
    }
    // Sum, not mean: each item's loss already carries the batch normalizer.
    Ok(BatchGrads {
        loss,
        grads: acc.take_sum(),
    })
}

/// Pretraining loss and gradient of one micro-batch, normalized by the
/// number of predicted elements in the batch. Sequences are evaluated in
/// parallel and reduced in order.
pub fn pretrain_batch<T: Real>(
    enc: &Encoder<T>,
    items: &[PretrainItem<T>],
    trainable: Option<&[bool]>,
    step: u64,
) -> Result<BatchGrads<T>, TrainError> {
    let elems: usize = items
        .iter()
        .map(|it| it.masks.targets.len() * it.frames.cols())
        .sum();
    let norm = T::of(elems as f64);
    let results = parallel::map_ordered(items, |_, it| {
        let mut rng = it.dropout.clone();
        enc.pretrain_loss_grad(it.frames, &it.masks, norm, trainable, rng.as_mut())
    });
    reduce(enc.params.len(), results, |i| items[i].id.to_string(), step)
}

/// One sequence's share of a finetuning micro-batch.
pub struct FinetuneItem<'a, T> {
    pub id: &'a str,
    pub frames: &'a Tensor<T>,
    pub labels: &'a [usize],
    pub dropout: Option<SxlRng>,
}

/// Cross-entropy and gradient of one micro-batch, normalized by its frame
/// count.
pub fn finetune_batch<T: Real>(
    enc: &Encoder<T>,
    items: &[FinetuneItem<T>],
    trainable: Option<&[bool]>,
    step: u64,
) -> Result<BatchGrads<T>, TrainError> {
    let frames: usize = items.iter().map(|it| it.labels.len()).sum();
    let norm = T::of(frames as f64);
    let results = parallel::map_ordered(items, |_, it| {
        let mut rng = it.dropout.clone();
        enc.finetune_loss_grad(it.frames, it.labels, norm, trainable, rng.as_mut())
    });
    reduce(enc.params.len(), results, |i| items[i].id.to_string(), step)
}

/// Masks for sequence `index` at its encounter in `epoch`.
pub fn masks_for(
    len: usize,
    mode: PermMode,
    fraction: f64,
    seed: u64,
    epoch: u64,
    index: usize,
) -> Result<AttentionMasks, TrainError> {
    let mut r = rng::sequence_stream(seed, epoch, index as u64, Purpose::Permutation);
    let perm = sample_permutation(len, mode, &mut r);
    Ok(build_masks(&perm, fraction)?)
}

fn dropout_rng(dropout: f64, seed: u64, epoch: u64, index: usize, step: u64) -> Option<SxlRng> {
    (dropout > 0.0).then(|| rng::stream(seed, Purpose::Dropout, &[epoch, index as u64, step]))
}

fn cast_frames<T: Real>(seqs: &[FeatureSequence]) -> Vec<Tensor<T>> {
    seqs.iter().map(|s| s.frames.cast()).collect()
}

fn record(history: &mut Vec<MetricRecord>, step: u64, split: &str, metric: &str, value: f64) {
    history.push(MetricRecord {
        step,
        split: split.to_string(),
        metric: metric.to_string(),
        value,
    });
}

fn optimizer_update<T: Real>(
    enc: &mut Encoder<T>,
    acc: &mut GradAccumulator<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
    step: u64,
) -> Result<f64, TrainError> {
    let lr = config
        .schedule
        .lr(step)
        .map_err(|source| TrainError::Optim { step, source })?;
    let grads = acc.take_mean();
    adam_step(&mut enc.params, &grads, state, lr, &config.adam).map_err(|source| TrainError::Optim { step, source })?;
    Ok(lr)
}

/// Runs `config.total_steps` updates of the tail-prediction objective.
/// Each update averages `accum_steps` micro-batches; every encounter of a
/// sequence draws a fresh order from its `(seed, epoch, index)` stream.
pub fn pretrain<T: Real>(
    corpus: &[FeatureSequence],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<Checkpoint<T>, TrainError> {
    config.validate()?;
    config.expect_mode(TrainMode::Pretrain)?;
    if corpus.is_empty() {
        return Err(TrainError::Input("pretraining corpus is empty".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.dim() != model_config.input_dim) {
        return Err(TrainError::Input(format!(
            "utterance {} has dim {} but the model expects {}",
            s.id,
            s.dim(),
            model_config.input_dim
        )));
    }
    let mut enc = match &config.init_from {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            ck.check_config(model_config)?;
            Encoder::new(model_config.clone(), ck.params)?
        }
        None => Encoder::init(model_config.clone(), config.seed)?,
    };
    let trainable = trainable_mask(&enc.params, &config.freeze)?;
    let frames = cast_frames::<T>(corpus);
    let mut stream = BatchStream::new(corpus, config.batch_frames, config.seed)?;
    let mut state = AdamState::new(&enc.params);
    let mut acc = GradAccumulator::new(enc.params.len());
    let mut history = Vec::new();

    for step in 1..=config.total_steps {
        let mut loss = 0.0;
        for _ in 0..config.accum_steps {
            let (epoch, batch) = stream.next_batch()?;
            let items = batch
                .iter()
                .map(|&i| {
                    Ok(PretrainItem {
                        id: &corpus[i].id,
                        frames: &frames[i],
                        masks: masks_for(frames[i].rows(), config.perm_mode, config.tail_fraction, config.seed, epoch, i)?,
                        dropout: dropout_rng(model_config.dropout, config.seed, epoch, i, step),
                    })
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let out = pretrain_batch(&enc, &items, Some(&trainable), step)?;
            loss += out.loss.as_f64();
            acc.add(out.grads).expect("slot count fixed");
        }
        let lr = optimizer_update(&mut enc, &mut acc, &mut state, config, step)?;
        record(&mut history, step, "train", "huber", loss / config.accum_steps as f64);
        record(&mut history, step, "train", "lr", lr);
    }

    Ok(Checkpoint {
        config: model_config.clone(),
        step: config.total_steps,
        params: enc.params,
        optimizer: Some(state),
        rng: stream.state(),
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub ce: f64,
    pub accuracy: f64,
}

/// Frame-weighted cross-entropy and accuracy, dropout off.
pub fn evaluate<T: Real>(enc: &Encoder<T>, frames: &[Tensor<T>], labels: &[Vec<usize>]) -> Result<EvalMetrics, TrainError> {
    let idx: Vec<usize> = (0..frames.len()).collect();
    let results = parallel::map_ordered(&idx, |_, &i| enc.finetune_eval(&frames[i], &labels[i]));
    let (mut ce, mut correct, mut total) = (0.0, 0usize, 0usize);
    for (r, l) in results.into_iter().zip(labels) {
        let (c, k) = r?;
        ce += c;
        correct += k;
        total += l.len();
    }
    let total = total.max(1) as f64;
    Ok(EvalMetrics {
        ce: ce / total,
        accuracy: correct as f64 / total,
    })
}

pub struct FinetuneOutcome<T> {
    /// Parameters before the first update (the interpolation start point).
    pub initial: Checkpoint<T>,
    pub checkpoint: Checkpoint<T>,
    pub dev: EvalMetrics,
}

/// Copies every non-classifier tensor of `source` into `params`. All
/// offending names are reported on mismatch.
pub fn load_encoder<T: Real>(params: &mut ParamSet<T>, source: &ParamSet<T>) -> Result<(), TrainError> {
    let mut problems = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if model::is_classifier(&name) {
            continue;
        }
        let dst = params.get_mut(&name).expect("own name");
        match source.get(&name) {
            Some(src) if src.shape() == dst.shape() => *dst = src.clone(),
            Some(src) => problems.push(format!("{name} (checkpoint {:?}, model {:?})", src.shape(), dst.shape())),
            None => problems.push(format!("{name} (missing)")),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainError::InitMismatch(problems.join(", ")))
    }
}

/// Frame classification training. Encoder weights come from
/// `config.init_from` when set; the classifier head is always fresh. With
/// `dev = None`, a seeded `dev_fraction` of `corpus` is held out.
pub fn finetune<T: Real>(
    corpus: &LabeledCorpus,
    dev: Option<&LabeledCorpus>,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<FinetuneOutcome<T>, TrainError> {
    config.validate()?;
    config.expect_mode(TrainMode::Finetune)?;
    if corpus.is_empty() {
        return Err(TrainError::Input("finetuning corpus is empty".into()));
    }
    if corpus.num_classes > model_config.num_classes {
        return Err(TrainError::Input(format!(
            "corpus has {} classes but the model has {}",
            corpus.num_classes, model_config.num_classes
        )));
    }
    let (train, dev) = match dev {
        Some(d) => (corpus.clone(), d.clone()),
        None => {
            let (tr, dv) = split_dev(corpus.len(), config.dev_fraction, config.seed);
            (corpus.subset(&tr), corpus.subset(&dv))
        }
    };
    let mut enc = Encoder::<T>::init(model_config.clone(), config.seed)?;
    if let Some(path) = &config.init_from {
        let ck = Checkpoint::<T>::load(path)?;
        load_encoder(&mut enc.params, &ck.params)?;
    }
    let trainable = trainable_mask(&enc.params, &config.freeze)?;
    let frames = cast_frames::<T>(&train.sequences);
    let dev_frames = cast_frames::<T>(&dev.sequences);
    let mut history = Vec::new();

    let eval = |enc: &Encoder<T>, step: u64, history: &mut Vec<MetricRecord>| -> Result<EvalMetrics, TrainError> {
        let m = evaluate(enc, &dev_frames, &dev.labels)?;
        record(history, step, "dev", "ce", m.ce);
        record(history, step, "dev", "accuracy", m.accuracy);
        Ok(m)
    };
    let start = evaluate(&enc, &frames, &train.labels)?;
    record(&mut history, 0, "train", "ce", start.ce);
    let mut last = if dev.is_empty() { None } else { Some(eval(&enc, 0, &mut history)?) };
    let initial = Checkpoint {
        config: model_config.clone(),
        step: 0,
        params: enc.params.clone(),
        optimizer: None,
        rng: RngState {
            seed: config.seed,
            ..RngState::default()
        },
        history: history.clone(),
    };

    let mut stream = BatchStream::new(&train.sequences, config.batch_frames, config.seed)?;
    let mut state = AdamState::new(&enc.params);
    let mut acc = GradAccumulator::new(enc.params.len());
    for step in 1..=config.total_steps {
        let mut loss = 0.0;
        for _ in 0..config.accum_steps {
            let (epoch, batch) = stream.next_batch()?;
            let items: Vec<FinetuneItem<T>> = batch
                .iter()
                .map(|&i| FinetuneItem {
                    id: &train.sequences[i].id,
                    frames: &frames[i],
                    labels: &train.labels[i],
                    dropout: dropout_rng(model_config.dropout, config.seed, epoch, i, step),
                })
                .collect();
            let out = finetune_batch(&enc, &items, Some(&trainable), step)?;
            loss += out.loss.as_f64();
            acc.add(out.grads).expect("slot count fixed");
        }
        let lr = optimizer_update(&mut enc, &mut acc, &mut state, config, step)?;
        record(&mut history, step, "train", "ce", loss / config.accum_steps as f64);
        record(&mut history, step, "train", "lr", lr);
        let due = config.eval_interval > 0 && step % config.eval_interval == 0;
        if !dev.is_empty() && (due || step == config.total_steps) {
            last = Some(eval(&enc, step, &mut history)?);
        }
    }

    Ok(FinetuneOutcome {
        initial,
        dev: last.unwrap_or(EvalMetrics {
            ce: f64::NAN,
            accuracy: f64::NAN,
        }),
        checkpoint: Checkpoint {
            config: model_config.clone(),
            step: config.total_steps,
            params: enc.params,
            optimizer: Some(state),
            rng: stream.state(),
            history,
        },
    })
}

/// Mean of the last `window` values of `metric` on `split`.
pub fn smoothed(history: &[MetricRecord], split: &str, metric: &str, window: usize) -> Option<f64> {
    let vals: Vec<f64> = history
        .iter()
        .filter(|r| r.split == split && r.metric == metric)
        .map(|r| r.value)
        .collect();
    if vals.is_empty() {
        return None;
    }
    let tail = &vals[vals.len().saturating_sub(window.max(1))..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

pub fn metrics_csv(history: &[MetricRecord]) -> String {
    let mut out = String::from("step,split,metric,value\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, r.value));
    }
    out
}

pub fn write_metrics_csv(path: &Path, history: &[MetricRecord]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(history).as_bytes())
}
