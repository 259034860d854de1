//! Loss along the line between two checkpoints, and attention dumps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::features::{FeatureSequence, LabeledCorpus};
use crate::graph::Graph;
use crate::model::{Encoder, ModelError, ParamSet};
use crate::parallel;
use crate::permutation::{build_masks, PermMode, PermutationError, PermutationOrder};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::trainer::{self, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("checkpoints are not compatible: {0}")]
    Incompatible(String),
    #[error("invalid alpha grid: {0}")]
    Grid(String),
    #[error("non-finite loss at alpha {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Permutation(#[from] PermutationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default interpolation range and resolution.
pub const DEFAULT_ALPHA_MIN: f64 = -4.0;
pub const DEFAULT_ALPHA_MAX: f64 = 4.0;
pub const DEFAULT_POINTS: usize = 40;
pub const DEFAULT_FROZEN: &[&str] = &["classifier.*"];

/// `n` evenly spaced points from `min` to `max`, both included exactly.
pub fn alpha_grid(min: f64, max: f64, n: usize) -> Result<Vec<f64>, AnalysisError> {
    if n < 2 {
        return Err(AnalysisError::Grid(format!("need at least 2 points, got {n}")));
    }
    if !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(AnalysisError::Grid(format!("range [{min}, {max}] is empty")));
    }
    let step = (max - min) / (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| min + step * i as f64).collect();
    out[n - 1] = max;
    Ok(out)
}

/// The loss being sliced.
pub enum Objective<'a> {
    /// Tail-prediction Huber loss with orders fixed by `seed`.
    Pretrain {
        sequences: &'a [FeatureSequence],
        perm_mode: PermMode,
        tail_fraction: f64,
        seed: u64,
    },
    /// Frame cross-entropy.
    Finetune { corpus: &'a LabeledCorpus },
}

impl Objective<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Pretrain { .. } => "huber",
            Objective::Finetune { .. } => "ce",
        }
    }
}

/// Mean per-element loss of `enc` on the objective's data, dropout off.
pub fn dataset_loss<T: Real>(enc: &Encoder<T>, objective: &Objective) -> Result<f64, AnalysisError> {
    match objective {
        Objective::Pretrain {
            sequences,
            perm_mode,
            tail_fraction,
            seed,
        } => {
            let (mut total, mut count) = (0.0, 0usize);
            for (i, s) in sequences.iter().enumerate() {
                let masks = trainer::masks_for(s.num_frames(), *perm_mode, *tail_fraction, *seed, 0, i)?;
                let (l, n) = enc.pretrain_eval(&s.frames.cast(), &masks)?;
                total += l;
                count += n;
            }
            Ok(total / count.max(1) as f64)
        }
        Objective::Finetune { corpus } => {
            let frames: Vec<Tensor<T>> = corpus.sequences.iter().map(|s| s.frames.cast()).collect();
            Ok(trainer::evaluate(enc, &frames, &corpus.labels)?.ce)
        }
    }
}

/// `(1-α)·θ0 + α·θ1` for entries where `moving` is set; `θ1` elsewhere.
/// The two-weight form makes both endpoints exact.
pub fn interpolate<T: Real>(p0: &ParamSet<T>, p1: &ParamSet<T>, alpha: f64, moving: &[bool]) -> ParamSet<T> {
    let a = T::of(alpha);
    let b = T::one() - a;
    let mut out = p1.clone();
    for ((i, (_, t)), (_, t0)) in out.iter_mut().enumerate().zip(p0.iter()) {
        if moving[i] {
            for (x, &x0) in t.data_mut().iter_mut().zip(t0.data()) {
                *x = b * x0 + a * *x;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeMeta {
    pub checkpoint0: String,
    pub checkpoint1: String,
    pub dataset: String,
    pub objective: String,
    pub frozen: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCurve {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    pub meta: LandscapeMeta,
}

fn check_compatible<T: Real>(a: &ParamSet<T>, b: &ParamSet<T>) -> Result<(), AnalysisError> {
    let mut problems = Vec::new();
    for (name, t) in a.iter() {
        match b.get(name) {
            Some(u) if u.shape() == t.shape() => {}
            Some(u) => problems.push(format!("{name} {:?} vs {:?}", t.shape(), u.shape())),
            None => problems.push(format!("{name} missing from second checkpoint")),
        }
    }
    if a.len() != b.len() {
        problems.push(format!("{} vs {} tensors", a.len(), b.len()));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(AnalysisError::Incompatible(problems.join(", ")))
    }
}

/// Evaluates the objective at `n_points` values of α in `[alpha_min,
/// alpha_max]`. Parameters matched by `frozen_patterns` stay at their
/// `ckpt1` values. Points are evaluated in parallel and returned in α
/// order.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape<T: Real>(
    ckpt0: &Checkpoint<T>,
    ckpt1: &Checkpoint<T>,
    objective: &Objective,
    alpha_min: f64,
    alpha_max: f64,
    n_points: usize,
    frozen_patterns: &[String],
    meta: LandscapeMeta,
) -> Result<LandscapeCurve, AnalysisError> {
    check_compatible(&ckpt0.params, &ckpt1.params)?;
    let alphas = alpha_grid(alpha_min, alpha_max, n_points)?;
    let moving = trainer::trainable_mask(&ckpt1.params, frozen_patterns)?;
    let frozen: Vec<String> = ckpt1
        .params
        .names()
        .zip(&moving)
        .filter(|(_, m)| !**m)
        .map(|(n, _)| n.to_string())
        .collect();
    let results = parallel::map_ordered(&alphas, |_, &alpha| {
        let params = interpolate(&ckpt0.params, &ckpt1.params, alpha, &moving);
        let enc = Encoder::new(ckpt1.config.clone(), params)?;
        dataset_loss(&enc, objective)
    });
    let mut losses = Vec::with_capacity(alphas.len());
    for (alpha, r) in alphas.iter().zip(results) {
        let l = r?;
        if !l.is_finite() {
            return Err(AnalysisError::NonFinite(*alpha));
        }
        losses.push(l);
    }
    Ok(LandscapeCurve {
        alphas,
        losses,
        meta: LandscapeMeta { frozen, ..meta },
    })
}

pub fn landscape_csv(curve: &LandscapeCurve) -> String {
    let mut out = String::from("alpha,loss\n");
    for (a, l) in curve.alphas.iter().zip(&curve.losses) {
        out.push_str(&format!("{a},{l}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Attention

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Content,
    Query,
}

impl StreamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Content => "content",
            StreamKind::Query => "query",
        }
    }
}

pub enum DumpMode {
    /// Two-stream pass under the masks of `order`.
    Pretrain { order: PermutationOrder, fraction: f64 },
    /// Content stream with full attention.
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub stream: StreamKind,
    pub layer: usize,
    pub head: usize,
    /// Post-softmax probabilities, `T x T`.
    pub probs: Tensor<T>,
    /// Which entries the head was allowed to look at.
    pub visible: Vec<bool>,
}

/// Attention probabilities of every layer and head, dropout off.
pub fn dump_attention<T: Real>(
    enc: &Encoder<T>,
    frames: &Tensor<T>,
    mode: &DumpMode,
) -> Result<Vec<AttentionMap<T>>, AnalysisError> {
    let mut g = Graph::new();
    let p = enc.bind(&mut g, Some(&vec![false; enc.params.len()]))?;
    let x = g.constant(frames.clone());
    let len = frames.rows();
    let mut out = Vec::new();
    let mut push = |g: &Graph<T>, stream, layer, head, v, visible: Vec<bool>| {
        out.push(AttentionMap {
            stream,
            layer,
            head,
            probs: g.value(v).clone(),
            visible,
        })
    };
    match mode {
        DumpMode::Finetune => {
            let fo = enc.finetune_forward(&mut g, &p, x, None)?;
            for (l, att) in fo.attention.iter().enumerate() {
                for (h, &v) in att.content.iter().enumerate() {
                    push(&g, StreamKind::Content, l, h, v, vec![true; len * len]);
                }
            }
        }
        DumpMode::Pretrain { order, fraction } => {
            let masks = build_masks(order, *fraction)?;
            let po = enc.pretrain_forward(&mut g, &p, x, &masks, None)?;
            let bits = |m: &crate::tensor::BoolMatrix| (0..len).flat_map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
            for (l, att) in po.attention.iter().enumerate() {
                for (h, &v) in att.content.iter().enumerate() {
                    push(&g, StreamKind::Content, l, h, v, bits(&masks.content));
                }
                for (h, &v) in att.query.iter().enumerate() {
                    push(&g, StreamKind::Query, l, h, v, bits(&masks.query));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub stream: StreamKind,
    pub layer: usize,
    pub head: usize,
    /// Mean Shannon entropy (nats) over rows with at least one visible entry.
    pub mean_row_entropy: f64,
    /// Mean `|argmax(row) - row|` over the same rows.
    pub mean_diagonal_offset: f64,
    /// Expected `|j - row|` under uniform attention over the visible set:
    /// what the offset would be if the head ignored content.
    pub mask_baseline_offset: f64,
}

pub fn head_stats<T: Real>(map: &AttentionMap<T>) -> HeadStats {
    let n = map.probs.rows();
    let (mut ent, mut off, mut base, mut rows) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..n {
        let vis: Vec<usize> = (0..n).filter(|&j| map.visible[i * n + j]).collect();
        if vis.is_empty() {
            continue;
        }
        rows += 1;
        let row = map.probs.row(i);
        ent -= row
            .iter()
            .map(|p| p.as_f64())
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        let arg = crate::model::argmax(row);
        off += arg.abs_diff(i) as f64;
        base += vis.iter().map(|&j| j.abs_diff(i) as f64).sum::<f64>() / vis.len() as f64;
    }
    let r = rows.max(1) as f64;
    HeadStats {
        stream: map.stream,
        layer: map.layer,
        head: map.head,
        mean_row_entropy: ent / r,
        mean_diagonal_offset: off / r,
        mask_baseline_offset: base / r,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub utterance: String,
    pub mode: String,
    pub length: usize,
    pub order: Option<Vec<usize>>,
    pub heads: Vec<HeadStats>,
}

pub fn attention_file_name(stream: StreamKind, layer: usize, head: usize) -> String {
    format!("{}_layer{layer}_head{head}.txt", stream.as_str())
}

/// Header line `T`, then `T` rows of `T` space-separated values.
pub fn attention_text<T: Real>(map: &AttentionMap<T>) -> String {
    let n = map.probs.rows();
    let mut out = format!("{n}\n");
    for i in 0..n {
        let row: Vec<String> = map.probs.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Writes one text file per map plus `attention.json`. Returns the paths
/// written, sidecar last.
pub fn write_attention_dump<T: Real>(
    dir: &Path,
    maps: &[AttentionMap<T>],
    mut meta: AttentionMeta,
) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(maps.len() + 1);
    meta.heads = maps.iter().map(head_stats).collect();
    for m in maps {
        let path = dir.join(attention_file_name(m.stream, m.layer, m.head));
        std::fs::write(&path, attention_text(m))?;
        paths.push(path);
    }
    let side = dir.join("attention.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&side, json + "\n")?;
    paths.push(side);
    Ok(paths)
}
