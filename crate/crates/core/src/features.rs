//! Acoustic feature sequences: file I/O, global CMVN, frame stacking and a
//! synthetic labeled corpus generator.
//!
//! Feature file layout (`SXLF`, all integers little-endian u32):
//!
//! ```text
//! "SXLF" | version=1 | utterance count
//! per utterance: id length | UTF-8 id | T | F | T*F f32 row-major
//! ```
//!
//! Label files (`SXLL`) share the header and store, per utterance, a count
//! followed by that many u32 class ids.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SXLF";
pub const LABEL_MAGIC: &[u8; 4] = b"SXLL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_err(offset: usize, reason: impl Into<String>) -> FeatureError {
    FeatureError::Format {
        offset,
        reason: reason.into(),
    }
}

/// A `T x F` matrix of acoustic frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Tensor<f32>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, frames: Tensor<f32>) -> Result<Self, FeatureError> {
        if frames.shape().len() != 2 {
            return Err(FeatureError::Input(format!(
                "frames must be a matrix, got shape {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(FeatureError::Input("frames contain non-finite values".into()));
        }
        Ok(Self {
            id: id.into(),
            frames,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Frame sequences with one class id per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub sequences: Vec<FeatureSequence>,
    pub labels: Vec<Vec<usize>>,
    pub num_classes: usize,
}

impl LabeledCorpus {
    pub fn new(
        sequences: Vec<FeatureSequence>,
        labels: Vec<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self, FeatureError> {
        if sequences.len() != labels.len() {
            return Err(FeatureError::Input(format!(
                "{} sequences but {} label rows",
                sequences.len(),
                labels.len()
            )));
        }
        for (s, l) in sequences.iter().zip(&labels) {
            if s.num_frames() != l.len() {
                return Err(FeatureError::Input(format!(
                    "utterance {} has {} frames but {} labels",
                    s.id,
                    s.num_frames(),
                    l.len()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= num_classes) {
                return Err(FeatureError::Input(format!(
                    "utterance {} has label {bad} outside 0..{num_classes}",
                    s.id
                )));
            }
        }
        Ok(Self {
            sequences,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(FeatureSequence::num_frames).sum()
    }

    /// Keeps the utterances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

// ---------------------------------------------------------------------------
// SXLF / SXLL encoding

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn header(magic: &[u8; 4], count: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, count as u32);
    out
}

pub fn encode_features(seqs: &[FeatureSequence]) -> Vec<u8> {
    let mut out = header(FEATURE_MAGIC, seqs.len());
    for s in seqs {
        put_u32(&mut out, s.id.len() as u32);
        out.extend_from_slice(s.id.as_bytes());
        put_u32(&mut out, s.num_frames() as u32);
        put_u32(&mut out, s.dim() as u32);
        for &v in s.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_labels(labels: &[Vec<usize>]) -> Vec<u8> {
    let mut out = header(LABEL_MAGIC, labels.len());
    for l in labels {
        put_u32(&mut out, l.len() as u32);
        for &c in l {
            put_u32(&mut out, c as u32);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FeatureError> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<usize, FeatureError> {
        if self.bytes.len() < 4 || &self.bytes[..4] != magic {
            return Err(format_err(0, "bad magic"));
        }
        self.pos = 4;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        Ok(self.u32("utterance count")? as usize)
    }

    fn finish(&self) -> Result<(), FeatureError> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureSequence>, FeatureError> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.header(FEATURE_MAGIC)?;
    let mut seqs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u32("id length")? as usize;
        let id_at = r.pos;
        let id = std::str::from_utf8(r.take(id_len, "utterance id")?)
            .map_err(|_| format_err(id_at, "utterance id is not UTF-8"))?
            .to_string();
        let dims_at = r.pos;
        let t = r.u32("frame count")? as usize;
        let f = r.u32("feature dim")? as usize;
        if t == 0 || f == 0 {
            return Err(format_err(dims_at, format!("utterance {id} has empty shape {t}x{f}")));
        }
        let start = r.pos;
        let raw = r.take(t * f * 4, "frame data")?;
        let mut data = Vec::with_capacity(t * f);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err(start + 4 * i, format!("non-finite value in {id}")));
            }
            data.push(v);
        }
        let frames = Tensor::matrix(t, f, data).expect("checked shape");
        seqs.push(FeatureSequence { id, frames });
    }
    r.finish()?;
    Ok(seqs)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<Vec<usize>>, FeatureError> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.header(LABEL_MAGIC)?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32("label count")? as usize;
        let raw = r.take(n * 4, "labels")?;
        out.push(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect(),
        );
    }
    r.finish()?;
    Ok(out)
}

pub fn save_features(path: &Path, seqs: &[FeatureSequence]) -> Result<(), FeatureError> {
    fs::write(path, encode_features(seqs))?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureSequence>, FeatureError> {
    decode_features(&fs::read(path)?)
}

pub fn save_labels(path: &Path, labels: &[Vec<usize>]) -> Result<(), FeatureError> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<Vec<usize>>, FeatureError> {
    decode_labels(&fs::read(path)?)
}

/// Loads a feature file and its label file as a corpus. The class count is
/// one past the largest label seen.
pub fn load_labeled(features: &Path, labels: &Path) -> Result<LabeledCorpus, FeatureError> {
    let seqs = load_features(features)?;
    let labels = load_labels(labels)?;
    let num_classes = labels.iter().flatten().max().map_or(1, |&m| m + 1);
    LabeledCorpus::new(seqs, labels, num_classes)
}

// ---------------------------------------------------------------------------
// CMVN

/// Corpus-wide per-dimension mean and biased variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub frame_count: u64,
}

/// Accumulates with the pairwise (Chan et al.) merge of per-utterance
/// moments, in f64.
pub fn compute_global_cmvn(corpus: &[FeatureSequence]) -> Result<CmvnStats, FeatureError> {
    let dim = corpus
        .first()
        .map(FeatureSequence::dim)
        .ok_or_else(|| FeatureError::Input("cannot compute CMVN of an empty corpus".into()))?;
    let mut count = 0u64;
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    for seq in corpus {
        if seq.dim() != dim {
            return Err(FeatureError::Input(format!(
                "utterance {} has dim {} but corpus dim is {dim}",
                seq.id,
                seq.dim()
            )));
        }
        let n = seq.num_frames() as f64;
        for d in 0..dim {
            let col = (0..seq.num_frames()).map(|t| seq.frames.get(t, d) as f64);
            let local_mean = col.clone().sum::<f64>() / n;
            let local_m2: f64 = col.map(|v| (v - local_mean) * (v - local_mean)).sum();
            let total = count as f64 + n;
            let delta = local_mean - mean[d];
            mean[d] += delta * n / total;
            m2[d] += local_m2 + delta * delta * count as f64 * n / total;
        }
        count += seq.num_frames() as u64;
    }
    let variance = m2.iter().map(|&s| s / count as f64).collect();
    Ok(CmvnStats {
        mean,
        variance,
        frame_count: count,
    })
}

/// `y = (x - mean) / sqrt(max(variance, floor))`.
pub fn apply_cmvn(
    seq: &FeatureSequence,
    stats: &CmvnStats,
    variance_floor: f64,
) -> Result<FeatureSequence, FeatureError> {
    if seq.dim() != stats.mean.len() {
        return Err(FeatureError::Input(format!(
            "utterance {} has dim {} but CMVN stats have dim {}",
            seq.id,
            seq.dim(),
            stats.mean.len()
        )));
    }
    let inv: Vec<f64> = stats
        .variance
        .iter()
        .map(|&v| 1.0 / v.max(variance_floor).sqrt())
        .collect();
    let dim = seq.dim();
    let data = seq
        .frames
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let d = i % dim;
            ((x as f64 - stats.mean[d]) * inv[d]) as f32
        })
        .collect();
    let frames = Tensor::matrix(seq.num_frames(), dim, data).expect("same shape");
    Ok(FeatureSequence {
        id: seq.id.clone(),
        frames,
    })
}

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-10;

/// Computes global stats on `corpus` and applies them to every utterance.
pub fn normalize_corpus(
    corpus: &[FeatureSequence],
) -> Result<(Vec<FeatureSequence>, CmvnStats), FeatureError> {
    let stats = compute_global_cmvn(corpus)?;
    let out = corpus
        .iter()
        .map(|s| apply_cmvn(s, &stats, DEFAULT_VARIANCE_FLOOR))
        .collect::<Result<_, _>>()?;
    Ok((out, stats))
}

// ---------------------------------------------------------------------------
// Stacking

/// Concatenates `stack` consecutive frames starting every `skip` frames.
/// Windows running past the end repeat the last frame, so the output has
/// `ceil(T / skip)` frames of dimension `stack * F`.
pub fn stack_frames(seq: &FeatureSequence, stack: usize, skip: usize) -> FeatureSequence {
    assert!(stack >= 1 && skip >= 1, "stack and skip must be positive");
    let (t, f) = (seq.num_frames(), seq.dim());
    let out_t = t.div_ceil(skip);
    let mut data = Vec::with_capacity(out_t * stack * f);
    for i in 0..out_t {
        for j in 0..stack {
            let src = (i * skip + j).min(t - 1);
            data.extend_from_slice(seq.frames.row(src));
        }
    }
    FeatureSequence {
        id: seq.id.clone(),
        frames: Tensor::matrix(out_t, stack * f, data).expect("stacked shape"),
    }
}

/// Applies [`stack_frames`] to a labeled corpus, keeping the label of the
/// first frame of each window.
pub fn stack_labeled(corpus: &LabeledCorpus, stack: usize, skip: usize) -> LabeledCorpus {
    LabeledCorpus {
        sequences: corpus
            .sequences
            .iter()
            .map(|s| stack_frames(s, stack, skip))
            .collect(),
        labels: corpus
            .labels
            .iter()
            .map(|l| l.iter().step_by(skip).copied().collect())
            .collect(),
        num_classes: corpus.num_classes,
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Parameters of the hidden-state frame generator.
///
/// Each of `num_classes` hidden states owns a Gaussian mean vector. Frames
/// follow a sticky Markov chain over the states; each frame is the state
/// mean plus a per-utterance offset, a temporally smooth AR(1) noise term and
/// white noise. Labels are the hidden states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_utts: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub stay_prob: f64,
    pub mean_scale: f64,
    pub utterance_offset: f64,
    pub smooth_noise: f64,
    pub smooth_coef: f64,
    pub white_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_utts: 100,
            min_frames: 20,
            max_frames: 40,
            dim: 40,
            num_classes: 6,
            seed: 0,
            stay_prob: 0.85,
            mean_scale: 1.0,
            utterance_offset: 0.8,
            smooth_noise: 0.8,
            smooth_coef: 0.8,
            white_noise: 1.2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::Input(m.into()));
        if self.num_utts == 0 {
            return bad("num_utts must be positive");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min_frames <= max_frames");
        }
        if self.dim == 0 || self.num_classes == 0 {
            return bad("dim and num_classes must be positive");
        }
        if !(0.0..=1.0).contains(&self.stay_prob) || !(0.0..1.0).contains(&self.smooth_coef) {
            return bad("stay_prob must be in [0,1] and smooth_coef in [0,1)");
        }
        Ok(())
    }

    /// The state mean vectors, one row per class.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, Purpose::Corpus, &[u64::MAX]);
        (0..self.num_classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.mean_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

/// Generates a labeled corpus. Identical configs give identical corpora.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<LabeledCorpus, FeatureError> {
    cfg.validate()?;
    let means = cfg.class_means();
    let c = cfg.num_classes;
    let mut sequences = Vec::with_capacity(cfg.num_utts);
    let mut labels = Vec::with_capacity(cfg.num_utts);
    let innovation = (1.0 - cfg.smooth_coef * cfg.smooth_coef).sqrt();
    for u in 0..cfg.num_utts {
        let mut rng = rng::stream(cfg.seed, Purpose::Corpus, &[u as u64]);
        let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let offset: Vec<f64> = (0..cfg.dim)
            .map(|_| cfg.utterance_offset * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut smooth: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut state = rng.random_range(0..c);
        let mut data = Vec::with_capacity(t * cfg.dim);
        let mut lab = Vec::with_capacity(t);
        for step in 0..t {
            if step > 0 && c > 1 && rng.random::<f64>() >= cfg.stay_prob {
                let shift = rng.random_range(1..c);
                state = (state + shift) % c;
            }
            lab.push(state);
            for d in 0..cfg.dim {
                let xi: f64 = StandardNormal.sample(&mut rng);
                smooth[d] = cfg.smooth_coef * smooth[d] + innovation * xi;
                let white: f64 = StandardNormal.sample(&mut rng);
                let v = means[state][d]
                    + offset[d]
                    + cfg.smooth_noise * smooth[d]
                    + cfg.white_noise * white;
                data.push(v as f32);
            }
        }
        let frames = Tensor::matrix(t, cfg.dim, data).expect("generated shape");
        sequences.push(FeatureSequence {
            id: format!("syn{:05}", u),
            frames,
        });
        labels.push(lab);
    }
    LabeledCorpus::new(sequences, labels, c)
}
