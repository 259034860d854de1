//! Two-stream self-attention encoder.
//!
//! Pretraining runs two streams through the same pre-norm transformer
//! blocks:
//!
//! * the content stream `H` starts from the projected frames and attends
//!   under the content mask (itself plus earlier-ranked positions);
//! * the query stream `G` starts from a learned seed vector `w` (plus the
//!   positional encoding) and attends to the *content* keys/values under the
//!   query mask (strictly earlier-ranked positions only).
//!
//! Target frames are regressed from the final query stream, so a position is
//! never predicted from its own content. Finetuning drops the query stream
//! and classifies every frame from the content stream with full attention.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Gradients, Graph, Var};
use crate::kernels;
use crate::permutation::AttentionMasks;
use crate::real::Real;
use crate::rng::{self, Purpose, SxlRng};
use crate::tensor::{BoolMatrix, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    #[default]
    Sinusoidal,
    /// No positional signal; only useful for equivariance checks.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub dropout: f64,
    pub huber_delta: f64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub pos_encoding: PosEncoding,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            d_model: 64,
            d_inner: 256,
            dropout: 0.1,
            huber_delta: 1.0,
            input_dim: 40,
            num_classes: 6,
            pos_encoding: PosEncoding::Sinusoidal,
            layer_norm_eps: 1e-5,
        }
    }

    /// Hybrid frame classifier: 6 blocks, 8 heads, 512/2048.
    pub fn hybrid() -> Self {
        Self {
            num_layers: 6,
            num_heads: 8,
            d_model: 512,
            d_inner: 2048,
            num_classes: 1936,
            ..Self::toy()
        }
    }

    /// End-to-end encoder on 3-frame stacked input: 12 blocks, 4 heads,
    /// 256/2048.
    pub fn e2e() -> Self {
        Self {
            num_layers: 12,
            num_heads: 4,
            d_model: 256,
            d_inner: 2048,
            input_dim: 120,
            num_classes: 32,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "hybrid" => Some(Self::hybrid()),
            "e2e" => Some(Self::e2e()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.huber_delta > 0.0) {
            return bad(format!("huber_delta {} must be positive", self.huber_delta));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, di, f, c) = (self.d_model, self.d_inner, self.input_dim, self.num_classes);
        let mut out = vec![
            ("input_proj.weight".to_string(), vec![f, d]),
            ("input_proj.bias".to_string(), vec![d]),
        ];
        for l in 0..self.num_layers {
            let p = format!("layers.{l}");
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("{p}.ln1.gain"), vec![d]));
            out.push((format!("{p}.ln1.bias"), vec![d]));
            out.push((format!("{p}.ffn.w1"), vec![d, di]));
            out.push((format!("{p}.ffn.b1"), vec![di]));
            out.push((format!("{p}.ffn.w2"), vec![di, d]));
            out.push((format!("{p}.ffn.b2"), vec![d]));
            out.push((format!("{p}.ln2.gain"), vec![d]));
            out.push((format!("{p}.ln2.bias"), vec![d]));
        }
        out.extend([
            ("final_ln.gain".to_string(), vec![d]),
            ("final_ln.bias".to_string(), vec![d]),
            (QUERY_SEED.to_string(), vec![d]),
            ("regression_head.weight".to_string(), vec![d, f]),
            ("regression_head.bias".to_string(), vec![f]),
            ("classifier.weight".to_string(), vec![d, c]),
            ("classifier.bias".to_string(), vec![c]),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub const QUERY_SEED: &str = "query_seed";

/// Parameters used only by pretraining.
pub fn is_pretrain_only(name: &str) -> bool {
    name == QUERY_SEED || name.starts_with("regression_head.")
}

pub fn is_classifier(name: &str) -> bool {
    name.starts_with("classifier.")
}

/// Layer-norm parameters and the query seed are exempt from weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name == QUERY_SEED || name.contains("ln1.") || name.contains("ln2.") || name.starts_with("final_ln.")
}

/// Named trainable tensors in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<(), ModelError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(ModelError::Input(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.values()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that names, order and shapes match `config`. Reports the first
    /// offending tensor.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = config.param_shapes();
        for (i, (name, shape)) in expected.iter().enumerate() {
            match self.tensors.get_index(i) {
                Some((n, t)) if n == name && t.shape() == shape.as_slice() => {}
                Some((n, t)) => {
                    return Err(ModelError::Input(format!(
                        "parameter {n} {:?} does not match expected {name} {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Input(format!("missing parameter {name}"))),
            }
        }
        if self.len() != expected.len() {
            let extra = self.tensors.get_index(expected.len()).unwrap().0;
            return Err(ModelError::Input(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Scaled uniform init: matrices draw from `±sqrt(6/(fan_in+fan_out))`,
/// layer-norm gains are 1, biases 0. The query seed is treated as a
/// `1 x d_model` matrix. The classifier weight bound is further scaled by
/// 0.1 so a fresh head predicts close to uniform.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParamSet<T>, ModelError> {
    config.validate()?;
    let mut params = ParamSet::new();
    for (idx, (name, shape)) in config.param_shapes().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".gain") {
            Tensor::full(&shape, T::one())
        } else if shape.len() == 1 && name != QUERY_SEED {
            Tensor::zeros(&shape)
        } else {
            let (fan_in, fan_out) = match shape.as_slice() {
                [a, b] => (*a, *b),
                [d] => (1, *d),
                _ => unreachable!("parameters are vectors or matrices"),
            };
            let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if is_classifier(&name) {
                bound *= 0.1;
            }
            let mut rng = rng::stream(seed, Purpose::Init, &[idx as u64]);
            let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, t)?;
    }
    Ok(params)
}

/// Sinusoidal absolute positional encodings, `len x d`.
pub fn positional_encoding<T: Real>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(len, d, |pos, i| {
        let freq = (10000f64).powf(-((i - i % 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

struct LayerVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln1: (Var, Var),
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameter leaves registered on one graph, in [`ParamSet`] order.
pub struct BoundParams {
    pub vars: Vec<Var>,
    input_w: Var,
    input_b: Var,
    layers: Vec<LayerVars>,
    final_ln: (Var, Var),
    query_seed: Var,
    reg_w: Var,
    reg_b: Var,
    cls_w: Var,
    cls_b: Var,
}

impl BoundParams {
    /// Registers every parameter as a leaf. `trainable[i]` controls whether
    /// the i-th parameter gets a gradient; `None` means all do.
    pub fn bind<T: Real>(
        graph: &mut Graph<T>,
        params: &ParamSet<T>,
        config: &ModelConfig,
        trainable: Option<&[bool]>,
    ) -> Result<Self, ModelError> {
        params.check_against(config)?;
        let vars: Vec<Var> = params
            .tensors()
            .enumerate()
            .map(|(i, t)| graph.leaf(t.clone(), trainable.is_none_or(|m| m[i])))
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("shape table checked");
        let input_w = next();
        let input_b = next();
        let layers = (0..config.num_layers)
            .map(|_| LayerVars {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln1: (next(), next()),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2: (next(), next()),
            })
            .collect();
        let final_ln = (next(), next());
        let query_seed = next();
        let (reg_w, reg_b, cls_w, cls_b) = (next(), next(), next(), next());
        Ok(Self {
            vars,
            input_w,
            input_b,
            layers,
            final_ln,
            query_seed,
            reg_w,
            reg_b,
            cls_w,
            cls_b,
        })
    }

    pub fn query_seed(&self) -> Var {
        self.query_seed
    }

    /// Leaf handles for one layer's attention weights (q, k, v, o).
    pub fn attention_weights(&self, layer: usize) -> [Var; 4] {
        let l = &self.layers[layer];
        [l.wq, l.wk, l.wv, l.wo]
    }
}

/// Attention probabilities of one block, one `T x T` matrix per head.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    pub content: Vec<Var>,
    pub query: Vec<Var>,
}

/// Per-layer outputs of the two streams. `query` is empty when finetuning.
#[derive(Clone, Debug)]
pub struct StreamStates {
    pub content: Vec<Var>,
    pub query: Vec<Var>,
}

pub struct PretrainOutput {
    /// `e x F` regressed frames, one row per target in `masks.targets` order.
    pub predictions: Var,
    pub streams: StreamStates,
    pub attention: Vec<LayerAttention>,
}

pub struct FinetuneOutput {
    pub logits: Var,
    pub streams: StreamStates,
    pub attention: Vec<LayerAttention>,
}

/// Model config plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

struct Ctx<'a> {
    rng: Option<&'a mut SxlRng>,
    dropout: f64,
}

impl Ctx<'_> {
    fn drop<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(r) => g.dropout(x, self.dropout, r),
            None => x,
        }
    }
}

/// Per-head column slices of a projection.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize, dh: usize) -> Result<Vec<Var>, TensorError> {
    (0..heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
}

impl<T: Real> Encoder<T> {
    pub fn new(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: Option<&[bool]>) -> Result<BoundParams, ModelError> {
        BoundParams::bind(g, &self.params, &self.config, trainable)
    }

    fn check_input(&self, g: &Graph<T>, input: Var) -> Result<usize, ModelError> {
        let x = g.value(input);
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(ModelError::Input(format!(
                "expected T x {} frames, got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        Ok(x.rows())
    }

    fn pos_enc(&self, g: &mut Graph<T>, len: usize) -> Option<Var> {
        match self.config.pos_encoding {
            PosEncoding::Sinusoidal => Some(g.constant(positional_encoding(len, self.config.d_model))),
            PosEncoding::None => None,
        }
    }

    fn embed(&self, g: &mut Graph<T>, p: &BoundParams, input: Var, pe: Option<Var>, ctx: &mut Ctx) -> Result<Var, ModelError> {
        let h = g.matmul(input, p.input_w)?;
        let mut h = g.add_row(h, p.input_b)?;
        if let Some(pe) = pe {
            h = g.add(h, pe)?;
        }
        Ok(ctx.drop(g, h))
    }

    fn query_init(&self, g: &mut Graph<T>, p: &BoundParams, len: usize, pe: Option<Var>) -> Result<Var, ModelError> {
        let w = g.broadcast_rows(p.query_seed, len)?;
        Ok(match pe {
            Some(pe) => g.add(w, pe)?,
            None => w,
        })
    }

    /// Multi-head attention of `queries` over precomputed per-head keys and
    /// values, followed by the output projection.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<T>,
        layer: &LayerVars,
        normed: Var,
        keys: &[Var],
        values: &[Var],
        mask: &Arc<BoolMatrix>,
        probs_out: &mut Vec<Var>,
    ) -> Result<Var, ModelError> {
        let (heads, dh) = (self.config.num_heads, self.config.head_dim());
        let q = g.matmul(normed, layer.wq)?;
        let qs = split_heads(g, q, heads, dh)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let s = g.matmul_nt(qs[h], keys[h])?;
            let s = g.scale(s, scale);
            let pr = g.masked_softmax(s, Arc::clone(mask))?;
            probs_out.push(pr);
            outs.push(g.matmul(pr, values[h])?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok(g.matmul(cat, layer.wo)?)
    }

    fn feed_forward(&self, g: &mut Graph<T>, layer: &LayerVars, x: Var, ctx: &mut Ctx) -> Result<Var, ModelError> {
        let eps = T::of(self.config.layer_norm_eps);
        let n = g.layer_norm(x, layer.ln2.0, layer.ln2.1, eps)?;
        let a = g.matmul(n, layer.w1)?;
        let a = g.add_row(a, layer.b1)?;
        let a = g.relu(a);
        let b = g.matmul(a, layer.w2)?;
        let b = g.add_row(b, layer.b2)?;
        let b = ctx.drop(g, b);
        Ok(g.add(x, b)?)
    }

    /// Runs every block. With `query = Some(..)` the query stream is carried
    /// alongside the content stream and reads the content keys/values.
    fn run_blocks(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        mut h: Var,
        mut query: Option<(Var, &Arc<BoolMatrix>)>,
        content_mask: &Arc<BoolMatrix>,
        ctx: &mut Ctx,
    ) -> Result<(Var, Option<Var>, StreamStates, Vec<LayerAttention>), ModelError> {
        let (heads, dh) = (self.config.num_heads, self.config.head_dim());
        let eps = T::of(self.config.layer_norm_eps);
        let mut states = StreamStates {
            content: Vec::new(),
            query: Vec::new(),
        };
        let mut attention = Vec::with_capacity(self.config.num_layers);
        for layer in &p.layers {
            let hn = g.layer_norm(h, layer.ln1.0, layer.ln1.1, eps)?;
            let k = g.matmul(hn, layer.wk)?;
            let v = g.matmul(hn, layer.wv)?;
            let ks = split_heads(g, k, heads, dh)?;
            let vs = split_heads(g, v, heads, dh)?;
            let mut att = LayerAttention {
                content: Vec::with_capacity(heads),
                query: Vec::new(),
            };

            let a = self.attend(g, layer, hn, &ks, &vs, content_mask, &mut att.content)?;
            let a = ctx.drop(g, a);
            let h_mid = g.add(h, a)?;

            if let Some((gq, qmask)) = query {
                let gn = g.layer_norm(gq, layer.ln1.0, layer.ln1.1, eps)?;
                let a = self.attend(g, layer, gn, &ks, &vs, qmask, &mut att.query)?;
                let a = ctx.drop(g, a);
                let g_mid = g.add(gq, a)?;
                let g_out = self.feed_forward(g, layer, g_mid, ctx)?;
                states.query.push(g_out);
                query = Some((g_out, qmask));
            }

            h = self.feed_forward(g, layer, h_mid, ctx)?;
            states.content.push(h);
            attention.push(att);
        }
        Ok((h, query.map(|(q, _)| q), states, attention))
    }

    /// Two-stream forward. `dropout_rng = None` disables dropout.
    pub fn pretrain_forward(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        input: Var,
        masks: &AttentionMasks,
        dropout_rng: Option<&mut SxlRng>,
    ) -> Result<PretrainOutput, ModelError> {
        let len = self.check_input(g, input)?;
        if masks.len() != len {
            return Err(ModelError::Input(format!(
                "masks built for length {} but sequence has {len} frames",
                masks.len()
            )));
        }
        let mut ctx = Ctx {
            rng: dropout_rng,
            dropout: self.config.dropout,
        };
        let pe = self.pos_enc(g, len);
        let h0 = self.embed(g, p, input, pe, &mut ctx)?;
        let g0 = self.query_init(g, p, len, pe)?;
        let (_, gq, streams, attention) =
            self.run_blocks(g, p, h0, Some((g0, &masks.query)), &masks.content, &mut ctx)?;
        let gq = gq.expect("query stream requested");
        let eps = T::of(self.config.layer_norm_eps);
        let picked = g.gather_rows(gq, &masks.targets)?;
        let normed = g.layer_norm(picked, p.final_ln.0, p.final_ln.1, eps)?;
        let pred = g.matmul(normed, p.reg_w)?;
        let predictions = g.add_row(pred, p.reg_b)?;
        Ok(PretrainOutput {
            predictions,
            streams,
            attention,
        })
    }

    /// Content stream only, every position visible.
    pub fn finetune_forward(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        input: Var,
        dropout_rng: Option<&mut SxlRng>,
    ) -> Result<FinetuneOutput, ModelError> {
        let len = self.check_input(g, input)?;
        let mut ctx = Ctx {
            rng: dropout_rng,
            dropout: self.config.dropout,
        };
        let full = Arc::new(BoolMatrix::filled(len, len, true));
        let pe = self.pos_enc(g, len);
        let h0 = self.embed(g, p, input, pe, &mut ctx)?;
        let (h, _, streams, attention) = self.run_blocks(g, p, h0, None, &full, &mut ctx)?;
        let eps = T::of(self.config.layer_norm_eps);
        let normed = g.layer_norm(h, p.final_ln.0, p.final_ln.1, eps)?;
        let logits = g.matmul(normed, p.cls_w)?;
        let logits = g.add_row(logits, p.cls_b)?;
        Ok(FinetuneOutput {
            logits,
            streams,
            attention,
        })
    }

    /// Huber loss of the target predictions, summed over elements and divided
    /// by `norm`, with parameter gradients in [`ParamSet`] order.
    pub fn pretrain_loss_grad(
        &self,
        frames: &Tensor<T>,
        masks: &AttentionMasks,
        norm: T,
        trainable: Option<&[bool]>,
        dropout_rng: Option<&mut SxlRng>,
    ) -> Result<(T, Vec<Option<Tensor<T>>>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, trainable)?;
        let input = g.constant(frames.clone());
        let out = self.pretrain_forward(&mut g, &p, input, masks, dropout_rng)?;
        let target = gather(frames, &masks.targets);
        let loss = g.huber(out.predictions, &target, T::of(self.config.huber_delta), norm)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        Ok((value, collect_grads(&mut grads, &p)))
    }

    /// Cross-entropy summed over frames and divided by `norm`, with gradients.
    pub fn finetune_loss_grad(
        &self,
        frames: &Tensor<T>,
        labels: &[usize],
        norm: T,
        trainable: Option<&[bool]>,
        dropout_rng: Option<&mut SxlRng>,
    ) -> Result<(T, Vec<Option<Tensor<T>>>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, trainable)?;
        let input = g.constant(frames.clone());
        let out = self.finetune_forward(&mut g, &p, input, dropout_rng)?;
        let loss = g.cross_entropy(out.logits, labels, norm)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        Ok((value, collect_grads(&mut grads, &p)))
    }

    /// Summed Huber loss and element count of one sequence, dropout off.
    pub fn pretrain_eval(&self, frames: &Tensor<T>, masks: &AttentionMasks) -> Result<(f64, usize), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, Some(&vec![false; self.params.len()]))?;
        let input = g.constant(frames.clone());
        let out = self.pretrain_forward(&mut g, &p, input, masks, None)?;
        let target = gather(frames, &masks.targets);
        let loss = g.huber(out.predictions, &target, T::of(self.config.huber_delta), T::one())?;
        Ok((g.value(loss).data()[0].as_f64(), target.numel()))
    }

    /// Frame logits with dropout off.
    pub fn classify(&self, frames: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, Some(&vec![false; self.params.len()]))?;
        let input = g.constant(frames.clone());
        let out = self.finetune_forward(&mut g, &p, input, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Summed cross-entropy and number of correctly classified frames.
    pub fn finetune_eval(&self, frames: &Tensor<T>, labels: &[usize]) -> Result<(f64, usize), ModelError> {
        let logits = self.classify(frames)?;
        let ce = cross_entropy(&logits, labels)?.as_f64() * labels.len() as f64;
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(r, &l)| argmax(logits.row(r)) == l)
            .count();
        Ok((ce, correct))
    }
}

pub(crate) fn gather<T: Real>(frames: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let data = rows.iter().flat_map(|&r| frames.row(r).iter().copied()).collect();
    Tensor::matrix(rows.len(), frames.cols(), data).expect("gathered shape")
}

fn collect_grads<T: Real>(grads: &mut Gradients<T>, p: &BoundParams) -> Vec<Option<Tensor<T>>> {
    p.vars.iter().map(|&v| grads.take(v)).collect()
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean elementwise Huber loss.
pub fn huber_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, delta: T) -> Result<T, ModelError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Dimension {
            op: "huber_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    if !(delta > T::zero()) {
        return Err(ModelError::Input("huber delta must be positive".into()));
    }
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| kernels::huber(p - t, delta))
        .sum();
    Ok(total / T::of(pred.numel() as f64))
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T, ModelError> {
    if labels.len() != logits.rows() {
        return Err(ModelError::Input(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(ModelError::Input(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let (_, total) = kernels::softmax_xent(logits, labels);
    Ok(total / T::of(labels.len() as f64))
}
