//! A small pre-norm transformer built around the attention variants.
//!
//! Parameters live in plain tensors owned by [`Model`]. Each forward pass binds
//! them to fresh tape leaves in declaration order ([`Model::tensors`]), and the
//! optimizer reads gradients back in that same order.

mod checkpoint;
mod optim;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, multihead, AttentionConfig, AttentionParams, AttentionWeights, Variant};
use crate::error::{config_err, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{clip_global_norm, lr_at, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Causal self-attention stack.
    DecoderOnly,
    /// Non-causal self-attention stack.
    EncoderOnly,
    /// Non-causal encoder, causal decoder with dense cross-attention.
    #[default]
    Seq2seq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub ffn_width: usize,
    /// Shared by every layer. Causality is set by the architecture.
    pub attention: AttentionConfig,
    pub tie_embeddings: bool,
    pub max_len: usize,
    pub architecture: Architecture,
    /// Standard deviation of every weight matrix except the embedding.
    pub init_std: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 17,
            d_model: 32,
            n_layers: 2,
            ffn_width: 64,
            attention: AttentionConfig::default(),
            tie_embeddings: false,
            max_len: 64,
            architecture: Architecture::Seq2seq,
            init_std: 0.1,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(config_err("vocab_size must be at least 2"));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.ffn_width == 0 || self.max_len == 0 {
            return Err(config_err("d_model, n_layers, ffn_width and max_len must be positive"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(config_err("init_std must be positive and finite"));
        }
        for causal in self.causal_contexts() {
            self.attention_for(causal).validate(self.d_model)?;
        }
        Ok(())
    }

    fn causal_contexts(&self) -> Vec<bool> {
        match self.architecture {
            Architecture::DecoderOnly => vec![true],
            Architecture::EncoderOnly => vec![false],
            Architecture::Seq2seq => vec![false, true],
        }
    }

    /// Self-attention settings for a causal or non-causal stack.
    ///
    /// `sortcut` has no causal form; causal stacks use plain Sinkhorn attention instead.
    pub fn attention_for(&self, causal: bool) -> AttentionConfig {
        let mut cfg = self.attention;
        cfg.causal = causal;
        if causal && cfg.variant == Variant::Sortcut {
            cfg.variant = Variant::Sinkhorn;
        }
        cfg
    }

    /// Canonical text form used in checkpoints and config echoes.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(format!("cannot serialize model spec: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| config_err(format!("invalid model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One training or evaluation batch. Rows of every field have equal lengths.
///
/// `decoder_ids` is required by sequence-to-sequence models (the shifted
/// target) and ignored otherwise. `loss_mask` weights each target position.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub decoder_ids: Option<Vec<Vec<usize>>>,
    pub target_ids: Vec<Vec<usize>>,
    pub loss_mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_norm: LayerNormParams,
    pub attn: AttentionParams,
    pub cross: Option<(LayerNormParams, AttentionParams)>,
    pub ffn_norm: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[vocab, d]`.
    pub embed: Tensor,
    pub encoder: Vec<BlockParams>,
    pub encoder_norm: Option<LayerNormParams>,
    /// The main stack: the decoder of a seq2seq model, otherwise the only stack.
    pub layers: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    /// `[d, vocab]`; absent when tied to the embedding.
    pub out_w: Option<Tensor>,
    pub out_b: Tensor,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
    t
}

fn norm_params(d: usize) -> LayerNormParams {
    LayerNormParams {
        gain: Tensor::full(&[d], 1.0),
        bias: Tensor::zeros(&[d]),
    }
}

impl LayerNormParams {
    fn tensors(&self) -> [&Tensor; 2] {
        [&self.gain, &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

impl FfnParams {
    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl BlockParams {
    fn init(spec: &ModelSpec, causal: bool, cross: bool, rng: &mut impl Rng) -> Self {
        let (d, f, std) = (spec.d_model, spec.ffn_width, spec.init_std);
        let attn = AttentionParams::init(&spec.attention_for(causal), d, spec.max_len, std, rng);
        let cross = cross.then(|| {
            let dense = AttentionConfig {
                variant: Variant::Dense,
                ..spec.attention
            };
            (norm_params(d), AttentionParams::init(&dense, d, spec.max_len, std, rng))
        });
        Self {
            attn_norm: norm_params(d),
            attn,
            cross,
            ffn_norm: norm_params(d),
            ffn: FfnParams {
                w1: gaussian(&[d, f], std, rng),
                b1: Tensor::zeros(&[f]),
                w2: gaussian(&[f, d], std, rng),
                b2: Tensor::zeros(&[d]),
            },
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.attn_norm.tensors().into();
        v.extend(self.attn.tensors());
        if let Some((norm, attn)) = &self.cross {
            v.extend(norm.tensors());
            v.extend(attn.tensors());
        }
        v.extend(self.ffn_norm.tensors());
        v.extend(self.ffn.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.attn_norm.tensors_mut().into();
        v.extend(self.attn.tensors_mut());
        if let Some((norm, attn)) = &mut self.cross {
            v.extend(norm.tensors_mut());
            v.extend(attn.tensors_mut());
        }
        v.extend(self.ffn_norm.tensors_mut());
        v.extend(self.ffn.tensors_mut());
        v
    }

    fn weights(&self, vars: &mut impl Iterator<Item = Var>) -> BlockWeights {
        let norm = |vars: &mut dyn Iterator<Item = Var>| NormWeights {
            gain: vars.next().expect("gain"),
            bias: vars.next().expect("bias"),
        };
        let attn_norm = norm(vars);
        let attn = self.attn.weights(vars);
        let cross = self.cross.as_ref().map(|(_, a)| (norm(vars), a.weights(vars)));
        let ffn_norm = norm(vars);
        let mut next = || vars.next().expect("ffn weight");
        let ffn = [next(), next(), next(), next()];
        BlockWeights {
            attn_norm,
            attn,
            cross,
            ffn_norm,
            ffn,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NormWeights {
    gain: Var,
    bias: Var,
}

#[derive(Debug, Clone)]
struct BlockWeights {
    attn_norm: NormWeights,
    attn: AttentionWeights,
    cross: Option<(NormWeights, AttentionWeights)>,
    ffn_norm: NormWeights,
    ffn: [Var; 4],
}

/// Model parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    /// Every leaf in declaration order.
    pub vars: Vec<Var>,
    embed: Var,
    encoder: Vec<BlockWeights>,
    encoder_norm: Option<NormWeights>,
    layers: Vec<BlockWeights>,
    final_norm: NormWeights,
    out_w: Option<Var>,
    out_b: Var,
}

/// Logits `[B, l, vocab]` and the attention score entries materialized per
/// sequence, summed over heads and layers.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    pub attention_entries: usize,
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(pair / d as f64);
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    /// Embeddings are standard normal; other matrices use `spec.init_std`;
    /// biases start at zero and norm gains at one.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, rng::INIT, 0);
        let (v, d) = (spec.vocab_size, spec.d_model);
        let embed = gaussian(&[v, d], 1.0, &mut rng);
        let seq2seq = spec.architecture == Architecture::Seq2seq;
        let main_causal = spec.architecture != Architecture::EncoderOnly;
        let encoder: Vec<BlockParams> = if seq2seq {
            (0..spec.n_layers).map(|_| BlockParams::init(&spec, false, false, &mut rng)).collect()
        } else {
            Vec::new()
        };
        let layers = (0..spec.n_layers)
            .map(|_| BlockParams::init(&spec, main_causal, seq2seq, &mut rng))
            .collect();
        let out_w = (!spec.tie_embeddings).then(|| gaussian(&[d, v], spec.init_std, &mut rng));
        let params = ModelParams {
            embed,
            encoder,
            encoder_norm: seq2seq.then(|| norm_params(d)),
            layers,
            final_norm: norm_params(d),
            out_w,
            out_b: Tensor::zeros(&[v]),
        };
        Ok(Self { spec, params })
    }

    /// Every parameter in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let p = &self.params;
        let mut v = vec![&p.embed];
        for b in &p.encoder {
            v.extend(b.tensors());
        }
        if let Some(n) = &p.encoder_norm {
            v.extend(n.tensors());
        }
        for b in &p.layers {
            v.extend(b.tensors());
        }
        v.extend(p.final_norm.tensors());
        v.extend(p.out_w.iter());
        v.push(&p.out_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let p = &mut self.params;
        let mut v = vec![&mut p.embed];
        for b in &mut p.encoder {
            v.extend(b.tensors_mut());
        }
        if let Some(n) = &mut p.encoder_norm {
            v.extend(n.tensors_mut());
        }
        for b in &mut p.layers {
            v.extend(b.tensors_mut());
        }
        v.extend(p.final_norm.tensors_mut());
        v.extend(p.out_w.iter_mut());
        v.push(&mut p.out_b);
        v
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelWeights {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = requires_grad;
                tape.leaf(t)
            })
            .collect();
        self.weights_from(vars)
    }

    /// Structured view over existing variables given in [`tensors`](Self::tensors) order.
    pub fn weights_from(&self, vars: Vec<Var>) -> ModelWeights {
        let p = &self.params;
        let mut it = vars.iter().copied();
        let embed = it.next().expect("embedding");
        let encoder = p.encoder.iter().map(|b| b.weights(&mut it)).collect();
        let norm = |it: &mut dyn Iterator<Item = Var>| NormWeights {
            gain: it.next().expect("gain"),
            bias: it.next().expect("bias"),
        };
        let encoder_norm = p.encoder_norm.as_ref().map(|_| norm(&mut it));
        let layers = p.layers.iter().map(|b| b.weights(&mut it)).collect();
        let final_norm = norm(&mut it);
        let out_w = p.out_w.as_ref().map(|_| it.next().expect("output weight"));
        let out_b = it.next().expect("output bias");
        debug_assert!(it.next().is_none());
        ModelWeights {
            vars,
            embed,
            encoder,
            encoder_norm,
            layers,
            final_norm,
            out_w,
            out_b,
        }
    }

    fn check_ids(&self, ids: &[Vec<usize>], what: &str) -> Result<(usize, usize)> {
        let batch = ids.len();
        let len = ids.first().map_or(0, Vec::len);
        if batch == 0 || len == 0 {
            return Err(config_err(format!("{what} must be a non-empty batch of non-empty rows")));
        }
        if ids.iter().any(|r| r.len() != len) {
            return Err(config_err(format!("{what} rows have different lengths")));
        }
        if len > self.spec.max_len {
            return Err(config_err(format!(
                "{what} length {len} exceeds max_len {}",
                self.spec.max_len
            )));
        }
        if let Some(bad) = ids.iter().flatten().find(|&&t| t >= self.spec.vocab_size) {
            return Err(config_err(format!(
                "{what} contains token {bad} outside vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        Ok((batch, len))
    }

    fn embed(&self, tape: &mut Tape, w: &ModelWeights, ids: &[Vec<usize>], what: &str) -> Result<Var> {
        let (batch, len) = self.check_ids(ids, what)?;
        let d = self.spec.d_model;
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let e = tape.index_select(w.embed, &flat)?;
        let e = tape.reshape(e, &[batch, len, d])?;
        let pe = tape.constant(sinusoidal_positions(len, d));
        Ok(tape.add(e, pe)?)
    }

    fn norm(tape: &mut Tape, x: Var, n: &NormWeights) -> Result<Var> {
        let y = tape.layer_norm(x, 1e-5)?;
        let y = tape.mul(y, n.gain)?;
        Ok(tape.add(y, n.bias)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        b: &BlockWeights,
        cfg: &AttentionConfig,
        memory: Option<Var>,
        noise: Option<u64>,
        entries: &mut usize,
    ) -> Result<Var> {
        let h = Self::norm(tape, x, &b.attn_norm)?;
        let a = multihead(tape, h, &b.attn, cfg, noise)?;
        *entries += a.attention_entry_count * cfg.n_heads;
        let mut x = tape.add(x, a.y)?;
        if let (Some((norm, weights)), Some(mem)) = (&b.cross, memory) {
            let h = Self::norm(tape, x, norm)?;
            let c = cross_attention(tape, h, mem, weights, cfg.n_heads)?;
            *entries += c.attention_entry_count * cfg.n_heads;
            x = tape.add(x, c.y)?;
        }
        let h = Self::norm(tape, x, &b.ffn_norm)?;
        let [w1, b1, w2, b2] = b.ffn;
        let h = tape.matmul(h, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add(h, b2)?;
        Ok(tape.add(x, h)?)
    }

    fn layer_noise(noise: Option<u64>, stack: u64, layer: usize) -> Option<u64> {
        noise.map(|s| rng::derive_seed(s, rng::GUMBEL, stack * 1_000 + layer as u64))
    }

    /// Runs the model. `noise` seeds Gumbel noise (one sub-stream per layer); `None` disables it.
    pub fn forward(&self, tape: &mut Tape, w: &ModelWeights, batch: &Batch, noise: Option<u64>) -> Result<Forward> {
        if self.spec.architecture != Architecture::Seq2seq {
            return self.decode(tape, w, &batch.token_ids, None, noise);
        }
        let dec = batch
            .decoder_ids
            .as_ref()
            .ok_or_else(|| config_err("sequence-to-sequence batches need decoder_ids"))?;
        let (memory, enc_entries) = self.encode(tape, w, &batch.token_ids, noise)?;
        let mut f = self.decode(tape, w, dec, Some(memory), noise)?;
        f.attention_entries += enc_entries;
        Ok(f)
    }

    /// Encoder output `[B, l, d]` of a sequence-to-sequence model and its attention entry count.
    pub fn encode(&self, tape: &mut Tape, w: &ModelWeights, source: &[Vec<usize>], noise: Option<u64>) -> Result<(Var, usize)> {
        let norm = w
            .encoder_norm
            .as_ref()
            .ok_or_else(|| config_err("only sequence-to-sequence models have an encoder"))?;
        let mut entries = 0;
        let mut m = self.embed(tape, w, source, "source")?;
        let cfg = self.spec.attention_for(false);
        for (i, b) in w.encoder.iter().enumerate() {
            m = self.block(tape, m, b, &cfg, None, Self::layer_noise(noise, 0, i), &mut entries)?;
        }
        Ok((Self::norm(tape, m, norm)?, entries))
    }

    /// The main stack over `ids`, attending to `memory` when the model has cross-attention.
    pub fn decode(
        &self,
        tape: &mut Tape,
        w: &ModelWeights,
        ids: &[Vec<usize>],
        memory: Option<Var>,
        noise: Option<u64>,
    ) -> Result<Forward> {
        let seq2seq = self.spec.architecture == Architecture::Seq2seq;
        if seq2seq != memory.is_some() {
            return Err(config_err("encoder memory must be given exactly for sequence-to-sequence models"));
        }
        let mut entries = 0;
        let mut x = self.embed(tape, w, ids, if seq2seq { "decoder input" } else { "input" })?;
        let cfg = self.spec.attention_for(self.spec.architecture != Architecture::EncoderOnly);
        for (i, b) in w.layers.iter().enumerate() {
            x = self.block(tape, x, b, &cfg, memory, Self::layer_noise(noise, 1, i), &mut entries)?;
        }
        let h = Self::norm(tape, x, &w.final_norm)?;
        let out_w = match w.out_w {
            Some(o) => o,
            None => tape.t(w.embed)?,
        };
        let logits = tape.matmul(h, out_w)?;
        let logits = tape.add(logits, w.out_b)?;
        Ok(Forward {
            logits,
            attention_entries: entries,
        })
    }

    /// Mean masked negative log-likelihood of a batch.
    pub fn loss(&self, tape: &mut Tape, w: &ModelWeights, batch: &Batch, noise: Option<u64>) -> Result<Var> {
        let f = self.forward(tape, w, batch, noise)?;
        cross_entropy(tape, f.logits, &batch.target_ids, &batch.loss_mask)
    }
}

/// Mean masked token negative log-likelihood of `logits: [B, l, V]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[Vec<usize>], mask: &[Vec<f64>]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || targets.len() != shape[0] || mask.len() != shape[0] {
        return Err(config_err(format!(
            "cross entropy: logits {shape:?} against {} target rows and {} mask rows",
            targets.len(),
            mask.len()
        )));
    }
    let (batch, len, vocab) = (shape[0], shape[1], shape[2]);
    let total: f64 = mask.iter().flatten().sum();
    if total <= 0.0 {
        return Err(config_err("loss mask selects no positions"));
    }
    let mut select = Tensor::zeros(&shape);
    for b in 0..batch {
        if targets[b].len() != len || mask[b].len() != len {
            return Err(config_err(format!("target/mask row {b} does not have length {len}")));
        }
        for t in 0..len {
            let y = targets[b][t];
            if y >= vocab {
                return Err(config_err(format!("target {y} outside vocabulary of {vocab}")));
            }
            select.data_mut()[(b * len + t) * vocab + y] = mask[b][t] / total;
        }
    }
    let lse = tape.row_logsumexp(logits)?;
    let logp = tape.sub(logits, lse)?;
    let sel = tape.constant(select);
    let picked = tape.mul(logp, sel)?;
    let s = tape.sum_all(picked);
    Ok(tape.neg(s))
}
