//! Attention variants over `[.., l, d_h]` query/key/value tensors.
//!
//! Every head-level function accepts arbitrary leading axes (batch, heads), so a
//! whole multihead layer runs as one set of batched products. Scores are scaled
//! by `1/sqrt(d_h)` in every variant.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sinkhorn::{SinkhornConfig, SortMatrix};
use crate::sortnet::{generate_sort_matrix, BlockPartition, CausalPooling, SortNet, SortNetParams, SortNetVariant};
use crate::tensor::{Mask, Tape, Tensor, Var, MASK_VALUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    Local,
    #[default]
    Sinkhorn,
    Sortcut,
    Mixture,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Dense,
        Variant::Local,
        Variant::Sinkhorn,
        Variant::Sortcut,
        Variant::Mixture,
    ];

    pub fn uses_sorting(self) -> bool {
        matches!(self, Variant::Sinkhorn | Variant::Sortcut | Variant::Mixture)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Local => "local",
            Variant::Sinkhorn => "sinkhorn",
            Variant::Sortcut => "sortcut",
            Variant::Mixture => "mixture",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err(format!("unknown attention variant `{s}`")))
    }
}

/// How the sorted and local terms share a softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// `2b` key slots (sorted block, then own block) under one softmax.
    #[default]
    Concat,
    /// `b` slots holding the summed logits, weighting the sorted values only.
    SummedLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub block_size: usize,
    pub n_heads: usize,
    pub causal: bool,
    pub sinkhorn: SinkhornConfig,
    /// Number of sorted blocks every query sees under `sortcut`.
    pub sortcut_budget: usize,
    pub sort_net: SortNetVariant,
    pub segments: SegmentMode,
    pub causal_pooling: CausalPooling,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sinkhorn,
            block_size: 4,
            n_heads: 2,
            causal: false,
            sinkhorn: SinkhornConfig::default(),
            sortcut_budget: 1,
            sort_net: SortNetVariant::Linear,
            segments: SegmentMode::Concat,
            causal_pooling: CausalPooling::Inclusive,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self, d_model: usize) -> usize {
        d_model / self.n_heads.max(1)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_heads == 0 || !d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(format!(
                "model width {d_model} is not divisible by {} heads",
                self.n_heads
            )));
        }
        if self.block_size == 0 {
            return Err(config_err("block_size must be at least 1"));
        }
        if self.variant == Variant::Sortcut {
            if self.causal {
                return Err(config_err("sortcut attention cannot be causal"));
            }
            if self.sortcut_budget == 0 {
                return Err(config_err("sortcut_budget must be at least 1"));
            }
        }
        self.sinkhorn.validate()
    }

    /// Sequence length after right-padding to whole blocks.
    pub fn padded_len(&self, len: usize) -> usize {
        if self.variant == Variant::Dense {
            len
        } else {
            len.div_ceil(self.block_size) * self.block_size
        }
    }
}

/// Result of one attention call. The entry count is per batch element and head.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub y: Var,
    pub attention_entry_count: usize,
}

struct Geometry {
    lead: Vec<usize>,
    len: usize,
    dh: usize,
}

impl Geometry {
    fn of(tape: &Tape, q: Var, k: Var, v: Var) -> Result<Self> {
        let qs = tape.shape(q);
        if qs.len() < 2 || tape.shape(k) != qs || tape.shape(v) != qs {
            return Err(config_err(format!(
                "query/key/value shapes must agree: {:?}, {:?}, {:?}",
                qs,
                tape.shape(k),
                tape.shape(v)
            )));
        }
        let r = qs.len();
        Ok(Self {
            lead: qs[..r - 2].to_vec(),
            len: qs[r - 2],
            dh: qs[r - 1],
        })
    }

    fn rank(&self) -> usize {
        self.lead.len() + 2
    }

    fn with(&self, tail: &[usize]) -> Vec<usize> {
        [self.lead.as_slice(), tail].concat()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dh as f64).sqrt()
    }
}

/// `[.., l, d] -> [.., N, b*d]`.
pub fn blockify(tape: &mut Tape, x: Var, block_size: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(config_err(format!("blockify needs [.., l, d], got {shape:?}")));
    }
    let part = BlockPartition::new(shape[r - 2], block_size)?;
    let mut out = shape[..r - 2].to_vec();
    out.extend([part.n_blocks, block_size * shape[r - 1]]);
    Ok(tape.reshape(x, &out)?)
}

/// Inverse of [`blockify`]: `[.., N, b*d] -> [.., N*b, d]`.
pub fn deblockify(tape: &mut Tape, x: Var, block_size: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    if r < 2 || block_size == 0 || !shape[r - 1].is_multiple_of(block_size) {
        return Err(config_err(format!(
            "deblockify: {shape:?} does not split into blocks of {block_size}"
        )));
    }
    let mut out = shape[..r - 2].to_vec();
    out.extend([shape[r - 2] * block_size, shape[r - 1] / block_size]);
    Ok(tape.reshape(x, &out)?)
}

/// Mixes whole blocks of `x` by the relaxed permutation: `U(P B(x))`.
pub fn apply_sort(tape: &mut Tape, s: &SortMatrix, x: Var, block_size: usize) -> Result<Var> {
    let blocks = blockify(tape, x, block_size)?;
    let n = tape.shape(blocks)[tape.shape(blocks).len() - 2];
    let ps = tape.shape(s.logits);
    if ps.len() < 2 || ps[ps.len() - 1] != n || ps[ps.len() - 2] != n {
        return Err(config_err(format!(
            "sort matrix {ps:?} does not match {n} blocks of size {block_size}"
        )));
    }
    let p = s.probabilities(tape);
    let mixed = tape.matmul(p, blocks)?;
    deblockify(tape, mixed, block_size)
}

fn some_mask(mask: Mask) -> Option<Mask> {
    mask.any().then_some(mask)
}

fn fill(tape: &mut Tape, x: Var, mask: Option<&Mask>) -> Result<Var> {
    Ok(match mask {
        Some(m) => tape.masked_fill(x, m, MASK_VALUE)?,
        None => x,
    })
}

fn scores(tape: &mut Tape, q: Var, k: Var, scale: f64) -> Result<Var> {
    let r = tape.shape(k).len();
    let kt = tape.transpose(k, r - 2, r - 1)?;
    let s = tape.matmul(q, kt)?;
    Ok(tape.scale(s, scale))
}

fn attend(tape: &mut Tape, logits: Var, v: Var) -> Result<Var> {
    let a = tape.row_softmax(logits)?;
    Ok(tape.matmul(a, v)?)
}

/// Full `l x l` attention; keys at positions `>= valid` are masked.
fn dense_impl(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool, valid: usize) -> Result<HeadOutput> {
    let g = Geometry::of(tape, q, k, v)?;
    let l = g.len;
    let mask = some_mask(Mask::from_fn(&[l, l], |ix| (causal && ix[1] > ix[0]) || ix[1] >= valid));
    let s = scores(tape, q, k, g.scale())?;
    let s = fill(tape, s, mask.as_ref())?;
    Ok(HeadOutput {
        y: attend(tape, s, v)?,
        attention_entry_count: l * l,
    })
}

fn local_mask(n: usize, b: usize, causal: bool, valid: usize) -> Option<Mask> {
    some_mask(Mask::from_fn(&[n, b, b], |ix| {
        (causal && ix[2] > ix[1]) || ix[0] * b + ix[2] >= valid
    }))
}

fn local_impl(tape: &mut Tape, q: Var, k: Var, v: Var, b: usize, causal: bool, valid: usize) -> Result<HeadOutput> {
    let g = Geometry::of(tape, q, k, v)?;
    let part = BlockPartition::new(g.len, b)?;
    let n = part.n_blocks;
    let shape = g.with(&[n, b, g.dh]);
    let (qb, kb, vb) = (tape.reshape(q, &shape)?, tape.reshape(k, &shape)?, tape.reshape(v, &shape)?);
    let s = scores(tape, qb, kb, g.scale())?;
    let s = fill(tape, s, local_mask(n, b, causal, valid).as_ref())?;
    let y = attend(tape, s, vb)?;
    Ok(HeadOutput {
        y: tape.reshape(y, &g.with(&[g.len, g.dh]))?,
        attention_entry_count: n * b * b,
    })
}

#[allow(clippy::too_many_arguments)]
fn sinkhorn_impl(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    s: &SortMatrix,
    b: usize,
    causal: bool,
    mode: SegmentMode,
    valid: usize,
) -> Result<HeadOutput> {
    if s.causal != causal {
        return Err(config_err(format!(
            "sort matrix causal={} used for attention with causal={causal}",
            s.causal
        )));
    }
    let g = Geometry::of(tape, q, k, v)?;
    let part = BlockPartition::new(g.len, b)?;
    let n = part.n_blocks;
    let shape = g.with(&[n, b, g.dh]);
    let ks = apply_sort(tape, s, k, b)?;
    let vs = apply_sort(tape, s, v, b)?;
    let (qb, kb, vb) = (tape.reshape(q, &shape)?, tape.reshape(k, &shape)?, tape.reshape(v, &shape)?);
    let (ks, vs) = (tape.reshape(ks, &shape)?, tape.reshape(vs, &shape)?);
    let sorted = scores(tape, qb, ks, g.scale())?;
    let local = scores(tape, qb, kb, g.scale())?;
    let r = g.rank() + 1;
    let y = match mode {
        SegmentMode::Concat => {
            let both = tape.concat(&[sorted, local], r - 1)?;
            let mask = some_mask(Mask::from_fn(&[n, b, 2 * b], |ix| {
                let (row, col) = (ix[1], ix[2]);
                if col < b {
                    causal && col > row
                } else {
                    let c = col - b;
                    (causal && c > row) || ix[0] * b + c >= valid
                }
            }));
            let both = fill(tape, both, mask.as_ref())?;
            let a = tape.row_softmax(both)?;
            let a_sorted = tape.slice(a, r - 1, 0, b)?;
            let a_local = tape.slice(a, r - 1, b, b)?;
            let ys = tape.matmul(a_sorted, vs)?;
            let yl = tape.matmul(a_local, vb)?;
            tape.add(ys, yl)?
        }
        SegmentMode::SummedLogits => {
            let summed = tape.add(sorted, local)?;
            let summed = fill(tape, summed, local_mask(n, b, causal, valid).as_ref())?;
            attend(tape, summed, vs)?
        }
    };
    Ok(HeadOutput {
        y: tape.reshape(y, &g.with(&[g.len, g.dh]))?,
        attention_entry_count: n * 2 * b * b + n * n,
    })
}

fn sortcut_impl(tape: &mut Tape, q: Var, k: Var, v: Var, s: &SortMatrix, b: usize, budget: usize) -> Result<HeadOutput> {
    if s.causal {
        return Err(config_err("sortcut attention cannot be causal"));
    }
    let g = Geometry::of(tape, q, k, v)?;
    let part = BlockPartition::new(g.len, b)?;
    let n = part.n_blocks;
    if budget == 0 || budget > n {
        return Err(config_err(format!("sortcut budget {budget} outside [1, {n}]")));
    }
    let r = g.rank();
    let ks = apply_sort(tape, s, k, b)?;
    let vs = apply_sort(tape, s, v, b)?;
    let ks = tape.slice(ks, r - 2, 0, budget * b)?;
    let vs = tape.slice(vs, r - 2, 0, budget * b)?;
    let sc = scores(tape, q, ks, g.scale())?;
    Ok(HeadOutput {
        y: attend(tape, sc, vs)?,
        attention_entry_count: g.len * budget * b + n * n,
    })
}

/// Standard scaled dot-product attention over all positions.
pub fn dense_attention(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<HeadOutput> {
    let len = tape.shape(q).get(tape.shape(q).len().wrapping_sub(2)).copied().unwrap_or(0);
    dense_impl(tape, q, k, v, causal, len)
}

/// Attention restricted to each query's own block.
pub fn local_block_attention(tape: &mut Tape, q: Var, k: Var, v: Var, block_size: usize, causal: bool) -> Result<HeadOutput> {
    let len = Geometry::of(tape, q, k, v)?.len;
    local_impl(tape, q, k, v, block_size, causal, len)
}

/// Sorted-block plus local-block attention for one head (or a stack of heads).
///
/// `s` must have shape `[.., N, N]` with the same leading axes as `q`. In causal mode the sorted segment only exposes relative
/// positions up to the query's own.
#[allow(clippy::too_many_arguments)]
pub fn sinkhorn_attention_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    s: &SortMatrix,
    block_size: usize,
    causal: bool,
    mode: SegmentMode,
) -> Result<HeadOutput> {
    let len = Geometry::of(tape, q, k, v)?.len;
    sinkhorn_impl(tape, q, k, v, s, block_size, causal, mode, len)
}

/// Every query attends to the first `budget` sorted blocks.
pub fn sortcut_attention(tape: &mut Tape, q: Var, k: Var, v: Var, s: &SortMatrix, block_size: usize, budget: usize) -> Result<HeadOutput> {
    sortcut_impl(tape, q, k, v, s, block_size, budget)
}

/// Sinkhorn head output plus dense attention (causally masked when `causal`).
#[allow(clippy::too_many_arguments)]
pub fn mixture_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    s: &SortMatrix,
    block_size: usize,
    causal: bool,
    mode: SegmentMode,
) -> Result<HeadOutput> {
    let len = Geometry::of(tape, q, k, v)?.len;
    mixture_impl(tape, q, k, v, s, block_size, causal, mode, len)
}

#[allow(clippy::too_many_arguments)]
fn mixture_impl(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    s: &SortMatrix,
    b: usize,
    causal: bool,
    mode: SegmentMode,
    valid: usize,
) -> Result<HeadOutput> {
    let sink = sinkhorn_impl(tape, q, k, v, s, b, causal, mode, valid)?;
    let dense = dense_impl(tape, q, k, v, causal, valid)?;
    Ok(HeadOutput {
        y: tape.add(sink.y, dense.y)?,
        attention_entry_count: sink.attention_entry_count + dense.attention_entry_count,
    })
}

/// Owned projection weights of one attention sublayer, each `[d, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub sort: Option<SortNetParams>,
}

impl AttentionParams {
    /// Gaussian projections with standard deviation `std`; a sorting network
    /// sized for `max_len` tokens when the variant sorts.
    pub fn init(cfg: &AttentionConfig, d_model: usize, max_len: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut proj = || {
            let mut t = Tensor::zeros(&[d_model, d_model]);
            t.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
            t
        };
        let (w_q, w_k, w_v, w_o) = (proj(), proj(), proj(), proj());
        let sort = cfg.variant.uses_sorting().then(|| {
            let max_blocks = max_len.div_ceil(cfg.block_size).max(1);
            SortNetParams::init(cfg.sort_net, cfg.n_heads, d_model, max_blocks, rng)
        });
        Self { w_q, w_k, w_v, w_o, sort }
    }

    /// Parameters in a fixed declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        if let Some(s) = &self.sort {
            v.extend(s.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o];
        if let Some(s) = &mut self.sort {
            v.extend(s.w_p.iter_mut());
            v.extend(s.b_p.iter_mut());
            v.extend([&mut s.w_b, &mut s.b_b]);
        }
        v
    }

    /// Builds on-tape weights from leaves recorded in [`tensors`](Self::tensors) order.
    pub fn weights(&self, vars: &mut impl Iterator<Item = Var>) -> AttentionWeights {
        let mut next = || vars.next().expect("one variable per parameter");
        AttentionWeights {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            sort: self.sort.as_ref().map(|s| SortNet {
                variant: s.variant,
                hidden: s.variant.has_hidden_layer().then(|| (next(), next())),
                w_b: next(),
                b_b: next(),
            }),
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> AttentionWeights {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = requires_grad;
                tape.leaf(t)
            })
            .collect();
        self.weights(&mut vars.into_iter())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub sort: Option<SortNet>,
}

/// `[B, l, d] -> [B, H, l, d/H]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let x = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(tape.transpose(x, 1, 2)?)
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let x = tape.transpose(x, 1, 2)?;
    Ok(tape.reshape(x, &[s[0], s[2], s[1] * s[3]])?)
}

fn check_input(tape: &Tape, x: Var, w: &AttentionWeights) -> Result<(usize, usize, usize)> {
    let s = tape.shape(x);
    let d = tape.shape(w.w_q)[0];
    if s.len() != 3 || s[2] != d {
        return Err(config_err(format!("attention input must be [batch, len, {d}], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Multihead self-attention over `x: [B, l, d]`.
///
/// Sequences are right-padded with zero vectors to a whole number of blocks;
/// padded keys are masked in the local and dense terms and contribute zero
/// vectors to sorting, and padded outputs are dropped. `noise_seed` enables
/// Gumbel noise (when the config allows it) with that seed.
pub fn multihead(
    tape: &mut Tape,
    x: Var,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    noise_seed: Option<u64>,
) -> Result<HeadOutput> {
    let (batch, len, d) = check_input(tape, x, w)?;
    cfg.validate(d)?;
    let heads = cfg.n_heads;
    let b = cfg.block_size;
    let padded = cfg.padded_len(len);
    let xp = if padded > len {
        let zeros = tape.constant(Tensor::zeros(&[batch, padded - len, d]));
        tape.concat(&[x, zeros], 1)?
    } else {
        x
    };
    let q = tape.matmul(xp, w.w_q)?;
    let k = tape.matmul(xp, w.w_k)?;
    let v = tape.matmul(xp, w.w_v)?;
    let (q, k, v) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);

    let sort = if cfg.variant.uses_sorting() {
        let net = w
            .sort
            .as_ref()
            .ok_or_else(|| config_err(format!("{} attention needs sorting-network weights", cfg.variant)))?;
        let part = BlockPartition::new(padded, b)?;
        let mut sk = cfg.sinkhorn;
        sk.gumbel = sk.gumbel && noise_seed.is_some();
        sk.seed = noise_seed.unwrap_or(sk.seed);
        Some(generate_sort_matrix(tape, xp, net, &part, &sk, cfg.causal, cfg.causal_pooling)?)
    } else {
        None
    };

    let out = match (cfg.variant, sort.as_ref()) {
        (Variant::Dense, _) => dense_impl(tape, q, k, v, cfg.causal, len)?,
        (Variant::Local, _) => local_impl(tape, q, k, v, b, cfg.causal, len)?,
        (Variant::Sinkhorn, Some(s)) => sinkhorn_impl(tape, q, k, v, s, b, cfg.causal, cfg.segments, len)?,
        (Variant::Sortcut, Some(s)) => sortcut_impl(tape, q, k, v, s, b, cfg.sortcut_budget)?,
        (Variant::Mixture, Some(s)) => mixture_impl(tape, q, k, v, s, b, cfg.causal, cfg.segments, len)?,
        (_, None) => unreachable!("sorting variants always build a sort matrix"),
    };
    let y = merge_heads(tape, out.y)?;
    let y = tape.matmul(y, w.w_o)?;
    let y = if padded > len { tape.slice(y, 1, 0, len)? } else { y };
    Ok(HeadOutput {
        y,
        attention_entry_count: out.attention_entry_count,
    })
}

/// Dense multihead attention from `x: [B, lq, d]` onto `memory: [B, lk, d]`.
pub fn cross_attention(tape: &mut Tape, x: Var, memory: Var, w: &AttentionWeights, heads: usize) -> Result<HeadOutput> {
    let (batch, lq, d) = check_input(tape, x, w)?;
    let (mb, lk, md) = check_input(tape, memory, w)?;
    if mb != batch || md != d || heads == 0 || d % heads != 0 {
        return Err(config_err(format!(
            "cross attention: query [{batch}, {lq}, {d}] and memory [{mb}, {lk}, {md}] with {heads} heads"
        )));
    }
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(memory, w.w_k)?;
    let v = tape.matmul(memory, w.w_v)?;
    let (q, k, v) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);
    let s = scores(tape, q, k, 1.0 / ((d / heads) as f64).sqrt())?;
    let y = attend(tape, s, v)?;
    let y = merge_heads(tape, y)?;
    Ok(HeadOutput {
        y: tape.matmul(y, w.w_o)?,
        attention_entry_count: lq * lk,
    })
}
