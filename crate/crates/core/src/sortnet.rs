//! Block pooling and the per-head sorting network.
//!
//! Parameters carry a leading head axis so that every head owns its own
//! projection while all heads are evaluated with a single batched product.
//! The block-output width is sized for the longest supported sequence and
//! sliced down to the number of blocks actually present.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sinkhorn::{causal_sinkhorn_normalize, sinkhorn_normalize, SinkhornConfig, SortMatrix};
use crate::tensor::{Tape, Tensor, Var};

/// Functional form of the projection from pooled blocks to sorting logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortNetVariant {
    /// `F1(x)`
    #[default]
    Linear,
    /// `relu(F1(x))`
    ReluOnly,
    /// `F2(relu(F1(x)))`
    TwoLayer,
    /// `sigmoid(F2(relu(F1(x))))`
    TwoLayerSigmoid,
}

impl SortNetVariant {
    pub fn has_hidden_layer(self) -> bool {
        matches!(self, SortNetVariant::TwoLayer | SortNetVariant::TwoLayerSigmoid)
    }
}

/// Which prefix represents a block when pooling causally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalPooling {
    /// Tokens `0..=i*b`: everything before block `i` plus its first token.
    #[default]
    Inclusive,
    /// Tokens `0..i*b`: strictly before block `i`.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPartition {
    pub seq_len: usize,
    pub block_size: usize,
    pub n_blocks: usize,
}

impl BlockPartition {
    pub fn new(seq_len: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || !seq_len.is_multiple_of(block_size) {
            return Err(config_err(format!(
                "sequence length {seq_len} is not a multiple of block size {block_size}"
            )));
        }
        Ok(Self {
            seq_len,
            block_size,
            n_blocks: seq_len / block_size,
        })
    }

    fn check(&self, tape: &Tape, x: Var) -> Result<(Vec<usize>, usize)> {
        let shape = tape.shape(x);
        let r = shape.len();
        if r < 2 || shape[r - 2] != self.seq_len {
            return Err(config_err(format!(
                "expected [.., {}, d] for the block partition, got {shape:?}",
                self.seq_len
            )));
        }
        Ok((shape[..r - 2].to_vec(), shape[r - 1]))
    }
}

/// Sum of the token vectors in each block: `[.., l, d] -> [.., N, d]`.
pub fn block_pool_sum(tape: &mut Tape, x: Var, part: &BlockPartition) -> Result<Var> {
    let (lead, d) = part.check(tape, x)?;
    let r = lead.len();
    let blocks = tape.reshape(x, &[lead.as_slice(), &[part.n_blocks, part.block_size, d]].concat())?;
    let summed = tape.sum(blocks, r + 1)?;
    Ok(tape.reshape(summed, &[lead.as_slice(), &[part.n_blocks, d]].concat())?)
}

/// Prefix sums sampled at block starts: `[.., l, d] -> [.., N, d]`.
pub fn block_pool_causal(
    tape: &mut Tape,
    x: Var,
    part: &BlockPartition,
    mode: CausalPooling,
) -> Result<Var> {
    let (lead, d) = part.check(tape, x)?;
    let r = lead.len();
    let blocked_shape = [lead.as_slice(), &[part.n_blocks, part.block_size, d]].concat();
    let out_shape = [lead.as_slice(), &[part.n_blocks, d]].concat();
    let prefix = tape.cumsum(x, r)?;
    let prefix = tape.reshape(prefix, &blocked_shape)?;
    let at_start = tape.slice(prefix, r + 1, 0, 1)?;
    let inclusive = tape.reshape(at_start, &out_shape)?;
    match mode {
        CausalPooling::Inclusive => Ok(inclusive),
        CausalPooling::Strict => {
            let blocks = tape.reshape(x, &blocked_shape)?;
            let first = tape.slice(blocks, r + 1, 0, 1)?;
            let first = tape.reshape(first, &out_shape)?;
            Ok(tape.sub(inclusive, first)?)
        }
    }
}

/// Owned sorting-network weights for `heads` heads.
///
/// Shapes: `w_p [H, d, d]`, `b_p [H, 1, d]` (hidden-layer variants only),
/// `w_b [H, d, max_blocks]`, `b_b [H, 1, max_blocks]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortNetParams {
    pub variant: SortNetVariant,
    pub w_p: Option<Tensor>,
    pub b_p: Option<Tensor>,
    pub w_b: Tensor,
    pub b_b: Tensor,
}

impl SortNetParams {
    /// Gaussian weights (std 0.02) and zero biases.
    pub fn init(
        variant: SortNetVariant,
        heads: usize,
        d: usize,
        max_blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut gauss = |shape: &[usize]| {
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
            t
        };
        let (w_p, b_p) = if variant.has_hidden_layer() {
            (Some(gauss(&[heads, d, d])), Some(Tensor::zeros(&[heads, 1, d])))
        } else {
            (None, None)
        };
        Self {
            variant,
            w_p,
            b_p,
            w_b: gauss(&[heads, d, max_blocks]),
            b_b: Tensor::zeros(&[heads, 1, max_blocks]),
        }
    }

    pub fn zeros(variant: SortNetVariant, heads: usize, d: usize, max_blocks: usize) -> Self {
        let hidden = variant.has_hidden_layer();
        Self {
            variant,
            w_p: hidden.then(|| Tensor::zeros(&[heads, d, d])),
            b_p: hidden.then(|| Tensor::zeros(&[heads, 1, d])),
            w_b: Tensor::zeros(&[heads, d, max_blocks]),
            b_b: Tensor::zeros(&[heads, 1, max_blocks]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.w_p.iter().chain(self.b_p.iter()).collect();
        v.extend([&self.w_b, &self.b_b]);
        v
    }

    /// Records the weights as tape leaves.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> SortNet {
        let mut leaf = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = requires_grad;
            tape.leaf(t)
        };
        SortNet {
            variant: self.variant,
            hidden: match (&self.w_p, &self.b_p) {
                (Some(w), Some(b)) => Some((leaf(w), leaf(b))),
                _ => None,
            },
            w_b: leaf(&self.w_b),
            b_b: leaf(&self.b_b),
        }
    }
}

/// Sorting-network weights already on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SortNet {
    pub variant: SortNetVariant,
    pub hidden: Option<(Var, Var)>,
    pub w_b: Var,
    pub b_b: Var,
}

impl SortNet {
    pub fn heads(&self, tape: &Tape) -> usize {
        tape.shape(self.w_b)[0]
    }

    pub fn max_blocks(&self, tape: &Tape) -> usize {
        tape.shape(self.w_b)[2]
    }
}

/// Applies per-head weights `[H, d, k]` to inputs `[.., N, d]` shared by all heads: `[.., H, N, k]`.
fn shared_input_heads(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let (h, d, k) = {
        let s = tape.shape(w);
        (s[0], s[1], s[2])
    };
    let xs = tape.shape(x).to_vec();
    let r = xs.len();
    let n = xs[r - 2];
    let wt = tape.transpose(w, 0, 1)?;
    let wt = tape.reshape(wt, &[d, h * k])?;
    let y = tape.matmul(x, wt)?;
    let y = tape.reshape(y, &[&xs[..r - 2], &[n, h, k][..]].concat())?;
    Ok(tape.transpose(y, r - 2, r - 1)?)
}

/// Sorting logits `[.., H, N, N]` from pooled blocks `[.., N, d]`.
pub fn sort_logits(tape: &mut Tape, pooled: Var, net: &SortNet) -> Result<Var> {
    let shape = tape.shape(pooled).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(config_err(format!("pooled blocks must be [.., N, d], got {shape:?}")));
    }
    let (n, d) = (shape[r - 2], shape[r - 1]);
    if tape.shape(net.w_b)[1] != d {
        return Err(config_err(format!(
            "sorting network expects width {}, pooled blocks have {d}",
            tape.shape(net.w_b)[1]
        )));
    }
    if net.variant.has_hidden_layer() != net.hidden.is_some() {
        return Err(config_err(format!(
            "sorting network variant {:?} does not match its parameters",
            net.variant
        )));
    }
    let max_blocks = net.max_blocks(tape);
    if n > max_blocks {
        return Err(config_err(format!(
            "{n} blocks exceed the sorting network's capacity of {max_blocks}"
        )));
    }
    let w_b = tape.slice(net.w_b, 2, 0, n)?;
    let b_b = tape.slice(net.b_b, 2, 0, n)?;
    let out = match net.hidden {
        None => {
            let z = shared_input_heads(tape, pooled, w_b)?;
            tape.add(z, b_b)?
        }
        Some((w_p, b_p)) => {
            let h = shared_input_heads(tape, pooled, w_p)?;
            let h = tape.add(h, b_p)?;
            let h = tape.relu(h);
            let z = tape.matmul(h, w_b)?;
            tape.add(z, b_b)?
        }
    };
    Ok(match net.variant {
        SortNetVariant::ReluOnly => tape.relu(out),
        SortNetVariant::TwoLayerSigmoid => tape.sigmoid(out),
        SortNetVariant::Linear | SortNetVariant::TwoLayer => out,
    })
}

/// Pool, project and balance: one relaxed block permutation per head, `[.., H, N, N]`.
pub fn generate_sort_matrix(
    tape: &mut Tape,
    x: Var,
    net: &SortNet,
    part: &BlockPartition,
    cfg: &SinkhornConfig,
    causal: bool,
    pooling: CausalPooling,
) -> Result<SortMatrix> {
    let pooled = if causal {
        block_pool_causal(tape, x, part, pooling)?
    } else {
        block_pool_sum(tape, x, part)?
    };
    let logits = sort_logits(tape, pooled, net)?;
    if causal {
        causal_sinkhorn_normalize(tape, logits, cfg)
    } else {
        sinkhorn_normalize(tape, logits, cfg)
    }
}
