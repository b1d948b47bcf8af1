//! Shipping checks: Sinkhorn convergence, gradients, causality, attention
//! equivalences and memory accounting.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{local_block_attention, sinkhorn_attention_head, sortcut_attention, AttentionConfig, SegmentMode, Variant};
use crate::error::Result;
use crate::harness::memory::memory_account;
use crate::model::{Architecture, Batch, Model, ModelSpec};
use crate::sinkhorn::{causal_sinkhorn_normalize, sinkhorn_normalize, SinkhornConfig, SortMatrix};
use crate::sortnet::{generate_sort_matrix, BlockPartition, CausalPooling, SortNet, SortNetParams, SortNetVariant};
use crate::tensor::{finite_diff_check_floor, Tape, Tensor, Var, MASK_VALUE};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.2}s, budget {}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds,
            self.budget_seconds
        )
    }
}

fn timed(name: &'static str, budget: f64, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (ok, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    let seconds = start.elapsed().as_secs_f64();
    Check {
        name,
        passed: ok && seconds < budget,
        detail,
        seconds,
        budget_seconds: budget,
    }
}

pub fn run_all() -> Vec<Check> {
    vec![
        doubly_stochastic(),
        gradient_fidelity(),
        causality(),
        sortcut_equivalence(),
        identity_sort_equivalence(),
        memory_savings(),
    ]
}

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
    t
}

/// Random 8x8 logits, no noise, 20 iterations: all row and column sums within 1%.
pub fn doubly_stochastic() -> Check {
    timed("doubly-stochastic convergence", 1.0, || {
        let cfg = SinkhornConfig { temperature: 1.0, n_iters: 20, gumbel: false, seed: 0 };
        let mut worst: f64 = 0.0;
        let mut good = 0;
        for seed in 0..100 {
            let mut tape = Tape::new();
            let r = tape.constant(gaussian(&[8, 8], &mut ChaCha8Rng::seed_from_u64(seed)));
            let s = sinkhorn_normalize(&mut tape, r, &cfg)?;
            let p = s.probabilities(&mut tape);
            let p = tape.value(p).data();
            let mut dev: f64 = 0.0;
            for i in 0..8 {
                let row: f64 = (0..8).map(|j| p[i * 8 + j]).sum();
                let col: f64 = (0..8).map(|j| p[j * 8 + i]).sum();
                dev = dev.max((row - 1.0).abs()).max((col - 1.0).abs());
            }
            worst = worst.max(dev);
            good += usize::from(dev <= 0.01);
        }
        Ok((good == 100, format!("{good}/100 seeds within 1%, worst deviation {worst:.2e}")))
    })
}

/// Denominator floor of the relative gradient error. Several inputs have an exactly zero
/// gradient (see [`gradient_fidelity`]); there the central difference returns roundoff of
/// about 1e-11, which a smaller floor would report as a large relative error.
pub const GRAD_FLOOR: f64 = 1e-6;

fn grad_check<F>(f: F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_floor(f, xs, 1e-5, GRAD_FLOOR)
}

fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn sort_net_tensors(variant: SortNetVariant, d: usize, n: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut p = SortNetParams::init(variant, 1, d, n, rng);
    p.w_b = gaussian(p.w_b.shape(), rng);
    p.b_b = gaussian(p.b_b.shape(), rng);
    if let (Some(w), Some(b)) = (p.w_p.as_mut(), p.b_p.as_mut()) {
        *w = gaussian(w.shape(), rng);
        *b = gaussian(b.shape(), rng);
    }
    p.tensors().into_iter().cloned().collect()
}

fn sort_net_from(variant: SortNetVariant, v: &[Var]) -> SortNet {
    match v {
        [w_p, b_p, w_b, b_b] => SortNet { variant, hidden: Some((*w_p, *b_p)), w_b: *w_b, b_b: *b_b },
        [w_b, b_b] => SortNet { variant, hidden: None, w_b: *w_b, b_b: *b_b },
        _ => unreachable!("sort nets have two or four tensors"),
    }
}

/// Central differences (step 1e-5) against the tape: at most 1e-4 relative error for the
/// Sinkhorn balancing, the sort matrix and the two sorted attention heads, 1e-3 for a
/// one-layer model.
///
/// Exactly zero gradients occur by construction: the block-logit bias of a linear sorting
/// network shifts whole columns, which the column step removes; in causal mode the first
/// block's pooled input reaches every later row as the same column shift, and the first
/// query sees a single key.
pub fn gradient_fidelity() -> Check {
    timed("gradient fidelity", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst_head: f64 = 0.0;
        let noisy = SinkhornConfig { temperature: 0.7, n_iters: 5, gumbel: true, seed: 3 };

        for causal in [false, true] {
            let r = gaussian(&[6, 6], &mut rng);
            let w = gaussian(&[6, 6], &mut rng);
            let e = grad_check(
                |tape, v| {
                    let s = if causal {
                        causal_sinkhorn_normalize(tape, v[0], &noisy)?
                    } else {
                        sinkhorn_normalize(tape, v[0], &noisy)?
                    };
                    let p = s.probabilities(tape);
                    weighted_sum(tape, p, &w)
                },
                &[r],
            )?;
            worst_head = worst_head.max(e);
        }

        let (l, b, d) = (8, 2, 4);
        let n = l / b;
        for variant in [SortNetVariant::Linear, SortNetVariant::TwoLayerSigmoid] {
            for causal in [false, true] {
                let mut xs = vec![gaussian(&[l, d], &mut rng)];
                xs.extend(sort_net_tensors(variant, d, n, &mut rng));
                let w = gaussian(&[1, n, n], &mut rng);
                let e = grad_check(
                    |tape, v| {
                        let net = sort_net_from(variant, &v[1..]);
                        let part = BlockPartition::new(l, b)?;
                        let s = generate_sort_matrix(tape, v[0], &net, &part, &noisy, causal, CausalPooling::Inclusive)?;
                        let p = s.probabilities(tape);
                        weighted_sum(tape, p, &w)
                    },
                    &xs,
                )?;
                worst_head = worst_head.max(e);
            }
        }

        for (causal, cut) in [(false, false), (true, false), (false, true)] {
            let mut xs = vec![gaussian(&[l, d], &mut rng), gaussian(&[l, d], &mut rng), gaussian(&[l, d], &mut rng)];
            xs.extend(sort_net_tensors(SortNetVariant::Linear, d, n, &mut rng));
            let w = gaussian(&[l, d], &mut rng);
            let e = grad_check(
                |tape, v| {
                    let net = sort_net_from(SortNetVariant::Linear, &v[3..]);
                    let part = BlockPartition::new(l, b)?;
                    let s = generate_sort_matrix(tape, v[0], &net, &part, &noisy, causal, CausalPooling::Inclusive)?;
                    let s = SortMatrix { logits: tape.reshape(s.logits, &[n, n])?, ..s };
                    let out = if cut {
                        sortcut_attention(tape, v[0], v[1], v[2], &s, b, 2)?
                    } else {
                        sinkhorn_attention_head(tape, v[0], v[1], v[2], &s, b, causal, SegmentMode::Concat)?
                    };
                    weighted_sum(tape, out.y, &w)
                },
                &xs,
            )?;
            worst_head = worst_head.max(e);
        }

        let model_err = model_gradient_check()?;
        let ok = worst_head <= 1e-4 && model_err <= 1e-3;
        Ok((
            ok,
            format!("components {worst_head:.2e} (limit 1e-4), one-layer model {model_err:.2e} (limit 1e-3)"),
        ))
    })
}

fn tiny_model_spec(variant: Variant, architecture: Architecture, layers: usize) -> ModelSpec {
    ModelSpec {
        vocab_size: 8,
        d_model: 8,
        n_layers: layers,
        ffn_width: 12,
        attention: AttentionConfig {
            variant,
            block_size: 2,
            n_heads: 2,
            sinkhorn: SinkhornConfig { temperature: 0.75, n_iters: 3, gumbel: true, seed: 0 },
            ..AttentionConfig::default()
        },
        max_len: 16,
        architecture,
        init_std: 0.3,
        ..ModelSpec::default()
    }
}

fn random_ids(rows: usize, len: usize, vocab: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..rows).map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect()).collect()
}

fn model_gradient_check() -> Result<f64> {
    let spec = tiny_model_spec(Variant::Sinkhorn, Architecture::Seq2seq, 1);
    let model = Model::new(spec, 6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let batch = Batch {
        token_ids: random_ids(1, 8, 8, &mut rng),
        decoder_ids: Some(random_ids(1, 8, 8, &mut rng)),
        target_ids: random_ids(1, 8, 8, &mut rng),
        loss_mask: vec![vec![1.0; 8]],
    };
    let xs: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    grad_check(
        |tape, v| {
            let w = model.weights_from(v.to_vec());
            model.loss(tape, &w, &batch, Some(9))
        },
        &xs,
    )
}

/// Causal Sinkhorn decoder, length 16, block 4: changing token `t` leaves every output
/// before `t` bit-identical, for every `t` and 20 seeds.
pub fn causality() -> Check {
    timed("causality", 10.0, || {
        let mut spec = tiny_model_spec(Variant::Sinkhorn, Architecture::DecoderOnly, 2);
        spec.attention.block_size = 4;
        let len = 16;
        let v = spec.vocab_size;
        let mut violations = 0;
        for seed in 0..20 {
            let model = Model::new(spec.clone(), seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let ids = random_ids(1, len, v, &mut rng);
            let logits = |ids: &[Vec<usize>]| -> Result<Tensor> {
                let mut tape = Tape::new();
                let w = model.bind(&mut tape, false);
                let b = Batch {
                    token_ids: ids.to_vec(),
                    decoder_ids: None,
                    target_ids: ids.to_vec(),
                    loss_mask: vec![vec![1.0; len]],
                };
                let f = model.forward(&mut tape, &w, &b, Some(seed))?;
                Ok(tape.value(f.logits).clone())
            };
            let base = logits(&ids)?;
            for t in 0..len {
                let mut changed = ids.clone();
                changed[0][t] = (changed[0][t] + 1 + rng.random_range(0..v - 1)) % v;
                let out = logits(&changed)?;
                if out.data()[..t * v] != base.data()[..t * v] {
                    violations += 1;
                }
            }
        }
        Ok((violations == 0, format!("{violations} of 320 perturbations leaked backwards")))
    })
}

fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Log-domain sort matrix for a fixed permutation (`perm[i]` is the source block of slot `i`).
fn hard_sort(tape: &mut Tape, perm: &[usize], causal: bool) -> SortMatrix {
    let n = perm.len();
    let mut logits = Tensor::full(&[n, n], MASK_VALUE);
    for (i, &j) in perm.iter().enumerate() {
        logits.data_mut()[i * n + j] = 0.0;
    }
    SortMatrix { logits: tape.constant(logits), n_iters: 0, temperature: 1.0, causal }
}

/// Plain softmax attention by explicit loops.
fn dense_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (l, d) = (q.shape()[0], q.shape()[1]);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let s: Vec<f64> = (0..l)
            .map(|j| (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() * scale)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for (j, x) in s.iter().enumerate() {
            let a = (x - m).exp() / z;
            for c in 0..d {
                out[i * d + c] += a * v.data()[j * d + c];
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// A hard permutation with budget `N` makes SortCut attend to every key once: dense attention.
pub fn sortcut_equivalence() -> Check {
    timed("sortcut equals dense at full budget", 10.0, || {
        let mut worst: f64 = 0.0;
        for l in [8, 16] {
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + l as u64);
                let b = 2;
                let n = l / b;
                let (q, k, v) = (gaussian(&[l, 4], &mut rng), gaussian(&[l, 4], &mut rng), gaussian(&[l, 4], &mut rng));
                let mut tape = Tape::new();
                let s = hard_sort(&mut tape, &permutation(n, &mut rng), false);
                let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
                let out = sortcut_attention(&mut tape, qv, kv, vv, &s, b, n)?;
                worst = worst.max(max_diff(tape.value(out.y).data(), &dense_oracle(&q, &k, &v)));
            }
        }
        Ok((worst <= 1e-10, format!("max |sortcut - dense| = {worst:.2e} over 20 cases")))
    })
}

/// With the identity sort the sorted segment duplicates the local one, and softmax over the
/// duplicated keys renormalizes to plain local attention.
pub fn identity_sort_equivalence() -> Check {
    timed("identity sort equals local attention", 10.0, || {
        let mut worst: f64 = 0.0;
        for causal in [false, true] {
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
                let (l, b) = (16, 4);
                let mut tape = Tape::new();
                let q = tape.constant(gaussian(&[l, 8], &mut rng));
                let k = tape.constant(gaussian(&[l, 8], &mut rng));
                let v = tape.constant(gaussian(&[l, 8], &mut rng));
                let ident: Vec<usize> = (0..l / b).collect();
                let s = hard_sort(&mut tape, &ident, causal);
                let a = sinkhorn_attention_head(&mut tape, q, k, v, &s, b, causal, SegmentMode::Concat)?;
                let r = local_block_attention(&mut tape, q, k, v, b, causal)?;
                worst = worst.max(max_diff(tape.value(a.y).data(), tape.value(r.y).data()));
            }
        }
        Ok((worst <= 1e-10, format!("max |sinkhorn - local| = {worst:.2e} over 20 cases")))
    })
}

/// Length 1024, block 64: the asymptotic ratio is about 240.9 and the exact one about 7.98.
pub fn memory_savings() -> Check {
    timed("memory accounting", 30.0, || {
        let cfg = AttentionConfig { variant: Variant::Sinkhorn, block_size: 64, n_heads: 1, ..AttentionConfig::default() };
        let r = memory_account(&cfg, 1024)?;
        let ok = (236.0..=245.0).contains(&r.ratio_formula)
            && (r.ratio_actual - 7.98).abs() <= 0.02
            && r.instrumented_entries == r.score_entries;
        Ok((
            ok,
            format!(
                "formula ratio {:.2}, actual ratio {:.3}, entries {} (instrumented {})",
                r.ratio_formula, r.ratio_actual, r.score_entries, r.instrumented_entries
            ),
        ))
    })
}
