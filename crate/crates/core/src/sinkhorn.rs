//! Gumbel-perturbed Sinkhorn balancing in the log domain.
//!
//! Each iteration normalizes columns and then rows, so the returned matrix
//! always has unit row sums and column sums converge as the iteration count
//! grows. The causal form restricts support to the lower triangle (destination
//! block `i` may only draw from source blocks `j <= i`) and normalizes columns
//! over running prefixes, which keeps row `i` independent of rows after it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::{Mask, Tape, Tensor, Var, MASK_VALUE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub temperature: f64,
    pub n_iters: usize,
    pub gumbel: bool,
    /// Noise seed. Models derive it per layer and step, so it is not part of saved configs.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            temperature: 0.75,
            n_iters: 5,
            gumbel: true,
            seed: 0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(config_err(format!(
                "sinkhorn temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Same settings with noise disabled.
    pub fn deterministic(mut self) -> Self {
        self.gumbel = false;
        self
    }
}

/// Relaxed block permutation held as log-probabilities on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SortMatrix {
    pub logits: Var,
    pub n_iters: usize,
    pub temperature: f64,
    pub causal: bool,
}

impl SortMatrix {
    /// `exp(logits)`: the (approximately) doubly stochastic matrix.
    pub fn probabilities(&self, tape: &mut Tape) -> Var {
        tape.exp(self.logits)
    }
}

/// Standard Gumbel samples `-log(-log u)`, `u ~ U(0, 1)`.
pub fn gumbel_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        *x = -(-u.ln()).ln();
    }
    t
}

/// Forbidden entries of the causal support: `true` where source `j` is after destination `i`.
pub fn causal_support_mask(n_blocks: usize) -> Mask {
    Mask::from_fn(&[n_blocks, n_blocks], |ix| ix[1] > ix[0])
}

fn check_square(tape: &Tape, r: Var) -> Result<usize> {
    let shape = tape.shape(r);
    let rank = shape.len();
    if rank < 2 || shape[rank - 1] != shape[rank - 2] {
        return Err(config_err(format!(
            "sinkhorn input must be square in its last two axes, got {shape:?}"
        )));
    }
    Ok(shape[rank - 1])
}

/// `(R + eps) / tau`, with eps drawn only when noise is enabled.
fn initial_logits(tape: &mut Tape, r: Var, cfg: &SinkhornConfig) -> Result<Var> {
    let base = if cfg.gumbel {
        let noise = tape.constant(gumbel_noise(tape.shape(r), cfg.seed));
        tape.add(r, noise)?
    } else {
        r
    };
    Ok(tape.scale(base, 1.0 / cfg.temperature))
}

/// Balances `R` (shape `[.., N, N]`) into a relaxed permutation.
///
/// With `n_iters == 0` the logits are returned unnormalized.
pub fn sinkhorn_normalize(tape: &mut Tape, r: Var, cfg: &SinkhornConfig) -> Result<SortMatrix> {
    cfg.validate()?;
    let n = check_square(tape, r)?;
    let rank = tape.shape(r).len();
    let mut l = initial_logits(tape, r, cfg)?;
    if n > 0 {
        for _ in 0..cfg.n_iters {
            let col = tape.logsumexp(l, rank - 2)?;
            l = tape.sub(l, col)?;
            let row = tape.logsumexp(l, rank - 1)?;
            l = tape.sub(l, row)?;
        }
    }
    Ok(SortMatrix {
        logits: l,
        n_iters: cfg.n_iters,
        temperature: cfg.temperature,
        causal: false,
    })
}

/// Causal balancing on lower-triangular support.
///
/// Forbidden entries are pinned to [`MASK_VALUE`] before every step and in the
/// output. The column step divides entry `(i, j)` by the column mass of rows
/// `0..=i` only, so row `i` of the result is a function of rows `0..=i` of `R`.
pub fn causal_sinkhorn_normalize(
    tape: &mut Tape,
    r: Var,
    cfg: &SinkhornConfig,
) -> Result<SortMatrix> {
    cfg.validate()?;
    let n = check_square(tape, r)?;
    let rank = tape.shape(r).len();
    let forbidden = causal_support_mask(n);
    let l0 = initial_logits(tape, r, cfg)?;
    let mut l = tape.masked_fill(l0, &forbidden, MASK_VALUE)?;
    for _ in 0..cfg.n_iters {
        let col = tape.cum_logsumexp(l, rank - 2)?;
        l = tape.sub(l, col)?;
        l = tape.masked_fill(l, &forbidden, MASK_VALUE)?;
        let row = tape.logsumexp(l, rank - 1)?;
        l = tape.sub(l, row)?;
        l = tape.masked_fill(l, &forbidden, MASK_VALUE)?;
    }
    Ok(SortMatrix {
        logits: l,
        n_iters: cfg.n_iters,
        temperature: cfg.temperature,
        causal: true,
    })
}

/// Largest number of blocks [`hard_round`] will enumerate.
pub const HARD_ROUND_MAX: usize = 10;

/// Exact maximum-weight permutation of a square matrix by enumeration.
///
/// Permutations are visited in lexicographic order and only a strictly better
/// score replaces the incumbent, so ties resolve to the lexicographically smallest.
pub fn hard_round(s: &Tensor) -> Result<Tensor> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(config_err(format!("hard_round needs a square matrix, got {shape:?}")));
    }
    let n = shape[0];
    if n > HARD_ROUND_MAX {
        return Err(config_err(format!(
            "hard_round enumerates at most {HARD_ROUND_MAX} blocks (got {n}); use the relaxed matrix instead"
        )));
    }
    let v = s.data();
    let score = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| v[i * n + j]).sum() };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_score = score(&perm);
    while next_permutation(&mut perm) {
        let sc = score(&perm);
        if sc > best_score {
            best_score = sc;
            best.copy_from_slice(&perm);
        }
    }
    let mut out = Tensor::zeros(&[n, n]);
    for (i, &j) in best.iter().enumerate() {
        out.data_mut()[i * n + j] = 1.0;
    }
    Ok(out)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let Some(i) = (0..n - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).expect("pivot has a successor");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        t
    }

    fn cfg(temperature: f64, n_iters: usize) -> SinkhornConfig {
        SinkhornConfig {
            temperature,
            n_iters,
            gumbel: false,
            seed: 0,
        }
    }

    fn run(r: Tensor, c: SinkhornConfig, causal: bool) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(r);
        let s = if causal {
            causal_sinkhorn_normalize(&mut tape, v, &c).unwrap()
        } else {
            sinkhorn_normalize(&mut tape, v, &c).unwrap()
        };
        let p = s.probabilities(&mut tape);
        tape.value(p).clone()
    }

    fn sums(p: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = p.shape()[0];
        let rows = (0..n).map(|i| (0..n).map(|j| p.at(&[i, j])).sum()).collect();
        let cols = (0..n).map(|j| (0..n).map(|i| p.at(&[i, j])).sum()).collect();
        (rows, cols)
    }

    /// Probability-domain causal balancing written directly from its definition.
    fn reference_causal(r: &Tensor, iters: usize) -> Vec<Vec<f64>> {
        let n = r.shape()[0];
        let mut p: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if j <= i { r.at(&[i, j]).exp() } else { 0.0 }).collect())
            .collect();
        for _ in 0..iters {
            let prev = p.clone();
            for i in 0..n {
                for j in 0..=i {
                    let prefix: f64 = (0..=i).map(|k| prev[k][j]).sum();
                    p[i][j] = prev[i][j] / prefix;
                }
            }
            for row in p.iter_mut() {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        p
    }

    #[test]
    fn zeros_give_uniform() {
        let p = run(Tensor::zeros(&[2, 2]), cfg(1.0, 1), false);
        assert_eq!(p.data(), &[0.5; 4]);
    }

    #[test]
    fn one_iteration_on_symmetric_input() {
        let r = Tensor::from_rows(&[&[2f64.ln(), 0.0], &[0.0, 2f64.ln()]]);
        let p = run(r, cfg(1.0, 1), false);
        let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn low_temperature_approaches_permutation() {
        let r = Tensor::from_rows(&[&[5.0, 0.0], &[0.0, 5.0]]);
        let p = run(r, cfg(0.05, 20), false);
        assert!(p.at(&[0, 0]) >= 0.99 && p.at(&[1, 1]) >= 0.99);
    }

    #[test]
    fn zero_iterations_are_unnormalized() {
        let r = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]);
        let p = run(r.clone(), cfg(0.5, 0), false);
        for (a, b) in p.data().iter().zip(r.data()) {
            assert_eq!(*a, (b / 0.5).exp());
        }
    }

    #[test]
    fn doubly_stochastic_after_twenty_iterations() {
        for seed in 0..100 {
            let p = run(gaussian(&[8, 8], seed), cfg(1.0, 20), false);
            let (rows, cols) = sums(&p);
            for s in rows.iter().chain(&cols) {
                assert!((0.99..=1.01).contains(s), "seed {seed}: sum {s}");
            }
        }
    }

    #[test]
    fn deviation_shrinks_with_iterations_on_average() {
        let mean_dev = |iters: usize| -> f64 {
            (0..100)
                .map(|seed| {
                    let (_, cols) = sums(&run(gaussian(&[8, 8], seed), cfg(1.0, iters), false));
                    cols.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 100.0
        };
        let devs: Vec<f64> = [1, 2, 5, 10, 20].iter().map(|&k| mean_dev(k)).collect();
        for w in devs.windows(2) {
            assert!(w[1] <= w[0], "{devs:?}");
        }
    }

    #[test]
    fn temperature_sharpens_the_diagonal() {
        let r = Tensor::from_rows(&[&[2.0, 0.5, 0.0], &[0.3, 2.0, 0.1], &[0.0, 0.4, 2.0]]);
        let mins: Vec<f64> = [1.0, 0.5, 0.1, 0.05]
            .iter()
            .map(|&tau| {
                let p = run(r.clone(), cfg(tau, 10), false);
                (0..3).map(|i| p.at(&[i, i])).fold(1.0, f64::min)
            })
            .collect();
        for w in mins.windows(2) {
            assert!(w[1] >= w[0], "{mins:?}");
        }
    }

    #[test]
    fn causal_two_blocks_matches_hand_iteration() {
        // column/row updates on [[1,0],[a,1]] map a -> a / (1 + 2a); from a = 1, five steps give 1/11
        let p = run(Tensor::zeros(&[2, 2]), cfg(1.0, 5), true);
        let w = 1.0 / 11.0;
        let want = [1.0, 0.0, w, 1.0 - w];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", p.data());
        }
    }

    #[test]
    fn causal_matches_reference_iteration() {
        for seed in 0..10 {
            let r = gaussian(&[5, 5], seed);
            let p = run(r.clone(), cfg(1.0, 7), true);
            let want = reference_causal(&r, 7);
            for i in 0..5 {
                for j in 0..5 {
                    assert!((p.at(&[i, j]) - want[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_single_block() {
        let p = run(Tensor::full(&[1, 1], 3.0), cfg(0.7, 4), true);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn causal_future_entries_vanish() {
        for seed in 0..20 {
            let r = gaussian(&[6, 6], seed).map(|x| 30.0 * x);
            for iters in [0, 1, 5] {
                let p = run(r.clone(), cfg(0.25, iters), true);
                for i in 0..6 {
                    for j in i + 1..6 {
                        assert!(p.at(&[i, j]) < 1e-40);
                    }
                }
            }
        }
    }

    #[test]
    fn causal_rows_ignore_later_rows() {
        let r = gaussian(&[6, 6], 3);
        let base = run(r.clone(), cfg(0.8, 5), true);
        for changed in 0..6 {
            let mut r2 = r.clone();
            for j in 0..6 {
                r2.data_mut()[changed * 6 + j] += 1.7;
            }
            let p = run(r2, cfg(0.8, 5), true);
            for i in 0..changed {
                for j in 0..6 {
                    assert_eq!(p.at(&[i, j]).to_bits(), base.at(&[i, j]).to_bits());
                }
            }
        }
    }

    #[test]
    fn batched_input_matches_per_matrix() {
        let r = gaussian(&[3, 4, 4], 11);
        let batched = run(r.clone(), cfg(0.6, 4), false);
        for b in 0..3 {
            let single = Tensor::new(vec![4, 4], r.data()[b * 16..(b + 1) * 16].to_vec()).unwrap();
            let p = run(single, cfg(0.6, 4), false);
            assert_eq!(&batched.data()[b * 16..(b + 1) * 16], p.data());
        }
    }

    fn weighted_check(causal: bool, iters: usize, seed: u64) -> f64 {
        let r = gaussian(&[4, 4], seed);
        let weights = gaussian(&[4, 4], seed + 100);
        let c = SinkhornConfig {
            temperature: 0.7,
            n_iters: iters,
            gumbel: true,
            seed: 5,
        };
        finite_diff_check(
            |tape: &mut Tape, v| -> crate::Result<Var> {
                let s = if causal {
                    causal_sinkhorn_normalize(tape, v, &c)?
                } else {
                    sinkhorn_normalize(tape, v, &c)?
                };
                let p = s.probabilities(tape);
                let w = tape.constant(weights.clone());
                let y = tape.mul(p, w)?;
                Ok(tape.sum_all(y))
            },
            &r,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for iters in [1, 5] {
            for causal in [false, true] {
                let err = weighted_check(causal, iters, iters as u64);
                assert!(err < 1e-4, "causal={causal} iters={iters}: {err}");
            }
        }
    }

    #[test]
    fn gumbel_is_reproducible_and_centred() {
        assert_eq!(gumbel_noise(&[3, 3], 9), gumbel_noise(&[3, 3], 9));
        assert_ne!(gumbel_noise(&[3, 3], 9), gumbel_noise(&[3, 3], 10));
        let g = gumbel_noise(&[100_000], 1);
        let mean = g.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 0.5772).abs() < 0.01, "{mean}");
    }

    #[test]
    fn disabled_noise_is_zero() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[3, 3]));
        let l = initial_logits(&mut tape, r, &cfg(1.0, 0)).unwrap();
        assert_eq!(tape.data(l), &[0.0; 9]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(sinkhorn_normalize(&mut tape, r, &cfg(1.0, 1)).is_err());
        let r = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(sinkhorn_normalize(&mut tape, r, &cfg(0.0, 1)).is_err());
        assert!(causal_sinkhorn_normalize(&mut tape, r, &cfg(-1.0, 1)).is_err());
    }

    #[test]
    fn hard_round_examples() {
        let diag = Tensor::from_rows(&[&[0.9, 0.1], &[0.1, 0.9]]);
        assert_eq!(hard_round(&diag).unwrap(), Tensor::identity(2));
        let swap = Tensor::from_rows(&[&[0.1, 0.9], &[0.9, 0.1]]);
        assert_eq!(hard_round(&swap).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(hard_round(&Tensor::full(&[4, 4], 0.25)).unwrap(), Tensor::identity(4));
        assert!(hard_round(&Tensor::zeros(&[11, 11])).is_err());
    }

    #[test]
    fn hard_round_recovers_low_temperature_permutation() {
        let perm = [2usize, 0, 3, 1];
        let mut r = Tensor::zeros(&[4, 4]);
        for (i, &j) in perm.iter().enumerate() {
            r.data_mut()[i * 4 + j] = 4.0;
        }
        let p = run(r, cfg(0.1, 20), false);
        let h = hard_round(&p).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(h.at(&[i, j]), 1.0);
        }
    }
}
