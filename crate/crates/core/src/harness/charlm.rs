//! Byte-level language modelling on a small text file.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::Batch;

/// Plain-text license texts used when no corpus path is given.
pub const BUNDLED_CORPUS: &[u8] = include_bytes!("../../data/corpus.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharLmSpec {
    /// Text file to model; the bundled corpus when absent.
    pub path: Option<PathBuf>,
    pub context_len: usize,
    /// Trailing share of the file held out for evaluation.
    pub eval_fraction: f64,
    /// Evenly spaced held-out windows scored at evaluation.
    pub n_eval_windows: usize,
}

impl Default for CharLmSpec {
    fn default() -> Self {
        Self {
            path: None,
            context_len: 256,
            eval_fraction: 0.1,
            n_eval_windows: 32,
        }
    }
}

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CharLmData {
    pub train: Vec<u8>,
    pub eval: Vec<u8>,
    pub context_len: usize,
    pub n_eval_windows: usize,
}

pub fn load_charlm(spec: &CharLmSpec) -> Result<CharLmData> {
    let bytes = match &spec.path {
        Some(p) => std::fs::read(p)
            .map_err(|e| config_err(format!("cannot read corpus {}: {e}", p.display())))?,
        None => BUNDLED_CORPUS.to_vec(),
    };
    if !(0.0..1.0).contains(&spec.eval_fraction) || spec.context_len == 0 || spec.n_eval_windows == 0 {
        return Err(config_err(format!("invalid char-LM settings {spec:?}")));
    }
    let split = bytes.len() - (bytes.len() as f64 * spec.eval_fraction) as usize;
    let (train, eval) = bytes.split_at(split);
    let need = spec.context_len + 1;
    if train.len() < need || eval.len() < need {
        return Err(config_err(format!(
            "corpus of {} bytes is too small for context {} with eval fraction {}",
            bytes.len(),
            spec.context_len,
            spec.eval_fraction
        )));
    }
    Ok(CharLmData {
        train: train.to_vec(),
        eval: eval.to_vec(),
        context_len: spec.context_len,
        n_eval_windows: spec.n_eval_windows,
    })
}

fn window_batch(text: &[u8], starts: &[usize], len: usize) -> Batch {
    let rows = |off: usize| -> Vec<Vec<usize>> {
        starts
            .iter()
            .map(|&s| text[s + off..s + off + len].iter().map(|&b| usize::from(b)).collect())
            .collect()
    };
    Batch {
        token_ids: rows(0),
        decoder_ids: None,
        target_ids: rows(1),
        loss_mask: vec![vec![1.0; len]; starts.len()],
    }
}

impl CharLmData {
    /// Random training windows: inputs and next-byte targets.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Batch {
        let max_start = self.train.len() - self.context_len - 1;
        let starts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=max_start)).collect();
        window_batch(&self.train, &starts, self.context_len)
    }

    /// Fixed, evenly spaced held-out windows.
    pub fn eval_batch(&self) -> Batch {
        let max_start = self.eval.len() - self.context_len - 1;
        let n = self.n_eval_windows;
        let starts: Vec<usize> = (0..n).map(|i| if n == 1 { 0 } else { i * max_start / (n - 1) }).collect();
        window_batch(&self.eval, &starts, self.context_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bundled_corpus_splits_and_windows() {
        let data = load_charlm(&CharLmSpec { context_len: 16, n_eval_windows: 4, ..CharLmSpec::default() }).unwrap();
        assert_eq!(data.train.len() + data.eval.len(), BUNDLED_CORPUS.len());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = data.sample(3, &mut rng);
        for (x, y) in b.token_ids.iter().zip(&b.target_ids) {
            assert_eq!(x.len(), 16);
            assert_eq!(&x[1..], &y[..15]);
        }
        let e = data.eval_batch();
        assert_eq!(e.len(), 4);
        assert_eq!(e, data.eval_batch());
        let last = &e.target_ids[3];
        assert_eq!(usize::from(*data.eval.last().unwrap()), *last.last().unwrap());
    }

    #[test]
    fn user_corpus_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "abcdefghij".repeat(10)).unwrap();
        let spec = CharLmSpec { path: Some(p.clone()), context_len: 4, n_eval_windows: 2, ..CharLmSpec::default() };
        let d = load_charlm(&spec).unwrap();
        assert_eq!(d.eval.len(), 10);
        assert!(load_charlm(&CharLmSpec { context_len: 64, ..spec.clone() }).is_err());
        assert!(load_charlm(&CharLmSpec { path: Some(dir.path().join("missing")), ..spec }).is_err());
    }
}
