//! Attention score-entry accounting.
//!
//! Counts are per sequence and head: the number of query-key scores (plus
//! sort logits) an attention call materializes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{multihead, AttentionConfig, AttentionParams, Variant};
use crate::error::{config_err, Result};
use crate::rng;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub variant: Variant,
    pub seq_len: usize,
    pub block_size: usize,
    pub n_blocks: usize,
    pub sortcut_budget: usize,
    /// Closed-form entries for one head.
    pub score_entries: usize,
    /// Entries counted during a real forward pass.
    pub instrumented_entries: usize,
    pub dense_entries: usize,
    /// Asymptotic cost: `b^2 + N^2` for sorted variants, `l*n*b + N^2` for sortcut.
    pub formula_units: usize,
    pub ratio_actual: f64,
    pub ratio_formula: f64,
}

/// Closed-form score entries of one head over a sequence of `len` tokens.
pub fn closed_form_entries(cfg: &AttentionConfig, len: usize) -> Result<usize> {
    let (b, n) = blocks(cfg, len)?;
    let sinkhorn = n * 2 * b * b + n * n;
    Ok(match cfg.variant {
        Variant::Dense => len * len,
        Variant::Local => n * b * b,
        Variant::Sinkhorn => sinkhorn,
        Variant::Sortcut => len * cfg.sortcut_budget * b + n * n,
        Variant::Mixture => sinkhorn + len * len,
    })
}

fn formula_units(cfg: &AttentionConfig, len: usize) -> Result<usize> {
    let (b, n) = blocks(cfg, len)?;
    Ok(match cfg.variant {
        Variant::Dense => len * len,
        Variant::Local => b * b,
        Variant::Sinkhorn => b * b + n * n,
        Variant::Sortcut => len * cfg.sortcut_budget * b + n * n,
        Variant::Mixture => len * len + b * b + n * n,
    })
}

fn blocks(cfg: &AttentionConfig, len: usize) -> Result<(usize, usize)> {
    let b = cfg.block_size;
    if b == 0 || len == 0 || !len.is_multiple_of(b) {
        return Err(config_err(format!("sequence length {len} is not a positive multiple of block size {b}")));
    }
    Ok((b, len / b))
}

/// Entries reported by one multihead forward pass over a random sequence, per head.
pub fn instrumented_entries(cfg: &AttentionConfig, len: usize) -> Result<usize> {
    let d = 2 * cfg.n_heads;
    cfg.validate(d)?;
    let mut rng = rng::stream(0, rng::INIT, 0);
    let params = AttentionParams::init(cfg, d, len, 0.5, &mut rng);
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let x = tape.constant(crate::sinkhorn::gumbel_noise(&[1, len, d], 1));
    let out = multihead(&mut tape, x, &w, cfg, None)?;
    Ok(out.attention_entry_count)
}

/// Closed-form report for `cfg` at length `len`, cross-checked against a forward pass.
pub fn memory_account(cfg: &AttentionConfig, len: usize) -> Result<MemoryReport> {
    cfg.validate(2 * cfg.n_heads)?;
    let (b, n) = blocks(cfg, len)?;
    let score_entries = closed_form_entries(cfg, len)?;
    let instrumented = instrumented_entries(cfg, len)?;
    if instrumented != score_entries {
        return Err(config_err(format!(
            "{} attention counted {instrumented} entries, closed form gives {score_entries}",
            cfg.variant
        )));
    }
    let units = formula_units(cfg, len)?;
    let dense = len * len;
    Ok(MemoryReport {
        variant: cfg.variant,
        seq_len: len,
        block_size: b,
        n_blocks: n,
        sortcut_budget: cfg.sortcut_budget,
        score_entries,
        instrumented_entries: instrumented,
        dense_entries: dense,
        formula_units: units,
        ratio_actual: dense as f64 / score_entries as f64,
        ratio_formula: dense as f64 / units as f64,
    })
}

pub fn write_memory_csv(reports: &[MemoryReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(super::csv_err)?;
    for r in reports {
        w.serialize(r).map_err(super::csv_err)?;
    }
    w.flush()?;
    Ok(())
}
