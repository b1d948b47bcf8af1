//! Command-line surface over the training harness.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 divergence.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sinkhorn_core::harness::memory::{memory_account, write_memory_csv};
use sinkhorn_core::harness::sweep::{sweep, write_sweep_csv};
use sinkhorn_core::harness::{evaluate_model, train_run, write_run_artifacts, EvalMetrics};
use sinkhorn_core::model::load_checkpoint;
use sinkhorn_core::{selftest, Error};

use config::{parse_overrides, resolve, ConfigError, RunConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "sinkhorn", version, about = "Sparse Sinkhorn attention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dotted overrides such as `--model.block_size 4` or `--train.steps=100`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write history, metrics and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the configured task.
    Eval(Common),
    /// Train one model per cell of the `[sweep]` grid.
    Sweep(Common),
    /// Report attention score-entry counts.
    Account(Common),
    /// Run the built-in invariant checks.
    Selftest(Common),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Run(Error::Config(_)) => EXIT_CONFIG,
            Self::Run(Error::Divergence { .. }) => EXIT_DIVERGENCE,
            Self::Run(_) | Self::Failed(_) => EXIT_RUNTIME,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Run(Error::Io(e))
    }
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut pairs = parse_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        if let Some(o) = &self.out {
            pairs.push(("output_dir".into(), toml::Value::String(o.display().to_string()).to_string()));
        }
        Ok(resolve(self.config.as_deref(), &pairs)?)
    }
}

/// Writes the resolved config as `config.toml` in the output directory.
fn echo_config(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("config.toml"), &cfg.to_text()?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

fn eval_summary(m: &EvalMetrics) -> String {
    let mut s = format!("eval loss {:.4} (perplexity {:.3}, {:.3} bits/token)", m.loss, m.perplexity, m.bits_per_token);
    for (name, seq) in [("in-distribution", m.in_distribution), ("long", m.long)] {
        if let Some(q) = seq {
            s.push_str(&format!(
                "\n{name} (length {}): exact match {:.4}, token accuracy {:.4}, edit distance {:.4} (corpus {:.4})",
                q.seq_len, q.exact_match, q.token_accuracy, q.edit_distance, q.corpus_edit_distance
            ));
        }
    }
    s
}

/// Runs one command, writing human-readable progress to `out`.
pub fn dispatch(command: &Command, out: &mut impl Write) -> Result<(), CliError> {
    match command {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let exp = cfg.experiment();
            exp.validate()?;
            echo_config(&cfg)?;
            let run = train_run(&exp)?;
            write_run_artifacts(&run, &cfg.output_dir)?;
            writeln!(
                out,
                "trained {} steps in {:.1}s, final train loss {:.4}\n{}\nartifacts in {}",
                run.metrics.steps,
                run.wall_seconds,
                run.metrics.final_train_loss,
                eval_summary(&run.metrics.final_eval),
                cfg.output_dir.display()
            )?;
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let path = cfg.eval.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
            let model = load_checkpoint(&path)?;
            let m = evaluate_model(&model, &cfg.experiment())?;
            echo_config(&cfg)?;
            let text = toml::to_string(&m).map_err(|e| CliError::Failed(format!("cannot serialize metrics: {e}")))?;
            write_text(&cfg.output_dir.join("eval.toml"), &text)?;
            writeln!(out, "{}", eval_summary(&m))?;
        }
        Command::Sweep(c) => {
            let cfg = c.resolve()?;
            let exp = cfg.experiment();
            exp.validate()?;
            echo_config(&cfg)?;
            let results = sweep(&exp, &cfg.sweep.grid(), cfg.sweep.workers);
            let path = cfg.output_dir.join("sweep.csv");
            write_sweep_csv(&results, &path)?;
            for r in &results {
                let metric = r.final_metric.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
                writeln!(
                    out,
                    "cell {}: tau {} iters {} block {} {} -> {metric} ({:.1}s, {})",
                    r.cell, r.temperature, r.n_iters, r.block_size, r.variant, r.wall_seconds, r.status
                )?;
            }
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Account(c) => {
            let cfg = c.resolve()?;
            let variants = if cfg.account.variants.is_empty() {
                vec![cfg.model.attention.variant]
            } else {
                cfg.account.variants.clone()
            };
            let mut reports = Vec::new();
            for v in variants {
                let mut a = cfg.model.attention;
                a.variant = v;
                let r = memory_account(&a, cfg.account.seq_len)?;
                writeln!(
                    out,
                    "{}: length {} block {} ({} blocks): {} entries per head (instrumented {}), dense {}; \
                     ratio {:.3}, formula units {} ratio {:.1}",
                    r.variant,
                    r.seq_len,
                    r.block_size,
                    r.n_blocks,
                    r.score_entries,
                    r.instrumented_entries,
                    r.dense_entries,
                    r.ratio_actual,
                    r.formula_units,
                    r.ratio_formula
                )?;
                reports.push(r);
            }
            echo_config(&cfg)?;
            write_memory_csv(&reports, &cfg.output_dir.join("memory.csv"))?;
        }
        Command::Selftest(c) => {
            c.resolve()?;
            let checks = selftest::run_all();
            for ch in &checks {
                writeln!(out, "{ch}")?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} of {} checks failed", checks.len())));
            }
            writeln!(out, "all {} checks passed", checks.len())?;
        }
    }
    Ok(())
}
