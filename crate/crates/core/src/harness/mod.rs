//! Datasets, the training loop, evaluation, sweeps and memory accounting.

pub mod charlm;
pub mod memory;
pub mod metrics;
pub mod sort_task;
pub mod sweep;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{clip_global_norm, lr_at, save_checkpoint, Adam, AdamConfig, Batch, Model, ModelSpec};
use crate::rng;
use crate::tensor::Tape;

use charlm::{load_charlm, CharLmData, CharLmSpec, BYTE_VOCAB};
use metrics::{corpus_edit_distance, edit_distance, exact_match, token_accuracy};
use sort_task::{gen_sort_task, to_batch, Example, SortData, SortTaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Sort,
    CharLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    /// Held-out loss every this many steps; `0` evaluates only at the end.
    pub eval_every: usize,
    /// Rows per evaluation forward pass.
    pub eval_batch_size: usize,
    /// A training loss above this multiple of `ln(vocab)` (the loss of a uniform prediction)
    /// counts as divergence, as does any non-finite loss or gradient.
    pub divergence_factor: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            eval_every: 500,
            eval_batch_size: 250,
            divergence_factor: 20.0,
        }
    }
}

/// Everything one training run needs. `seed` drives data, initialization and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskKind,
    /// `vocab_size` is replaced by the task's vocabulary, and `max_len` is
    /// raised to the longest sequence the task produces.
    pub model: ModelSpec,
    pub sort: SortTaskSpec,
    pub charlm: CharLmSpec,
    pub train: TrainSpec,
    pub optimizer: AdamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Sort,
            model: ModelSpec::default(),
            sort: SortTaskSpec::default(),
            charlm: CharLmSpec::default(),
            train: TrainSpec::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The model spec actually trained.
    pub fn resolved_model(&self) -> ModelSpec {
        let mut spec = self.model.clone();
        let (vocab, longest) = match self.task {
            TaskKind::Sort => (self.sort.model_vocab(), self.sort.eval_len()),
            TaskKind::CharLm => (BYTE_VOCAB, self.charlm.context_len),
        };
        spec.vocab_size = vocab;
        spec.max_len = spec.max_len.max(longest);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.resolved_model();
        spec.validate()?;
        self.optimizer.validate()?;
        if self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if self.train.divergence_factor.is_nan() || self.train.divergence_factor <= 0.0 {
            return Err(config_err("train.divergence_factor must be positive"));
        }
        match self.task {
            TaskKind::Sort => {
                self.sort.validate()?;
                if spec.architecture != crate::model::Architecture::Seq2seq {
                    return Err(config_err("the sort task needs a seq2seq model"));
                }
            }
            TaskKind::CharLm => {
                if spec.architecture != crate::model::Architecture::DecoderOnly {
                    return Err(config_err("the char-LM task needs a decoder_only model"));
                }
            }
        }
        Ok(())
    }
}

/// Loaded data for either task.
#[derive(Debug, Clone)]
pub enum TaskData {
    Sort(SortData),
    CharLm(CharLmData),
}

impl TaskData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.task {
            TaskKind::Sort => {
                let spec = SortTaskSpec { seed: cfg.seed, ..cfg.sort };
                Ok(Self::Sort(gen_sort_task(&spec)?))
            }
            TaskKind::CharLm => Ok(Self::CharLm(load_charlm(&cfg.charlm)?)),
        }
    }

    fn sample(&self, batch: usize, rng: &mut impl Rng) -> Batch {
        match self {
            Self::Sort(d) => {
                let picks: Vec<&Example> = (0..batch).map(|_| &d.train[rng.random_range(0..d.train.len())]).collect();
                to_batch(&picks, d.spec.bos())
            }
            Self::CharLm(d) => d.sample(batch, rng),
        }
    }

    fn eval_batches(&self, chunk: usize) -> Vec<Batch> {
        match self {
            Self::Sort(d) => d
                .eval
                .chunks(chunk)
                .map(|c| to_batch(&c.iter().collect::<Vec<_>>(), d.spec.bos()))
                .collect(),
            Self::CharLm(d) => vec![d.eval_batch()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Greedy-decoding quality on one evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqMetrics {
    pub seq_len: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    /// Mean of per-sequence distances normalized by target length.
    pub edit_distance: f64,
    /// Total edits over total target length.
    pub corpus_edit_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: usize,
    /// Mean held-out negative log-likelihood per token, in nats.
    pub loss: f64,
    pub perplexity: f64,
    pub bits_per_token: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_distribution: Option<SeqMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long: Option<SeqMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub n_parameters: usize,
    /// Attention score entries per sequence of one training batch, summed over heads and layers.
    pub attention_entries: usize,
    /// Mean training loss over the last 50 steps.
    pub final_train_loss: f64,
    pub final_eval: EvalMetrics,
    pub evals: Vec<EvalMetrics>,
    #[serde(skip)]
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub metrics: RunMetrics,
    pub wall_seconds: f64,
}

fn diverged(step: usize, loss: f64) -> Error {
    Error::Divergence { step, loss }
}

/// One optimizer step. Returns the training loss before the update.
fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, noise: u64, lr: f64, clip: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, true);
    let loss = model.loss(&mut tape, &w, batch, Some(noise))?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = w
        .vars
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).numel()],
        })
        .collect();
    let norm = clip_global_norm(&mut grads, clip);
    if !norm.is_finite() {
        return Ok(f64::NAN);
    }
    adam.step(&mut model.tensors_mut(), &grads, lr)?;
    Ok(value)
}

/// Trains a fresh model for `cfg.train.steps` steps and evaluates it.
///
/// Gumbel noise is drawn per step during training and disabled at evaluation.
pub fn train_run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let data = TaskData::load(cfg)?;
    let mut model = Model::new(cfg.resolved_model(), cfg.seed)?;
    let mut adam = Adam::new(&model.tensors(), &cfg.optimizer);
    let mut batches = rng::stream(cfg.seed, rng::DATA, 10);
    let mut history = Vec::with_capacity(cfg.train.steps);
    let mut evals = Vec::new();
    let max_loss = cfg.train.divergence_factor * (model.spec.vocab_size as f64).ln();
    for step in 1..=cfg.train.steps {
        let batch = data.sample(cfg.train.batch_size, &mut batches);
        let lr = lr_at(&cfg.optimizer, step);
        let noise = rng::derive_seed(cfg.seed, rng::GUMBEL, step as u64);
        let loss = train_step(&mut model, &mut adam, &batch, noise, lr, cfg.optimizer.clip_norm)?;
        if !loss.is_finite() || loss > max_loss {
            return Err(diverged(step, loss));
        }
        history.push(HistoryRow { step, loss, lr });
        if cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0 && step < cfg.train.steps {
            evals.push(eval_loss(&model, &data, cfg.train.eval_batch_size, step)?);
        }
    }
    let final_eval = evaluate(&model, &data, cfg.train.eval_batch_size, cfg.train.steps)?;
    evals.push(final_eval);
    let tail = &history[history.len().saturating_sub(50)..];
    let final_train_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|h| h.loss).sum::<f64>() / tail.len() as f64
    };
    let probe = data.sample(1, &mut rng::stream(cfg.seed, rng::DATA, 11));
    let attention_entries = {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, false);
        model.forward(&mut tape, &w, &probe, None)?.attention_entries
    };
    let metrics = RunMetrics {
        steps: cfg.train.steps,
        n_parameters: model.n_parameters(),
        attention_entries,
        final_train_loss,
        final_eval,
        evals,
        history,
    };
    Ok(RunOutput {
        model,
        metrics,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Held-out loss only (no decoding).
pub fn eval_loss(model: &Model, data: &TaskData, chunk: usize, step: usize) -> Result<EvalMetrics> {
    let (mut total, mut weight) = (0.0, 0.0);
    for b in data.eval_batches(chunk) {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, false);
        let l = model.loss(&mut tape, &w, &b, None)?;
        let n: f64 = b.loss_mask.iter().flatten().sum();
        total += tape.value(l).item() * n;
        weight += n;
    }
    let loss = total / weight;
    Ok(EvalMetrics {
        step,
        loss,
        perplexity: loss.exp(),
        bits_per_token: loss / std::f64::consts::LN_2,
        in_distribution: None,
        long: None,
    })
}

/// Held-out loss plus, for sorting, greedy-decoding metrics on both evaluation splits.
pub fn evaluate(model: &Model, data: &TaskData, chunk: usize, step: usize) -> Result<EvalMetrics> {
    let mut m = eval_loss(model, data, chunk, step)?;
    if let TaskData::Sort(d) = data {
        m.in_distribution = Some(decode_metrics(model, &d.eval, d.spec.bos(), chunk)?);
        m.long = Some(decode_metrics(model, &d.eval_long, d.spec.bos(), chunk)?);
    }
    Ok(m)
}

fn decode_metrics(model: &Model, examples: &[Example], bos: usize, chunk: usize) -> Result<SeqMetrics> {
    let mut preds = Vec::with_capacity(examples.len());
    for c in examples.chunks(chunk) {
        let inputs: Vec<Vec<usize>> = c.iter().map(|e| e.input.clone()).collect();
        preds.extend(greedy_decode(model, &inputs, bos)?);
    }
    let targets: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    Ok(SeqMetrics {
        seq_len: targets.first().map_or(0, Vec::len),
        exact_match: exact_match(&preds, &targets)?,
        token_accuracy: token_accuracy(&preds, &targets)?,
        edit_distance: edit_distance(&preds, &targets)?,
        corpus_edit_distance: corpus_edit_distance(&preds, &targets)?,
    })
}

/// Greedy sequence-to-sequence decoding of outputs as long as their inputs.
///
/// The encoder runs once; each step reruns the causal decoder over the
/// prefix decoded so far (positions beyond it cannot influence the argmax).
pub fn greedy_decode(model: &Model, inputs: &[Vec<usize>], bos: usize) -> Result<Vec<Vec<usize>>> {
    let Some(len) = inputs.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    let memory = {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, false);
        let (m, _) = model.encode(&mut tape, &w, inputs, None)?;
        tape.value(m).clone()
    };
    let vocab = model.spec.vocab_size;
    let mut dec: Vec<Vec<usize>> = vec![vec![bos; len]; inputs.len()];
    let mut out: Vec<Vec<usize>> = vec![Vec::with_capacity(len); inputs.len()];
    for t in 0..len {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, false);
        let mem = tape.constant(memory.clone());
        let f = model.decode(&mut tape, &w, &dec, Some(mem), None)?;
        let logits = tape.value(f.logits);
        for (i, row) in out.iter_mut().enumerate() {
            let off = (i * len + t) * vocab;
            let tok = argmax(&logits.data()[off..off + vocab]);
            row.push(tok);
            if t + 1 < len {
                dec[i][t + 1] = tok;
            }
        }
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Writes `history.csv` with columns step, loss, lr.
pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => config_err(format!("csv: {other:?}")),
    }
}

/// Writes `history.csv`, `metrics.toml` and `model.ckpt` into `dir`.
pub fn write_run_artifacts(run: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_history(&run.metrics.history, &dir.join("history.csv"))?;
    let text = toml::to_string(&run.metrics).map_err(|e| config_err(format!("cannot serialize metrics: {e}")))?;
    std::fs::File::create(dir.join("metrics.toml"))?.write_all(text.as_bytes())?;
    save_checkpoint(&run.model, &dir.join("model.ckpt"))
}

/// Evaluates a trained model on the data described by `cfg`.
pub fn evaluate_model(model: &Model, cfg: &ExperimentConfig) -> Result<EvalMetrics> {
    let data = TaskData::load(cfg)?;
    let want = cfg.resolved_model().vocab_size;
    if model.spec.vocab_size != want {
        return Err(config_err(format!(
            "model vocabulary {} does not match the task's {want}",
            model.spec.vocab_size
        )));
    }
    evaluate(model, &data, cfg.train.eval_batch_size, 0)
}

#[cfg(test)]
mod tests;
