//! Byte-level language-model training: data, the optimisation loop,
//! perplexity evaluation and checkpoints.

mod checkpoint;
mod data;
mod eval;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result, TensorError};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
use crate::routing::{sample_capacities, Routing};
use crate::tensor::Tensor;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_as, parse_checkpoint, save_checkpoint, CheckpointHeader,
    ManifestEntry, FORMAT_VERSION,
};
pub use data::{
    decode, encode, eval_windows, load_corpus, make_batches, rng_for, synthetic_corpus, Batch, Batches, Stream,
    BYTE_VOCAB,
};
pub use eval::{eval_perplexity, sequence_nll, EvalMode, EvalReport};

/// `max_lr · min(1, (step + 1) / warmup)`; constant when `warmup` is 0.
pub fn lr_schedule(step: usize, warmup_steps: usize, max_lr: f64) -> f64 {
    if warmup_steps == 0 {
        return max_lr;
    }
    max_lr * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
}

/// Where the token stream comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training bytes; a seeded synthetic corpus is generated when absent.
    pub train_path: Option<PathBuf>,
    /// Held-out bytes; the tail `eval_fraction` of the training corpus when absent.
    pub eval_path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_path: None,
            eval_path: None,
            synthetic_bytes: 1 << 20,
            synthetic_seed: 0,
            eval_fraction: 0.05,
        }
    }
}

/// Training and evaluation streams plus a label identifying their source.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub id: String,
}

impl DataConfig {
    pub fn load(&self) -> Result<Corpus> {
        let (all, id) = match &self.train_path {
            Some(p) => (load_corpus(p)?, p.display().to_string()),
            None => {
                if self.synthetic_bytes == 0 {
                    return Err(Error::Corpus("synthetic corpus of zero bytes".into()));
                }
                let bytes = synthetic_corpus(self.synthetic_bytes, self.synthetic_seed);
                (
                    encode(&bytes),
                    format!("synthetic:{}:{}", self.synthetic_bytes, self.synthetic_seed),
                )
            }
        };
        match &self.eval_path {
            Some(p) => Ok(Corpus {
                train: all,
                eval: load_corpus(p)?,
                id: format!("{id}+{}", p.display()),
            }),
            None => {
                if !(0.0..1.0).contains(&self.eval_fraction) {
                    return Err(Error::Corpus(format!("eval_fraction {} outside [0, 1)", self.eval_fraction)));
                }
                let cut = all.len() - (all.len() as f64 * self.eval_fraction) as usize;
                Ok(Corpus {
                    eval: all[cut..].to_vec(),
                    train: all[..cut].to_vec(),
                    id,
                })
            }
        }
    }
}

fn default_clip() -> f64 {
    1.0
}

fn default_eval_windows() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    pub max_lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Steps between held-out evaluations; 0 disables them.
    #[serde(default)]
    pub eval_interval: usize,
    /// Maximum number of held-out windows per evaluation.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Training(m));
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if self.seq_len > self.model.max_seq_len {
            return bad(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.seq_len, self.model.max_seq_len
            ));
        }
        if !(self.max_lr.is_finite() && self.max_lr >= 0.0) {
            return bad(format!("max_lr {} must be finite and non-negative", self.max_lr));
        }
        if self.model.vocab_size < BYTE_VOCAB {
            return bad(format!("byte corpora need vocab_size ≥ {BYTE_VOCAB}"));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Capacity schedule used for the step (all ones when not adaptive).
    pub capacities: Vec<f64>,
    /// Mean fraction of tokens entering each pass.
    pub participation: Vec<f64>,
    pub seconds: f64,
}

pub fn metrics_header(n_repeat: usize) -> String {
    let mut h = String::from("step,loss,lr");
    for i in 1..=n_repeat {
        write!(h, ",c{i}").unwrap();
    }
    for i in 1..=n_repeat {
        write!(h, ",p{i}").unwrap();
    }
    h.push_str(",seconds");
    h
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{}", self.step, self.loss, self.lr);
        for v in self.capacities.iter().chain(&self.participation) {
            write!(s, ",{v}").unwrap();
        }
        write!(s, ",{:.3}", self.seconds).unwrap();
        s
    }
}

pub fn metrics_csv(records: &[MetricsRecord], n_repeat: usize) -> String {
    let mut out = metrics_header(n_repeat);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Loss, gradients (in leaf order) and mean participation of one batch.
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Tensor<f32>>,
    pub participation: Vec<f64>,
}

/// Mean next-token cross-entropy over every position of the batch and its
/// gradient. Sequences run in parallel; their gradients are summed in
/// batch order so the result does not depend on the thread count.
pub fn batch_gradients(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    batch: &Batch,
    routing: &Routing,
) -> Result<BatchGradients> {
    let n = batch.inputs.len();
    let per_seq: Vec<(f64, Vec<Tensor<f32>>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut tape = Tape::new();
            let w = params.bind(&mut tape);
            let out = forward(&mut tape, cfg, &w, &batch.inputs[b], routing)?;
            let loss = tape.cross_entropy(out.logits, &batch.targets[b])?;
            let g = tape.backward(loss)?;
            let grads = w.leaves().into_iter().map(|&v| g.get_or_zeros(v)).collect();
            Ok((tape.value(loss).data()[0] as f64, grads, out.participation.ratios()))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / n as f32;
    let mut iter = per_seq.into_iter();
    let (mut loss, mut grads, mut part) = iter.next().expect("non-empty batch");
    for (l, g, p) in iter {
        loss += l;
        for (acc, x) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
                *a += *b;
            }
        }
        for (a, b) in part.iter_mut().zip(&p) {
            *a += b;
        }
    }
    for g in &mut grads {
        for a in g.data_mut() {
            *a *= scale;
        }
    }
    Ok(BatchGradients {
        loss: loss / n as f64,
        grads,
        participation: part.iter().map(|p| p / n as f64).collect(),
    })
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<MetricsRecord>,
    /// `(step, perplexity)` of each held-out evaluation at full depth.
    pub evals: Vec<(usize, f64)>,
    pub corpus_id: String,
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::Tensor(TensorError::NonFinite { .. }))
}

/// Trains from scratch. With `out`, writes `metrics.csv`, `checkpoint.ckpt`
/// (plus `checkpoint_step{N}.ckpt` at intervals) and `eval.csv` there.
///
/// A non-finite loss or gradient aborts the run; the parameters from before
/// the failing step are saved to `diverged.ckpt`.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = cfg.data.load()?;
    train_on(cfg, &corpus, out)
}

/// [`train`] on an already loaded corpus.
pub fn train_on(cfg: &TrainConfig, corpus: &Corpus, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = &cfg.model;
    let r = model.n_repeat;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut params = ModelParams::<f32>::init(model, &mut rng_for(cfg.seed, Stream::Init));
    let decay = params.decay_mask();
    let mut opt = OptimizerState::new(params.leaves());
    let mut batches = make_batches(&corpus.train, cfg.seq_len, cfg.batch_size, rng_for(cfg.seed, Stream::Batches))?;
    let mut cap_rng = rng_for(cfg.seed, Stream::Capacities);
    let eval_ids: Vec<usize> = {
        let limit = cfg.eval_windows * cfg.seq_len + 1;
        corpus.eval[..corpus.eval.len().min(limit)].to_vec()
    };

    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let write_logs = |metrics: &[MetricsRecord], evals: &[(usize, f64)]| -> Result<()> {
        if let Some(dir) = out {
            std::fs::write(dir.join("metrics.csv"), metrics_csv(metrics, r))?;
            if !evals.is_empty() {
                let mut s = String::from("step,ppl\n");
                for (step, ppl) in evals {
                    writeln!(s, "{step},{ppl}").unwrap();
                }
                std::fs::write(dir.join("eval.csv"), s)?;
            }
        }
        Ok(())
    };

    for step in 0..cfg.steps {
        let batch = batches.next().expect("batch stream is endless");
        let schedule = model.adaptive.then(|| sample_capacities(r, &mut cap_rng));
        let routing = schedule.clone().map_or(Routing::Full, Routing::Capacity);

        let diverged = |why: String, params: &ModelParams<f32>| -> Result<TrainOutcome> {
            let mut msg = format!("step {step}: {why}");
            if let Some(dir) = out {
                let p = dir.join("diverged.ckpt");
                save_checkpoint(params, model, &p)?;
                write_logs(&metrics, &evals)?;
                write!(msg, "; diagnostic checkpoint at {}", p.display()).unwrap();
            }
            Err(Error::Training(msg))
        };

        let mut bg = match batch_gradients(model, &params, &batch, &routing) {
            Ok(bg) => bg,
            Err(e) if is_non_finite(&e) => return diverged(e.to_string(), &params),
            Err(e) => return Err(e),
        };
        if !bg.loss.is_finite() {
            return diverged(format!("loss is {}", bg.loss), &params);
        }
        let norm = clip_grad_norm(&mut bg.grads, cfg.clip_norm);
        if !norm.is_finite() {
            return diverged(format!("gradient norm is {norm}"), &params);
        }
        let lr = lr_schedule(step, cfg.warmup_steps, cfg.max_lr);
        adamw_step(&mut params.leaves_mut(), &bg.grads, &decay, &mut opt, lr, &cfg.optimizer)?;

        metrics.push(MetricsRecord {
            step,
            loss: bg.loss,
            lr,
            capacities: schedule.map_or_else(|| vec![1.0; r], |s| s.values().to_vec()),
            participation: bg.participation,
            seconds: start.elapsed().as_secs_f64(),
        });

        let done = step + 1;
        if cfg.eval_interval > 0 && (done % cfg.eval_interval == 0 || done == cfg.steps) {
            let rep = eval_perplexity(model, &params, &eval_ids, cfg.seq_len, &EvalMode::FixedDepth(r))?;
            evals.push((done, rep.perplexity));
        }
        if let Some(dir) = out {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done != cfg.steps {
                save_checkpoint(&params, model, &dir.join(format!("checkpoint_step{done}.ckpt")))?;
                write_logs(&metrics, &evals)?;
            }
        }
    }

    if let Some(dir) = out {
        save_checkpoint(&params, model, &dir.join("checkpoint.ckpt"))?;
        write_logs(&metrics, &evals)?;
    }
    Ok(TrainOutcome {
        params,
        metrics,
        evals,
        corpus_id: corpus.id.clone(),
    })
}

#[cfg(test)]
mod tests;
