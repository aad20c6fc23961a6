use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{forward_values, ModelConfig, ModelParams};
use crate::routing::{CapacitySchedule, Routing};
use crate::tensor::{Float, Tensor};

use super::data::eval_windows;

/// How an evaluation spends its depth budget.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    /// Every token through the first `n` passes.
    FixedDepth(usize),
    /// Router top-k under a static capacity schedule.
    Router(CapacitySchedule),
}

impl EvalMode {
    fn routing(&self, cfg: &ModelConfig) -> Result<Routing> {
        match self {
            EvalMode::FixedDepth(n) if *n == 0 || *n > cfg.n_repeat => Err(Error::Config(format!(
                "fixed depth {n} outside 1..={}",
                cfg.n_repeat
            ))),
            EvalMode::FixedDepth(n) => Ok(Routing::FixedDepth(*n)),
            EvalMode::Router(c) => Ok(Routing::Capacity(c.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    /// Mean fraction of each window entering each pass.
    pub ratios: Vec<f64>,
}

/// Summed negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn sequence_nll<T: Float>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.to_f64() - m).exp()).sum();
            m + z.ln() - row[t].to_f64()
        })
        .sum()
}

/// `exp(mean NLL)` over consecutive non-overlapping windows of `seq_len`.
pub fn eval_perplexity<T: Float>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    ids: &[usize],
    seq_len: usize,
    mode: &EvalMode,
) -> Result<EvalReport> {
    let routing = mode.routing(cfg)?;
    let windows = eval_windows(ids, seq_len);
    if windows.is_empty() {
        return Err(Error::Corpus(format!(
            "evaluation corpus of {} tokens has no window of {seq_len}",
            ids.len()
        )));
    }
    let per_window: Vec<(f64, Vec<f64>)> = windows
        .par_iter()
        .map(|(x, y)| {
            let out = forward_values(cfg, params, x, &routing)?;
            Ok((sequence_nll(&out.logits, y), out.state.participation.ratios()))
        })
        .collect::<Result<_>>()?;
    let tokens = windows.len() * seq_len;
    let nll: f64 = per_window.iter().map(|(n, _)| n).sum();
    let mut ratios = vec![0.0; cfg.n_repeat];
    for (_, r) in &per_window {
        for (a, b) in ratios.iter_mut().zip(r) {
            *a += b;
        }
    }
    for a in &mut ratios {
        *a /= windows.len() as f64;
    }
    let mean_nll = nll / tokens as f64;
    Ok(EvalReport {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens,
        ratios,
    })
}
