//! Turning a router threshold into a static capacity schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_values, ModelConfig, ModelParams};
use crate::tensor::Float;

use super::{CapacitySchedule, Routing};

/// Equal-width histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn unit(bins: usize) -> Self {
        Histogram {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let i = ((v * bins as f64).floor() as usize).min(bins - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `lo,hi,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub capacities: CapacitySchedule,
    /// Raw entry ratio per pass before clamping.
    pub ratios: Vec<f64>,
    /// Scores at the gate into the last pass, one per token, from a full-depth run.
    pub histogram: Histogram,
}

/// Serialized calibration output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub threshold: f64,
    pub capacities: Vec<f64>,
    pub histogram: Histogram,
    pub corpus_id: String,
    pub checkpoint_id: String,
}

impl CalibrationRecord {
    pub fn new(threshold: f64, result: &CalibrationResult, corpus_id: &str, checkpoint_id: &str) -> Self {
        CalibrationRecord {
            threshold,
            capacities: result.capacities.values().to_vec(),
            histogram: result.histogram.clone(),
            corpus_id: corpus_id.to_owned(),
            checkpoint_id: checkpoint_id.to_owned(),
        }
    }
}

pub const HISTOGRAM_BINS: usize = 20;

/// Passes each token of `ids` takes when it continues only while its router
/// score exceeds `threshold`.
pub fn simulate_threshold_depths<T: Float>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    ids: &[usize],
    threshold: f64,
) -> Result<Vec<usize>> {
    let out = forward_values(cfg, params, ids, &Routing::Threshold(threshold))?;
    Ok(out.state.participation.depths())
}

/// Runs threshold halting over `windows` and returns the fraction of tokens
/// entering each pass (pooled over all windows), clamped to be non-increasing.
pub fn calibrate_capacities<T: Float>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    windows: &[Vec<usize>],
    threshold: f64,
) -> Result<CalibrationResult> {
    if windows.is_empty() || windows.iter().all(Vec::is_empty) {
        return Err(Error::Corpus("calibration needs at least one non-empty window".into()));
    }
    if !cfg.adaptive {
        return Err(Error::Routing("calibration requires an adaptive model".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Routing(format!("threshold {threshold} outside [0, 1]")));
    }
    let r = cfg.n_repeat;
    let mut entered = vec![0usize; r];
    let mut total = 0usize;
    let mut histogram = Histogram::unit(HISTOGRAM_BINS);
    for ids in windows.iter().filter(|w| !w.is_empty()) {
        for d in simulate_threshold_depths(cfg, params, ids, threshold)? {
            for e in &mut entered[..d] {
                *e += 1;
            }
        }
        total += ids.len();
        if r >= 2 {
            let full = forward_values(cfg, params, ids, &Routing::Full)?;
            let last = full.router.gates.last().expect("a gate per pass after the first");
            for &s in &last.scores {
                histogram.add(s);
            }
        }
    }
    let ratios: Vec<f64> = entered.iter().map(|&e| e as f64 / total as f64).collect();
    let mut clamped = ratios.clone();
    clamped[0] = 1.0;
    for i in 1..r {
        clamped[i] = clamped[i].min(clamped[i - 1]);
    }
    Ok(CalibrationResult {
        capacities: CapacitySchedule::new(clamped)?,
        ratios,
        histogram,
    })
}
