//! Mixture of Repeats: per-token adaptive depth.
//!
//! After pass `i` every still-active token is scored by `σ(e(i)·x)`. Only the
//! `⌊c(i+1)·S⌋` highest-scoring tokens take pass `i + 1`, and their new state
//! is interpolated with the old one by the same score, which is the only path
//! through which the router receives gradient.

mod calibrate;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::model::{forward_values, ForwardValues, ModelConfig, ModelParams, Participation};
use crate::tensor::Float;

pub use calibrate::{
    calibrate_capacities, simulate_threshold_depths, CalibrationRecord, CalibrationResult, Histogram, HISTOGRAM_BINS,
};

/// Fraction of the sequence admitted to each pass.
///
/// `c[0] = 1` and the sequence never increases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CapacitySchedule(Vec<f64>);

impl TryFrom<Vec<f64>> for CapacitySchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        CapacitySchedule::new(v)
    }
}

impl From<CapacitySchedule> for Vec<f64> {
    fn from(c: CapacitySchedule) -> Self {
        c.0
    }
}

impl CapacitySchedule {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        let bad = |m: String| Err(Error::Schedule(m));
        match c.first() {
            None => return bad("empty schedule".into()),
            Some(&first) if first != 1.0 => return bad(format!("first capacity must be 1, got {first}")),
            _ => {}
        }
        if let Some(x) = c.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return bad(format!("capacity {x} outside [0, 1]"));
        }
        if c.windows(2).any(|w| w[1] > w[0]) {
            return bad(format!("capacities must be non-increasing: {c:?}"));
        }
        Ok(CapacitySchedule(c))
    }

    pub fn ones(n_repeat: usize) -> Self {
        CapacitySchedule(vec![1.0; n_repeat])
    }

    /// Every token through the first `depth` passes, none after.
    pub fn fixed_depth(depth: usize, n_repeat: usize) -> Self {
        CapacitySchedule((1..=n_repeat).map(|p| if p <= depth.max(1) { 1.0 } else { 0.0 }).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Top-k size for the 1-based `pass` over a sequence of `seq_len` tokens.
    pub fn k(&self, pass: usize, seq_len: usize) -> usize {
        capacity_k(self.0[pass - 1], seq_len)
    }

    /// Tokens entering each pass when every gate is saturated.
    pub fn pass_counts(&self, seq_len: usize) -> Vec<usize> {
        let mut prev = seq_len;
        (1..=self.0.len())
            .map(|p| {
                prev = prev.min(self.k(p, seq_len));
                prev
            })
            .collect()
    }
}

/// `k = ⌊c·S⌋`, using the full sequence length.
pub fn capacity_k(capacity: f64, seq_len: usize) -> usize {
    (capacity * seq_len as f64).floor() as usize
}

/// Capacity of 1 for the first pass, then `R − 1` uniform draws sorted
/// in decreasing order.
pub fn sample_capacities<R: Rng + ?Sized>(n_repeat: usize, rng: &mut R) -> CapacitySchedule {
    let mut rest: Vec<f64> = (1..n_repeat).map(|_| rng.random::<f64>()).collect();
    rest.sort_by(|a, b| b.total_cmp(a));
    let mut c = Vec::with_capacity(n_repeat);
    c.push(1.0);
    c.extend(rest);
    CapacitySchedule(c)
}

/// `σ(e·x)`.
pub fn router_score<T: Float>(e: &[T], x: &[T]) -> T {
    assert_eq!(e.len(), x.len(), "router_score shape mismatch");
    sigmoid(e.iter().zip(x).map(|(&a, &b)| a * b).sum())
}

/// The `min(⌊c·S⌋, |eligible|)` highest-scoring eligible tokens, returned in
/// token order. Equal scores prefer the lower token index.
pub fn select_top_k(eligible: &[usize], scores: &[f64], capacity: f64, seq_len: usize) -> Vec<usize> {
    assert_eq!(eligible.len(), scores.len(), "one score per eligible token");
    let k = capacity_k(capacity, seq_len).min(eligible.len());
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(eligible[a].cmp(&eligible[b]))
    });
    let mut picked: Vec<usize> = order[..k].iter().map(|&i| eligible[i]).collect();
    picked.sort_unstable();
    picked
}

/// `(1 − s)·x_prev + s·x_new`; `s = 0` returns `x_prev` untouched.
pub fn interpolate_update<T: Float>(x_prev: &[T], x_new: &[T], s: T) -> Vec<T> {
    assert_eq!(x_prev.len(), x_new.len(), "interpolate_update shape mismatch");
    if s == T::ZERO {
        return x_prev.to_vec();
    }
    x_prev
        .iter()
        .zip(x_new)
        .map(|(&p, &n)| p + s * (n - p))
        .collect()
}

/// For the adaptive Block Universal variant: `map[r-1][t]` is the pass whose
/// keys and values represent token `t` at pass `r`. Tokens still running map
/// to `r`; halted tokens map to the last pass they took.
pub fn copy_forward_keys(participation: &Participation) -> Vec<Vec<usize>> {
    (1..=participation.n_passes())
        .map(|r| {
            (0..participation.seq_len())
                .map(|t| participation.last_pass(t, r))
                .collect()
        })
        .collect()
}

/// How tokens are admitted to passes 2..=R.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// Every token through every pass.
    Full,
    /// Every token through the first `n` passes.
    FixedDepth(usize),
    /// Top-k by router score under a capacity schedule (adaptive models).
    Capacity(CapacitySchedule),
    /// A token continues while its router score exceeds the threshold (adaptive models).
    Threshold(f64),
    /// An explicit participation map.
    Given(Participation),
}

impl Routing {
    pub(crate) fn check(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        match self {
            Routing::Capacity(c) if c.len() != cfg.n_repeat => Err(Error::Schedule(format!(
                "schedule has {} entries for {} repeats",
                c.len(),
                cfg.n_repeat
            ))),
            Routing::Capacity(_) | Routing::Threshold(_) if !cfg.adaptive => Err(Error::Routing(
                "router-based routing requires an adaptive model".into(),
            )),
            Routing::Threshold(t) if !(0.0..=1.0).contains(t) => {
                Err(Error::Routing(format!("threshold {t} outside [0, 1]")))
            }
            Routing::Given(p) if p.n_passes() != cfg.n_repeat || p.seq_len() != seq_len => {
                Err(Error::Participation(format!(
                    "map is {}x{}, model needs {}x{seq_len}",
                    p.n_passes(),
                    p.seq_len(),
                    cfg.n_repeat
                )))
            }
            _ => Ok(()),
        }
    }

    /// Tokens admitted to `pass ≥ 2` from `eligible` (the takers of the previous pass).
    pub(crate) fn admit(
        &self,
        pass: usize,
        eligible: &[usize],
        scores: Option<&[f64]>,
        seq_len: usize,
    ) -> Result<Vec<usize>> {
        if eligible.is_empty() {
            return Ok(Vec::new());
        }
        let need_scores = || scores.ok_or_else(|| Error::Routing("router scores unavailable".into()));
        Ok(match self {
            Routing::Full => eligible.to_vec(),
            Routing::FixedDepth(n) => {
                if pass <= *n {
                    eligible.to_vec()
                } else {
                    Vec::new()
                }
            }
            Routing::Capacity(c) => select_top_k(eligible, need_scores()?, c.values()[pass - 1], seq_len),
            Routing::Threshold(tau) => {
                let s = need_scores()?;
                eligible
                    .iter()
                    .zip(s)
                    .filter(|(_, &v)| v > *tau)
                    .map(|(&t, _)| t)
                    .collect()
            }
            Routing::Given(p) => {
                let chosen = p.tokens(pass);
                if let Some(t) = chosen.iter().find(|t| eligible.binary_search(t).is_err()) {
                    return Err(Error::Participation(format!(
                        "token {t} demanded at pass {pass} without pass {}",
                        pass - 1
                    )));
                }
                chosen
            }
        })
    }
}

/// One routing decision: who could enter `pass`, their scores, and who did.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub pass: usize,
    pub eligible: Vec<usize>,
    /// Router scores aligned with `eligible` (empty for non-adaptive models).
    pub scores: Vec<f64>,
    pub k: Option<usize>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouterDecision {
    pub gates: Vec<GateDecision>,
}

/// Batched forward of an adaptive model under a capacity schedule.
pub fn adaptive_forward<T: Float>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    ids: &[usize],
    schedule: &CapacitySchedule,
) -> Result<ForwardValues<T>> {
    if !cfg.adaptive {
        return Err(Error::Routing("adaptive_forward needs an adaptive config".into()));
    }
    forward_values(cfg, params, ids, &Routing::Capacity(schedule.clone()))
}
