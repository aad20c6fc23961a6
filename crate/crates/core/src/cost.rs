//! Analytic multiply-accumulate counts.
//!
//! Only matrix-product multiplies are counted: the four attention
//! projections, the score and value products, the two feed-forward matrices
//! and the unembedding. Norms, softmax, activations and residual adds are
//! free, and so is the embedding lookup. Head count never matters because
//! the per-head widths sum to `d_model`.

use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::routing::CapacitySchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CostReport {
    pub macs_qkvo_projections: u64,
    pub macs_attention_scores: u64,
    pub macs_attention_values: u64,
    pub macs_feedforward: u64,
    pub macs_embedding_unembedding: u64,
    pub total: u64,
}

impl CostReport {
    fn from_parts(qkvo: u64, scores: u64, values: u64, ff: u64, emb: u64) -> Self {
        CostReport {
            macs_qkvo_projections: qkvo,
            macs_attention_scores: scores,
            macs_attention_values: values,
            macs_feedforward: ff,
            macs_embedding_unembedding: emb,
            total: qkvo + scores + values + ff + emb,
        }
    }
}

impl Add for CostReport {
    type Output = CostReport;
    fn add(self, o: CostReport) -> CostReport {
        CostReport::from_parts(
            self.macs_qkvo_projections + o.macs_qkvo_projections,
            self.macs_attention_scores + o.macs_attention_scores,
            self.macs_attention_values + o.macs_attention_values,
            self.macs_feedforward + o.macs_feedforward,
            self.macs_embedding_unembedding + o.macs_embedding_unembedding,
        )
    }
}

impl AddAssign for CostReport {
    fn add_assign(&mut self, o: CostReport) {
        *self = *self + o;
    }
}

/// Cost of `n_layers` blocks run over `s_q` queries that attend to `s_kv`
/// keys, of which `s_new` are projected in this pass.
pub fn macs_pass(d: u64, d_ff: u64, n_layers: u64, s_q: u64, s_kv: u64, s_new: u64) -> CostReport {
    debug_assert!(s_new <= s_kv || s_q == 0);
    CostReport::from_parts(
        n_layers * (2 * s_q * d * d + 2 * s_new * d * d),
        n_layers * s_q * s_kv * d,
        n_layers * s_q * s_kv * d,
        n_layers * 2 * s_q * d * d_ff,
        0,
    )
}

/// Whole-model cost for one sequence of `seq_len` tokens. `None` means
/// every token takes every pass.
pub fn macs_model(cfg: &ModelConfig, seq_len: usize, schedule: Option<&CapacitySchedule>) -> Result<CostReport> {
    let r = cfg.n_repeat;
    let counts = match schedule {
        Some(c) if c.len() != r => {
            return Err(Error::Schedule(format!("schedule has {} entries for {r} repeats", c.len())))
        }
        Some(c) => c.pass_counts(seq_len),
        None => vec![seq_len; r],
    };
    let (d, d_ff, s) = (cfg.d_model as u64, cfg.d_ff as u64, seq_len as u64);
    let fixed = (cfg.n_begin + cfg.n_end) as u64;
    let mut total = macs_pass(d, d_ff, fixed, s, s, s);
    let mut live = 0u64;
    for &n in &counts {
        let n = n as u64;
        live += n;
        let s_kv = match cfg.variant {
            Variant::Cotformer => live,
            // halted tokens keep their earlier keys; nothing is recomputed
            Variant::BlockUniversal | Variant::Standard => s,
        };
        if n > 0 {
            total += macs_pass(d, d_ff, cfg.n_middle as u64, n, s_kv, n);
        }
    }
    total += CostReport::from_parts(0, 0, 0, 0, s * d * cfg.vocab_size as u64);
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossoverRow {
    pub seq_len: usize,
    pub macs_a: u64,
    pub macs_b: u64,
    pub ratio: f64,
}

/// Total MACs of two configs at each sequence length, in the order given.
pub fn crossover_scan(a: &ModelConfig, b: &ModelConfig, seq_lens: &[usize]) -> Result<Vec<CrossoverRow>> {
    if seq_lens.is_empty() {
        return Err(Error::Config("empty sequence length list".into()));
    }
    seq_lens
        .iter()
        .map(|&s| {
            let ma = macs_model(a, s, None)?.total;
            let mb = macs_model(b, s, None)?.total;
            Ok(CrossoverRow {
                seq_len: s,
                macs_a: ma,
                macs_b: mb,
                ratio: ma as f64 / mb as f64,
            })
        })
        .collect()
}

pub fn crossover_csv(rows: &[CrossoverRow]) -> String {
    let mut out = String::from("S,macs_a,macs_b,ratio\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.seq_len, r.macs_a, r.macs_b, r.ratio));
    }
    out
}

/// A model with an externally measured perplexity.
#[derive(Debug, Clone)]
pub struct ParetoEntry {
    pub label: String,
    pub config: ModelConfig,
    pub schedule: Option<CapacitySchedule>,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoRow {
    pub label: String,
    pub macs: u64,
    pub ppl: f64,
}

pub const PARETO_SEQ_LEN: usize = 256;

/// Cost at [`PARETO_SEQ_LEN`] tokens next to each entry's perplexity.
pub fn pareto_table(entries: &[ParetoEntry]) -> Result<Vec<ParetoRow>> {
    entries
        .iter()
        .map(|e| {
            Ok(ParetoRow {
                label: e.label.clone(),
                macs: macs_model(&e.config, PARETO_SEQ_LEN, e.schedule.as_ref())?.total,
                ppl: e.perplexity,
            })
        })
        .collect()
}

pub fn pareto_csv(rows: &[ParetoRow]) -> String {
    let mut out = String::from("label,macs,ppl\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.label, r.macs, r.ppl));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpt(variant: Variant, n_middle: usize, r: usize) -> ModelConfig {
        ModelConfig::new(variant, (0, n_middle, 0), r, 768, 12, 50257, 8192)
    }

    #[test]
    fn single_multiply_counts() {
        let c = macs_pass(1, 1, 1, 1, 1, 1);
        assert_eq!(c.total, 8);
        assert_eq!(
            (c.macs_qkvo_projections, c.macs_attention_scores, c.macs_attention_values, c.macs_feedforward),
            (4, 1, 1, 2)
        );
        let z = macs_pass(16, 64, 2, 0, 5, 5);
        assert_eq!(z.total, z.macs_qkvo_projections);
        assert_eq!(z.total, 2 * 2 * 5 * 16 * 16);
    }

    #[test]
    fn query_terms_scale_linearly() {
        let a = macs_pass(8, 32, 3, 4, 10, 0);
        let b = macs_pass(8, 32, 3, 8, 10, 0);
        assert_eq!(2 * a.total, b.total);
        assert_eq!(2 * a.macs_attention_scores, b.macs_attention_scores);
    }

    #[test]
    fn single_repeat_coincidences() {
        for s in [1, 17, 256] {
            let std = macs_model(&ModelConfig::standard(12, 768, 12, 50257, 8192), s, None).unwrap();
            let but = macs_model(&gpt(Variant::BlockUniversal, 12, 1), s, None).unwrap();
            let cot = macs_model(&gpt(Variant::Cotformer, 12, 1), s, None).unwrap();
            assert_eq!(std, but);
            assert_eq!(cot, but);
        }
    }

    #[test]
    fn cot_extra_cost_is_attention_only() {
        let cot = gpt(Variant::Cotformer, 4, 3);
        let but = gpt(Variant::BlockUniversal, 4, 3);
        let s = 100u64;
        let a = macs_model(&cot, s as usize, None).unwrap();
        let b = macs_model(&but, s as usize, None).unwrap();
        let extra: u64 = (1..=3u64).map(|r| s * (r * s - s) * 768 * 2 * 4).sum();
        assert_eq!(a.total - b.total, extra);
        assert_eq!(a.macs_feedforward, b.macs_feedforward);
        // scores grow with R(R+1)/2 at full capacity
        assert_eq!(a.macs_attention_scores, 4 * 768 * s * s * 6);
    }

    #[test]
    fn crossover_holds_through_8192() {
        let rows = crossover_scan(
            &gpt(Variant::Cotformer, 12, 3),
            &gpt(Variant::BlockUniversal, 12, 5),
            &[8192, 256, 1024, 4096],
        )
        .unwrap();
        assert_eq!(rows.iter().map(|r| r.seq_len).collect::<Vec<_>>(), vec![8192, 256, 1024, 4096]);
        assert!(rows.iter().all(|r| r.ratio < 1.0));
        let same = crossover_scan(&gpt(Variant::Cotformer, 2, 2), &gpt(Variant::Cotformer, 2, 2), &[64]).unwrap();
        assert_eq!(same[0].ratio, 1.0);
        assert!(crossover_csv(&rows).starts_with("S,macs_a,macs_b,ratio\n8192,"));
    }

    #[test]
    fn monotone_in_repeats_and_capacity() {
        for v in [Variant::Cotformer, Variant::BlockUniversal] {
            let t: Vec<u64> = [2, 3, 5]
                .iter()
                .map(|&r| macs_model(&gpt(v, 12, r), 256, None).unwrap().total)
                .collect();
            assert!(t[0] < t[1] && t[1] < t[2]);
            let cfg = gpt(v, 2, 3);
            let lo = CapacitySchedule::new(vec![1.0, 0.5, 0.25]).unwrap();
            let hi = CapacitySchedule::new(vec![1.0, 0.75, 0.25]).unwrap();
            assert!(macs_model(&cfg, 64, Some(&lo)).unwrap().total < macs_model(&cfg, 64, Some(&hi)).unwrap().total);
            assert!(macs_model(&cfg, 64, Some(&CapacitySchedule::ones(2))).is_err());
        }
    }

    #[test]
    fn pareto_rows() {
        let e = ParetoEntry {
            label: "cot-12x5".into(),
            config: gpt(Variant::Cotformer, 12, 5),
            schedule: None,
            perplexity: 26.64,
        };
        let rows = pareto_table(std::slice::from_ref(&e)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].macs, macs_model(&e.config, 256, None).unwrap().total);
        assert_eq!(pareto_csv(&rows), format!("label,macs,ppl\ncot-12x5,{},26.64\n", rows[0].macs));
    }
}
