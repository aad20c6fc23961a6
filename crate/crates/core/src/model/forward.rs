use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::routing::{GateDecision, RouterDecision, Routing};
use crate::tensor::{Float, Tensor};

use super::config::{ModelConfig, Variant};
use super::mask::{build_mask, AttentionMask, Participation, Slot};
use super::params::{BlockWeights, ModelParams, Weights};

pub const LN_EPS: f64 = 1e-5;

/// Keys and values one layer produced during one pass (keys already rotated).
#[derive(Debug, Clone)]
pub struct KvEntry {
    pub pass: usize,
    pub tokens: Vec<usize>,
    pub k: Var,
    pub v: Var,
}

/// Per-layer key/value entries of the repeated stack, appended pass by pass.
#[derive(Debug, Clone, Default)]
pub struct KvStore {
    pub layers: Vec<Vec<KvEntry>>,
}

impl KvStore {
    pub fn new(n_layers: usize) -> Self {
        KvStore {
            layers: vec![Vec::new(); n_layers],
        }
    }

    /// Number of `(token, pass)` entries cached for `layer`.
    pub fn entries(&self, layer: usize) -> usize {
        self.layers[layer].iter().map(|e| e.tokens.len()).sum()
    }

    fn gather(&self, tape: &mut Tape<impl Float>, layer: usize, keys: &[Slot]) -> Result<(Var, Var)> {
        let mut ks = Vec::with_capacity(keys.len());
        let mut vs = Vec::with_capacity(keys.len());
        for slot in keys {
            let found = self.layers[layer]
                .iter()
                .find(|e| e.pass == slot.pass)
                .and_then(|e| e.tokens.binary_search(&slot.token).ok().map(|row| (e, row)));
            let Some((e, row)) = found else {
                return Err(Error::Participation(format!(
                    "no cached key for token {} at pass {} (layer {layer})",
                    slot.token, slot.pass
                )));
            };
            ks.push((e.k, row));
            vs.push((e.v, row));
        }
        Ok((tape.stack_rows(ks)?, tape.stack_rows(vs)?))
    }
}

/// Multi-head scaled dot-product attention with an additive mask.
fn attention<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    allowed: &[bool],
    n_heads: usize,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let hd = d / n_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, hd)?,
                tape.slice_cols(k, h * hd, hd)?,
                tape.slice_cols(v, h * hd, hd)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add_mask(scores, allowed)?;
        let probs = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    Ok(if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(heads)?
    })
}

/// One Pre-LN block over the queries of `mask`; appends this pass's keys and
/// values to `kv_layer` before attending.
fn block_forward<T: Float>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &BlockWeights<Var>,
    x: Var,
    mask: &AttentionMask,
    store: &mut KvStore,
    layer: usize,
) -> Result<Var> {
    let eps = T::from_f64(LN_EPS);
    let tokens: Vec<usize> = mask.queries.iter().map(|s| s.token).collect();
    let pass = mask.queries[0].pass;
    let positions: Rc<[usize]> = Rc::from(tokens.clone());

    let h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, eps)?;
    let q = tape.matmul(h, b.wq)?;
    let k = tape.matmul(h, b.wk)?;
    let v = tape.matmul(h, b.wv)?;
    let q = tape.rope(q, positions.clone(), cfg.n_heads)?;
    let k = tape.rope(k, positions, cfg.n_heads)?;
    store.layers[layer].push(KvEntry { pass, tokens, k, v });

    let (keys, values) = if mask.keys_are_queries() {
        (k, v)
    } else {
        store.gather(tape, layer, &mask.keys)?
    };
    let a = attention(tape, q, keys, values, mask.dense(), cfg.n_heads)?;
    let a = tape.matmul(a, b.wo)?;
    let x = tape.add(x, a)?;

    let h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias, eps)?;
    let f = tape.matmul(h, b.ff_in)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, b.ff_out)?;
    Ok(tape.add(x, f)?)
}

/// Applies every block of `blocks` once to the queries of `mask`, caching the
/// keys and values of each layer in `store`.
pub fn block_stack_forward<T: Float>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    blocks: &[BlockWeights<Var>],
    input: Var,
    mask: &AttentionMask,
    store: &mut KvStore,
) -> Result<Var> {
    if mask.queries.is_empty() {
        return Err(Error::Participation("pass has no queries".into()));
    }
    if store.layers.len() < blocks.len() {
        store.layers.resize(blocks.len(), Vec::new());
    }
    let mut x = input;
    for (layer, b) in blocks.iter().enumerate() {
        x = block_forward(tape, cfg, b, x, mask, store, layer)?;
    }
    Ok(x)
}

/// Untied layers run once over the whole sequence with a causal mask.
fn fixed_layers<T: Float>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    blocks: &[BlockWeights<Var>],
    x: Var,
    causal: &AttentionMask,
) -> Result<Var> {
    let mut store = KvStore::new(1);
    let mut x = x;
    for b in blocks {
        store.layers[0].clear();
        x = block_forward(tape, cfg, b, x, causal, &mut store, 0)?;
    }
    Ok(x)
}

/// Tape handles produced by one pass of the repeated stack.
#[derive(Debug, Clone)]
pub struct PassRecord {
    pub pass: usize,
    pub tokens: Vec<usize>,
    /// `x(r−1)` of the participating tokens (before the depth embedding).
    pub input: Var,
    /// `x(r)` of the participating tokens.
    pub output: Var,
}

/// Result of a batched forward on a tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub participation: Participation,
    /// Index `r − 1` holds pass `r`; `None` when no token took it.
    pub passes: Vec<Option<PassRecord>>,
    pub router: RouterDecision,
    pub kv: KvStore,
}

pub(crate) fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Config("empty token sequence".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Batched forward of one sequence for any variant.
///
/// Embeds, runs the `n_begin` layers, then the tied stack once per pass with
/// the variant's mask. Pass `r` adds `(R − r)·e_depth` to its input when
/// enabled and normalises its output when `ln_per_repeat` is set. In adaptive
/// models the tokens admitted to pass `r ≥ 2` are interpolated with their
/// router score. Each token's last state then runs through the `n_end`
/// layers, the final norm and the unembedding.
pub fn forward<T: Float>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    ids: &[usize],
    routing: &Routing,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    check_ids(cfg, ids)?;
    let seq_len = ids.len();
    routing.check(cfg, seq_len)?;
    let eps = T::from_f64(LN_EPS);
    let r_max = cfg.n_repeat;

    let x = tape.stack_rows(ids.iter().map(|&id| (w.token_embedding, id)).collect())?;
    let causal = build_mask(Variant::Standard, seq_len, 1, 1, &Participation::full(1, seq_len), false)?;
    let x = fixed_layers(tape, cfg, &w.begin, x, &causal)?;

    let mut state: Vec<(Var, usize)> = (0..seq_len).map(|t| (x, t)).collect();
    let mut participation = Participation::empty();
    let mut passes = Vec::with_capacity(r_max);
    let mut router = RouterDecision::default();
    let mut kv = KvStore::new(cfg.n_middle);

    for pass in 1..=r_max {
        let (selected, gate) = if pass == 1 {
            ((0..seq_len).collect::<Vec<_>>(), None)
        } else {
            let eligible = participation.tokens(pass - 1);
            let scored = if cfg.adaptive && !eligible.is_empty() {
                let xs = tape.stack_rows(eligible.iter().map(|&t| state[t]).collect())?;
                let e = tape.reshape(w.router.halt[pass - 2], [cfg.d_model, 1])?;
                let logit = tape.matmul(xs, e)?;
                Some(tape.sigmoid(logit)?)
            } else {
                None
            };
            let scores: Vec<f64> = scored
                .map(|s| tape.value(s).data().iter().map(|v| v.to_f64()).collect())
                .unwrap_or_default();
            let selected = routing.admit(pass, &eligible, scored.map(|_| scores.as_slice()), seq_len)?;
            let k = match routing {
                Routing::Capacity(c) => Some(c.k(pass, seq_len)),
                _ => None,
            };
            router.gates.push(GateDecision {
                pass,
                eligible: eligible.clone(),
                scores,
                k,
                selected: selected.clone(),
            });
            (selected, scored.map(|s| (s, eligible)))
        };

        let mut row = vec![false; seq_len];
        for &t in &selected {
            row[t] = true;
        }
        participation.push_row(row)?;
        if selected.is_empty() {
            passes.push(None);
            continue;
        }

        let input = tape.stack_rows(selected.iter().map(|&t| state[t]).collect())?;
        let mut x_in = input;
        if let Some(e) = w.router.depth {
            let coef = r_max - pass;
            if coef > 0 {
                let shift = tape.scale(e, T::from_f64(coef as f64))?;
                x_in = tape.add_row(input, shift)?;
            }
        }
        let mask = build_mask(cfg.variant, seq_len, r_max, pass, &participation, cfg.self_history)?;
        let mut out = block_stack_forward(tape, cfg, &w.middle, x_in, &mask, &mut kv)?;
        if let Some(n) = &w.repeat_norm {
            out = tape.layer_norm(out, n.gain, n.bias, eps)?;
        }
        if let Some((s, eligible)) = gate {
            let rows = selected
                .iter()
                .map(|t| (s, eligible.binary_search(t).expect("selected ⊆ eligible")))
                .collect();
            let s_sel = tape.stack_rows(rows)?;
            let delta = tape.sub(out, input)?;
            let delta = tape.row_scale(delta, s_sel)?;
            out = tape.add(input, delta)?;
        }
        for (i, &t) in selected.iter().enumerate() {
            state[t] = (out, i);
        }
        passes.push(Some(PassRecord {
            pass,
            tokens: selected,
            input,
            output: out,
        }));
    }

    let finals = tape.stack_rows(state)?;
    let x = fixed_layers(tape, cfg, &w.end, finals, &causal)?;
    let x = tape.layer_norm(x, w.final_norm.gain, w.final_norm.bias, eps)?;
    let logits = tape.matmul(x, w.unembedding)?;

    Ok(ForwardOutput {
        logits,
        participation,
        passes,
        router,
        kv,
    })
}

/// Concrete per-pass representations copied off a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PassState<T> {
    pub participation: Participation,
    /// `outputs[r-1][t]` is `x_t(r)` when token `t` took pass `r`.
    pub outputs: Vec<Vec<Option<Vec<T>>>>,
}

impl<T: Float> PassState<T> {
    pub fn output(&self, pass: usize, token: usize) -> Option<&[T]> {
        self.outputs.get(pass - 1)?.get(token)?.as_deref()
    }
}

impl ForwardOutput {
    pub fn pass_state<T: Float>(&self, tape: &Tape<T>) -> PassState<T> {
        let s = self.participation.seq_len();
        let outputs = self
            .passes
            .iter()
            .map(|rec| {
                let mut row = vec![None; s];
                if let Some(rec) = rec {
                    let v = tape.value(rec.output);
                    for (i, &t) in rec.tokens.iter().enumerate() {
                        row[t] = Some(v.row(i).to_vec());
                    }
                }
                row
            })
            .collect();
        PassState {
            participation: self.participation.clone(),
            outputs,
        }
    }
}

/// Values of a forward pass detached from its tape.
#[derive(Debug, Clone)]
pub struct ForwardValues<T> {
    pub logits: Tensor<T>,
    pub state: PassState<T>,
    pub router: RouterDecision,
}

/// Runs [`forward`] on a fresh tape and returns concrete values.
pub fn forward_values<T: Float>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    ids: &[usize],
    routing: &Routing,
) -> Result<ForwardValues<T>> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let out = forward(&mut tape, cfg, &w, ids, routing)?;
    Ok(ForwardValues {
        logits: tape.value(out.logits).clone(),
        state: out.pass_state(&tape),
        router: out.router,
    })
}

fn forward_variant<T: Float>(
    expected: Variant,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    ids: &[usize],
) -> Result<ForwardValues<T>> {
    if cfg.variant != expected {
        return Err(Error::Config(format!(
            "{} forward called with a {} config",
            expected.name(),
            cfg.variant.name()
        )));
    }
    forward_values(cfg, params, ids, &Routing::Full)
}

/// CoTFormer forward at full depth.
pub fn cotformer_forward<T: Float>(cfg: &ModelConfig, params: &ModelParams<T>, ids: &[usize]) -> Result<ForwardValues<T>> {
    forward_variant(Variant::Cotformer, cfg, params, ids)
}

/// Block Universal Transformer forward at full depth.
pub fn but_forward<T: Float>(cfg: &ModelConfig, params: &ModelParams<T>, ids: &[usize]) -> Result<ForwardValues<T>> {
    forward_variant(Variant::BlockUniversal, cfg, params, ids)
}

/// Standard transformer forward; returns the logits.
pub fn standard_forward<T: Float>(cfg: &ModelConfig, params: &ModelParams<T>, ids: &[usize]) -> Result<Tensor<T>> {
    Ok(forward_variant(Variant::Standard, cfg, params, ids)?.logits)
}

/// `x + (R − r)·e_depth` on every row.
pub fn apply_depth_embedding<T: Float>(x: &Tensor<T>, pass: usize, n_repeat: usize, e_depth: &[T]) -> Result<Tensor<T>> {
    if pass == 0 || pass > n_repeat {
        return Err(Error::Config(format!("pass {pass} outside 1..={n_repeat}")));
    }
    if e_depth.len() != x.cols() {
        return Err(crate::error::TensorError::ShapeMismatch {
            op: "apply_depth_embedding",
            lhs: x.shape().to_vec(),
            rhs: vec![e_depth.len()],
        }
        .into());
    }
    let coef = T::from_f64((n_repeat - pass) as f64);
    let mut out = x.clone();
    if coef != T::ZERO {
        for i in 0..out.rows() {
            for (o, &e) in out.row_mut(i).iter_mut().zip(e_depth) {
                *o += coef * e;
            }
        }
    }
    Ok(out)
}
