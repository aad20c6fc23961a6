//! Token-at-a-time decoding with an explicit key/value cache.
//!
//! Each token runs through every one of its passes before the next token is
//! admitted, and the keys it may see are enumerated directly from the
//! recurrences rather than from [`build_mask`](super::build_mask). This is
//! both the generation path and the reference the batched forward is checked
//! against.

use crate::autodiff::{gelu, normalize_row, rope_row, sigmoid};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::config::{ModelConfig, Variant};
use super::forward::LN_EPS;
use super::mask::Participation;
use super::params::{BlockWeights, ModelParams};

/// Decides whether a token continues into the next pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    /// Every token takes every pass.
    All,
    /// Every token takes the first `n` passes.
    FixedDepth(usize),
    /// Continue while the router score exceeds the threshold.
    Threshold(f64),
    /// Follow a precomputed participation map.
    Given(Participation),
}

type Kv<T> = (Vec<T>, Vec<T>);

/// Cache of one layer: `entries[t][r-1]` holds the key/value of token `t` at pass `r`.
#[derive(Debug, Clone)]
struct LayerCache<T> {
    entries: Vec<Vec<Option<Kv<T>>>>,
}

impl<T> LayerCache<T> {
    fn new() -> Self {
        LayerCache { entries: Vec::new() }
    }

    fn ensure(&mut self, token: usize, passes: usize) {
        while self.entries.len() <= token {
            self.entries.push((0..passes).map(|_| None).collect());
        }
    }
}

/// Incremental decoder state for one sequence.
pub struct IncrementalDecoder<'a, T> {
    cfg: &'a ModelConfig,
    params: &'a ModelParams<T>,
    gate: Gate,
    begin: Vec<LayerCache<T>>,
    middle: Vec<LayerCache<T>>,
    end: Vec<LayerCache<T>>,
    /// Passes taken by each processed token.
    depths: Vec<usize>,
    /// Router scores `σ(e(i)·x(i))` of each token, one per gate it reached.
    scores: Vec<Vec<f64>>,
    /// `x_t(r)` for every processed token and pass.
    states: Vec<Vec<Vec<T>>>,
}

fn matvec<T: Float>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![T::ZERO; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm<T: Float>(x: &[T], gain: &Tensor<T>, bias: &Tensor<T>) -> Vec<T> {
    let (h, _) = normalize_row(x, T::from_f64(LN_EPS));
    h.iter()
        .zip(gain.data())
        .zip(bias.data())
        .map(|((&h, &g), &b)| h * g + b)
        .collect()
}

fn add_assign<T: Float>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl<'a, T: Float> IncrementalDecoder<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams<T>, gate: Gate) -> Result<Self> {
        cfg.validate()?;
        if matches!(gate, Gate::Threshold(_)) && !cfg.adaptive {
            return Err(Error::Routing("threshold gating requires an adaptive model".into()));
        }
        Ok(IncrementalDecoder {
            cfg,
            params,
            gate,
            begin: (0..cfg.n_begin).map(|_| LayerCache::new()).collect(),
            middle: (0..cfg.n_middle).map(|_| LayerCache::new()).collect(),
            end: (0..cfg.n_end).map(|_| LayerCache::new()).collect(),
            depths: Vec::new(),
            scores: Vec::new(),
            states: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// Passes taken by each token so far.
    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    /// Router scores each token received, gate by gate.
    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    /// `x_t(r)`, the output of pass `r` for token `t`.
    pub fn state(&self, token: usize, pass: usize) -> Option<&[T]> {
        self.states.get(token)?.get(pass - 1).map(Vec::as_slice)
    }

    /// Cached `(token, pass)` entries in repeated-stack layer `layer`.
    pub fn cached_passes(&self, layer: usize, token: usize) -> usize {
        self.middle[layer]
            .entries
            .get(token)
            .map_or(0, |row| row.iter().filter(|e| e.is_some()).count())
    }

    /// One Pre-LN block for a single query. `visible` lists the `(token, pass)`
    /// cache entries of earlier tokens and of this token's earlier passes that
    /// the query may see; the query's own fresh key is always included.
    fn block(
        &self,
        b: &BlockWeights<Tensor<T>>,
        cache: &mut LayerCache<T>,
        x: &[T],
        token: usize,
        pass: usize,
        visible: &[(usize, usize)],
    ) -> Vec<T> {
        let n_heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let h = layer_norm(x, &b.ln1_gain, &b.ln1_bias);
        let mut q = matvec(&h, &b.wq);
        let mut k = matvec(&h, &b.wk);
        let v = matvec(&h, &b.wv);
        rope_row(&mut q, token, n_heads, 1.0);
        rope_row(&mut k, token, n_heads, 1.0);

        let mut keys: Vec<&Kv<T>> = visible
            .iter()
            .map(|&(u, r)| cache.entries[u][r - 1].as_ref().expect("visible entry is cached"))
            .collect();
        let own = (k, v);
        keys.push(&own);

        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn = vec![T::ZERO; self.cfg.d_model];
        for head in 0..n_heads {
            let span = head * hd..(head + 1) * hd;
            let logits: Vec<f64> = keys
                .iter()
                .map(|(kk, _)| {
                    let dot: f64 = q[span.clone()]
                        .iter()
                        .zip(&kk[span.clone()])
                        .map(|(&a, &b)| a.to_f64() * b.to_f64())
                        .sum();
                    dot * scale
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for (wi, (_, vv)) in w.iter().zip(&keys) {
                for (o, &val) in attn[span.clone()].iter_mut().zip(&vv[span.clone()]) {
                    *o += T::from_f64(wi / z * val.to_f64());
                }
            }
        }
        cache.ensure(token, self.cfg.n_repeat);
        cache.entries[token][pass - 1] = Some(own);

        let mut x = x.to_vec();
        add_assign(&mut x, &matvec(&attn, &b.wo));
        let h = layer_norm(&x, &b.ln2_gain, &b.ln2_bias);
        let f: Vec<T> = matvec(&h, &b.ff_in).into_iter().map(gelu).collect();
        add_assign(&mut x, &matvec(&f, &b.ff_out));
        x
    }

    fn fixed_layers(&mut self, which: Which, x: Vec<T>, token: usize) -> Vec<T> {
        let visible: Vec<(usize, usize)> = (0..token).map(|u| (u, 1)).collect();
        let params = self.params;
        let blocks = match which {
            Which::Begin => &params.begin,
            Which::End => &params.end,
        };
        let mut x = x;
        for (l, b) in blocks.iter().enumerate() {
            let mut cache = match which {
                Which::Begin => std::mem::replace(&mut self.begin[l], LayerCache::new()),
                Which::End => std::mem::replace(&mut self.end[l], LayerCache::new()),
            };
            x = self.block(b, &mut cache, &x, token, 1, &visible);
            match which {
                Which::Begin => self.begin[l] = cache,
                Which::End => self.end[l] = cache,
            }
        }
        x
    }

    /// Keys of earlier tokens (and, for CoTFormer with self history, this
    /// token's earlier passes) visible to `(token, pass)`.
    fn visible(&self, token: usize, pass: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        match self.cfg.variant {
            Variant::Standard | Variant::BlockUniversal => {
                for u in 0..token {
                    // a token that stopped early is represented by its last pass
                    out.push((u, pass.min(self.depths[u])));
                }
            }
            Variant::Cotformer => {
                for u in 0..token {
                    for r in 1..=pass.min(self.depths[u]) {
                        out.push((u, r));
                    }
                }
                if self.cfg.self_history {
                    for r in 1..pass {
                        out.push((token, r));
                    }
                }
            }
        }
        out
    }

    fn admits(&self, pass: usize, token: usize, score: Option<f64>) -> bool {
        match &self.gate {
            Gate::All => true,
            Gate::FixedDepth(n) => pass <= *n,
            Gate::Threshold(tau) => score.is_some_and(|s| s > *tau),
            Gate::Given(p) => p.get(pass, token),
        }
    }

    /// Processes the next token and returns its next-token logits.
    pub fn step(&mut self, id: usize) -> Result<Vec<T>> {
        let cfg = self.cfg;
        let params = self.params;
        let token = self.depths.len();
        if token >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: token + 1,
                max: cfg.max_seq_len,
            });
        }
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let x = params.token_embedding.row(id).to_vec();
        let mut x = self.fixed_layers(Which::Begin, x, token);

        // Placeholder so `visible` sees this token's depth as "in progress".
        self.depths.push(0);
        self.scores.push(Vec::new());
        self.states.push(Vec::new());
        for pass in 1..=cfg.n_repeat {
            let mut score = None;
            if pass > 1 {
                if cfg.adaptive {
                    let s = sigmoid(
                        params.router.halt[pass - 2]
                            .data()
                            .iter()
                            .zip(&x)
                            .map(|(&e, &v)| e * v)
                            .sum::<T>(),
                    );
                    self.scores[token].push(s.to_f64());
                    score = Some(s);
                }
                if !self.admits(pass, token, score.map(|s| s.to_f64())) {
                    break;
                }
            }
            let mut h = x.clone();
            if let Some(e) = &params.router.depth {
                let coef = T::from_f64((cfg.n_repeat - pass) as f64);
                if coef != T::ZERO {
                    for (o, &ev) in h.iter_mut().zip(e.data()) {
                        *o += coef * ev;
                    }
                }
            }
            let visible = self.visible(token, pass);
            for l in 0..cfg.n_middle {
                let mut cache = std::mem::replace(&mut self.middle[l], LayerCache::new());
                h = self.block(&params.middle[l], &mut cache, &h, token, pass, &visible);
                self.middle[l] = cache;
            }
            if let Some(n) = &params.repeat_norm {
                h = layer_norm(&h, &n.gain, &n.bias);
            }
            if let Some(s) = score {
                h = x.iter().zip(&h).map(|(&p, &n)| p + s * (n - p)).collect();
            }
            x = h;
            self.depths[token] = pass;
            self.states[token].push(x.clone());
        }

        let x = self.fixed_layers(Which::End, x, token);
        let x = layer_norm(&x, &params.final_norm.gain, &params.final_norm.bias);
        Ok(matvec(&x, &params.unembedding))
    }
}

#[derive(Clone, Copy)]
enum Which {
    Begin,
    End,
}

/// Output of [`incremental_decode`].
#[derive(Debug, Clone)]
pub struct DecodeOutput<T> {
    /// Prompt followed by the generated ids.
    pub tokens: Vec<usize>,
    /// Next-token logits after each processed position, `[positions × vocab]`.
    pub logits: Tensor<T>,
    /// Passes taken by each processed token.
    pub depths: Vec<usize>,
}

/// Greedy decoding, one token at a time through all of its passes.
///
/// Generation stops early once the sequence reaches `max_seq_len`.
pub fn incremental_decode<T: Float>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    prompt: &[usize],
    n_new: usize,
    gate: Gate,
) -> Result<DecodeOutput<T>> {
    if prompt.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    if prompt.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut dec = IncrementalDecoder::new(cfg, params, gate)?;
    let mut tokens = prompt.to_vec();
    let mut rows: Vec<T> = Vec::new();
    let mut last = Vec::new();
    for &id in prompt {
        last = dec.step(id)?;
        rows.extend_from_slice(&last);
    }
    for _ in 0..n_new {
        if tokens.len() >= cfg.max_seq_len {
            break;
        }
        let next = argmax(&last);
        tokens.push(next);
        // the logits after the final generated token are not needed
        if tokens.len() == prompt.len() + n_new {
            break;
        }
        last = dec.step(next)?;
        rows.extend_from_slice(&last);
    }
    let positions = rows.len() / cfg.vocab_size;
    Ok(DecodeOutput {
        tokens,
        logits: Tensor::new([positions, cfg.vocab_size], rows)?,
        depths: dec.depths().to_vec(),
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Float>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
