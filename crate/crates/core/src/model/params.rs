use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Float, Tensor};

use super::config::ModelConfig;

/// Weights of one Pre-LN transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub ff_in: P,
    pub ff_out: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights<P> {
    pub gain: P,
    pub bias: P,
}

/// Halting embeddings `e(i)` (one per gate into passes 2..=R) and the depth embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<P> {
    /// `halt[i]` scores tokens leaving pass `i + 1`; present only for adaptive models.
    pub halt: Vec<P>,
    pub depth: Option<P>,
}

/// Full parameter set, generic over storage: concrete tensors
/// ([`ModelParams`]), tape handles, gradients, or shapes.
///
/// The `middle` blocks are stored once and reused on every repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<P> {
    pub token_embedding: P,
    pub begin: Vec<BlockWeights<P>>,
    pub middle: Vec<BlockWeights<P>>,
    pub end: Vec<BlockWeights<P>>,
    pub repeat_norm: Option<NormWeights<P>>,
    pub final_norm: NormWeights<P>,
    pub unembedding: P,
    pub router: RouterParams<P>,
}

pub type ModelParams<T> = Weights<Tensor<T>>;

impl<P> BlockWeights<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> BlockWeights<Q> {
        let mut g = |field: &str, p: &P| f(&format!("{prefix}.{field}"), p);
        BlockWeights {
            ln1_gain: g("ln1.gain", &self.ln1_gain),
            ln1_bias: g("ln1.bias", &self.ln1_bias),
            wq: g("attn.wq", &self.wq),
            wk: g("attn.wk", &self.wk),
            wv: g("attn.wv", &self.wv),
            wo: g("attn.wo", &self.wo),
            ln2_gain: g("ln2.gain", &self.ln2_gain),
            ln2_bias: g("ln2.bias", &self.ln2_bias),
            ff_in: g("ff.in", &self.ff_in),
            ff_out: g("ff.out", &self.ff_out),
        }
    }

    fn fields_mut(&mut self) -> [&mut P; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_in,
            &mut self.ff_out,
        ]
    }
}

impl<P> NormWeights<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> NormWeights<Q> {
        NormWeights {
            gain: f(&format!("{prefix}.gain"), &self.gain),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<P> Weights<P> {
    /// Structure-preserving map; `f` sees each leaf with its manifest name,
    /// always in the same order.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Weights<Q> {
        let token_embedding = f("token_embedding", &self.token_embedding);
        let begin = self
            .begin
            .iter()
            .enumerate()
            .map(|(i, b)| b.map(&format!("begin.{i}"), &mut f))
            .collect();
        let middle = self
            .middle
            .iter()
            .enumerate()
            .map(|(i, b)| b.map(&format!("middle.{i}"), &mut f))
            .collect();
        let end = self
            .end
            .iter()
            .enumerate()
            .map(|(i, b)| b.map(&format!("end.{i}"), &mut f))
            .collect();
        let repeat_norm = self.repeat_norm.as_ref().map(|n| n.map("repeat_norm", &mut f));
        let final_norm = self.final_norm.map("final_norm", &mut f);
        let unembedding = f("unembedding", &self.unembedding);
        let halt = self
            .router
            .halt
            .iter()
            .enumerate()
            .map(|(i, h)| f(&format!("router.halt.{}", i + 1), h))
            .collect();
        let depth = self.router.depth.as_ref().map(|d| f("router.depth", d));
        Weights {
            token_embedding,
            begin,
            middle,
            end,
            repeat_norm,
            final_norm,
            unembedding,
            router: RouterParams { halt, depth },
        }
    }

    /// `(name, leaf)` pairs in manifest order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        let mut refs: Vec<&P> = Vec::new();
        refs.push(&self.token_embedding);
        for b in self.begin.iter().chain(&self.middle).chain(&self.end) {
            refs.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.ff_in, &b.ff_out,
            ]);
        }
        if let Some(n) = &self.repeat_norm {
            refs.extend([&n.gain, &n.bias]);
        }
        refs.extend([&self.final_norm.gain, &self.final_norm.bias, &self.unembedding]);
        refs.extend(self.router.halt.iter());
        refs.extend(self.router.depth.iter());
        names.into_iter().zip(refs).collect()
    }

    /// Leaves in manifest order, mutably.
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = vec![&mut self.token_embedding];
        for b in self
            .begin
            .iter_mut()
            .chain(self.middle.iter_mut())
            .chain(self.end.iter_mut())
        {
            out.extend(b.fields_mut());
        }
        if let Some(n) = &mut self.repeat_norm {
            out.extend([&mut n.gain, &mut n.bias]);
        }
        out.extend([
            &mut self.final_norm.gain,
            &mut self.final_norm.bias,
            &mut self.unembedding,
        ]);
        out.extend(self.router.halt.iter_mut());
        out.extend(self.router.depth.iter_mut());
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    /// Rebuilds the structure from leaves given in manifest order.
    pub fn zip_leaves<Q: Clone>(&self, leaves: &[Q]) -> Weights<Q> {
        let mut it = leaves.iter();
        self.map(|_, _| it.next().expect("leaf count matches structure").clone())
    }
}

/// Shapes of every parameter for `cfg`.
pub fn layout(cfg: &ModelConfig) -> Weights<Vec<usize>> {
    let d = cfg.d_model;
    let block = || BlockWeights {
        ln1_gain: vec![d],
        ln1_bias: vec![d],
        wq: vec![d, d],
        wk: vec![d, d],
        wv: vec![d, d],
        wo: vec![d, d],
        ln2_gain: vec![d],
        ln2_bias: vec![d],
        ff_in: vec![d, cfg.d_ff],
        ff_out: vec![cfg.d_ff, d],
    };
    let norm = || NormWeights {
        gain: vec![d],
        bias: vec![d],
    };
    let n_halt = if cfg.adaptive { cfg.n_repeat - 1 } else { 0 };
    Weights {
        token_embedding: vec![cfg.vocab_size, d],
        begin: (0..cfg.n_begin).map(|_| block()).collect(),
        middle: (0..cfg.n_middle).map(|_| block()).collect(),
        end: (0..cfg.n_end).map(|_| block()).collect(),
        repeat_norm: cfg.ln_per_repeat.then(norm),
        final_norm: norm(),
        unembedding: vec![d, cfg.vocab_size],
        router: RouterParams {
            halt: (0..n_halt).map(|_| vec![d]).collect(),
            depth: cfg.depth_embedding.then(|| vec![d]),
        },
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Float> ModelParams<T> {
    /// Training initialisation: truncated normal (std 0.02, cut at 2σ) for
    /// matrices and the depth embedding, unit gains, zero biases, zero halt
    /// embeddings so every initial router score is exactly 0.5.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        layout(cfg).map(|name, shape| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if is_gain(name) {
                vec![T::ONE; n]
            } else if is_bias(name) || name.starts_with("router.halt") {
                vec![T::ZERO; n]
            } else {
                (0..n).map(|_| T::from_f64(truncated_normal(rng, 0.02))).collect()
            };
            Tensor::new(shape.clone(), data).expect("layout shape")
        })
    }

    /// Every parameter (gains, biases and router vectors included) drawn
    /// uniformly so that all code paths carry signal; used by oracle tests.
    pub fn random<R: Rng>(cfg: &ModelConfig, rng: &mut R, scale: f64) -> Self {
        layout(cfg).map(|name, shape| {
            let n: usize = shape.iter().product();
            let centre = if is_gain(name) { 1.0 } else { 0.0 };
            let data = (0..n)
                .map(|_| T::from_f64(centre + rng.random_range(-scale..scale)))
                .collect();
            Tensor::new(shape.clone(), data).expect("layout shape")
        })
    }

    /// Registers every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Weights<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    pub fn num_params(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        self.map(|_, t| t.cast())
    }

    /// Which leaves take weight decay: the 2-D matrices.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.leaves().iter().map(|t| t.shape().len() == 2).collect()
    }
}
