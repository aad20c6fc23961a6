use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How later repeats see earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain causal transformer, every layer applied once.
    Standard,
    /// Tied stack repeated; pass `r` attends to pass-`r` states only.
    BlockUniversal,
    /// Tied stack repeated; pass `r` attends to every earlier pass of earlier tokens.
    Cotformer,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::BlockUniversal => "block_universal",
            Variant::Cotformer => "cotformer",
        }
    }
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
///
/// Layers run as `n_begin` fixed blocks, then the tied `n_middle` blocks
/// `n_repeat` times, then `n_end` fixed blocks (written `2→4x3→1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default)]
    pub n_begin: usize,
    pub n_middle: usize,
    #[serde(default)]
    pub n_end: usize,
    pub n_repeat: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub ln_per_repeat: bool,
    #[serde(default)]
    pub depth_embedding: bool,
    /// Whether a token's later passes attend to its own earlier passes.
    #[serde(default = "default_true")]
    pub self_history: bool,
    #[serde(default)]
    pub adaptive: bool,
}

impl ModelConfig {
    /// A config with `d_ff = 4·d_model`, all flags off except `self_history`.
    pub fn new(
        variant: Variant,
        (n_begin, n_middle, n_end): (usize, usize, usize),
        n_repeat: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            variant,
            n_begin,
            n_middle,
            n_end,
            n_repeat,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len,
            ln_per_repeat: false,
            depth_embedding: false,
            self_history: true,
            adaptive: false,
        }
    }

    /// Standard transformer with `n_layer` untied layers.
    pub fn standard(n_layer: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self::new(Variant::Standard, (0, n_layer, 0), 1, d_model, n_heads, vocab_size, max_seq_len)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Blocks stored in the parameter set (independent of `n_repeat`).
    pub fn stored_layers(&self) -> usize {
        self.n_begin + self.n_middle + self.n_end
    }

    /// Block applications per token at full depth.
    pub fn effective_depth(&self) -> usize {
        self.n_begin + self.n_middle * self.n_repeat + self.n_end
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_repeat", self.n_repeat),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.n_middle == 0 {
            return bad("n_middle must be at least 1".into());
        }
        match self.variant {
            Variant::Standard => {
                if self.n_repeat != 1 || self.n_begin != 0 || self.n_end != 0 {
                    return bad("standard variant requires n_repeat=1 and n_begin=n_end=0".into());
                }
                if self.adaptive {
                    return bad("standard variant cannot be adaptive".into());
                }
            }
            Variant::BlockUniversal | Variant::Cotformer => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        let ok = ModelConfig::new(Variant::Cotformer, (2, 4, 1), 3, 16, 2, 32, 8);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.d_ff, 64);
        assert_eq!(ok.effective_depth(), 15);

        let mut c = ok.clone();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.n_repeat = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::standard(4, 16, 2, 32, 8);
        assert!(c.validate().is_ok());
        c.n_repeat = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::standard(4, 16, 2, 32, 8);
        c.n_begin = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_defaults() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"variant":"cotformer","n_middle":2,"n_repeat":3,"d_model":8,"n_heads":2,
                "d_ff":32,"vocab_size":10,"max_seq_len":4}"#,
        )
        .unwrap();
        assert!(c.self_history);
        assert!(!c.adaptive);
        assert_eq!(c.n_begin, 0);
    }
}
