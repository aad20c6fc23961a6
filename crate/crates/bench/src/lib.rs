//! Shared fixtures for the criterion benchmarks.

use cotformer_core::train::{rng_for, Stream};
use cotformer_core::{ModelConfig, ModelParams, Variant};

/// A small `1→2xR→1` model with initial weights for `variant`; the
/// standard model gets the same four stored layers untied.
pub fn fixture(variant: Variant, n_repeat: usize, seq_len: usize) -> (ModelConfig, ModelParams<f32>) {
    let cfg = match variant {
        Variant::Standard => ModelConfig::standard(4, 64, 4, 256, seq_len),
        _ => {
            let mut c = ModelConfig::new(variant, (1, 2, 1), n_repeat, 64, 4, 256, seq_len);
            c.ln_per_repeat = true;
            c
        }
    };
    let params = ModelParams::init(&cfg, &mut rng_for(0, Stream::Init));
    (cfg, params)
}

/// Deterministic token ids.
pub fn tokens(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 131 + 7) % 256).collect()
}
