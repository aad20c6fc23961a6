//! Weight-tied repeated transformers: configuration, parameters, attention
//! masks, the batched forward and a token-by-token decoder.

mod config;
mod decode;
mod forward;
mod mask;
mod params;

pub use config::{ModelConfig, Variant};
pub use decode::{argmax, incremental_decode, DecodeOutput, Gate, IncrementalDecoder};
pub use forward::{
    apply_depth_embedding, block_stack_forward, but_forward, cotformer_forward, forward, forward_values,
    standard_forward, ForwardOutput, ForwardValues, KvEntry, KvStore, PassRecord, PassState, LN_EPS,
};
pub use mask::{build_mask, AttentionMask, Participation, Slot};
pub use params::{layout, BlockWeights, ModelParams, NormWeights, RouterParams, Weights};
