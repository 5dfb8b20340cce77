//! Differentiable tensor engine and transformer building blocks.

mod graph;
mod kernels;
mod layers;

pub use graph::{Graph, Tensor, Var};
pub use kernels::conv_out_len;
pub use layers::{
    gqa_attention, gqa_attention_eval, gqa_attention_traced, projection_unit, rope_apply, token_scale, Activation,
    AttentionConfig, AttentionVars, AttentionWeights, ConvVars, ProjectionGeometry, ProjectionVars, Resample,
    ROPE_BASE,
};
