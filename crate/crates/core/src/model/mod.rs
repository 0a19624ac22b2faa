//! The sparse mixture-of-experts Fourier operator: patch embedding,
//! complex temporal aggregation, blocks of frequency-domain mixing plus
//! routed experts, and a per-token decoder head.

mod config;
mod forward;
mod gate;
mod layers;
mod params;

pub use config::{Activation, ModelConfig};
pub use forward::{
    decode, forward, forward_batch, forward_tape, fourier_mix, moe_combine, patchify, route, stack, temporal_aggregate,
    ForwardTrace,
};
pub use gate::{balance_loss, cv_squared, select_top_k, softmax, GateDecision, MoeStats};
pub use layers::NORM_EPS;
pub use params::{
    count_params, is_router_tensor, shapes, Block, Decoder, DecoderParams, Expert, ExpertParams, FourierLayer,
    FourierLayerParams, Model, ModelParams, ModelVars, Norm, ParamCount, PatchEmbed, PatchEmbedParams, Router,
    RouterParams, TemporalAgg, TemporalAggParams,
};
