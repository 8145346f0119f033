//! Minimal differentiable network stack and the encoder/decoder/predictor
//! architectures built on it.

mod checkpoint;
mod graph;
mod layout;
mod model;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, NormStats,
};
pub use graph::{Gradients, Graph, Var};
pub use layout::{LatentCode, LatentLayout};
pub use model::{
    build_decoder, build_encoder, build_predictor, check_params, forward_decoder, forward_encoder,
    forward_predictor, init_params, lstm_layer, NetConfig, Network, ParamSpec, SpecKind, LEAKY_SLOPE,
};
pub use params::{Grads, Param, ParamStore};
