//! Decoder-only language model, frozen vision encoder and the projection
//! between them.

pub mod checkpoint;
mod config;
mod decoder;
mod infer;
mod params;
pub mod vision;

pub use checkpoint::Checkpoint;
pub use config::{count_parameters, ModelConfig, ParameterCount, VISION_SEED};
pub use decoder::{
    forward_lm, forward_multimodal, forward_multimodal_features, is_linear_weight, project, Bound, LowRank,
};
pub use infer::IncrementalDecoder;
pub use params::{is_frozen, ModelParams, ParamGroup};
pub use vision::{encode_grouped, encode_image, group_tokens};
