//! The T5 1.1-style encoder-decoder and its 1decT5 and EncT5 variants.

mod config;
mod forward;
mod params;
mod relpos;

pub use config::{ModelConfig, TaskKind, Variant};
pub use forward::{
    decoder_forward, encoder_forward, enct5_forward, example_logits, forward, loss, predict_class, DecoderOutput,
    EncoderOutput, HeadOutput, ModelOutput,
};
pub use params::{
    canonical_shapes, count_parameters, init_param, layer_prefix, Bound, ParamCount, ParameterStore, BOS_EMBEDDING,
    EMBEDDING, LM_HEAD, PROJECTION_BIAS, PROJECTION_KERNEL,
};
pub use relpos::{bucket_matrix, relative_position_bucket};
