//! Encoders, the singer table, conditioning interpolation and the
//! autoregressive decoder.

mod decoder;
mod encoder;
mod features;
mod interp;

pub use decoder::{
    argmax, code_input_value, log_softmax_columns, reconstruction_loss, sample_logits, CondDims,
    CondGrads, CondStream, ConditioningBundle, DecoderCache, DecoderSpec, GenerationMode,
    WaveNetDecoder,
};
pub use encoder::{ContentEncoder, Encoded, EncoderCache, EncoderSpec};
pub use features::{
    FeatureCache, FeatureEncoder, FeatureEncoderSpec, SingerTable, F0_INPUT_SCALE_HZ,
    FEATURE_DILATIONS,
};
pub use interp::{interpolate_range, interpolate_range_backward, interpolate_to_length};
