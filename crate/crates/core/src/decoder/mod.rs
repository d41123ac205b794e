mod model;
mod score;

pub use model::{
    decoder_forward, decoder_layer, sine_encoding, sine_point_encoding, Decoder, DecoderConfig, DecoderLayer, DecoderOutput, Heads, LayerOutput,
    LayerStep, Memory, ObjectQuerySet, CLASS_PRIOR_BIAS, QUERY_CONTENT_STD,
};
pub use score::{compute_centerness, location_aware_score, postprocess, validate_score_weights, Detection, Prediction};
