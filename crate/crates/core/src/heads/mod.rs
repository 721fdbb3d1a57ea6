//! Task heads on top of the encoders: the masked-atom denoise decoder,
//! a property regressor and a prefix-conditioned caption decoder.

mod caption;
mod denoise;
mod property;

pub use caption::{
    caption_generate, caption_sequence, caption_teacher_forced_loss, decoder_logits, CaptionConfig,
    GEOM_PREFIX,
};
pub use denoise::{predict_masked, DenoiseHeadConfig, MaskedPrediction};
pub use property::{
    predict_property, property_loss, property_output, NormStats, PropertyHeadConfig,
};
