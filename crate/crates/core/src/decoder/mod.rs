//! Masked transformer decoder over the closed attribute vocabulary.

mod mask;
mod model;

pub use mask::{build_mask, MaskMatrix, MaskStrategy};
pub use model::{DecoderConfig, DecoderOutput, ForwardVars, ModelConfig, SeqAttrModel, VisualInput, VisualSource};
