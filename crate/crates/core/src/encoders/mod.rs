//! Visual tokens from images or feature blobs, and attribute query
//! embeddings from prompt sentences.

mod blob;
mod image;
mod text;
mod visual;

pub use blob::{
    decode_feature_blob, encode_feature_blob, load_feature_blob, write_feature_blob, BLOB_MAGIC, BLOB_VERSION,
};
pub use image::{augment, pad_square, pad_to_square, RawImage};
pub use text::{text_encode_attribute, tokenize, WordIndex, UNK_WORD};
pub use visual::{patch_pixels, VisualEncoder, VisualEncoderConfig};
