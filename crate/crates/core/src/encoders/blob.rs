//! Feature blobs: externally extracted visual tokens.
//!
//! Layout (little-endian): `b"SQFB"`, `u32` version, `u32` rows, `u32` cols,
//! then `rows × cols` `f32` values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"SQFB";
pub const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Serializes a `rows × cols` tensor. Values are narrowed to `f32`.
pub fn encode_feature_blob(tokens: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = tokens.dims2()?;
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in tokens.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_blob(bytes: &[u8], expected_cols: Option<usize>) -> Result<Tensor> {
    let format = |offset: usize, message: String| Error::Format { offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(format(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != BLOB_MAGIC {
        return Err(format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != BLOB_VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows == 0 || cols == 0 {
        return Err(format(8, format!("empty shape {rows}x{cols}")));
    }
    if let Some(want) = expected_cols {
        if want != cols {
            return Err(Error::shape("feature blob width", &[rows, cols], &[rows, want]));
        }
    }
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(format(
            bytes.len().min(expected),
            format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn write_feature_blob(path: &Path, tokens: &Tensor) -> Result<()> {
    let bytes = encode_feature_blob(tokens)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_feature_blob(path: &Path, expected_cols: Option<usize>) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_blob(&bytes, expected_cols)
}
