//! Versioned binary container for named tensors plus a JSON config blob.
//!
//! Layout, little-endian:
//!
//! ```text
//! b"SQPR"  u32 version
//! u32 config_len   config_len bytes of UTF-8 JSON
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank × u32 dims, numel × f64
//! ```
//!
//! Payloads are f64 so that a saved model resumes bit-for-bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQPR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&self.config)?;
        put_u32(&mut out, len_u32(cfg.len())?);
        out.extend_from_slice(&cfg);
        put_u32(&mut out, len_u32(self.tensors.len())?);
        for (name, t) in &self.tensors {
            put_u32(&mut out, len_u32(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len_u32(t.rank())?);
            for &d in t.shape() {
                put_u32(&mut out, len_u32(d)?);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let cfg_len = r.u32()? as usize;
        let at = r.pos;
        let config = serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Format {
            offset: at,
            message: format!("config blob: {e}"),
        })?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format {
                    offset: at,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32()? as usize;
            let at = r.pos;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| rank > 0 && n > 0)
                .ok_or_else(|| Error::Format {
                    offset: at,
                    message: format!("bad shape {shape:?} for tensor {name}"),
                })?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.eof(usize::MAX))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("length {n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn eof(&self, want: usize) -> Error {
        Error::Format {
            offset: self.pos,
            message: format!(
                "unexpected end of file: needed {want} bytes, {} left",
                self.bytes.len() - self.pos
            ),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.eof(n));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: json!({"m": 3, "name": "x"}),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![0.1, -2.0, 1e-300, f64::MAX]).unwrap()),
                ("b.bias".into(), Tensor::new(vec![3], vec![1.0 / 3.0, 0.0, -0.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.tensor("a").unwrap()), bits(sample().tensor("a").unwrap()));
        assert_eq!(back.config, sample().config);
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"SQPR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample().encode().unwrap();
        bytes[4] = 7;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn corruption_is_format_error() {
        let bytes = sample().encode().unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[0] = b'Z';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
