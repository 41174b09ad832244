//! `ssckpt-v1` binary container.
//!
//! ```text
//! "ssckpt-v1\n"
//! u64 len, config JSON
//! u64 record count
//! per record: u32 name len, name, u8 dtype (0 = f32), u32 ndim, u64 dims…, f32 LE data
//! u64 len, metadata JSON
//! 32-byte SHA-256 of every preceding byte
//! ```
//! All integers are little-endian. Records are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"ssckpt-v1\n";
const DTYPE_F32: u8 = 0;

/// Parameters plus auxiliary tensors (optimizer moments) and free-form
/// metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub extra: BTreeMap<String, Tensor<f32>>,
    pub meta: serde_json::Value,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let cfg = serde_json::to_vec(self.params.config())?;
        out.extend((cfg.len() as u64).to_le_bytes());
        out.extend(&cfg);
        let count = self.params.iter().count() + self.extra.len();
        out.extend((count as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t);
        }
        for (name, t) in &self.extra {
            put_record(&mut out, name, t);
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        let digest = Sha256::digest(&out);
        out.extend(digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if !bytes.starts_with(MAGIC) {
            return Err(corrupt("bad magic".into()));
        }
        if bytes.len() < MAGIC.len() + 32 {
            return Err(corrupt("truncated".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != footer {
            return Err(corrupt("content digest mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let parse = |r: &mut Reader| -> std::result::Result<Checkpoint, String> {
            let n = r.u64()? as usize;
            let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| e.to_string())?;
            let count = r.u64()? as usize;
            let mut params = BTreeMap::new();
            let mut extra = BTreeMap::new();
            for _ in 0..count {
                let n = r.u32()? as usize;
                let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| e.to_string())?;
                if r.take(1)?[0] != DTYPE_F32 {
                    return Err(format!("unsupported dtype for `{name}`"));
                }
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let len: usize = shape.iter().product();
                let data = r
                    .take(len.checked_mul(4).ok_or("tensor too large")?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
                let slot = if name.starts_with("optim.") { &mut extra } else { &mut params };
                if slot.insert(name.clone(), t).is_some() {
                    return Err(format!("duplicate record `{name}`"));
                }
            }
            let n = r.u64()? as usize;
            let meta = serde_json::from_slice(r.take(n)?).map_err(|e| e.to_string())?;
            if r.pos != r.buf.len() {
                return Err("trailing bytes before footer".into());
            }
            let params = ModelParams::from_tensors(config, params).map_err(|e| e.to_string())?;
            Ok(Checkpoint { params, extra, meta })
        };
        parse(&mut r).map_err(corrupt)
    }

    /// Atomic write; returns the SHA-256 of the file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("unexpected end of data at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = ModelParams::init(&ModelConfig::toy(300), 9).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("optim.m.tok_emb".to_string(), Tensor::full([300, 16], 0.5f32));
        Checkpoint {
            params,
            extra,
            meta: serde_json::json!({"val_loss": 1.25, "step": 50}),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.digest(), ck.params.digest());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn footer_is_sha256_of_body() {
        let bytes = sample().to_bytes().unwrap();
        let (body, footer) = bytes.split_at(bytes.len() - 32);
        assert_eq!(crate::digest::sha256_hex(body), hex::encode(footer));
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 100], p),
            Err(Error::Corrupt { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, p), Err(Error::Corrupt { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nope", p), Err(Error::Corrupt { .. })));
    }
}
