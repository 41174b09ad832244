//! SHA-256 content digests used for checkpoint integrity and phase lineage.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental hasher over named f32 tensors.
///
/// The byte stream is `name_len | name | ndim | dims | data` per tensor, all
/// little-endian, so the digest is independent of platform endianness.
#[derive(Default)]
pub struct TensorHasher {
    inner: Sha256,
}

impl TensorHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f32>) {
        self.inner.update((name.len() as u64).to_le_bytes());
        self.inner.update(name.as_bytes());
        self.inner.update((shape.len() as u64).to_le_bytes());
        for &d in shape {
            self.inner.update((d as u64).to_le_bytes());
        }
        for v in data {
            self.inner.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.inner.finalize())
    }
}
