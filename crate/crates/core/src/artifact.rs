// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hashing, seed splitting and binary container helpers shared by every
//! on-disk artifact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{MesaError, Result};

/// A SHA-256 content hash.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl std::fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Hash32({})", self.short())
    }
}

impl std::fmt::Display for Hash32 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.hex())
    }
}

impl serde::Serialize for Hash32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.hex())
    }
}

impl<'de> serde::Deserialize<'de> for Hash32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash32::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

/// Derives a stage seed from the master seed and a stage label.
///
/// `seed_k = first 8 bytes (LE) of SHA-256(master_le ‖ label)`.
pub fn split_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seeded RNG for a `(seed, label)` pair.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, label))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| MesaError::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| MesaError::input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| MesaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| MesaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| MesaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| MesaError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MesaError::io(path, e))
}

/// Little-endian binary writer.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f32(v);
        }
    }

    /// u32 length prefix followed by the bytes.
    pub fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }

    pub fn hash(&mut self, h: &Hash32) {
        self.bytes(&h.0);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian binary reader with positioned error messages.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], origin: &'a Path) -> Self {
        Self { buf, pos: 0, origin }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MesaError::format(
                self.origin,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != magic {
            return Err(MesaError::format(
                self.origin,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    pub fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(self.take(4)?.try_into().expect("4"))))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn hash(&mut self) -> Result<Hash32> {
        Ok(Hash32(self.take(32)?.try_into().expect("32")))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(MesaError::format(
                self.origin,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }

    pub fn error(&self, reason: impl Into<String>) -> MesaError {
        MesaError::format(self.origin, reason)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_split_is_stable_and_label_sensitive() {
        assert_eq!(split_seed(7, "world"), split_seed(7, "world"));
        assert_ne!(split_seed(7, "world"), split_seed(7, "model"));
        assert_ne!(split_seed(7, "world"), split_seed(8, "world"));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        atomic_write(&p, b"hello").unwrap();
        atomic_write(&p, b"world").unwrap();
        assert_eq!(read_file(&p).unwrap(), b"world");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn reader_reports_truncation() {
        let mut w = ByteWriter::new();
        w.u32(5);
        let bytes = w.into_inner();
        let mut r = ByteReader::new(&bytes, Path::new("x"));
        assert_eq!(r.u32().unwrap(), 5);
        assert!(matches!(r.u64(), Err(MesaError::Format { .. })));
    }
}
