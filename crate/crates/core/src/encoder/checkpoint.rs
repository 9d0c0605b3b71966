//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QEF1"
//! u32 format version
//! u64 metadata length, then that many bytes of UTF-8 JSON
//! u64 array count, then per array:
//!     u32 name length, name bytes, u64 element count, f64 values
//! u32 CRC32 of everything between the magic and the checksum
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::models::{OutputMap, PoolingStrategy};

pub const MAGIC: &[u8; 4] = b"QEF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Mono,
    Siamese,
}

impl std::str::FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mono" => Ok(Self::Mono),
            "siamese" => Ok(Self::Siamese),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub best_eval_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ArchitectureKind,
    /// One config for mono and shared-weight siamese models, two otherwise.
    pub encoders: Vec<EncoderConfig>,
    pub pooling: PoolingStrategy,
    pub share_weights: bool,
    pub output_map: Option<OutputMap>,
    pub vocab: Vec<String>,
    pub training: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|a| a.name == name).map(|a| a.values.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata serialization: {e}")))?;
        let mut payload = Vec::new();
        payload.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        payload.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        payload.extend_from_slice(&meta);
        payload.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            payload.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            payload.extend_from_slice(a.name.as_bytes());
            payload.extend_from_slice(&(a.values.len() as u64).to_le_bytes());
            for v in &a.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&payload);
        let mut out = Vec::with_capacity(payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing QEF1 header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        if bytes.len() < 12 {
            return Err(corrupt("truncated"));
        }
        let (payload, crc) = bytes[4..].split_at(bytes.len() - 8);
        if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }

        let mut r = Reader { buf: payload, pos: 4 };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("array name is not UTF-8"))?
                .to_string();
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("array length overflow"))?)?;
            let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("non-finite weight"));
            }
            arrays.push(NamedArray { name, values });
        }
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { meta, arrays })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                kind: ArchitectureKind::Mono,
                encoders: vec![EncoderConfig::toy(10)],
                pooling: PoolingStrategy::Cls,
                share_weights: false,
                output_map: None,
                vocab: vec!["[CLS]".into(), "[SEP]".into(), "[PAD]".into(), "[UNK]".into()],
                training: TrainingMeta { seed: 3, epochs_run: 2, steps_run: 40, best_eval_loss: Some(0.1 + 0.2) },
            },
            arrays: vec![
                NamedArray { name: "a".into(), values: vec![1.0, -0.0, 1e-300, std::f64::consts::PI] },
                NamedArray { name: "bé".into(), values: vec![] },
            ],
        }
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.array("a").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 20;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch { found: 2, expected: 1 })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.qef");
        save_checkpoint(&sample(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::IoFailure { .. })));
    }
}
