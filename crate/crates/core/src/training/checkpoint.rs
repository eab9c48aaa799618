//! Binary checkpoints.
//!
//! ```text
//! "INSG" | u32 version | u64 n | n × tensor      parameters
//!                      | u64 m | m × tensor      optimizer moments
//!                      | u64 step | u64 epoch | u64 seed
//! tensor = u32 name_len | name (UTF-8) | u32 rank | rank × u64 dim | f32 payload
//! ```
//! All integers and floats are little-endian. Moments are stored as
//! `<param>.m` / `<param>.v`; the optimizer step counter is the metadata step.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"INSG";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub moments: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

fn put_tensors(buf: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_tensors(&mut buf, &self.params);
        put_tensors(&mut buf, &self.moments);
        for v in [self.meta.step, self.meta.epoch, self.meta.seed] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let params = r.tensors()?;
        let moments = r.tensors()?;
        let meta = CheckpointMeta {
            step: r.u64("metadata")?,
            epoch: r.u64("metadata")?,
            seed: r.u64("metadata")?,
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            moments,
            meta,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>, CheckpointError> {
        let n = self.u64("tensor count")?;
        let mut out = Vec::new();
        for _ in 0..n {
            let len = self.u32("name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "name")?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = self.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64("dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: dims overflow")))?;
            let raw = self.take(numel, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(&ckpt.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: vec![
                (
                    "w".into(),
                    Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, -0.0, 1e-30]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(7.0)),
            ],
            moments: vec![("w.m".into(), Tensor::zeros(&[2, 3]))],
            meta: CheckpointMeta {
                step: 12,
                epoch: 3,
                seed: 42,
            },
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta, c.meta);
        assert!(back.params[0].1.bit_eq(&c.params[0].1));
    }

    #[test]
    fn corruption_is_distinct() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"IN"),
            Err(CheckpointError::BadMagic)
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadVersion(9))
        ));
        for cut in [10, 30, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated(_))
            ));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn atomic_save_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let first = std::fs::read(&p).unwrap();
        save_checkpoint(&p, &load_checkpoint(&p).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }
}
