//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CTTCKPT\0"
//! u32 manifest length, manifest (TOML text, carries the format string)
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 rank, u32 per dim, f32 payload
//! u32 bank count, then per bank:
//!     u32 classes, u32 capacity, u32 dim,
//!     per class: u32 entry count, entries as f32
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ctt-checkpoint/1";
const MAGIC: &[u8; 8] = b"CTTCKPT\0";

/// Enough to rebuild a `ChaCha8Rng` at the exact same position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    pub seed: u64,
    pub stream: u64,
    /// Decimal u128 (TOML integers are 64-bit).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub iteration: usize,
    /// 1, or 2 once a self-training run has frozen its first-phase model.
    pub phase: u32,
    pub n_labeled: usize,
    pub tensors: usize,
    pub banks: usize,
    pub rng: Vec<RngState>,
    pub config: TrainConfig,
}

impl Manifest {
    fn summary(&self) -> String {
        format!(
            "format {}, iteration {}, topology {}, pairs {}, {} tensors, {} banks",
            self.format,
            self.iteration,
            self.config.topology.name(),
            self.config.pairs,
            self.tensors,
            self.banks
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub manifest: Manifest,
    pub tensors: Vec<NamedTensor>,
    pub banks: Vec<MemoryBank<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = n.checked_mul(4).ok_or("size overflow")?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = self.manifest.clone();
        manifest.format = CHECKPOINT_FORMAT.to_string();
        manifest.tensors = self.tensors.len();
        manifest.banks = self.banks.len();
        let text = toml::to_string(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(format!("tensor {} payload does not match shape", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, &t.data);
        }
        put_u32(&mut out, self.banks.len());
        for b in &self.banks {
            put_u32(&mut out, b.num_classes());
            put_u32(&mut out, b.capacity());
            put_u32(&mut out, b.dim());
            for c in 0..b.num_classes() {
                let q = b.queue(c);
                put_u32(&mut out, q.len());
                for v in q {
                    put_f32s(&mut out, v);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::integrity(path, reason);
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(MAGIC.len()).map_err(&bad)?;
        if magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mlen = r.u32().map_err(&bad)?;
        let mtext = r.take(mlen).map_err(&bad)?;
        let manifest: Manifest = std::str::from_utf8(mtext)
            .map_err(|e| e.to_string())
            .and_then(|s| toml::from_str(s).map_err(|e| e.to_string()))
            .map_err(|e| bad(format!("manifest unreadable: {e}")))?;
        let details = manifest.summary();
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format ({details})")));
        }
        if bytes.len() < 4 + r.pos {
            return Err(bad(format!("truncated ({details})")));
        }
        let body = &bytes[..bytes.len() - 4];
        let tail = &bytes[bytes.len() - 4..];
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if crc32fast::hash(body) != stored {
            return Err(bad(format!("checksum mismatch ({details})")));
        }
        let mut r = Reader { buf: body, pos: r.pos };
        let parse = |r: &mut Reader| -> std::result::Result<(Vec<NamedTensor>, Vec<MemoryBank<f32>>), String> {
            let nt = r.u32()?;
            let mut tensors = Vec::with_capacity(nt);
            for _ in 0..nt {
                let nlen = r.u16()?;
                let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| e.to_string())?;
                let rank = r.u8()? as usize;
                let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
                let data = r.f32s(shape.iter().product())?;
                tensors.push(NamedTensor { name, shape, data });
            }
            let nb = r.u32()?;
            let mut banks = Vec::with_capacity(nb);
            for _ in 0..nb {
                let (nc, cap, dim) = (r.u32()?, r.u32()?, r.u32()?);
                let mut bank = MemoryBank::new(nc, cap, dim).map_err(|e| e.to_string())?;
                for c in 0..nc {
                    let count = r.u32()?;
                    let flat = r.f32s(count * dim)?;
                    let rows: Vec<&[f32]> = flat.chunks_exact(dim.max(1)).collect();
                    bank.push(c, &rows).map_err(|e| e.to_string())?;
                }
                banks.push(bank);
            }
            if r.pos != r.buf.len() {
                return Err(format!("{} trailing bytes", r.buf.len() - r.pos));
            }
            Ok((tensors, banks))
        };
        let (tensors, banks) = parse(&mut r).map_err(|e| bad(format!("{e} ({details})")))?;
        if tensors.len() != manifest.tensors || banks.len() != manifest.banks {
            return Err(bad(format!("contents disagree with manifest ({details})")));
        }
        Ok(Archive {
            manifest,
            tensors,
            banks,
        })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes, path)
    }
}
