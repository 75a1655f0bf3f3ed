//! Versioned binary model container.
//!
//! ```text
//! "SLMF" | version u32 | digest (len u32 + hex) | config JSON (len u32 + bytes)
//! | header JSON (tokenizer, norm stats, meta) | tensor count u32
//! | per tensor: name (len u32 + utf8), dtype u8, flags u8, ndim u32,
//!   dims u64 × ndim, little-endian payload
//! ```
//! Integers are little-endian. The digest is recomputed from the embedded
//! config on load; a mismatch is a hard error.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frontend::NormStats;
use crate::numcore::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SLMF";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const FLAG_TRAINABLE: u8 = 1;
const FLAG_EXTRA: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tokenizer: Vec<String>,
    norm: NormStats,
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokenizer: Vec<String>,
    pub norm: NormStats,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamStore<f32>,
    /// Non-model tensors such as optimizer moments.
    pub extra: BTreeMap<String, Tensor<f32>>,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, flags: u8, t: &Tensor<f32>) {
    put_bytes(out, name.as_bytes());
    out.push(DTYPE_F32);
    out.push(flags);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        self.config.digest()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.digest().as_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.config).expect("config serializes"));
        let header = Header {
            tokenizer: self.tokenizer.clone(),
            norm: self.norm.clone(),
            meta: self.meta.clone(),
        };
        put_bytes(&mut out, &serde_json::to_vec(&header).expect("header serializes"));
        let count = self.params.len() + self.extra.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            put_tensor(&mut out, name, if p.trainable { FLAG_TRAINABLE } else { 0 }, &p.tensor);
        }
        for (name, t) in &self.extra {
            put_tensor(&mut out, name, FLAG_EXTRA, t);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stored = c.string()?;
        let config: ModelConfig = serde_json::from_slice(c.bytes()?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let expected = config.digest();
        if stored != expected {
            return Err(Error::DigestMismatch { stored, expected });
        }
        let header: Header = serde_json::from_slice(c.bytes()?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = c.u32()?;
        let mut params = ParamStore::new();
        let mut extra = BTreeMap::new();
        for _ in 0..count {
            let name = c.string()?;
            let dtype = c.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let flags = c.u8()?;
            let ndim = c.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if flags & FLAG_EXTRA != 0 {
                extra.insert(name, t);
            } else {
                params.insert(name, t, flags & FLAG_TRAINABLE != 0);
            }
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Checkpoint {
            config,
            tokenizer: header.tokenizer,
            norm: header.norm,
            meta: header.meta,
            params,
            extra,
        })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Load and require a specific config digest.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config != *expected {
            return Err(Error::DigestMismatch {
                stored: ck.digest(),
                expected: expected.digest(),
            });
        }
        Ok(ck)
    }
}

/// SHA-256 of the serialized checkpoint file.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
