//! Weight file codec.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "ADVSHLD1"
//! version    u32
//! seed       u64
//! models     u32
//! per model: name_len u16, name, tensors u32,
//!            per tensor: name_len u16, name, rank u32, dims u32 × rank
//! payload    f64 × total parameter count, in layer-table order
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{init_models, ModelBundle};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADVSHLD1";
pub const FORMAT_VERSION: u32 = 1;

/// Lower-case hex SHA-256 of `bytes`.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::WeightFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::WeightFormat("non-UTF-8 name".into()))
    }
}

/// Model name with its tensor names and shapes.
type LayerShapes = (String, Vec<(String, Vec<usize>)>);

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let table = self.layer_table();
        let mut out = Vec::with_capacity(64 + 8 * self.parameter_count());
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        out.extend((table.len() as u32).to_le_bytes());
        for (model, tensors) in &table {
            put_name(&mut out, model);
            out.extend((tensors.len() as u32).to_le_bytes());
            for (name, t) in tensors {
                put_name(&mut out, name);
                out.extend((t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend((d as u32).to_le_bytes());
                }
            }
        }
        for (_, tensors) in &table {
            for (_, t) in tensors {
                for v in t.data() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a weight file. The layer table must match this build's
    /// architecture exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::WeightFormat(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let seed = r.u64()?;
        let mut bundle = init_models(seed);
        let expected: Vec<LayerShapes> = bundle
            .layer_table()
            .into_iter()
            .map(|(m, ts)| {
                let ts = ts
                    .into_iter()
                    .map(|(n, t)| (n, t.shape().to_vec()))
                    .collect();
                (m.to_string(), ts)
            })
            .collect();
        let models = r.u32()? as usize;
        if models != expected.len() {
            return Err(Error::WeightFormat(format!(
                "expected {} models, found {models}",
                expected.len()
            )));
        }
        for (model, tensors) in &expected {
            let name = r.name()?;
            if &name != model {
                return Err(Error::WeightFormat(format!(
                    "expected model {model}, found {name}"
                )));
            }
            let count = r.u32()? as usize;
            if count != tensors.len() {
                return Err(Error::WeightFormat(format!(
                    "{model}: expected {} tensors, found {count}",
                    tensors.len()
                )));
            }
            for (tname, shape) in tensors {
                let found = r.name()?;
                let rank = r.u32()? as usize;
                let dims = (0..rank)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                if &found != tname || &dims != shape {
                    return Err(Error::WeightFormat(format!(
                        "{model}: expected {tname} {shape:?}, found {found} {dims:?}"
                    )));
                }
            }
        }
        for t in bundle.tensors_mut() {
            for v in t.data_mut() {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(bundle)
    }

    /// Writes the weight file and returns its digest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(digest_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn digest(&self) -> String {
        digest_hex(&self.to_bytes())
    }
}
