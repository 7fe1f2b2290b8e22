//! Checkpoint files.
//!
//! ```text
//! "SSCK"  u16 version
//! u32 num_classes
//! u32 config_len, config text (key = value lines)
//! u32 param_count, then per parameter:
//!     u32 name_len, name, u32 rank, rank × u32 extents, little-endian f64 values
//! ```
//!
//! All integers are little-endian. Loading rebuilds the model from the
//! stored config and requires every parameter name and shape to match it.

use std::collections::BTreeSet;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.num_classes);
    let cfg = model.cfg.to_text();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name().len());
        out.extend_from_slice(p.name().as_bytes());
        let t = p.tensor();
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("text is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let num_classes = r.u32()?;
    let cfg = ModelConfig::parse(r.text()?).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    let mut model = Model::new(cfg, num_classes).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("{count} parameters stored, model has {}", model.store.len())));
    }
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let id = model.store.id_of(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("parameter {name} stored twice")));
        }
        let t = model.store.get_mut(id).tensor_mut();
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter {name}: stored shape {shape:?}, model expects {:?}", t.shape())));
        }
        let raw = r.take(8 * t.len())?;
        for (dst, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
