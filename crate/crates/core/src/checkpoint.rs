//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `b"DPIN"`, `u32` version, `u64` length + UTF-8 config text, then until
//! end of file per tensor: `u64` length + UTF-8 name, `u32` rank, `u64` per
//! dimension and `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParameterSet, Tensor};
use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};

pub const MAGIC: &[u8; 4] = b"DPIN";
pub const VERSION: u32 = 1;

fn config_text(model: &Model) -> String {
    format!("variant = {}\n{}", model.variant.tag(), model.config.render())
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(model);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::io(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| Error::io(format!("bad length for {what}")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::io(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::io("not a checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::io(format!("checkpoint version {version}, this build reads {VERSION}")));
    }
    let text = c.text("config")?;
    let cfg_file = ConfigFile::parse(&text).map_err(|e| Error::io(format!("embedded config: {e}")))?;
    let root = cfg_file.section("");
    let variant: Variant =
        root.raw("variant").ok_or_else(|| Error::io("embedded config lacks a variant"))?.parse()?;
    let config = ModelConfig::from_section(&root).map_err(|e| Error::io(format!("embedded config: {e}")))?;

    let mut params = ParameterSet::new();
    while c.at < bytes.len() {
        let name = c.text("tensor name")?;
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::io(format!("tensor '{name}' has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.len("dimension")?);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::io("tensor too large"))?, "values")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    // a file cut at a tensor boundary parses cleanly but lacks tensors
    Model::from_parts(config, variant, params).map_err(|e| Error::io(format!("checkpoint contents: {e}")))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let bytes = encode_checkpoint(model);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
