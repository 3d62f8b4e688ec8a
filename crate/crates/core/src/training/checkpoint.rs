//! "CKP1" checkpoints: the magic `CKP1`, a little-endian `u32` format version,
//! a `u32`-length-prefixed UTF-8 architecture config, a `u32` record count,
//! then per record a `u32`-length-prefixed UTF-8 name and a T4F1 tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ArchConfig, ModelGraph};
use crate::tensor::{read_t4f1_from, write_t4f1_to, Tensor4};

pub const CKP1_MAGIC: &[u8; 4] = b"CKP1";
pub const CKP1_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Unsupported {
        format: "CKP1",
        detail: format!("length {v} exceeds u32"),
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &ModelGraph<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKP1_MAGIC);
    out.extend_from_slice(&CKP1_VERSION.to_le_bytes());
    let cfg = model.cfg.to_text();
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(cfg.as_bytes());
    let records = model.named_tensors();
    put_u32(&mut out, records.len())?;
    for (name, t) in &records {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        write_t4f1_to(&mut out, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("CKP1", self.bytes.len(), format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let len = self.u32(what)?;
        let at = self.pos;
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| Error::format("CKP1", at, format!("{what} is not UTF-8")))
    }
}

/// Architecture config and named tensors of a checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ArchConfig, BTreeMap<String, Tensor4<f32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKP1_MAGIC {
        return Err(Error::format("CKP1", 0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CKP1_VERSION as usize {
        return Err(Error::Unsupported {
            format: "CKP1",
            detail: format!("format version {version}"),
        });
    }
    let cfg = ArchConfig::parse(r.text("config")?)?;
    let count = r.u32("record count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let name = r.text("record name")?.to_string();
        let (t, used) = read_t4f1_from(&bytes[r.pos..], r.pos)?;
        r.pos += used;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format("CKP1", at, format!("duplicate record '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("CKP1", r.pos, "trailing bytes after last record"));
    }
    Ok((cfg, tensors))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelGraph<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model described by a checkpoint and loads its tensors.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint(&bytes)
}

pub fn model_from_checkpoint(bytes: &[u8]) -> Result<ModelGraph<f32>> {
    let (cfg, tensors) = decode_checkpoint(bytes)?;
    let mut model = ModelGraph::build(&cfg, 0)?;
    model.load_named(&tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tensor::Shape4;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = ModelGraph::build(&ArchConfig::simple_unet(8), 11).unwrap();
        let x = Tensor4::from_fn(Shape4::new(2, 3, 16, 16), |n, c, y, x| {
            ((n + 3 * c + 5 * y + 7 * x) % 13) as f32 / 13.0
        });
        m.forward(&x, Mode::Train).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = model_from_checkpoint(&bytes).unwrap();
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let m = ModelGraph::build(&ArchConfig::simple_unet(8), 0).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode_checkpoint(&ver), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn rejects_incompatible_shapes() {
        let m = ModelGraph::build(&ArchConfig::simple_unet(8), 0).unwrap();
        let (_, tensors) = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        let mut other = ModelGraph::build(&ArchConfig::simple_unet(16), 0).unwrap();
        assert!(other.load_named(&tensors).is_err());
    }
}
