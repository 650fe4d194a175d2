//! Checkpoint serialization: named f32 tensors in a flat little-endian
//! container. Records are sorted by name on write so identical parameter
//! sets produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RCPT";
const CHECKPOINT_VERSION: u8 = 1;

pub fn save_checkpoint(path: &Path, params: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    for (name, t) in params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", format!("bad magic {magic:02x?}")));
    }
    let version = cur.bytes(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut params = BTreeMap::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.bytes(name_len)?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::format("checkpoint", format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = cur.bytes(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate parameter {name}")));
        }
    }
    Ok(params)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> BTreeMap<String, Tensor<f32>> {
        let mut p = BTreeMap::new();
        p.insert("enc.w".to_string(), Tensor::new([2, 3], vec![0.5, -1.25, 3.0, 0.0, f32::MIN_POSITIVE, 9.75]).unwrap());
        p.insert("enc.b".to_string(), Tensor::new([3], vec![1e-8, -0.0, 2.5]).unwrap());
        p.insert("dec.alpha".to_string(), Tensor::new([], vec![1.0]).unwrap());
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rcpt");
        let params = sample_params();
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), params.len());
        for (name, t) in &params {
            assert!(back[name].bit_eq(t), "{name} changed across save/load");
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.rcpt"), dir.path().join("b.rcpt"));
        save_checkpoint(&p1, &sample_params()).unwrap();
        save_checkpoint(&p2, &sample_params()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rcpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rcpt");
        save_checkpoint(&path, &sample_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }
}
