//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "GLSACKPT"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor, in lexicographic name order:
//!   name_len u16, name (UTF-8), rank u8, dims u32 x rank, data f32 x numel
//! ```
//!
//! Round-trips are bit-exact; malformed files are rejected with the byte
//! offset of the failure.

use super::atomic_write;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"GLSACKPT";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: r.pos - 4,
            message: format!("unsupported version {version}, want {VERSION}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_off = r.pos;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format { offset: name_off, message: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data_off = r.pos;
        let raw = r.take(numel * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format { offset: data_off, message: e.to_string() })?
            .with_grad();
        if params.get(&name).is_some() {
            return Err(Error::Format {
                offset: name_off,
                message: format!("duplicate tensor name {name:?}"),
            });
        }
        params.insert(&name, tensor).expect("checked for duplicate");
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        });
    }
    Ok(params)
}

pub fn save(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    atomic_write(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ParamSet<f32>> {
    decode(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("truncated while reading {what} ({n} bytes at offset {})", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_param_set_is_sixteen_bytes() {
        let bytes = encode(&ParamSet::new());
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn single_tensor_payload_matches_hand_assembled_bytes() {
        // "w", shape [2,2], values [1,2,3,4]
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let got = encode(&p);

        let mut want = Vec::new();
        want.extend_from_slice(b"GLSACKPT");
        want.extend_from_slice(&1u32.to_le_bytes()); // version
        want.extend_from_slice(&1u32.to_le_bytes()); // count
        want.extend_from_slice(&1u16.to_le_bytes()); // name length
        want.extend_from_slice(b"w");
        want.push(2u8); // rank
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(got, want);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("z.bias", Tensor::new(vec![3], vec![0.5, -1.0, 2.25]).unwrap()).unwrap();
        p.insert("a.weight", Tensor::new(vec![2, 3], vec![1e-7, 2.0, -3.5, 4.0, 5.5, -6.0]).unwrap())
            .unwrap();
        let path1 = dir.path().join("a.ckpt");
        let path2 = dir.path().join("b.ckpt");
        save(&p, &path1).unwrap();
        let loaded = load(&path1).unwrap();
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(path1).unwrap(), std::fs::read(path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&ParamSet::new());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let bytes = encode(&p);
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = encode(&ParamSet::new());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode(&ParamSet::new());
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }
}
