//! Little-endian binary container for named tensors.
//!
//! Layout: `SGSF`, u32 version, then a tensor section (u32 count, then per
//! entry u32 name length, UTF-8 name, u32 rank, u64 dims, u8 dtype, raw
//! data), a second section with the same encoding for optimizer state, and
//! a trailing u32 length plus UTF-8 JSON document.

use std::io::{Cursor, Read};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"SGSF";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    /// Counters such as the optimizer step, which must round-trip exactly.
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::U64 { shape, .. } => shape,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Entry)>,
    pub optimizer: Vec<(String, Entry)>,
    pub config: String,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).and_then(|(_, e)| match e {
            Entry::F32(t) => Some(t),
            Entry::U64 { .. } => None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_section(&mut out, &self.tensors);
        write_section(&mut out, &self.optimizer);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", magic)));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version)));
        }
        let tensors = read_section(&mut r)?;
        let optimizer = read_section(&mut r)?;
        let len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; len.min(bytes.len())];
        read_exact(&mut r, &mut cfg)?;
        if cfg.len() != len {
            return Err(Error::Checkpoint("truncated config".into()));
        }
        let config = String::from_utf8(cfg).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.position() as usize)));
        }
        Ok(Container { tensors, optimizer, config })
    }
}

fn write_section(out: &mut Vec<u8>, entries: &[(String, Entry)]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, e) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(e.shape().len() as u32).to_le_bytes());
        for &d in e.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match e {
            Entry::F32(t) => {
                out.push(DTYPE_F32);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Entry::U64 { data, .. } => {
                out.push(DTYPE_U64);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn remaining(r: &Cursor<&[u8]>) -> usize {
    r.get_ref().len().saturating_sub(r.position() as usize)
}

fn read_section(r: &mut Cursor<&[u8]>) -> Result<Vec<(String, Entry)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > remaining(r) {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let mut name = vec![0u8; len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {} has rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let mut dtype = [0u8; 1];
        read_exact(r, &mut dtype)?;
        let n = numel(&shape);
        let entry = match dtype[0] {
            DTYPE_F32 => {
                if n.checked_mul(4).map_or(true, |b| b > remaining(r)) {
                    return Err(Error::Checkpoint("truncated file".into()));
                }
                let mut data = Vec::with_capacity(n);
                let mut b = [0u8; 4];
                for _ in 0..n {
                    read_exact(r, &mut b)?;
                    data.push(f32::from_le_bytes(b));
                }
                Entry::F32(Tensor::from_vec(shape, data))
            }
            DTYPE_U64 => {
                if n.checked_mul(8).map_or(true, |b| b > remaining(r)) {
                    return Err(Error::Checkpoint("truncated file".into()));
                }
                let data = (0..n).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
                Entry::U64 { shape, data }
            }
            other => return Err(Error::Checkpoint(format!("tensor {} has unknown dtype {}", name, other))),
        };
        out.push((name, entry));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            tensors: vec![
                ("a.w".into(), Entry::F32(Tensor::from_vec([2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]))),
                ("s".into(), Entry::F32(Tensor::scalar(7.0))),
            ],
            optimizer: vec![("adam.step".into(), Entry::U64 { shape: vec![], data: vec![123456789012] })],
            config: "{\"x\":1}".into(),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SGSF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // first name length and name
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.w");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut {}", cut);
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Container::from_bytes(&v2).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }
}
