//! Little-endian named-tensor container used for model and optimizer files.
//!
//! Layout: magic "IVCW", u32 version, u32 entry count, then per entry:
//! u32 name length, UTF-8 name, u8 dtype tag (0 = f32, 1 = f64, 2 = raw
//! bytes), four u32 extents (batch, channel, height, width), raw values.
//! Round trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DtypeTag, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"IVCW";
pub const VERSION: u32 = 1;

/// A value stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl Entry {
    pub fn tensor<T: Scalar>(t: &Tensor<T>) -> Entry {
        match T::DTYPE {
            DtypeTag::F32 => Entry::F32(t.cast::<f32>()),
            DtypeTag::F64 => Entry::F64(t.cast::<f64>()),
            DtypeTag::Bytes => unreachable!(),
        }
    }

    pub fn as_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        match self {
            Entry::F32(t) => Ok(t.cast::<T>()),
            Entry::F64(t) => Ok(t.cast::<T>()),
            Entry::Bytes(_) => Err(Error::Config("entry holds bytes, not a tensor".into())),
        }
    }
}

/// Named entries, kept sorted for deterministic files.
#[derive(Debug, Default, Clone)]
pub struct Container {
    pub entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container { entries: BTreeMap::new() }
    }

    pub fn put(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.insert(name.into(), e);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match e {
                Entry::F32(t) => {
                    out.push(DtypeTag::F32 as u8);
                    write_extents(&mut out, t.shape());
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::F64(t) => {
                    out.push(DtypeTag::F64 as u8);
                    write_extents(&mut out, t.shape());
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(DtypeTag::Bytes as u8);
                    write_extents(&mut out, Shape::new(1, 1, 1, b.len()));
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Container> {
        let bad = |detail: &str| Error::Format { path: origin.to_string(), detail: detail.into() };
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| bad("entry name is not UTF-8"))?;
            let tag = DtypeTag::from_u8(r.u8()?).ok_or_else(|| bad("unknown dtype tag"))?;
            let shape = Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let entry = match tag {
                DtypeTag::F32 => {
                    let raw = r.take(shape.numel() * 4)?;
                    let data = raw.chunks_exact(4).map(f32::from_le_slice).collect();
                    Entry::F32(Tensor::from_vec(shape, data)?)
                }
                DtypeTag::F64 => {
                    let raw = r.take(shape.numel() * 8)?;
                    let data = raw.chunks_exact(8).map(f64::from_le_slice).collect();
                    Entry::F64(Tensor::from_vec(shape, data)?)
                }
                DtypeTag::Bytes => Entry::Bytes(r.take(shape.numel())?.to_vec()),
            };
            if c.entries.insert(name.clone(), entry).is_some() {
                return Err(bad(&format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Container> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        Container::from_bytes(&bytes, &path.display().to_string())
    }
}

fn write_extents(out: &mut Vec<u8>, s: Shape) {
    for e in [s.b, s.c, s.h, s.w] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format { path: "<bytes>".into(), detail: "truncated".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = SplitRng::new(8);
        let mut c = Container::new();
        c.put("a.weight", Entry::F32(Tensor::randn(Shape::new(2, 3, 3, 3), 1.0, &mut rng)));
        c.put("b.bias", Entry::F64(Tensor::randn(Shape::new(1, 7, 1, 1), 0.3, &mut rng)));
        c.put("__config__", Entry::Bytes(b"{\"k\":1}".to_vec()));
        let bytes = c.to_bytes();
        let c2 = Container::from_bytes(&bytes, "test").unwrap();
        assert_eq!(bytes, c2.to_bytes());
        match (c.get("a.weight").unwrap(), c2.get("a.weight").unwrap()) {
            (Entry::F32(x), Entry::F32(y)) => assert_eq!(x.data(), y.data()),
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let mut c = Container::new();
        c.put("w", Entry::F32(Tensor::zeros(Shape::new(1, 1, 2, 2))));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], "t").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad, "t").is_err());
    }
}
