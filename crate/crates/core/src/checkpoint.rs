//! Binary container of named `f64` arrays with a key-value header.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "EETCKPT1"
//! header   u64 length, then UTF-8 `key = value` lines
//! count    u64 number of arrays, sorted by name
//! array    u32 name length, name, u32 rank, u64 dims[rank], f64 data[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use eet_tensor::Tensor;

use crate::error::{EetError, Result};
use crate::kv::KeyValues;

const MAGIC: &[u8; 8] = b"EETCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: KeyValues,
    pub arrays: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            EetError::Checkpoint(format!("truncated container at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| EetError::Checkpoint("length overflows".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| EetError::Checkpoint("invalid UTF-8".into()))
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = self.header.render();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(EetError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let header_len = r.len()?;
        let header = KeyValues::parse(&r.string(header_len)?)
            .map_err(|e| EetError::Checkpoint(format!("bad header: {e}")))?;
        let count = r.len()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| EetError::Checkpoint(format!("array `{name}` has implausible shape {shape:?}")))?;
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| EetError::Checkpoint(format!("array `{name}`: {e}")))?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(EetError::Checkpoint(format!("duplicate array `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(EetError::Checkpoint("trailing bytes after last array".into()));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| EetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays.get(name).ok_or_else(|| EetError::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn header_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.header.require(key).map_err(|e| EetError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.header.set("epoch", 3);
        c.header.set("stage", 1);
        c.arrays.insert("b".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.arrays.insert("a".into(), Tensor::scalar(0.1));
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.header_value::<usize>("epoch").unwrap(), 3);
        assert_eq!(back.array("b").unwrap().data()[3], 1e300);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }
}
