//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `QLPB`, `u16` format version, then records
//! until end of file. Each record is `u16` name length, UTF-8 name, `u8`
//! dtype (0 = f32, 1 = f64, 2 = i32), `u8` rank, `rank` × `u32` dims and
//! the payload.

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QLPB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        dims: Vec<u32>,
        payload: Payload,
    ) -> Result<()> {
        let name = name.into();
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if n != payload.len() {
            return Err(Error::contract(format!(
                "record `{name}`: dims {dims:?} need {n} values, got {}",
                payload.len()
            )));
        }
        if name.len() > usize::from(u16::MAX) || dims.len() > usize::from(u8::MAX) {
            return Err(Error::contract(format!(
                "record `{name}` too large for header"
            )));
        }
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::contract(format!("duplicate record `{name}`")));
        }
        self.records.push(Record {
            name,
            dims,
            payload,
        });
        Ok(())
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let dims = t.shape().iter().map(|&d| d as u32).collect();
        self.push(name, dims, Payload::F64(t.data().to_vec()))
    }

    pub fn put_f64s(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len() as u32], Payload::F64(v.to_vec()))
    }

    pub fn put_i32s(&mut self, name: impl Into<String>, v: &[i32]) -> Result<()> {
        self.push(name, vec![v.len() as u32], Payload::I32(v.to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no record `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self.require(name)?;
        let data = match &r.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        };
        Tensor::new(r.dims.iter().map(|&d| d as usize).collect(), data)
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor(name)?.into_data())
    }

    pub fn i32s(&self, name: &str) -> Result<Vec<i32>> {
        match &self.require(name)?.payload {
            Payload::I32(v) => Ok(v.clone()),
            _ => Err(Error::contract(format!("record `{name}` is not i32"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.dtype());
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(rd.array()?);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut ck = Checkpoint::new();
        while rd.pos < bytes.len() {
            let name_len = u16::from_le_bytes(rd.array()?) as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|e| format!("record name: {e}"))?
                .to_string();
            let [dtype] = rd.array::<1>()?;
            let [rank] = rd.array::<1>()?;
            let dims: Vec<u32> = (0..rank)
                .map(|_| rd.array().map(u32::from_le_bytes))
                .collect::<std::result::Result<_, _>>()?;
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let payload = match dtype {
                0 => Payload::F32(
                    (0..n)
                        .map(|_| rd.array().map(f32::from_le_bytes))
                        .collect::<std::result::Result<_, _>>()?,
                ),
                1 => Payload::F64(
                    (0..n)
                        .map(|_| rd.array().map(f64::from_le_bytes))
                        .collect::<std::result::Result<_, _>>()?,
                ),
                2 => Payload::I32(
                    (0..n)
                        .map(|_| rd.array().map(i32::from_le_bytes))
                        .collect::<std::result::Result<_, _>>()?,
                ),
                other => return Err(format!("unknown dtype code {other} in `{name}`")),
            };
            ck.push(name, dims, payload).map_err(|e| e.to_string())?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut ck = Checkpoint::new();
        ck.push("a", vec![2], Payload::I32(vec![1, -1])).unwrap();
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"QLPB");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[1, 0]);
        assert_eq!(b[8], b'a');
        assert_eq!(&b[9..11], &[2, 1]);
        assert_eq!(&b[11..15], &[2, 0, 0, 0]);
        assert_eq!(b.len(), 15 + 8);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\x00").is_err());
        let mut b = Checkpoint::new();
        b.put_f64s("x", &[1.0, 2.0]).unwrap();
        let bytes = b.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            f64s in proptest::collection::vec(any::<f64>(), 1..20),
            f32s in proptest::collection::vec(any::<f32>(), 1..20),
            i32s in proptest::collection::vec(any::<i32>(), 1..20),
        ) {
            let mut ck = Checkpoint::new();
            ck.push("quant/3/1/scale", vec![f64s.len() as u32], Payload::F64(f64s)).unwrap();
            ck.push("w32", vec![1, f32s.len() as u32], Payload::F32(f32s)).unwrap();
            ck.push("plan", vec![i32s.len() as u32, 1], Payload::I32(i32s)).unwrap();
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
