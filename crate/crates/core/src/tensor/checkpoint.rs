//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"VSFK" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name: utf8 | ndim: u8 | dims: ndim × u64 |
//!             dtype: u8 (0 = f32, 1 = f64) | data: raw LE scalars )
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VSFK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.rank()).map_err(|_| Error::Format("rank > 255".into()))?;
        buf.push(ndim);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(T::DTYPE.code());
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint stream>", e))
}

/// Parses a checkpoint, converting every tensor to `T`.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint stream>", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.array()?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(cur.array()?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.array()?) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(cur.array()?) as usize);
        }
        let dtype = DType::from_code(cur.take(1)?[0])?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64c(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64c(f64::read_le(c)))
                .collect(),
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("ab", &t)]).unwrap();
        let mut want = b"VSFK".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.push(0);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::ones(&[3, 2]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w", &t)]).unwrap();
        assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f64, _>(&bad[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint::<f64, _>(&extra[..]).is_err());
        assert_eq!(read_checkpoint::<f64, _>(&buf[..]).unwrap()[0].1, t);
    }

    proptest::proptest! {
        #[test]
        fn write_read_write_is_byte_identical(
            data in proptest::collection::vec(-1e6f32..1e6, 1..40),
            name in "[a-z0-9_.]{1,20}",
        ) {
            let t = Tensor::new(&[data.len()], data).unwrap();
            let mut first = Vec::new();
            write_checkpoint(&mut first, &[(name.as_str(), &t)]).unwrap();
            let back = read_checkpoint::<f32, _>(&first[..]).unwrap();
            let refs: Vec<(&str, &Tensor<f32>)> = back.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let mut second = Vec::new();
            write_checkpoint(&mut second, &refs).unwrap();
            proptest::prop_assert_eq!(first, second);
        }
    }
}
