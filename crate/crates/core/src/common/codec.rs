//! Little-endian binary encoding shared by every persisted artifact.
//!
//! Vectors are written as `dim: u32` followed by `dim` IEEE-754 doubles;
//! matrices as `rows: u32, cols: u32` followed by the row-major doubles.

use std::io::{self, Read, Write};

use super::{Mat64, Perm, Vec64};
use crate::error::{Error, Result};

pub struct Encoder<W: Write> {
    inner: W,
}

impl<W: Write> Encoder<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.inner.write_all(b)?)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn len32(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::InvalidParameter(format!("length {n} exceeds u32")))?;
        self.u32(n)
    }

    pub fn vec64(&mut self, v: &Vec64) -> Result<()> {
        self.len32(v.dim())?;
        self.f64s(v)
    }

    pub fn mat64(&mut self, m: &Mat64) -> Result<()> {
        self.len32(m.rows())?;
        self.len32(m.cols())?;
        self.f64s(m.as_slice())
    }

    pub fn perm(&mut self, p: &Perm) -> Result<()> {
        self.len32(p.len())?;
        for &m in p.mapping() {
            self.u32(m)?;
        }
        Ok(())
    }
}

pub struct Decoder<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Decoder<R> {
    /// `what` names the artifact in error messages.
    pub fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::format(self.what, "truncated input"),
            _ => Error::Io(e),
        })
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.fill(&mut m)?;
        if &m != expected {
            return Err(Error::format(
                self.what,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.fill(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn vec64(&mut self) -> Result<Vec64> {
        let n = self.u32()? as usize;
        Vec64::new(self.f64s(n)?)
    }

    pub fn mat64(&mut self) -> Result<Mat64> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        Mat64::new(rows, cols, self.f64s(rows * cols)?)
    }

    pub fn perm(&mut self) -> Result<Perm> {
        let n = self.u32()? as usize;
        let mapping = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        Perm::new(mapping)
    }

    /// Fails unless the input is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format(self.what, "trailing bytes")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_layout() {
        let mut enc = Encoder::new(Vec::new());
        enc.vec64(&Vec64::new(vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = enc.into_inner();
        assert_eq!(&bytes[..4], &[2, 0, 0, 0]);
        assert_eq!(&bytes[4..12], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 16);
        let mut dec = Decoder::new(&bytes[..], "vector");
        assert_eq!(dec.vec64().unwrap().as_slice(), &[1.0, -2.0]);
        dec.finish().unwrap();
    }

    #[test]
    fn matrix_and_perm_round_trip() {
        let m = Mat64::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let p = Perm::new(vec![2, 0, 1]).unwrap();
        let mut enc = Encoder::new(Vec::new());
        enc.mat64(&m).unwrap();
        enc.perm(&p).unwrap();
        let bytes = enc.into_inner();
        let mut dec = Decoder::new(&bytes[..], "test");
        assert_eq!(dec.mat64().unwrap(), m);
        assert_eq!(dec.perm().unwrap(), p);
        dec.finish().unwrap();
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut dec = Decoder::new(&[1u8, 0][..], "test");
        assert!(matches!(dec.u32(), Err(Error::Format { .. })));
        let mut dec = Decoder::new(&b"ABCD"[..], "test");
        assert!(dec.magic(b"DCEK").is_err());
    }
}
