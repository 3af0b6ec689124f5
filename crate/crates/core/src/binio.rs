//! Little-endian helpers shared by the versioned binary containers.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        vs.iter().try_for_each(|&v| self.f64(v))
    }

    pub fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.inner.write_all(s.as_bytes())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    fn fill(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(format!("{}.{field}", self.what), e.to_string()))
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let mut buf = vec![0u8; expected.len()];
        self.fill(&mut buf, "magic")?;
        if buf != expected {
            return Err(Error::format(
                format!("{}.magic", self.what),
                "not a recognized container",
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, field)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self, field: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, field)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f32(&mut self, field: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, field)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(field)).collect()
    }

    /// Reads a length-prefixed UTF-8 string, refusing absurd lengths.
    pub fn str(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)? as usize;
        if len > 1 << 20 {
            return Err(Error::format(
                format!("{}.{field}", self.what),
                format!("string length {len} too large"),
            ));
        }
        let mut buf = vec![0u8; len];
        self.fill(&mut buf, field)?;
        String::from_utf8(buf)
            .map_err(|_| Error::format(format!("{}.{field}", self.what), "invalid UTF-8"))
    }

    /// Bounds a count read from the file so corrupt headers fail cleanly.
    pub fn count(&mut self, field: &str, max: usize) -> Result<usize> {
        let n = self.u64(field)? as usize;
        if n > max {
            return Err(Error::format(
                format!("{}.{field}", self.what),
                format!("count {n} exceeds limit {max}"),
            ));
        }
        Ok(n)
    }
}
