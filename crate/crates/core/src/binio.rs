//! Little-endian helpers shared by the binary file formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    context: &'static str,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, context: &'static str) -> Self {
        Reader { inner, context }
    }

    fn err(&self, e: std::io::Error) -> Error {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Data(format!("{}: unexpected end of file", self.context))
        } else {
            Error::Data(format!("{}: {e}", self.context))
        }
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let mut buf = vec![0u8; expected.len()];
        self.inner.read_exact(&mut buf).map_err(|e| self.err(e))?;
        if buf != expected {
            return Err(Error::MalformedHeader {
                context: self.context.into(),
                reason: format!("expected magic {}", String::from_utf8_lossy(expected)),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.inner.read_u8().map_err(|e| self.err(e))
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.inner.read_u32::<LE>().map_err(|e| self.err(e))
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.inner.read_u64::<LE>().map_err(|e| self.err(e))
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.inner.read_f64::<LE>().map_err(|e| self.err(e))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut v = vec![0f64; n];
        self.inner.read_f64_into::<LE>(&mut v).map_err(|e| self.err(e))?;
        Ok(v)
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut v = vec![0f32; n];
        self.inner.read_f32_into::<LE>(&mut v).map_err(|e| self.err(e))?;
        Ok(v)
    }

    /// A length, refusing absurd values before anything is allocated.
    pub fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > limit {
            return Err(Error::Data(format!(
                "{}: length {n} exceeds limit {limit}",
                self.context
            )));
        }
        Ok(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.len(1 << 20)?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| self.err(e))?;
        String::from_utf8(buf).map_err(|_| Error::Data(format!("{}: invalid UTF-8", self.context)))
    }
}

pub(crate) fn put_len<W: Write>(w: &mut W, n: usize) -> std::io::Result<()> {
    w.write_u64::<LE>(n as u64)
}

pub(crate) fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    put_len(w, s.len())?;
    w.write_all(s.as_bytes())
}

pub(crate) fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

pub(crate) fn put_f32s<W: Write>(w: &mut W, v: &[f32]) -> std::io::Result<()> {
    for x in v {
        w.write_f32::<LE>(*x)?;
    }
    Ok(())
}
