//! Little-endian primitives shared by the binary container formats.

use std::io::{Read, Write};

use crate::dumps::F32Matrix;
use crate::error::{Error, Result};

pub(crate) fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) struct Cursor<R> {
    inner: R,
}

impl<R> Cursor<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner }
    }
}

impl<R: Read> Cursor<R> {
    pub(crate) fn bytes(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<Vec<u8>> {
        // Grow with the data actually present so a lying header cannot force
        // a huge allocation up front.
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(Error::CorruptDump(format!(
                "truncated while reading {} ({got} of {n} bytes)",
                what()
            )));
        }
        Ok(buf)
    }

    pub(crate) fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<Vec<f32>> {
        let b = self.bytes(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize, what: &dyn Fn() -> String) -> Result<F32Matrix> {
        let data = self.f32s(rows * cols, what)?;
        F32Matrix::new(rows, cols, data)
    }
}

