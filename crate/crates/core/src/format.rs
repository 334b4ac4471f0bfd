//! Little-endian binary encoding shared by the weights, checkpoint and
//! dataset files.
//!
//! Weights file layout:
//!
//! ```text
//! "CYCW" | u32 version = 1 | u32 count
//! count x ( u16 name_len | name (UTF-8) | u8 rank | rank x u32 extent | f32 data... )
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CYCW";
pub const WEIGHTS_VERSION: u32 = 1;

/// A named parameter array.
pub type NamedTensor = (String, Tensor);

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, v: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 4);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn name(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::format(format!("name too long: {} bytes", s.len())))?;
        self.u16(len)?;
        self.bytes(s.as_bytes())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format("file is truncated")
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.bytes(len)?).map_err(|_| Error::format("name is not UTF-8"))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != expected {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            return Err(Error::format(format!(
                "unsupported version {v}, expected {expected}"
            )));
        }
        Ok(())
    }

    /// Fails unless the input is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(Error::format("trailing bytes after payload")),
        }
    }
}

pub(crate) fn write_weights_to<W: Write>(w: &mut Writer<W>, arrays: &[(&str, &Tensor)]) -> Result<()> {
    w.bytes(WEIGHTS_MAGIC)?;
    w.u32(WEIGHTS_VERSION)?;
    w.u32(arrays.len() as u32)?;
    for (name, t) in arrays {
        w.name(name)?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::format("rank above 255"))?;
        w.u8(rank)?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format("extent above u32"))?;
            w.u32(d)?;
        }
        w.f32s(t.data())?;
    }
    Ok(())
}

pub(crate) fn read_weights_from<R: Read>(r: &mut Reader<R>) -> Result<Vec<NamedTensor>> {
    r.magic(WEIGHTS_MAGIC)?;
    r.version(WEIGHTS_VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::build(&shape, data).map_err(|e| Error::format(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Encodes named arrays in the weights format.
pub fn encode_weights(arrays: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut w = Writer::new(Vec::new());
    write_weights_to(&mut w, arrays)?;
    Ok(w.into_inner())
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader::new(bytes);
    let out = read_weights_from(&mut r)?;
    r.finish()?;
    Ok(out)
}
