//! Little-endian primitives shared by the binary formats.

use std::io::{Read, Write};

use earth_core::tensor::Tensor;

pub(crate) struct Writer<W: Write>(pub W);

impl<W: Write> Writer<W> {
    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.0.write_all(b)
    }

    pub fn u32(&mut self, x: u32) -> std::io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }

    pub fn u64(&mut self, x: u64) -> std::io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }

    pub fn f64(&mut self, x: f64) -> std::io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }

    pub fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn f64s(&mut self, xs: &[f64]) -> std::io::Result<()> {
        xs.iter().try_for_each(|&x| self.f64(x))
    }

    pub fn tensor(&mut self, t: &Tensor) -> std::io::Result<()> {
        self.u32(t.shape().len() as u32)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        self.f64s(t.data())
    }
}

/// Reads with failures reported as a message; callers attach the path.
pub(crate) struct Reader<R: Read>(pub R);

/// Upper bound on any single length field, to fail fast on corrupt input.
const MAX_LEN: u64 = 1 << 28;

impl<R: Read> Reader<R> {
    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N], String> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|_| "unexpected end of file".to_string())?;
        Ok(b)
    }

    pub fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub fn len(&mut self) -> Result<usize, String> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(format!("length {n} is implausibly large"));
        }
        Ok(n as usize)
    }

    pub fn str(&mut self) -> Result<String, String> {
        let n = self.u32()? as u64;
        if n > MAX_LEN {
            return Err(format!("string length {n} is implausibly large"));
        }
        let mut b = vec![0u8; n as usize];
        self.0.read_exact(&mut b).map_err(|_| "unexpected end of file".to_string())?;
        String::from_utf8(b).map_err(|_| "string is not valid UTF-8".to_string())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor, String> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(format!("tensor rank {rank} is implausibly large"));
        }
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match numel {
            Some(n) if n as u64 <= MAX_LEN => Tensor::new(shape, self.f64s(n)?).map_err(|e| e.to_string()),
            _ => Err(format!("tensor shape {shape:?} is implausibly large")),
        }
    }

    /// True when no bytes remain.
    pub fn at_end(&mut self) -> bool {
        let mut b = [0u8; 1];
        matches!(self.0.read(&mut b), Ok(0))
    }
}
