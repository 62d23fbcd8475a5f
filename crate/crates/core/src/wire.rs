//! Little helpers for the binary encodings: integers, floats, tensors and weight sets.
//!
//! Framing integers are big-endian; tensors are little-endian throughout (rank, dims, values).

use crate::error::WireError;
use crate::model::{DenseParams, WeightSet};
use crate::tensor::Tensor;

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Writer {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn usizes(&mut self, v: &[usize]) -> &mut Self {
        self.u32(v.len() as u32);
        for x in v {
            self.u32(*x as u32);
        }
        self
    }

    /// Tensor layout: rank (u32 LE), dims (u32 LE each), values (f64 LE).
    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.buf
            .extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            self.buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn weight_set(&mut self, w: &WeightSet) -> &mut Self {
        self.u64(w.version());
        self.u32(w.start() as u32);
        self.u32(w.params().len() as u32);
        for p in w.params() {
            self.layer_params(p.as_ref());
        }
        self
    }

    pub fn layer_params(&mut self, p: Option<&DenseParams>) -> &mut Self {
        match p {
            None => self.u8(0),
            Some(d) => {
                self.u8(1);
                self.tensor(&d.w);
                self.tensor(&d.b)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated {
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(WireError::Malformed(format!("bool byte {x}"))),
        }
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| WireError::Malformed(e.to_string()))
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>, WireError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor, WireError> {
        let rank = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| WireError::Malformed("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| WireError::Malformed(e.to_string()))
    }

    pub fn layer_params(&mut self) -> Result<Option<DenseParams>, WireError> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let w = self.tensor()?;
                let b = self.tensor()?;
                Ok(Some(DenseParams { w, b }))
            }
            x => Err(WireError::Malformed(format!("layer params tag {x}"))),
        }
    }

    pub fn weight_set(&mut self) -> Result<WeightSet, WireError> {
        let version = self.u64()?;
        let start = self.u32()? as usize;
        let n = self.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(self.layer_params()?);
        }
        WeightSet::new(version, start, params).map_err(|e| WireError::Malformed(e.to_string()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

/// Serializes a tensor on its own.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut w = Writer::with_capacity(t.encoded_len());
    w.tensor(t);
    w.finish()
}

pub fn encode_weight_set(ws: &WeightSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.weight_set(ws);
    w.finish()
}

pub fn decode_weight_set(bytes: &[u8]) -> Result<WeightSet, WireError> {
    let mut r = Reader::new(bytes);
    let ws = r.weight_set()?;
    r.finish()?;
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::encoded_len_for_shape;

    #[test]
    fn tensor_bytes_match_size_function() {
        let t = Tensor::from_fn(vec![1, 10], |i| i as f64 * 0.5);
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), encoded_len_for_shape(&[1, 10]));
        assert_eq!(bytes.len(), 80 + 12);
        let back = Reader::new(&bytes).tensor().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_tensor_is_an_error() {
        let t = Tensor::from_fn(vec![3], |i| i as f64);
        let bytes = encode_tensor(&t);
        assert!(matches!(
            Reader::new(&bytes[..bytes.len() - 1]).tensor(),
            Err(WireError::Truncated { .. })
        ));
    }
}
