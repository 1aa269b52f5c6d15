//! Little-endian byte writer and reader with LEB128 varints.

use crate::error::{EgsError, Result};

#[derive(Debug, Default, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8 & 0x7f) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

fn truncated(what: &str) -> EgsError {
    EgsError::CorruptChunk(format!("truncated stream while reading {what}"))
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(truncated("bytes"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1).map_err(|_| truncated("u8"))?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4).map_err(|_| truncated("u32"))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8).map_err(|_| truncated("u64"))?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8).map_err(|_| truncated("f64"))?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8().map_err(|_| truncated("varint"))?;
            let bits = u64::from(b & 0x7f);
            if shift == 63 && bits > 1 {
                return Err(EgsError::CorruptChunk("varint overflows 64 bits".into()));
            }
            v |= bits << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(EgsError::CorruptChunk("varint longer than 10 bytes".into()))
    }

    /// A varint that must fit in `usize` and not exceed `limit`.
    pub fn count(&mut self, limit: usize, what: &str) -> Result<usize> {
        let v = self.varint()?;
        if v > limit as u64 {
            return Err(EgsError::CorruptChunk(format!("{what} count {v} exceeds {limit}")));
        }
        Ok(v as usize)
    }
}

/// Writes an ascending id list as a count followed by gaps.
pub fn write_sorted_ids(w: &mut ByteWriter, ids: &[u64]) {
    w.varint(ids.len() as u64);
    let mut prev = 0u64;
    for (k, &id) in ids.iter().enumerate() {
        w.varint(if k == 0 { id } else { id - prev });
        prev = id;
    }
}

/// Reads a list written by [`write_sorted_ids`]. Every id takes at least
/// one byte, which bounds the count by the bytes left.
pub fn read_sorted_ids(r: &mut ByteReader<'_>) -> Result<Vec<u64>> {
    let n = r.count(r.remaining(), "id list")?;
    let mut out = Vec::with_capacity(n);
    let mut prev = 0u64;
    for k in 0..n {
        let d = r.varint()?;
        let id = if k == 0 {
            d
        } else {
            if d == 0 {
                return Err(EgsError::CorruptChunk("id list is not strictly ascending".into()));
            }
            prev.checked_add(d).ok_or_else(|| EgsError::CorruptChunk("id overflow".into()))?
        };
        out.push(id);
        prev = id;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_round_trip_edges() {
        let vals = [0, 1, 127, 128, 300, u32::MAX as u64, u64::MAX];
        let mut w = ByteWriter::new();
        for v in vals {
            w.varint(v);
        }
        let bytes = w.into_inner();
        let mut r = ByteReader::new(&bytes);
        for v in vals {
            assert_eq!(r.varint().unwrap(), v);
        }
        assert!(r.is_empty());
        assert!(r.varint().is_err());
    }

    #[test]
    fn sorted_ids_round_trip() {
        let ids = [3, 4, 10, 1000, 1_000_000_007];
        let mut w = ByteWriter::new();
        write_sorted_ids(&mut w, &ids);
        let bytes = w.into_inner();
        assert_eq!(read_sorted_ids(&mut ByteReader::new(&bytes)).unwrap(), ids);
    }

    #[test]
    fn repeated_id_is_rejected() {
        let mut w = ByteWriter::new();
        w.varint(2);
        w.varint(5);
        w.varint(0);
        let bytes = w.into_inner();
        assert!(read_sorted_ids(&mut ByteReader::new(&bytes)).is_err());
    }
}
