//! `.egs` container: stream header followed by length-prefixed chunks.

use std::path::Path;

use crate::codec::bytes::{ByteReader, ByteWriter};
use crate::codec::chunk::{ChunkKind, FrameChunk};
use crate::codec::quant::{GroupSpec, QuantSpec};
use crate::error::{EgsError, Result};

pub const MAGIC: &[u8; 4] = b"EGS1";
pub const VERSION: u8 = 1;

/// A whole encoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolvingStream {
    pub spec: QuantSpec,
    /// Frames between intra refreshes; 0 means only the first frame is intra.
    pub intra_interval: u32,
    pub chunks: Vec<FrameChunk>,
}

fn write_group(w: &mut ByteWriter, g: &GroupSpec) {
    w.u8(g.bits);
    w.f64(g.step);
    w.f64(g.zero_point);
}

fn read_group(r: &mut ByteReader<'_>) -> Result<GroupSpec> {
    Ok(GroupSpec {
        bits: r.u8()?,
        step: r.f64()?,
        zero_point: r.f64()?,
    })
}

impl EvolvingStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u8(VERSION);
        let s = &self.spec;
        for g in [&s.mean, &s.rotation, &s.log_scale, &s.opacity, &s.sh_dc] {
            write_group(&mut w, g);
        }
        w.u8(s.sh_rest_bits);
        w.u32(self.intra_interval);
        w.u32(self.chunks.len() as u32);
        for c in &self.chunks {
            w.u8(c.kind as u8);
            w.u32(c.frame_index);
            w.u32(c.payload.len() as u32);
            w.u32(c.checksum);
            w.bytes(&c.payload);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).map_err(|_| EgsError::Format("file too short for an egs header".into()))? != MAGIC {
            return Err(EgsError::Format("not an egs stream (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(EgsError::Format(format!("unsupported egs version {version}")));
        }
        let spec = QuantSpec {
            mean: read_group(&mut r)?,
            rotation: read_group(&mut r)?,
            log_scale: read_group(&mut r)?,
            opacity: read_group(&mut r)?,
            sh_dc: read_group(&mut r)?,
            sh_rest_bits: r.u8()?,
        };
        spec.validate().map_err(|e| EgsError::CorruptChunk(format!("stream header: {e}")))?;
        let intra_interval = r.u32()?;
        let count = r.u32()? as usize;
        let mut chunks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let kind = ChunkKind::from_u8(r.u8()?)?;
            let frame_index = r.u32()?;
            let len = r.u32()? as usize;
            let checksum = r.u32()?;
            let payload = r.take(len)?.to_vec();
            chunks.push(FrameChunk {
                kind,
                frame_index,
                payload,
                checksum,
            });
        }
        if !r.is_empty() {
            return Err(EgsError::CorruptChunk(format!("{} trailing bytes after the last chunk", r.remaining())));
        }
        Ok(Self {
            spec,
            intra_interval,
            chunks,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Bytes of the stream header.
    pub fn header_bytes() -> usize {
        4 + 1 + 5 * 17 + 1 + 4 + 4
    }

    pub fn total_bytes(&self) -> usize {
        Self::header_bytes() + self.chunks.iter().map(FrameChunk::size_bytes).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let s = EvolvingStream {
            spec: QuantSpec::default(),
            intra_interval: 5,
            chunks: vec![FrameChunk {
                kind: ChunkKind::Inter,
                frame_index: 3,
                payload: vec![1, 2, 3],
                checksum: 0xdead_beef,
            }],
        };
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"EGS1");
        assert_eq!(bytes.len(), s.total_bytes());
        assert_eq!(EvolvingStream::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn damaged_containers_are_rejected() {
        let s = EvolvingStream {
            spec: QuantSpec::default(),
            intra_interval: 0,
            chunks: vec![],
        };
        let mut bytes = s.to_bytes();
        assert!(matches!(EvolvingStream::from_bytes(&bytes[..10]), Err(EgsError::CorruptChunk(_))));
        bytes[0] = b'X';
        assert!(matches!(EvolvingStream::from_bytes(&bytes), Err(EgsError::Format(_))));
    }
}
