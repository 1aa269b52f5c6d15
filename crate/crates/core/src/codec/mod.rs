//! Temporal codec: quantization, entropy coding, intra and inter chunks,
//! and the `.egs` container.
//!
//! Encoding is closed-loop. The encoder keeps the decoder's reconstruction
//! and predicts every frame from it, so both sides stay bit-identical and
//! each chunk's CRC checks that.

pub mod bytes;
pub mod chunk;
pub mod container;
pub mod entropy;
pub mod quant;
pub mod warp;

use serde::{Deserialize, Serialize};

pub use chunk::{chunk_stats, decode_frame, decode_intra, encode_frame, encode_intra, feature_crc, raw_frame_size, ChunkKind, ChunkStats, FrameChunk, GroupStat};
pub use container::EvolvingStream;
pub use entropy::{entropy_decode, entropy_encode, FrequencyModel};
pub use quant::{GroupSpec, QuantSpec, ScaledQuant};
pub use warp::{HintNode, WarpHint};

use crate::error::{EgsError, Result};
use crate::model::{GaussianFrame, PointId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub quant: QuantSpec,
    /// Frames between intra refreshes; 0 keeps only the first frame intra.
    pub intra_interval: u32,
    /// Node count when the encoder fits the warp itself.
    pub fit_nodes: usize,
    pub k_g: usize,
    /// Set from the top-level seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            quant: QuantSpec::default(),
            intra_interval: 0,
            fit_nodes: 512,
            k_g: 4,
            seed: 0,
        }
    }
}

/// Encodes frames one at a time, keeping the decoder-side state.
#[derive(Debug)]
pub struct SequenceEncoder {
    cfg: EncoderConfig,
    state: Option<GaussianFrame>,
    chunks: Vec<FrameChunk>,
}

impl SequenceEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.quant.validate()?;
        if cfg.k_g == 0 || cfg.k_g > 255 {
            return Err(EgsError::InvalidParameter("encoder K^g must be in 1..=255".into()));
        }
        Ok(Self {
            cfg,
            state: None,
            chunks: Vec::new(),
        })
    }

    /// Encodes `frame`. Without a hint the warp is fitted from the shared
    /// ids. A frame whose new points are not all extension points is coded
    /// intra. Returns the reconstruction the decoder will produce.
    pub fn push(&mut self, frame: &GaussianFrame, hint: Option<&WarpHint>) -> Result<&GaussianFrame> {
        let n = self.chunks.len() as u32;
        let refresh = self.cfg.intra_interval > 0 && n % self.cfg.intra_interval == 0;
        let (chunk, recon) = match self.state.as_ref() {
            Some(prev) if !refresh && frame.points().iter().all(|p| prev.get(p.id).is_some() || p.class.ancestor().is_some()) => {
                let removed: Vec<PointId> = prev.points().iter().map(|p| p.id).filter(|id| frame.get(*id).is_none()).collect();
                let fitted;
                let hint = match hint {
                    Some(h) => h,
                    None => {
                        fitted = WarpHint::fit(prev, frame, self.cfg.fit_nodes, self.cfg.k_g, self.cfg.seed.wrapping_add(u64::from(n)), &self.cfg.quant)?;
                        &fitted
                    }
                };
                encode_frame(prev, frame, &removed, &self.cfg.quant, hint)?
            }
            Some(_) => {
                log::info!("frame {} coded intra", frame.frame_index);
                encode_intra(frame, &self.cfg.quant)?
            }
            None => encode_intra(frame, &self.cfg.quant)?,
        };
        self.chunks.push(chunk);
        Ok(self.state.insert(recon))
    }

    pub fn last_chunk(&self) -> Option<&FrameChunk> {
        self.chunks.last()
    }

    pub fn finish(self) -> EvolvingStream {
        EvolvingStream {
            spec: self.cfg.quant,
            intra_interval: self.cfg.intra_interval,
            chunks: self.chunks,
        }
    }
}

/// One decoded frame and the warp its chunk carried (none for intra chunks).
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub frame: GaussianFrame,
    pub warp: Option<WarpHint>,
}

/// Decodes a whole stream, verifying every chunk's checksum.
pub fn decode_stream(stream: &EvolvingStream) -> Result<Vec<DecodedFrame>> {
    let mut out: Vec<DecodedFrame> = Vec::with_capacity(stream.chunks.len());
    for chunk in &stream.chunks {
        let decoded = match chunk.kind {
            ChunkKind::Intra => DecodedFrame {
                frame: decode_intra(chunk, &stream.spec)?,
                warp: None,
            },
            ChunkKind::Inter => {
                let prev = out
                    .last()
                    .ok_or_else(|| EgsError::CorruptChunk("inter chunk without a preceding frame".into()))?;
                let (frame, warp) = decode_frame(&prev.frame, chunk, &stream.spec)?;
                DecodedFrame { frame, warp: Some(warp) }
            }
        };
        out.push(decoded);
    }
    Ok(out)
}

/// Per-frame sizes and running compression ratio of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub chunk: ChunkStats,
    pub points: usize,
    pub raw_bytes: usize,
    /// Raw bytes over encoded bytes for all frames up to and including this one.
    pub cumulative_ratio: f64,
}

pub fn stream_report(stream: &EvolvingStream) -> Result<Vec<FrameReport>> {
    let frames = decode_stream(stream)?;
    let (mut raw, mut coded) = (0usize, EvolvingStream::header_bytes());
    stream
        .chunks
        .iter()
        .zip(&frames)
        .map(|(c, d)| {
            let stats = chunk_stats(c)?;
            let r = raw_frame_size(&d.frame);
            raw += r;
            coded += stats.bytes;
            Ok(FrameReport {
                chunk: stats,
                points: d.frame.len(),
                raw_bytes: r,
                cumulative_ratio: raw as f64 / coded as f64,
            })
        })
        .collect()
}
