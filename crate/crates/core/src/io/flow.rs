//! Flow rasters.
//!
//! FLO2 layout: magic `FLO2`, width u32, height u32, reserved u32 (zero),
//! then `width * height` pairs of f32 `(du, dv)` in row-major order. All
//! values little-endian. Middlebury `.flo` files are accepted as well.

use std::path::Path;

use crate::error::{EgsError, Result};
use crate::raster::FlowMap;

pub const FLO2_MAGIC: &[u8; 4] = b"FLO2";
const MIDDLEBURY_TAG: f32 = 202_021.25;
const MAX_SIDE: usize = 1 << 16;

pub fn encode_flo2(flow: &FlowMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * flow.data.len());
    out.extend_from_slice(FLO2_MAGIC);
    out.extend_from_slice(&(flow.width as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for [u, v] in &flow.data {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn dims(w: u64, h: u64) -> Result<(usize, usize)> {
    let (w, h) = (w as usize, h as usize);
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(EgsError::Format(format!("implausible flow size {w}x{h}")));
    }
    Ok((w, h))
}

fn pairs(body: &[u8], w: usize, h: usize) -> Result<FlowMap> {
    if body.len() != 8 * w * h {
        return Err(EgsError::Format(format!("flow body has {} bytes, expected {} for {w}x{h}", body.len(), 8 * w * h)));
    }
    let f = |b: &[u8]| f32::from_le_bytes(b.try_into().expect("4 bytes"));
    let data: Vec<[f32; 2]> = body.chunks_exact(8).map(|c| [f(&c[..4]), f(&c[4..])]).collect();
    let flow = FlowMap { width: w, height: h, data };
    if !flow.is_finite() {
        return Err(EgsError::Format("flow contains non-finite values".into()));
    }
    Ok(flow)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_flo2(bytes: &[u8]) -> Result<FlowMap> {
    if bytes.len() < 16 || &bytes[..4] != FLO2_MAGIC {
        return Err(EgsError::Format("not a FLO2 file".into()));
    }
    if u32_at(bytes, 12) != 0 {
        return Err(EgsError::Format("FLO2 reserved header field is not zero".into()));
    }
    let (w, h) = dims(u32_at(bytes, 4).into(), u32_at(bytes, 8).into())?;
    pairs(&bytes[16..], w, h)
}

/// Middlebury layout: tag 202021.25 as f32, width i32, height i32, f32 pairs.
/// Values above 1e9 mark unknown flow there; they are rejected.
pub fn decode_middlebury(bytes: &[u8]) -> Result<FlowMap> {
    if bytes.len() < 12 || f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) != MIDDLEBURY_TAG {
        return Err(EgsError::Format("not a Middlebury .flo file".into()));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if w <= 0 || h <= 0 {
        return Err(EgsError::Format(format!("implausible flow size {w}x{h}")));
    }
    let (w, h) = dims(w as u64, h as u64)?;
    let flow = pairs(&bytes[12..], w, h)?;
    if flow.data.iter().flatten().any(|v| v.abs() > 1e9) {
        return Err(EgsError::Format("Middlebury flow contains unknown-flow markers".into()));
    }
    Ok(flow)
}

/// Reads a FLO2 or Middlebury file, chosen by its leading tag.
pub fn read_flow(path: &Path) -> Result<FlowMap> {
    let bytes = std::fs::read(path).map_err(|e| EgsError::InvalidInput(format!("{}: {e}", path.display())))?;
    let out = if bytes.starts_with(FLO2_MAGIC) { decode_flo2(&bytes) } else { decode_middlebury(&bytes) };
    out.map_err(|e| EgsError::Format(format!("{}: {e}", path.display())))
}

pub fn write_flow(flow: &FlowMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_flo2(flow))?;
    Ok(())
}
