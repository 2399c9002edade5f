//! Dense little-endian grids: a 16-byte header (magic, width, height,
//! channels as u32) followed by row-major samples.

use std::io::{Read, Write};

use nalgebra::{Vector2, Vector3};

use super::IoError;
use crate::geometry::{DepthMap, FlowField, Pointmap};

pub const MAGIC_DEPTH: [u8; 4] = *b"E3RD";
pub const MAGIC_POINTMAP: [u8; 4] = *b"E3RP";
pub const MAGIC_FLOW: [u8; 4] = *b"E3RF";
pub const MAGIC_CONFIDENCE: [u8; 4] = *b"E3RC";
/// Per-pixel static/dynamic flags, one byte each.
pub const MAGIC_LABELS: [u8; 4] = *b"E3RL";

pub const HEADER_LEN: usize = 16;

/// Header plus f32 samples; the caller checks the magic and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub magic: [u8; 4],
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn header(magic: [u8; 4], width: usize, height: usize, channels: usize) -> Result<[u8; HEADER_LEN], IoError> {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&magic);
    for (i, n) in [width, height, channels].into_iter().enumerate() {
        let n = u32::try_from(n).map_err(|_| IoError::Format(format!("dimension {n} exceeds u32")))?;
        h[4 + 4 * i..8 + 4 * i].copy_from_slice(&n.to_le_bytes());
    }
    Ok(h)
}

fn read_header<R: Read>(r: &mut R) -> Result<([u8; 4], usize, usize, usize), IoError> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h).map_err(|_| IoError::Format("truncated header".into()))?;
    let dim = |i: usize| u32::from_le_bytes(h[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    Ok((h[..4].try_into().expect("4 bytes"), dim(0), dim(1), dim(2)))
}

pub fn write_raw<W: Write>(w: &mut W, grid: &RawGrid) -> Result<(), IoError> {
    if grid.data.len() != grid.width * grid.height * grid.channels {
        return Err(IoError::Format("grid data length does not match its shape".into()));
    }
    w.write_all(&header(grid.magic, grid.width, grid.height, grid.channels)?)?;
    let mut bytes = Vec::with_capacity(grid.data.len() * 4);
    for x in &grid.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw<R: Read>(r: &mut R) -> Result<RawGrid, IoError> {
    let (magic, width, height, channels) = read_header(r)?;
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| IoError::Format("grid shape overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(IoError::Format(format!(
            "expected {} data bytes for {width}x{height}x{channels}, found {}",
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawGrid {
        magic,
        width,
        height,
        channels,
        data,
    })
}

fn expect(grid: &RawGrid, magic: [u8; 4], channels: usize) -> Result<(), IoError> {
    if grid.magic != magic {
        return Err(IoError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&grid.magic),
            String::from_utf8_lossy(&magic)
        )));
    }
    if grid.channels != channels {
        return Err(IoError::Format(format!("expected {channels} channels, found {}", grid.channels)));
    }
    Ok(())
}

/// Invalid pixels are written as NaN.
pub fn write_depth<W: Write>(w: &mut W, depth: &DepthMap) -> Result<(), IoError> {
    let data = depth
        .depth
        .iter()
        .zip(&depth.valid)
        .map(|(&d, &ok)| if ok { d as f32 } else { f32::NAN })
        .collect();
    write_raw(
        w,
        &RawGrid {
            magic: MAGIC_DEPTH,
            width: depth.width,
            height: depth.height,
            channels: 1,
            data,
        },
    )
}

/// Non-finite or non-positive samples become invalid pixels with depth 0.
pub fn read_depth<R: Read>(r: &mut R) -> Result<DepthMap, IoError> {
    let g = read_raw(r)?;
    expect(&g, MAGIC_DEPTH, 1)?;
    let valid: Vec<bool> = g.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    let depth = g
        .data
        .iter()
        .zip(&valid)
        .map(|(&d, &ok)| if ok { d as f64 } else { 0.0 })
        .collect();
    Ok(DepthMap::with_mask(g.width, g.height, depth, valid)?)
}

pub fn write_points<W: Write>(w: &mut W, pointmap: &Pointmap) -> Result<(), IoError> {
    let data = pointmap.points.iter().flat_map(|p| p.iter().map(|&x| x as f32)).collect();
    write_raw(
        w,
        &RawGrid {
            magic: MAGIC_POINTMAP,
            width: pointmap.width,
            height: pointmap.height,
            channels: 3,
            data,
        },
    )
}

/// Points only; confidence lives in its own file.
pub fn read_points<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<Vector3<f64>>), IoError> {
    let g = read_raw(r)?;
    expect(&g, MAGIC_POINTMAP, 3)?;
    let pts = g
        .data
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    Ok((g.width, g.height, pts))
}

pub fn write_confidence<W: Write>(w: &mut W, pointmap: &Pointmap) -> Result<(), IoError> {
    write_raw(
        w,
        &RawGrid {
            magic: MAGIC_CONFIDENCE,
            width: pointmap.width,
            height: pointmap.height,
            channels: 1,
            data: pointmap.confidence.iter().map(|&c| c as f32).collect(),
        },
    )
}

pub fn read_confidence<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f64>), IoError> {
    let g = read_raw(r)?;
    expect(&g, MAGIC_CONFIDENCE, 1)?;
    Ok((g.width, g.height, g.data.iter().map(|&c| c as f64).collect()))
}

pub fn write_flow<W: Write>(w: &mut W, flow: &FlowField) -> Result<(), IoError> {
    write_raw(
        w,
        &RawGrid {
            magic: MAGIC_FLOW,
            width: flow.width,
            height: flow.height,
            channels: 2,
            data: flow.flow.iter().flat_map(|f| [f.x as f32, f.y as f32]).collect(),
        },
    )
}

pub fn read_flow<R: Read>(r: &mut R) -> Result<FlowField, IoError> {
    let g = read_raw(r)?;
    expect(&g, MAGIC_FLOW, 2)?;
    let flow = g
        .data
        .chunks_exact(2)
        .map(|c| Vector2::new(c[0] as f64, c[1] as f64))
        .collect();
    Ok(FlowField::new(g.width, g.height, flow)?)
}

pub fn write_labels<W: Write>(w: &mut W, width: usize, height: usize, mask: &[bool]) -> Result<(), IoError> {
    if mask.len() != width * height {
        return Err(IoError::Format("label mask length does not match its shape".into()));
    }
    w.write_all(&header(MAGIC_LABELS, width, height, 1)?)?;
    w.write_all(&mask.iter().map(|&m| m as u8).collect::<Vec<_>>())?;
    Ok(())
}

pub fn read_labels<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<bool>), IoError> {
    let (magic, width, height, channels) = read_header(r)?;
    if magic != MAGIC_LABELS || channels != 1 {
        return Err(IoError::Format("not a label grid".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != width * height {
        return Err(IoError::Format(format!("expected {} label bytes, found {}", width * height, bytes.len())));
    }
    if bytes.iter().any(|&b| b > 1) {
        return Err(IoError::Format("label bytes must be 0 or 1".into()));
    }
    Ok((width, height, bytes.into_iter().map(|b| b == 1).collect()))
}
