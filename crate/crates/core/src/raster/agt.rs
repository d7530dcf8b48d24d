//! "AGT1" binary tile format.
//!
//! Layout (all little-endian):
//!
//! | offset | type | field      |
//! |--------|------|------------|
//! | 0      | [u8;4] | magic `41 47 54 31` |
//! | 4      | u32  | width      |
//! | 8      | u32  | height     |
//! | 12     | f64  | origin_x   |
//! | 20     | f64  | origin_y   |
//! | 28     | f64  | cell_size  |
//! | 36     | f32  | nodata     |
//! | 40     | f32 * width*height | values, row-major from the north-west corner |

use std::io::Read;
use std::path::Path;

use super::{GridGeometry, RasterGrid};
use crate::error::{Error, Result};

pub const AGT1_MAGIC: [u8; 4] = *b"AGT1";
const HEADER_LEN: usize = 40;

fn parse_header(bytes: &[u8]) -> Result<(GridGeometry, f32)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("AGT1 header truncated ({} of {HEADER_LEN} bytes)", bytes.len()),
        });
    }
    if bytes[..4] != AGT1_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing AGT1 magic".into(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let width = u32_at(4) as usize;
    let height = u32_at(8) as usize;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: 4,
            message: format!("degenerate dimensions {width}x{height}"),
        });
    }
    let cell_size = f64_at(28);
    if !(cell_size > 0.0) {
        return Err(Error::Parse {
            offset: 28,
            message: format!("cell size must be positive, got {cell_size}"),
        });
    }
    let geometry = GridGeometry::new(f64_at(12), f64_at(20), cell_size, width, height)
        .map_err(|e| Error::Parse {
            offset: 12,
            message: e.to_string(),
        })?;
    let nodata = f32::from_le_bytes(bytes[36..40].try_into().unwrap());
    Ok((geometry, nodata))
}

pub(crate) fn decode_agt1(bytes: &[u8]) -> Result<RasterGrid> {
    let (geometry, nodata) = parse_header(bytes)?;
    let expected = HEADER_LEN + geometry.len() * 4;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected),
            message: format!("AGT1 payload is {} bytes, expected {expected}", bytes.len()),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    RasterGrid::new(geometry, nodata as f64, values)
}

pub fn read_agt1(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_agt1(&bytes)
}

pub fn read_agt1_header(path: impl AsRef<Path>) -> Result<GridGeometry> {
    let path = path.as_ref();
    let mut buf = [0u8; HEADER_LEN];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = f.read(&mut buf[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    parse_header(&buf[..filled]).map(|(g, _)| g)
}

pub(crate) fn encode_agt1(grid: &RasterGrid) -> Vec<u8> {
    let g = &grid.geometry;
    let mut out = Vec::with_capacity(HEADER_LEN + g.len() * 4);
    out.extend_from_slice(&AGT1_MAGIC);
    out.extend_from_slice(&(g.width as u32).to_le_bytes());
    out.extend_from_slice(&(g.height as u32).to_le_bytes());
    out.extend_from_slice(&g.origin_x.to_le_bytes());
    out.extend_from_slice(&g.origin_y.to_le_bytes());
    out.extend_from_slice(&g.cell_size.to_le_bytes());
    out.extend_from_slice(&(grid.nodata as f32).to_le_bytes());
    for &v in grid.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_agt1(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_agt1(grid)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let g = RasterGrid::filled(GridGeometry::new(1.0, 2.0, 0.5, 2, 1).unwrap(), -1.0, 3.0);
        let bytes = encode_agt1(&g);
        assert_eq!(&bytes[..4], &[0x41, 0x47, 0x54, 0x31]);
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[28..36], &0.5f64.to_le_bytes());
        assert_eq!(&bytes[36..40], &(-1.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 40 + 8);
        assert_eq!(&bytes[40..44], &3.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let g = RasterGrid::filled(GridGeometry::new(0.0, 0.0, 1.0, 3, 3).unwrap(), -1.0, 3.0);
        let mut bytes = encode_agt1(&g);
        bytes.pop();
        assert!(matches!(decode_agt1(&bytes), Err(Error::Parse { .. })));
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_agt1(&bytes), Err(Error::Parse { offset: 4, .. })));
    }
}
