//! Binary file formats.
//!
//! `.vxl` occupancy grid:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 4     | magic `MVX1`                              |
//! | 4     | version, u32 LE, = 1                      |
//! | 4     | resolution N, u32 LE                      |
//! | 1     | role, 0 = full cell, 1 = eighth cell      |
//! | ⌈N³/8⌉| occupancy, voxel `8b+k` in bit `k` of byte `b` |
//!
//! Density field: magic `MVXF`, version u32 LE, N u32 LE, then N³ f32 LE
//! values in the same voxel order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::voxel::{CellRole, VoxelGrid};

pub const VXL_MAGIC: [u8; 4] = *b"MVX1";
pub const DENSITY_MAGIC: [u8; 4] = *b"MVXF";
pub const FORMAT_VERSION: u32 = 1;
const VXL_HEADER: usize = 13;
const DENSITY_HEADER: usize = 12;

pub fn write_vxl(grid: &VoxelGrid) -> Vec<u8> {
    let n = grid.resolution();
    let voxels = grid.len();
    let mut out = Vec::with_capacity(VXL_HEADER + voxels.div_ceil(8));
    out.extend_from_slice(&VXL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.push(match grid.role() {
        CellRole::Full => 0,
        CellRole::Eighth => 1,
    });
    let mut payload = vec![0u8; voxels.div_ceil(8)];
    for (i, &solid) in grid.occupancy().iter().enumerate() {
        if solid {
            payload[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&payload);
    out
}

fn read_header(bytes: &[u8], magic: [u8; 4], len: usize) -> Result<usize> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload { expected: len, found: bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < len {
        return Err(Error::TruncatedPayload { expected: len, found: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 || n > 4096 {
        return Err(Error::ResolutionMismatch(format!("resolution {n} in header")));
    }
    Ok(n)
}

pub fn read_vxl(bytes: &[u8]) -> Result<VoxelGrid> {
    let n = read_header(bytes, VXL_MAGIC, VXL_HEADER)?;
    let role = match bytes[12] {
        0 => CellRole::Full,
        1 => CellRole::Eighth,
        r => return Err(Error::InvalidArgument(format!("unknown cell role byte {r}"))),
    };
    let voxels = n.pow(3);
    let expected = VXL_HEADER + voxels.div_ceil(8);
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::ResolutionMismatch(format!(
            "{} trailing bytes after a {n}^3 payload",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[VXL_HEADER..];
    if voxels % 8 != 0 && payload[payload.len() - 1] >> (voxels % 8) != 0 {
        return Err(Error::ResolutionMismatch("padding bits set past the last voxel".into()));
    }
    let occupancy = (0..voxels).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
    VoxelGrid::from_occupancy(n, role, occupancy)
}

pub fn load_vxl(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    read_vxl(&std::fs::read(path)?)
}

pub fn save_vxl(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    std::fs::write(path, write_vxl(grid))?;
    Ok(())
}

pub fn write_density(resolution: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != resolution.pow(3) {
        return Err(Error::ResolutionMismatch(format!("{} values for resolution {resolution}", values.len())));
    }
    let mut out = Vec::with_capacity(DENSITY_HEADER + 4 * values.len());
    out.extend_from_slice(&DENSITY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(resolution as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(resolution, values)`.
pub fn read_density(bytes: &[u8]) -> Result<(usize, Vec<f32>)> {
    let n = read_header(bytes, DENSITY_MAGIC, DENSITY_HEADER)?;
    let expected = DENSITY_HEADER + 4 * n.pow(3);
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::ResolutionMismatch(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let values = bytes[DENSITY_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((n, values))
}
