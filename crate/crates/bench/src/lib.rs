//! Benchmarks live in `benches/`; this crate only hosts them.

use metavox_core::{CellRole, VoxelGrid};

/// A connected, permutation-symmetric test structure: three orthogonal
/// struts of the given thickness along the eighth-cell faces.
pub fn strut_cell(n: usize, thickness: usize) -> VoxelGrid {
    VoxelGrid::from_fn(n, CellRole::Eighth, |x, y, z| {
        let t = thickness;
        (x < t && y < t) || (y < t && z < t) || (x < t && z < t)
    })
}
