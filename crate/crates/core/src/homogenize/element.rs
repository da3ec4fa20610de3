//! Trilinear 8-node hexahedron on the unit cube.
//!
//! Local node `a = ax + 2 ay + 4 az` sits at `(ax, ay, az)`; local dof
//! `3 a + c` is displacement component `c` of node `a`.

use super::tensor::BaseMaterial;

pub type ElementMatrix = [[f64; 24]; 24];

pub fn node_offset(a: usize) -> [usize; 3] {
    [a & 1, (a >> 1) & 1, (a >> 2) & 1]
}

/// Strain-displacement matrix (engineering shear) at a point of the unit cube.
fn strain_displacement(p: [f64; 3]) -> [[f64; 24]; 6] {
    let mut b = [[0.0; 24]; 6];
    for a in 0..8 {
        let o = node_offset(a);
        let lin = |k: usize| if o[k] == 1 { p[k] } else { 1.0 - p[k] };
        let sgn = |k: usize| if o[k] == 1 { 1.0 } else { -1.0 };
        let dx = sgn(0) * lin(1) * lin(2);
        let dy = lin(0) * sgn(1) * lin(2);
        let dz = lin(0) * lin(1) * sgn(2);
        let (ux, uy, uz) = (3 * a, 3 * a + 1, 3 * a + 2);
        b[0][ux] = dx;
        b[1][uy] = dy;
        b[2][uz] = dz;
        b[3][uy] = dz;
        b[3][uz] = dy;
        b[4][ux] = dz;
        b[4][uz] = dx;
        b[5][ux] = dy;
        b[5][uy] = dx;
    }
    b
}

/// Element stiffness of a unit voxel of the base material, 2x2x2 Gauss.
pub fn element_stiffness(base: &BaseMaterial) -> ElementMatrix {
    let c = base.stiffness().0;
    let g = 0.5 / 3f64.sqrt();
    let mut ke = [[0.0; 24]; 24];
    for &px in &[0.5 - g, 0.5 + g] {
        for &py in &[0.5 - g, 0.5 + g] {
            for &pz in &[0.5 - g, 0.5 + g] {
                let b = strain_displacement([px, py, pz]);
                let mut cb = [[0.0; 24]; 6];
                for i in 0..6 {
                    for k in 0..24 {
                        cb[i][k] = (0..6).map(|j| c[i][j] * b[j][k]).sum();
                    }
                }
                // unit cube: each Gauss point carries weight 1/8
                for r in 0..24 {
                    for s in 0..24 {
                        ke[r][s] += 0.125 * (0..6).map(|i| b[i][r] * cb[i][s]).sum::<f64>();
                    }
                }
            }
        }
    }
    ke
}

/// Nodal displacements of the affine field with Voigt strain `strain`,
/// evaluated at the local nodes.
pub fn affine_nodal(strain: &[f64; 6]) -> [f64; 24] {
    let e = [
        [strain[0], 0.5 * strain[5], 0.5 * strain[4]],
        [0.5 * strain[5], strain[1], 0.5 * strain[3]],
        [0.5 * strain[4], 0.5 * strain[3], strain[2]],
    ];
    let mut out = [0.0; 24];
    for a in 0..8 {
        let x = node_offset(a).map(|v| v as f64);
        for c in 0..3 {
            out[3 * a + c] = (0..3).map(|k| e[c][k] * x[k]).sum();
        }
    }
    out
}
