//! Periodic finite-element homogenization of linear elasticity on voxel
//! cells, reduction to cubic form, and the analytic bounds used as targets.

mod bounds;
mod cell;
mod element;
mod tensor;

pub use bounds::{hs_upper, voigt_bulk};
pub use cell::{CellBoundary, CellProblem, LoadSolution, SolverOptions};
pub use element::{affine_nodal, element_stiffness, ElementMatrix};
pub use tensor::{
    derived_moduli, directional_youngs, reduce_cubic, BaseMaterial, CubicTensor, DerivedModuli, FullTensor6,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{CellRole, VoxelGrid};

/// Unit macroscopic strain number `i` in Voigt order.
pub fn unit_strain(i: usize) -> [f64; 6] {
    let mut e = [0.0; 6];
    e[i] = 1.0;
    e
}

pub const HYDROSTATIC_STRAIN: [f64; 6] = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];

/// Checks the density range and maps it to element stiffness scales.
pub fn simp_stiffness(density: &[f64], base: &BaseMaterial, simp_exponent: f64) -> Result<Vec<f64>> {
    if !(simp_exponent >= 1.0) {
        return Err(Error::InvalidArgument(format!("simp exponent {simp_exponent} < 1")));
    }
    let lo = base.void_floor * (1.0 - 1e-9);
    density
        .iter()
        .map(|&d| {
            if d.is_finite() && d >= lo && d <= 1.0 + 1e-12 {
                Ok(d.powf(simp_exponent))
            } else {
                Err(Error::InvalidDensity(format!("density {d} outside [{}, 1]", base.void_floor)))
            }
        })
        .collect()
}

/// Binary grid to density: solid 1, void `void_floor`.
pub fn grid_density(grid: &VoxelGrid, base: &BaseMaterial) -> Vec<f64> {
    grid.occupancy().iter().map(|&s| if s { 1.0 } else { base.void_floor }).collect()
}

/// Effective 6x6 tensor of a full periodic cell with `n^3` element densities.
pub fn homogenize(
    density: &[f64],
    n: usize,
    base: &BaseMaterial,
    simp_exponent: f64,
    opts: &SolverOptions,
) -> Result<FullTensor6> {
    let stiffness = simp_stiffness(density, base, simp_exponent)?;
    let problem = CellProblem::new(n, CellBoundary::Periodic, base, stiffness)?;
    let solutions = (0..6)
        .map(|i| problem.solve(unit_strain(i), None, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut c = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in i..6 {
            let v = problem.mutual(&solutions[i], &solutions[j]);
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    Ok(FullTensor6(c))
}

/// Effective tensor of the full cell generated by mirroring an eighth-cell
/// density field, solved on the eighth cell only.
pub fn homogenize_eighth(
    density: &[f64],
    n: usize,
    base: &BaseMaterial,
    simp_exponent: f64,
    opts: &SolverOptions,
) -> Result<FullTensor6> {
    let stiffness = simp_stiffness(density, base, simp_exponent)?;
    let problem = CellProblem::new(n, CellBoundary::MirrorEighth, base, stiffness)?;
    let normal = (0..3)
        .map(|i| problem.solve(unit_strain(i), None, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut c = [[0.0; 6]; 6];
    for i in 0..3 {
        for j in i..3 {
            let v = problem.mutual(&normal[i], &normal[j]);
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    for i in 3..6 {
        let s = problem.solve(unit_strain(i), None, opts)?;
        c[i][i] = problem.mutual(&s, &s);
    }
    Ok(FullTensor6(c))
}

/// Cubic constants of a mirror- and permutation-symmetric eighth cell from
/// two load cases (one normal, one shear); other cells fall back to the
/// six-case eighth-cell solve.
pub fn homogenize_cubic_eighth(
    grid: &VoxelGrid,
    base: &BaseMaterial,
    opts: &SolverOptions,
) -> Result<CubicTensor> {
    if grid.role() != CellRole::Eighth {
        return Err(Error::InvalidArgument("expected an eighth cell".into()));
    }
    let n = grid.resolution();
    let density = grid_density(grid, base);
    if !grid.is_permutation_symmetric() {
        return reduce_cubic(&homogenize_eighth(&density, n, base, 1.0, opts)?);
    }
    let problem = CellProblem::new(n, CellBoundary::MirrorEighth, base, density)?;
    let axial = problem.solve(unit_strain(0), None, opts)?;
    let col = problem.average_stress(&axial);
    let shear = problem.solve(unit_strain(3), None, opts)?;
    let c11 = problem.mutual(&axial, &axial);
    let c44 = problem.mutual(&shear, &shear);
    let (c12, c13) = (col[1], col[2]);
    if !(c11 > 0.0) {
        return Err(Error::DegenerateTensor(format!("c11 = {c11}")));
    }
    Ok(CubicTensor {
        c11,
        c12: 0.5 * (c12 + c13),
        c44,
        asymmetry_residual: (0.5 * (c12 - c13)).abs().max((col[0] - c11).abs()) / c11,
    })
}

/// Homogenizes a binary grid: full cells with the periodic solver, eighth
/// cells with the mirror-reduced solver.
pub fn homogenize_grid(grid: &VoxelGrid, base: &BaseMaterial, opts: &SolverOptions) -> Result<FullTensor6> {
    let density = grid_density(grid, base);
    match grid.role() {
        CellRole::Full => homogenize(&density, grid.resolution(), base, 1.0, opts),
        CellRole::Eighth => homogenize_eighth(&density, grid.resolution(), base, 1.0, opts),
    }
}

/// JSON form of a homogenized tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub c11: f64,
    pub c12: f64,
    pub c44: f64,
    pub residual: f64,
    pub full: Vec<f64>,
}

impl TensorReport {
    pub fn new(full: &FullTensor6) -> Result<Self> {
        let c = reduce_cubic(full)?;
        Ok(Self { c11: c.c11, c12: c.c12, c44: c.c44, residual: c.asymmetry_residual, full: full.flat().to_vec() })
    }
}
