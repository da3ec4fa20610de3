//! Matrix-free periodic cell problems on a regular voxel mesh.
//!
//! Two meshes are supported. `Periodic` is the full unit cell with nodes
//! wrapped across opposite faces and node 0 pinned. `MirrorEighth` is the
//! `[0, n]^3` corner of a cell that is mirror-symmetric about its three
//! mid-planes; there the periodic fluctuation field has definite parity on
//! each mirror plane and the problem reduces to an eighth cell with
//! roller-type constraints chosen per load case.

use log::trace;

use super::element::{affine_nodal, element_stiffness, node_offset, ElementMatrix};
use super::tensor::BaseMaterial;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellBoundary {
    Periodic,
    MirrorEighth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Relative residual target `|r| <= tol |b|`.
    pub tol: f64,
    /// Defaults to `10 n^3`.
    pub max_iters: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: None }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iters: None }
    }
}

/// Converged fluctuation field for one macroscopic test strain.
#[derive(Clone, Debug)]
pub struct LoadSolution {
    pub strain: [f64; 6],
    pub fluctuation: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub struct CellProblem {
    n: usize,
    boundary: CellBoundary,
    nodes_per_axis: usize,
    ke: Box<ElementMatrix>,
    affine: [[f64; 24]; 6],
    stiffness: Vec<f64>,
    elem_nodes: Vec<[u32; 8]>,
}

impl CellProblem {
    /// `stiffness` holds the per-element scale of the base element matrix,
    /// in voxel order.
    pub fn new(n: usize, boundary: CellBoundary, base: &BaseMaterial, stiffness: Vec<f64>) -> Result<Self> {
        base.validate()?;
        if n == 0 || stiffness.len() != n.pow(3) {
            return Err(Error::ResolutionMismatch(format!("{} element stiffnesses for n = {n}", stiffness.len())));
        }
        if boundary == CellBoundary::Periodic && n < 2 {
            return Err(Error::ResolutionMismatch("periodic cell needs n >= 2".into()));
        }
        let nodes_per_axis = match boundary {
            CellBoundary::Periodic => n,
            CellBoundary::MirrorEighth => n + 1,
        };
        let node = |x: usize, y: usize, z: usize| -> u32 {
            let (x, y, z) = match boundary {
                CellBoundary::Periodic => (x % n, y % n, z % n),
                CellBoundary::MirrorEighth => (x, y, z),
            };
            (x + nodes_per_axis * (y + nodes_per_axis * z)) as u32
        };
        let mut elem_nodes = Vec::with_capacity(n.pow(3));
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let mut ids = [0u32; 8];
                    for (a, id) in ids.iter_mut().enumerate() {
                        let o = node_offset(a);
                        *id = node(x + o[0], y + o[1], z + o[2]);
                    }
                    elem_nodes.push(ids);
                }
            }
        }
        let mut affine = [[0.0; 24]; 6];
        for (i, row) in affine.iter_mut().enumerate() {
            let mut e = [0.0; 6];
            e[i] = 1.0;
            *row = affine_nodal(&e);
        }
        Ok(Self {
            n,
            boundary,
            nodes_per_axis,
            ke: Box::new(element_stiffness(base)),
            affine,
            stiffness,
            elem_nodes,
        })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn boundary(&self) -> CellBoundary {
        self.boundary
    }

    pub fn dof_count(&self) -> usize {
        3 * self.nodes_per_axis.pow(3)
    }

    pub fn element_count(&self) -> usize {
        self.elem_nodes.len()
    }

    pub fn stiffness(&self) -> &[f64] {
        &self.stiffness
    }

    /// Replaces the per-element stiffness scales, keeping the mesh.
    pub fn set_stiffness(&mut self, stiffness: Vec<f64>) -> Result<()> {
        if stiffness.len() != self.elem_nodes.len() {
            return Err(Error::ResolutionMismatch(format!("{} element stiffnesses", stiffness.len())));
        }
        self.stiffness = stiffness;
        Ok(())
    }

    fn fixed_dofs(&self, strain: &[f64; 6]) -> Result<Vec<bool>> {
        let mut fixed = vec![false; self.dof_count()];
        match self.boundary {
            CellBoundary::Periodic => {
                fixed[..3].fill(true);
            }
            CellBoundary::MirrorEighth => {
                let normal = strain[3..].iter().all(|&v| v == 0.0);
                let shear: Vec<usize> = (3..6).filter(|&k| strain[k] != 0.0).collect();
                // per face axis: which displacement components vanish
                let mut rule = [[false; 3]; 3];
                if normal {
                    for a in 0..3 {
                        rule[a][a] = true;
                    }
                } else if shear.len() == 1 && strain[..3].iter().all(|&v| v == 0.0) {
                    let (a, b, c) = match shear[0] {
                        3 => (1, 2, 0),
                        4 => (0, 2, 1),
                        _ => (0, 1, 2),
                    };
                    rule[c][c] = true;
                    rule[a][c] = true;
                    rule[a][b] = true;
                    rule[b][c] = true;
                    rule[b][a] = true;
                } else {
                    return Err(Error::InvalidArgument(
                        "mirror-eighth cells take either normal strains or a single shear strain".into(),
                    ));
                }
                let m = self.nodes_per_axis;
                for z in 0..m {
                    for y in 0..m {
                        for x in 0..m {
                            let id = x + m * (y + m * z);
                            for (axis, c) in [x, y, z].into_iter().enumerate() {
                                if c == 0 || c == self.n {
                                    for comp in 0..3 {
                                        if rule[axis][comp] {
                                            fixed[3 * id + comp] = true;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(fixed)
    }

    #[inline]
    fn gather(&self, e: usize, v: &[f64]) -> [f64; 24] {
        let mut out = [0.0; 24];
        for (a, &id) in self.elem_nodes[e].iter().enumerate() {
            let b = 3 * id as usize;
            out[3 * a..3 * a + 3].copy_from_slice(&v[b..b + 3]);
        }
        out
    }

    /// `y = K x` with the global stiffness assembled on the fly.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        let ke = &*self.ke;
        for (e, nodes) in self.elem_nodes.iter().enumerate() {
            let s = self.stiffness[e];
            let xe = self.gather(e, x);
            for (a, &id) in nodes.iter().enumerate() {
                let b = 3 * id as usize;
                for c in 0..3 {
                    let row = &ke[3 * a + c];
                    let mut acc = 0.0;
                    for k in 0..24 {
                        acc += row[k] * xe[k];
                    }
                    y[b + c] += s * acc;
                }
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dof_count()];
        for (e, nodes) in self.elem_nodes.iter().enumerate() {
            for (a, &id) in nodes.iter().enumerate() {
                for c in 0..3 {
                    d[3 * id as usize + c] += self.stiffness[e] * self.ke[3 * a + c][3 * a + c];
                }
            }
        }
        d
    }

    /// Right-hand side `-sum_e s_e K_e chi_e` and the norm of its
    /// unassembled element contributions.
    fn load(&self, strain: &[f64; 6]) -> (Vec<f64>, f64) {
        let chi = affine_nodal(strain);
        let mut fe = [0.0; 24];
        for (r, f) in fe.iter_mut().enumerate() {
            *f = (0..24).map(|k| self.ke[r][k] * chi[k]).sum();
        }
        let fe_norm2: f64 = fe.iter().map(|v| v * v).sum();
        let mut b = vec![0.0; self.dof_count()];
        let mut scale2 = 0.0;
        for (e, nodes) in self.elem_nodes.iter().enumerate() {
            let s = self.stiffness[e];
            scale2 += s * s * fe_norm2;
            for (a, &id) in nodes.iter().enumerate() {
                for c in 0..3 {
                    b[3 * id as usize + c] -= s * fe[3 * a + c];
                }
            }
        }
        (b, scale2.sqrt())
    }

    /// Jacobi-preconditioned conjugate gradients for the fluctuation field.
    pub fn solve(&self, strain: [f64; 6], initial: Option<&[f64]>, opts: &SolverOptions) -> Result<LoadSolution> {
        let ndof = self.dof_count();
        let fixed = self.fixed_dofs(&strain)?;
        let (mut b, load_scale) = self.load(&strain);
        for (v, &f) in b.iter_mut().zip(&fixed) {
            if f {
                *v = 0.0;
            }
        }
        let bnorm = norm(&b);
        let max_iters = opts.max_iters.unwrap_or(10 * self.n.pow(3)).max(1);
        if bnorm <= 1e-14 * load_scale || bnorm == 0.0 {
            // affine field is already in equilibrium (uniform cell)
            return Ok(LoadSolution { strain, fluctuation: vec![0.0; ndof], iterations: 0, residual: 0.0 });
        }

        let inv_diag: Vec<f64> = self
            .diagonal()
            .iter()
            .zip(&fixed)
            .map(|(&d, &f)| if f || d <= 0.0 { 0.0 } else { 1.0 / d })
            .collect();

        let mut x = match initial {
            Some(init) if init.len() == ndof => init.to_vec(),
            _ => vec![0.0; ndof],
        };
        for (v, &f) in x.iter_mut().zip(&fixed) {
            if f {
                *v = 0.0;
            }
        }
        let mut r = b;
        let mut q = vec![0.0; ndof];
        if x.iter().any(|&v| v != 0.0) {
            self.apply(&x, &mut q);
            for i in 0..ndof {
                r[i] = if fixed[i] { 0.0 } else { r[i] - q[i] };
            }
        }
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut rel = norm(&r) / bnorm;
        let mut it = 0;
        while rel > opts.tol {
            if it >= max_iters {
                return Err(Error::SolverDiverged { residual: rel, iterations: it });
            }
            self.apply(&p, &mut q);
            for i in 0..ndof {
                if fixed[i] {
                    q[i] = 0.0;
                }
            }
            let pq = dot(&p, &q);
            if !(pq > 0.0) {
                return Err(Error::SolverDiverged { residual: rel, iterations: it });
            }
            let alpha = rz / pq;
            for i in 0..ndof {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            for i in 0..ndof {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..ndof {
                p[i] = z[i] + beta * p[i];
            }
            rel = norm(&r) / bnorm;
            it += 1;
        }
        trace!("pcg n={} strain={strain:?} iterations={it} residual={rel:.2e}", self.n);
        Ok(LoadSolution { strain, fluctuation: x, iterations: it, residual: rel })
    }

    fn total_element(&self, e: usize, sol: &LoadSolution) -> [f64; 24] {
        let mut d = self.gather(e, &sol.fluctuation);
        let chi = affine_nodal(&sol.strain);
        for k in 0..24 {
            d[k] += chi[k];
        }
        d
    }

    fn quad(&self, a: &[f64; 24], b: &[f64; 24]) -> f64 {
        let mut w = 0.0;
        for r in 0..24 {
            let row = &self.ke[r];
            let mut acc = 0.0;
            for k in 0..24 {
                acc += row[k] * b[k];
            }
            w += a[r] * acc;
        }
        w
    }

    /// Per-element mutual energy `d_a^T K_e d_b` of the total displacement
    /// fields, without the element stiffness scale. Divided by the cell
    /// volume this is the derivative of `C_ab` with respect to each element
    /// scale.
    pub fn element_energies(&self, a: &LoadSolution, b: &LoadSolution) -> Vec<f64> {
        (0..self.element_count())
            .map(|e| {
                let da = self.total_element(e, a);
                let db = self.total_element(e, b);
                self.quad(&da, &db)
            })
            .collect()
    }

    /// Effective stiffness entry from the mutual energy of two solutions.
    pub fn mutual(&self, a: &LoadSolution, b: &LoadSolution) -> f64 {
        let energies = self.element_energies(a, b);
        energies.iter().zip(&self.stiffness).map(|(w, s)| w * s).sum::<f64>() / self.volume()
    }

    /// Volume-averaged stress for a solved load case, i.e. one column of the
    /// effective stiffness.
    pub fn average_stress(&self, sol: &LoadSolution) -> [f64; 6] {
        let mut out = [0.0; 6];
        for e in 0..self.element_count() {
            let d = self.total_element(e, sol);
            let s = self.stiffness[e];
            for (j, o) in out.iter_mut().enumerate() {
                *o += s * self.quad(&self.affine[j], &d);
            }
        }
        if self.boundary == CellBoundary::MirrorEighth {
            // couplings across strain classes cancel between mirror images
            let normal = sol.strain[3..].iter().all(|&v| v == 0.0);
            for (j, o) in out.iter_mut().enumerate() {
                let keep = if normal { j < 3 } else { sol.strain[j] != 0.0 };
                if !keep {
                    *o = 0.0;
                }
            }
        }
        out.map(|v| v / self.volume())
    }

    pub fn volume(&self) -> f64 {
        self.n.pow(3) as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
