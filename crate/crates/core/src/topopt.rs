//! SIMP inverse homogenization on the eighth cell.
//!
//! Designs live on an `n^3` eighth cell; the analysed structure is its
//! mirror tessellation, solved with the mirror-reduced cell problem so the
//! sensitivities of all eight mirror images land on the eighth cell
//! automatically. Updates use optimality criteria with a volume bisection
//! and a density filter.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogenize::{
    derived_moduli, homogenize_eighth, reduce_cubic, unit_strain, BaseMaterial, CellBoundary, CellProblem,
    CubicTensor, LoadSolution, SolverOptions, HYDROSTATIC_STRAIN,
};
use crate::voxel::{symmetrize_permutations, CellRole, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaxBulk,
    MaxShear,
    MaxYoung,
    MinPoisson,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_bulk" => Ok(Objective::MaxBulk),
            "max_shear" => Ok(Objective::MaxShear),
            "max_young" => Ok(Objective::MaxYoung),
            "min_poisson" => Ok(Objective::MinPoisson),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective {other:?} (expected max_bulk, max_shear, max_young, min_poisson)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopOptProblem {
    pub objective: Objective,
    pub target_vf: f64,
    /// Penalize `(Z - 1)^2` with a weight that doubles every
    /// `isotropy_ramp` iterations.
    pub isotropy: bool,
    pub isotropy_weight: f64,
    pub isotropy_ramp: usize,
    pub zener_band: (f64, f64),
    /// Density filter radius in elements.
    pub filter_radius: f64,
    pub simp_exponent: f64,
    pub max_iters: usize,
    pub move_limit: f64,
    pub damping: f64,
    /// Stop once the largest density change falls below this.
    pub change_tol: f64,
    pub base: BaseMaterial,
    pub solver_tol: f64,
}

impl Default for TopOptProblem {
    fn default() -> Self {
        Self {
            objective: Objective::MaxBulk,
            target_vf: 0.4,
            isotropy: false,
            isotropy_weight: 1.0,
            isotropy_ramp: 25,
            zener_band: (0.95, 1.05),
            filter_radius: 1.5,
            simp_exponent: 3.0,
            max_iters: 200,
            move_limit: 0.2,
            damping: 0.5,
            change_tol: 0.01,
            base: BaseMaterial::default(),
            solver_tol: 1e-6,
        }
    }
}

impl TopOptProblem {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(0.05..=1.0).contains(&self.target_vf) {
            return Err(Error::InvalidArgument(format!("target_vf {} outside [0.05, 1]", self.target_vf)));
        }
        if !(self.filter_radius >= 1.0) {
            return Err(Error::InvalidArgument(format!("filter_radius {} < 1", self.filter_radius)));
        }
        if !(self.simp_exponent >= 1.0) {
            return Err(Error::InvalidArgument(format!("simp_exponent {} < 1", self.simp_exponent)));
        }
        if !(self.move_limit > 0.0 && self.damping > 0.0) {
            return Err(Error::InvalidArgument("move_limit and damping must be positive".into()));
        }
        Ok(())
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions::with_tol(self.solver_tol)
    }
}

/// Continuous element densities on an eighth cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignField {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl DesignField {
    pub fn uniform(resolution: usize, value: f64) -> Self {
        Self { resolution, values: vec![value; resolution.pow(3)] }
    }

    pub fn from_grid(grid: &VoxelGrid) -> Self {
        Self {
            resolution: grid.resolution(),
            values: grid.occupancy().iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn is_permutation_symmetric(&self) -> bool {
        let s = symmetrize_permutations(&self.values, self.resolution);
        s.iter().zip(&self.values).all(|(a, b)| (a - b).abs() <= 1e-12)
    }

    /// Binary grid whose solid fraction is the achievable value closest to
    /// `target_vf` (elements sharing a density value switch together).
    pub fn threshold(&self, target_vf: f64) -> VoxelGrid {
        let total = self.values.len();
        let mut sorted: Vec<f64> = self.values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let want = target_vf * total as f64;
        // candidate cut after position k (k solids) is only valid at value changes
        let mut best_k = 0usize;
        let mut best_gap = want;
        for k in 1..=total {
            if k < total && sorted[k] == sorted[k - 1] {
                continue;
            }
            let gap = (k as f64 - want).abs();
            if gap < best_gap {
                best_gap = gap;
                best_k = k;
            }
        }
        let cut = if best_k == 0 { f64::INFINITY } else { sorted[best_k - 1] };
        let occupancy = self.values.iter().map(|&v| v >= cut).collect();
        VoxelGrid::from_occupancy(self.resolution, CellRole::Eighth, occupancy).expect("sizes agree")
    }
}

/// One Fourier mode `cos_coef cos(2 pi k.x) + sin_coef sin(2 pi k.x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub k: [i32; 3],
    pub cos_coef: f64,
    pub sin_coef: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrigInitConfig {
    /// Largest wave number per axis.
    pub max_freq: usize,
    pub seed: u64,
    /// Explicit modes; when absent, coefficients are drawn from `seed`.
    pub coefficients: Option<Vec<TrigTerm>>,
    pub amplitude: f64,
    /// Average the field over the six axis permutations.
    pub symmetric: bool,
}

impl Default for TrigInitConfig {
    fn default() -> Self {
        Self { max_freq: 2, seed: 0, coefficients: None, amplitude: 1.0, symmetric: true }
    }
}

impl TrigInitConfig {
    pub fn terms(&self) -> Vec<TrigTerm> {
        if let Some(terms) = &self.coefficients {
            return terms.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let m = self.max_freq as i32;
        let mut terms = Vec::new();
        for kz in 0..=m {
            for ky in -m..=m {
                for kx in -m..=m {
                    // one of each +-k pair
                    if (kz, ky, kx) <= (0, 0, 0) {
                        continue;
                    }
                    let len = ((kx * kx + ky * ky + kz * kz) as f64).sqrt();
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let b: f64 = StandardNormal.sample(&mut rng);
                    terms.push(TrigTerm { k: [kx, ky, kz], cos_coef: a / len, sin_coef: b / len });
                }
            }
        }
        terms
    }

    /// Zero-mean-free raw field at the element centres, scaled to unit peak.
    fn raw_field(&self, n: usize) -> Vec<f64> {
        let terms = self.terms();
        let mut g = vec![0.0; n.pow(3)];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = [x, y, z].map(|c| (c as f64 + 0.5) / n as f64);
                    let v: f64 = terms
                        .iter()
                        .map(|t| {
                            let phase = 2.0
                                * std::f64::consts::PI
                                * (t.k[0] as f64 * p[0] + t.k[1] as f64 * p[1] + t.k[2] as f64 * p[2]);
                            t.cos_coef * phase.cos() + t.sin_coef * phase.sin()
                        })
                        .sum();
                    g[x + n * (y + n * z)] = v;
                }
            }
        }
        if self.symmetric {
            g = symmetrize_permutations(&g, n);
        }
        let peak = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            g.iter_mut().for_each(|v| *v *= self.amplitude / peak);
        }
        g
    }
}

/// Random trigonometric density field shifted so its mean is `target_vf`.
pub fn trig_init(cfg: &TrigInitConfig, n: usize, target_vf: f64) -> Result<DesignField> {
    if n == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    if !(0.0..=1.0).contains(&target_vf) {
        return Err(Error::InvalidArgument(format!("target_vf {target_vf} outside [0, 1]")));
    }
    let g = cfg.raw_field(n);
    let field = |c: f64| g.iter().map(|v| (v + c).clamp(0.0, 1.0)).collect::<Vec<_>>();
    let mean = |c: f64| field(c).iter().sum::<f64>() / g.len() as f64;
    let amp = cfg.amplitude.abs();
    let (mut lo, mut hi) = (-amp - 1.0, amp + 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target_vf {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(DesignField { resolution: n, values: field(0.5 * (lo + hi)) })
}

/// Thresholded trigonometric field: a binary eighth cell at `target_vf`.
pub fn trig_level_set(cfg: &TrigInitConfig, n: usize, target_vf: f64) -> Result<VoxelGrid> {
    let g = cfg.raw_field(n);
    Ok(DesignField { resolution: n, values: g }.threshold(target_vf))
}

/// Linear density filter on an eighth cell with mirror-reflected
/// neighbourhoods, so it equals the plain filter on the tessellated cell.
#[derive(Clone, Debug)]
pub struct DensityFilter {
    rows: Vec<Vec<(u32, f64)>>,
    row_sums: Vec<f64>,
}

impl DensityFilter {
    pub fn new(n: usize, radius: f64) -> Self {
        let reach = radius.ceil() as i64 - 1;
        let reflect = |i: i64| -> usize {
            let n = n as i64;
            let mut i = i.rem_euclid(2 * n);
            if i >= n {
                i = 2 * n - 1 - i;
            }
            i as usize
        };
        let mut rows = Vec::with_capacity(n.pow(3));
        let mut row_sums = Vec::with_capacity(n.pow(3));
        for z in 0..n as i64 {
            for y in 0..n as i64 {
                for x in 0..n as i64 {
                    let mut row: Vec<(u32, f64)> = Vec::new();
                    for dz in -reach..=reach {
                        for dy in -reach..=reach {
                            for dx in -reach..=reach {
                                let w = radius - ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                                if w <= 0.0 {
                                    continue;
                                }
                                let j = reflect(x + dx) + n * (reflect(y + dy) + n * reflect(z + dz));
                                match row.iter_mut().find(|(k, _)| *k as usize == j) {
                                    Some(entry) => entry.1 += w,
                                    None => row.push((j as u32, w)),
                                }
                            }
                        }
                    }
                    row_sums.push(row.iter().map(|(_, w)| w).sum());
                    rows.push(row);
                }
            }
        }
        Self { rows, row_sums }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.row_sums)
            .map(|(row, s)| row.iter().map(|&(j, w)| w * x[j as usize]).sum::<f64>() / s)
            .collect()
    }

    /// Transpose: pulls a gradient on filtered values back to the design.
    pub fn backprop(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for (i, (row, s)) in self.rows.iter().zip(&self.row_sums).enumerate() {
            let gi = g[i] / s;
            for &(j, w) in row {
                out[j as usize] += w * gi;
            }
        }
        out
    }
}

/// Value and sensitivities of one design.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Minimized quantity, including any isotropy penalty.
    pub value: f64,
    /// Raw property (K, G, E or nu).
    pub property: f64,
    pub zener: Option<f64>,
    /// d value / d design variable.
    pub grad: Vec<f64>,
    /// Filtered, clamped densities that were analysed.
    pub physical: Vec<f64>,
}

/// Stateful evaluator: keeps the mesh, filter and warm starts across calls.
pub struct Evaluator {
    problem: TopOptProblem,
    cell: CellProblem,
    filter: DensityFilter,
    warm: Vec<Option<Vec<f64>>>,
    n: usize,
}

#[derive(Clone, Copy)]
enum CaseSet {
    Hydrostatic,
    Normal,
}

impl Evaluator {
    pub fn new(problem: &TopOptProblem, n: usize) -> Result<Self> {
        problem.validate()?;
        let cell = CellProblem::new(n, CellBoundary::MirrorEighth, &problem.base, vec![1.0; n.pow(3)])?;
        Ok(Self {
            problem: problem.clone(),
            cell,
            filter: DensityFilter::new(n, problem.filter_radius),
            warm: vec![None; 7],
            n,
        })
    }

    pub fn filter(&self) -> &DensityFilter {
        &self.filter
    }

    fn solve(&mut self, slot: usize, strain: [f64; 6]) -> Result<LoadSolution> {
        let sol = self.cell.solve(strain, self.warm[slot].as_deref(), &self.problem.solver())?;
        self.warm[slot] = Some(sol.fluctuation.clone());
        Ok(sol)
    }

    pub fn physical(&self, x: &[f64]) -> Vec<f64> {
        let floor = self.problem.base.void_floor;
        self.filter.apply(x).into_iter().map(|v| v.clamp(floor, 1.0)).collect()
    }

    pub fn evaluate(&mut self, design: &DesignField, isotropy_weight: f64) -> Result<Evaluation> {
        if design.resolution != self.n || design.values.len() != self.n.pow(3) {
            return Err(Error::ResolutionMismatch(format!(
                "design resolution {} vs evaluator {}",
                design.resolution, self.n
            )));
        }
        if design.values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidDensity("design values must lie in [0, 1]".into()));
        }
        let p = self.problem.simp_exponent;
        let floor = self.problem.base.void_floor;
        let filtered = self.filter.apply(&design.values);
        let physical: Vec<f64> = filtered.iter().map(|v| v.clamp(floor, 1.0)).collect();
        let stiffness: Vec<f64> = physical.iter().map(|r| r.powf(p)).collect();
        self.cell.set_stiffness(stiffness.clone())?;
        let volume = self.cell.volume();
        let ne = physical.len();

        let objective = self.problem.objective;
        let isotropy = self.problem.isotropy;
        let cases = match objective {
            Objective::MaxBulk if !isotropy => CaseSet::Hydrostatic,
            _ => CaseSet::Normal,
        };
        let need_shear = objective == Objective::MaxShear || isotropy;

        // quantity value and d/d(stiffness scale) per element
        let accumulate = |w: &[f64]| -> (f64, Vec<f64>) {
            let v = w.iter().zip(&stiffness).map(|(a, s)| a * s).sum::<f64>() / volume;
            (v, w.iter().map(|a| a / volume).collect())
        };

        let mut c11 = (0.0, vec![0.0; ne]);
        let mut c12 = (0.0, vec![0.0; ne]);
        let mut c44 = (0.0, vec![0.0; ne]);
        let bulk: (f64, Vec<f64>) = match cases {
            CaseSet::Hydrostatic => {
                let h = self.solve(6, HYDROSTATIC_STRAIN)?;
                let (v, g) = accumulate(&self.cell.element_energies(&h, &h));
                (v / 9.0, g.into_iter().map(|a| a / 9.0).collect())
            }
            CaseSet::Normal => {
                let sols = (0..3).map(|i| self.solve(i, unit_strain(i))).collect::<Result<Vec<_>>>()?;
                let mut diag = vec![0.0; ne];
                let mut off = vec![0.0; ne];
                for i in 0..3 {
                    for j in i..3 {
                        let w = self.cell.element_energies(&sols[i], &sols[j]);
                        let target = if i == j { &mut diag } else { &mut off };
                        target.iter_mut().zip(&w).for_each(|(t, a)| *t += a / 3.0);
                    }
                }
                c11 = accumulate(&diag);
                c12 = accumulate(&off);
                ((c11.0 + 2.0 * c12.0) / 3.0, vec![0.0; ne])
            }
        };
        if need_shear {
            let mut w44 = vec![0.0; ne];
            for i in 3..6 {
                let s = self.solve(i, unit_strain(i))?;
                let w = self.cell.element_energies(&s, &s);
                w44.iter_mut().zip(&w).for_each(|(t, a)| *t += a / 3.0);
            }
            c44 = accumulate(&w44);
        }

        // objective as a function of (c11, c12, c44, bulk): value and partials
        let (a, b, s) = (c11.0, c12.0, c44.0);
        let (property, mut value, mut d11, mut d12, mut d44, mut dk) = match objective {
            Objective::MaxBulk => (bulk.0, -bulk.0, 0.0, 0.0, 0.0, -1.0),
            Objective::MaxShear => (s, -s, 0.0, 0.0, -1.0, 0.0),
            Objective::MaxYoung => {
                let e = (a - b) * (a + 2.0 * b) / (a + b);
                let de_da = ((a + 2.0 * b) + (a - b)) / (a + b) - e / (a + b);
                let de_db = (2.0 * (a - b) - (a + 2.0 * b)) / (a + b) - e / (a + b);
                (e, -e, -de_da, -de_db, 0.0, 0.0)
            }
            Objective::MinPoisson => {
                let nu = b / (a + b);
                let den = (a + b) * (a + b);
                (nu, nu, -b / den, a / den, 0.0, 0.0)
            }
        };
        let mut zener = None;
        if isotropy {
            let diff = a - b;
            let z = 2.0 * s / diff;
            zener = Some(z);
            let w = isotropy_weight;
            value += w * (z - 1.0).powi(2);
            let dz = 2.0 * w * (z - 1.0);
            d44 += dz * 2.0 / diff;
            d11 += dz * (-2.0 * s / (diff * diff));
            d12 += dz * (2.0 * s / (diff * diff));
        }
        if !value.is_finite() {
            return Err(Error::DegenerateTensor(format!("objective evaluated to {value}")));
        }
        if matches!(cases, CaseSet::Normal) && dk != 0.0 {
            d11 += dk / 3.0;
            d12 += 2.0 * dk / 3.0;
            dk = 0.0;
        }

        let mut grad_phys = vec![0.0; ne];
        for e in 0..ne {
            let ds = d11 * c11.1[e] + d12 * c12.1[e] + d44 * c44.1[e] + dk * bulk.1[e];
            // zero slope where the clamp is active
            let r = filtered[e];
            grad_phys[e] = if r < floor || r > 1.0 { 0.0 } else { ds * p * physical[e].powf(p - 1.0) };
        }
        let grad = self.filter.backprop(&grad_phys);
        Ok(Evaluation { value, property, zener, grad, physical })
    }
}

/// Objective value and design sensitivities for a single field (fresh
/// solves, initial isotropy weight).
pub fn objective_and_sensitivity(design: &DesignField, problem: &TopOptProblem) -> Result<(f64, Vec<f64>)> {
    let mut ev = Evaluator::new(problem, design.resolution)?;
    let out = ev.evaluate(design, problem.isotropy_weight)?;
    Ok((out.value, out.grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub property: f64,
    pub vf: f64,
    pub change: f64,
    pub zener: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopOptResult {
    #[serde(skip)]
    pub design: Option<VoxelGrid>,
    pub physical: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub tensor: CubicTensor,
    /// Property of the thresholded design.
    pub final_property: f64,
    /// `final_property` minus the property of the last continuous iterate.
    pub binarization_gap: f64,
    pub final_vf: f64,
}

impl TopOptResult {
    pub fn grid(&self) -> &VoxelGrid {
        self.design.as_ref().expect("result carries its design")
    }
}

/// Property of a cubic tensor for an objective.
pub fn property_of(objective: Objective, c: &CubicTensor) -> Result<f64> {
    Ok(match objective {
        Objective::MaxBulk => c.bulk(),
        Objective::MaxShear => c.c44,
        Objective::MaxYoung => derived_moduli(c)?.youngs,
        Objective::MinPoisson => derived_moduli(c)?.poisson,
    })
}

fn oc_update(
    x: &[f64],
    grad: &[f64],
    dv: &[f64],
    problem: &TopOptProblem,
    filter: &DensityFilter,
) -> (Vec<f64>, f64) {
    let floor = problem.base.void_floor;
    let volume = |xs: &[f64]| filter.apply(xs).iter().map(|v| v.clamp(floor, 1.0)).sum::<f64>() / xs.len() as f64;
    // OC needs negative sensitivities; subtracting s * dv only moves the
    // volume multiplier, so shift until every ratio g/dv is negative
    let ratios = grad.iter().zip(dv).map(|(g, v)| g / v);
    let (top, span) = ratios.fold((f64::NEG_INFINITY, 0.0f64), |(m, a), r| (m.max(r), a.max(r.abs())));
    let shift = if top > -1e-3 * span { top + 0.1 * span + 1e-300 } else { 0.0 };
    let grad: Vec<f64> = grad.iter().zip(dv).map(|(g, v)| g - shift * v).collect();
    let step = |lambda: f64| -> Vec<f64> {
        x.iter()
            .zip(&grad)
            .zip(dv)
            .map(|((&xe, &g), &v)| {
                let b = (-g / (v * lambda)).max(1e-10);
                let cand = xe * b.powf(problem.damping);
                let lo = (xe - problem.move_limit).max(0.0);
                let hi = (xe + problem.move_limit).min(1.0);
                cand.clamp(lo, hi)
            })
            .collect()
    };
    // bisection in log space
    let (mut lo, mut hi) = (1e-40f64.ln(), 1e40f64.ln());
    let mut best = step(1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        best = step(mid.exp());
        if volume(&best) > problem.target_vf {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let vf = volume(&best);
    (best, vf)
}

/// Optimality-criteria topology optimization from `init`.
pub fn optimize(problem: &TopOptProblem, init: &DesignField) -> Result<TopOptResult> {
    problem.validate()?;
    let n = init.resolution;
    let mut ev = Evaluator::new(problem, n)?;
    let symmetric = init.is_permutation_symmetric();
    let mut x = init.values.clone();
    let ones = vec![1.0; x.len()];
    let dv = ev.filter().backprop(&ones);
    let mut history = Vec::new();
    let mut last_property = f64::NAN;
    for iter in 0..problem.max_iters {
        let weight = if problem.isotropy {
            problem.isotropy_weight * 2f64.powi((iter / problem.isotropy_ramp.max(1)) as i32)
        } else {
            0.0
        };
        let eval = ev.evaluate(&DesignField { resolution: n, values: x.clone() }, weight)?;
        let grad = if symmetric { symmetrize_permutations(&eval.grad, n) } else { eval.grad };
        let (mut next, _) = oc_update(&x, &grad, &dv, problem, ev.filter());
        if symmetric {
            next = symmetrize_permutations(&next, n);
        }
        let vf = ev.physical(&next).iter().sum::<f64>() / next.len() as f64;
        let change = next.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        debug!(
            "topopt iter {iter}: objective {:.6} property {:.6} vf {vf:.4} change {change:.4}",
            eval.value, eval.property
        );
        history.push(IterationRecord {
            iter,
            objective: eval.value,
            property: eval.property,
            vf,
            change,
            zener: eval.zener,
        });
        last_property = eval.property;
        x = next;
        if change < problem.change_tol {
            break;
        }
    }
    if history.is_empty() {
        last_property = ev.evaluate(&DesignField { resolution: n, values: x.clone() }, 0.0)?.property;
    }

    let physical = ev.physical(&x);
    let field = DesignField { resolution: n, values: physical.clone() };
    let grid = field.threshold(problem.target_vf);
    let density: Vec<f64> =
        grid.occupancy().iter().map(|&s| if s { 1.0 } else { problem.base.void_floor }).collect();
    let tensor = reduce_cubic(&homogenize_eighth(&density, n, &problem.base, 1.0, &problem.solver())?)?;
    let final_property = property_of(problem.objective, &tensor)?;
    Ok(TopOptResult {
        final_vf: grid.volume_fraction(),
        design: Some(grid),
        physical,
        history,
        tensor,
        final_property,
        binarization_gap: final_property - last_property,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tight(objective: Objective) -> TopOptProblem {
        TopOptProblem { objective, solver_tol: 1e-11, ..Default::default() }
    }

    #[test]
    fn zero_coefficients_give_uniform_field() {
        let cfg = TrigInitConfig { coefficients: Some(vec![]), ..Default::default() };
        let d = trig_init(&cfg, 8, 0.35).unwrap();
        assert!(d.values.iter().all(|v| (v - 0.35).abs() < 1e-9));
    }

    #[test]
    fn trig_init_is_deterministic_and_hits_volume() {
        let cfg = TrigInitConfig { max_freq: 2, seed: 7, ..Default::default() };
        let a = trig_init(&cfg, 8, 0.5).unwrap();
        let b = trig_init(&cfg, 8, 0.5).unwrap();
        assert_eq!(a, b);
        assert!((a.mean() - 0.5).abs() <= 0.01);
        assert!(a.is_permutation_symmetric());
        let other = trig_init(&TrigInitConfig { seed: 8, ..cfg }, 8, 0.5).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn level_set_hits_volume() {
        let cfg = TrigInitConfig { max_freq: 2, seed: 3, ..Default::default() };
        let g = trig_level_set(&cfg, 8, 0.4).unwrap();
        assert!(g.is_permutation_symmetric());
        assert!((g.volume_fraction() - 0.4).abs() <= 3.0 / 512.0);
    }

    #[test]
    fn filter_preserves_mean_and_is_adjoint() {
        let n = 5;
        let f = DensityFilter::new(n, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..n * n * n).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..n * n * n).map(|_| rng.random()).collect();
        let fx = f.apply(&x);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&fx) - mean(&x)).abs() < 1e-12);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&f.backprop(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn uniform_bulk_value_and_symmetric_gradient() {
        let p = tight(Objective::MaxBulk);
        let d = 0.5;
        let (v, g) = objective_and_sensitivity(&DesignField::uniform(4, d), &p).unwrap();
        let ks = p.base.bulk();
        assert!((-v - d.powi(3) * ks).abs() < 1e-6);
        let sym = symmetrize_permutations(&g, 4);
        let n = 4;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let i = x + n * (y + n * z);
                    assert!((g[i] - sym[i]).abs() < 1e-9);
                    // mirror inside the eighth is not a symmetry, but the uniform
                    // field makes every element equivalent
                    assert!((g[i] - g[0]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..n * n * n).map(|_| rng.random_range(0.2..0.9)).collect();
        let design = DesignField { resolution: n, values: x };
        for objective in [Objective::MaxBulk, Objective::MaxShear, Objective::MaxYoung, Objective::MinPoisson] {
            for isotropy in [false, true] {
                let p = TopOptProblem { isotropy, ..tight(objective) };
                let (_, g) = objective_and_sensitivity(&design, &p).unwrap();
                for _ in 0..3 {
                    let e = rng.random_range(0..n * n * n);
                    let h = 1e-4;
                    let mut plus = design.clone();
                    plus.values[e] += h;
                    let mut minus = design.clone();
                    minus.values[e] -= h;
                    let fd = (objective_and_sensitivity(&plus, &p).unwrap().0
                        - objective_and_sensitivity(&minus, &p).unwrap().0)
                        / (2.0 * h);
                    assert!(
                        (fd - g[e]).abs() <= 1e-3 * g[e].abs().max(1e-6),
                        "{objective:?} iso={isotropy} e={e}: fd {fd} vs {}",
                        g[e]
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_problems() {
        let mut p = TopOptProblem { target_vf: 0.01, ..Default::default() };
        assert!(p.validate().is_err());
        p.target_vf = 0.4;
        p.filter_radius = 0.5;
        assert!(p.validate().is_err());
        assert!("max_volume".parse::<Objective>().is_err());
        assert_eq!("min_poisson".parse::<Objective>().unwrap(), Objective::MinPoisson);
    }

    #[test]
    fn full_volume_gives_solid() {
        let p = TopOptProblem { target_vf: 1.0, max_iters: 5, ..Default::default() };
        let init = trig_init(&TrigInitConfig::default(), 4, 1.0).unwrap();
        let r = optimize(&p, &init).unwrap();
        assert_eq!(r.grid().solid_count(), 64);
        assert!((r.final_property - p.base.bulk()).abs() < 1e-6);
    }
}
