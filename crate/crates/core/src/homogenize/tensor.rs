use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear isotropic constituent. Stiffnesses are reported in units of
/// `youngs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseMaterial {
    pub youngs: f64,
    pub poisson: f64,
    /// Relative stiffness of the void phase.
    pub void_floor: f64,
}

impl Default for BaseMaterial {
    fn default() -> Self {
        Self { youngs: 1.0, poisson: 0.3, void_floor: 1e-6 }
    }
}

impl BaseMaterial {
    pub fn validate(&self) -> Result<()> {
        if !(self.youngs > 0.0) {
            return Err(Error::InvalidArgument(format!("youngs must be positive, got {}", self.youngs)));
        }
        if !(self.poisson > -1.0 && self.poisson < 0.5) {
            return Err(Error::InvalidArgument(format!("poisson must lie in (-1, 0.5), got {}", self.poisson)));
        }
        if !(self.void_floor > 0.0 && self.void_floor <= 1e-3) {
            return Err(Error::InvalidArgument(format!("void_floor must lie in (0, 1e-3], got {}", self.void_floor)));
        }
        Ok(())
    }

    pub fn bulk(&self) -> f64 {
        self.youngs / (3.0 * (1.0 - 2.0 * self.poisson))
    }

    pub fn shear(&self) -> f64 {
        self.youngs / (2.0 * (1.0 + self.poisson))
    }

    pub fn lame_lambda(&self) -> f64 {
        self.youngs * self.poisson / ((1.0 + self.poisson) * (1.0 - 2.0 * self.poisson))
    }

    /// Voigt-notation stiffness with engineering shear strains.
    pub fn stiffness(&self) -> FullTensor6 {
        let lambda = self.lame_lambda();
        let mu = self.shear();
        let mut c = [[0.0; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = lambda;
            }
            c[i][i] = lambda + 2.0 * mu;
            c[i + 3][i + 3] = mu;
        }
        FullTensor6(c)
    }

    pub fn cubic(&self) -> CubicTensor {
        let c = self.stiffness();
        CubicTensor { c11: c.0[0][0], c12: c.0[0][1], c44: c.0[3][3], asymmetry_residual: 0.0 }
    }
}

/// 6x6 stiffness in Voigt order (11, 22, 33, 23, 13, 12).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullTensor6(pub [[f64; 6]; 6]);

impl FullTensor6 {
    pub fn zeros() -> Self {
        Self([[0.0; 6]; 6])
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..6 {
            for j in 0..i {
                worst = worst.max((self.0[i][j] - self.0[j][i]).abs());
            }
        }
        worst
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|v| *v *= s);
        out
    }

    pub fn flat(&self) -> [f64; 36] {
        let mut out = [0.0; 36];
        for i in 0..6 {
            out[6 * i..6 * i + 6].copy_from_slice(&self.0[i]);
        }
        out
    }

    /// Mean hydrostatic stiffness `(sum of the normal 3x3 block) / 9`.
    pub fn mean_bulk(&self) -> f64 {
        (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| self.0[i][j]).sum::<f64>() / 9.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubicTensor {
    pub c11: f64,
    pub c12: f64,
    pub c44: f64,
    /// Largest deviation of the source 6x6 from exact cubic form, relative to `c11`.
    #[serde(default)]
    pub asymmetry_residual: f64,
}

impl CubicTensor {
    pub fn new(c11: f64, c12: f64, c44: f64) -> Self {
        Self { c11, c12, c44, asymmetry_residual: 0.0 }
    }

    pub fn to_full(&self) -> FullTensor6 {
        let mut c = [[0.0; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = if i == j { self.c11 } else { self.c12 };
            }
            c[i + 3][i + 3] = self.c44;
        }
        FullTensor6(c)
    }

    pub fn bulk(&self) -> f64 {
        (self.c11 + 2.0 * self.c12) / 3.0
    }

    /// Compliance entries `(s11, s12, s44)`.
    pub fn compliance(&self) -> Result<(f64, f64, f64)> {
        let a = self.c11 - self.c12;
        let b = self.c11 + 2.0 * self.c12;
        if a.abs() < f64::EPSILON * self.c11.abs().max(1.0) || b.abs() < f64::EPSILON || self.c44 == 0.0 {
            return Err(Error::DegenerateTensor("cubic tensor is singular".into()));
        }
        Ok(((self.c11 + self.c12) / (a * b), -self.c12 / (a * b), 1.0 / self.c44))
    }

    pub fn derived(&self) -> Result<DerivedModuli> {
        derived_moduli(self)
    }
}

pub fn reduce_cubic(t: &FullTensor6) -> Result<CubicTensor> {
    let m = &t.0;
    let c11 = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if !(c11 > 0.0) {
        return Err(Error::DegenerateTensor(format!("c11 = {c11}")));
    }
    let c12 = (m[0][1] + m[0][2] + m[1][0] + m[1][2] + m[2][0] + m[2][1]) / 6.0;
    let c44 = (m[3][3] + m[4][4] + m[5][5]) / 3.0;
    let ideal = CubicTensor::new(c11, c12, c44).to_full();
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        for j in 0..6 {
            worst = worst.max((m[i][j] - ideal.0[i][j]).abs());
        }
    }
    Ok(CubicTensor { c11, c12, c44, asymmetry_residual: worst / c11 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedModuli {
    pub bulk: f64,
    pub shear: f64,
    pub youngs: f64,
    pub poisson: f64,
    pub zener: f64,
}

pub fn derived_moduli(c: &CubicTensor) -> Result<DerivedModuli> {
    let diff = c.c11 - c.c12;
    let sum = c.c11 + c.c12;
    if !(diff > 0.0) || !(sum > 0.0) {
        return Err(Error::DegenerateTensor(format!(
            "need c11 > c12 and c11 + c12 > 0, got c11={} c12={}",
            c.c11, c.c12
        )));
    }
    Ok(DerivedModuli {
        bulk: (c.c11 + 2.0 * c.c12) / 3.0,
        shear: c.c44,
        youngs: diff * (c.c11 + 2.0 * c.c12) / sum,
        poisson: c.c12 / sum,
        zener: 2.0 * c.c44 / diff,
    })
}

/// Young's modulus along `dir` for a cubic crystal; used for elastic
/// surface plots.
pub fn directional_youngs(c: &CubicTensor, dir: [f64; 3]) -> Result<f64> {
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument("direction must be nonzero".into()));
    }
    let [d1, d2, d3] = dir.map(|d| d / norm);
    let (s11, s12, s44) = c.compliance()?;
    let aniso = d1 * d1 * d2 * d2 + d2 * d2 * d3 * d3 + d3 * d3 * d1 * d1;
    let inv = s11 - 2.0 * (s11 - s12 - 0.5 * s44) * aniso;
    if !(inv > 0.0) {
        return Err(Error::DegenerateTensor("non-positive directional compliance".into()));
    }
    Ok(1.0 / inv)
}
