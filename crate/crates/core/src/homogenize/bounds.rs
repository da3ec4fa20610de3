use super::tensor::BaseMaterial;

/// Hashin–Shtrikman upper bounds `(K, G)` for a porous solid at solid
/// volume fraction `f`.
pub fn hs_upper(base: &BaseMaterial, f: f64) -> (f64, f64) {
    let f = f.clamp(0.0, 1.0);
    let ks = base.bulk();
    let gs = base.shear();
    let k = 4.0 * f * gs * ks / (3.0 * (1.0 - f) * ks + 4.0 * gs);
    let h = gs * (9.0 * ks + 8.0 * gs) / (6.0 * (ks + 2.0 * gs));
    let g = gs + (1.0 - f) / (-1.0 / gs + f / (gs + h));
    (k, g.max(0.0))
}

/// Voigt (rule of mixtures) bulk bound with a compliant void phase.
pub fn voigt_bulk(base: &BaseMaterial, f: f64) -> f64 {
    (f + base.void_floor * (1.0 - f)) * base.bulk()
}
