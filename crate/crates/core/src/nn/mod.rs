//! Minimal f32 building blocks for volumetric networks with hand-written
//! backward passes: 3x3x3 convolution (im2col + sgemm), group norm, SiLU,
//! linear layers, pooling, upsampling and Adam.
//!
//! Volumes are stored channel-major with voxel index `x + s*(y + s*z)`.
//! Convolutions pad by mirroring the edge voxel, which is the neighbourhood
//! an eighth cell sees in its mirror tessellation.

mod unet;

pub use unet::{UNet, UNetCache, UNetConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, Default)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(len: usize) -> Self {
        Self { value: vec![0.0; len], grad: vec![0.0; len] }
    }

    pub fn filled(len: usize, v: f32) -> Self {
        Self { value: vec![v; len], grad: vec![0.0; len] }
    }

    pub fn normal<R: Rng>(len: usize, std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self { value: (0..len).map(|_| dist.sample(rng)).collect(), grad: vec![0.0; len] }
    }
}

/// Visits parameters in a fixed order, used by optimizers and checkpoints.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    /// Loads values produced by [`Module::flat_values`]; false on length mismatch.
    fn load_flat(&mut self, values: &[f32]) -> bool {
        if values.len() != self.param_count() {
            return false;
        }
        let mut at = 0;
        self.visit_mut(&mut |p| {
            let n = p.value.len();
            p.value.copy_from_slice(&values[at..at + n]);
            at += n;
        });
        true
    }
}

/// Channel-major cubic volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(channels: usize, side: usize) -> Self {
        Self { channels, side, data: vec![0.0; channels * side.pow(3)] }
    }

    pub fn from_data(channels: usize, side: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * side.pow(3), "volume shape");
        Self { channels, side, data }
    }

    pub fn voxels(&self) -> usize {
        self.side.pow(3)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Volume) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn concat(a: &Volume, b: &Volume) -> Volume {
        assert_eq!(a.side, b.side);
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Volume { channels: a.channels + b.channels, side: a.side, data }
    }

    /// Splits the channels at `at` (inverse of [`Volume::concat`]).
    pub fn split(&self, at: usize) -> (Volume, Volume) {
        let n = self.voxels();
        let (lo, hi) = self.data.split_at(at * n);
        (
            Volume { channels: at, side: self.side, data: lo.to_vec() },
            Volume { channels: self.channels - at, side: self.side, data: hi.to_vec() },
        )
    }
}

/// Row-major `c = a * b + beta * c` with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shifted_row(src: &[f32], dst: &mut [f32], shift: usize) {
    let s = src.len();
    match shift {
        0 => {
            dst[0] = src[0];
            dst[1..].copy_from_slice(&src[..s - 1]);
        }
        1 => dst.copy_from_slice(src),
        _ => {
            dst[..s - 1].copy_from_slice(&src[1..]);
            dst[s - 1] = src[s - 1];
        }
    }
}

fn shifted_row_add(src: &[f32], dst: &mut [f32], shift: usize) {
    // adjoint of shifted_row: dst accumulates the gradient of src
    let s = src.len();
    match shift {
        0 => {
            dst[0] += src[0];
            for i in 1..s {
                dst[i - 1] += src[i];
            }
        }
        1 => dst.iter_mut().zip(src).for_each(|(d, v)| *d += v),
        _ => {
            for i in 0..s - 1 {
                dst[i + 1] += src[i];
            }
            dst[s - 1] += src[s - 1];
        }
    }
}

#[inline]
fn clamp_shift(i: usize, d: usize, s: usize) -> usize {
    (i + d).saturating_sub(1).min(s - 1)
}

fn im2col(x: &Volume) -> Vec<f32> {
    let s = x.side;
    let n = x.voxels();
    let mut col = vec![0.0f32; x.channels * 27 * n];
    for ci in 0..x.channels {
        let xc = x.channel(ci);
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = dx + 3 * (dy + 3 * dz);
                    let row = &mut col[(ci * 27 + k) * n..(ci * 27 + k + 1) * n];
                    for z in 0..s {
                        let zz = clamp_shift(z, dz, s);
                        for y in 0..s {
                            let yy = clamp_shift(y, dy, s);
                            let src = &xc[(zz * s + yy) * s..(zz * s + yy + 1) * s];
                            shifted_row(src, &mut row[(z * s + y) * s..(z * s + y + 1) * s], dx);
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], channels: usize, s: usize) -> Volume {
    let n = s.pow(3);
    let mut out = Volume::zeros(channels, s);
    for ci in 0..channels {
        let xc = &mut out.data[ci * n..(ci + 1) * n];
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = dx + 3 * (dy + 3 * dz);
                    let row = &col[(ci * 27 + k) * n..(ci * 27 + k + 1) * n];
                    for z in 0..s {
                        let zz = clamp_shift(z, dz, s);
                        for y in 0..s {
                            let yy = clamp_shift(y, dy, s);
                            let dst = &mut xc[(zz * s + yy) * s..(zz * s + yy + 1) * s];
                            shifted_row_add(&row[(z * s + y) * s..(z * s + y + 1) * s], dst, dx);
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3x3x3 convolution with edge-mirrored padding.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv3 {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * 27) as f32).sqrt();
        Self { cin, cout, weight: Param::normal(cout * cin * 27, std, rng), bias: Param::zeros(cout) }
    }

    pub fn zero_init(cin: usize, cout: usize) -> Self {
        Self { cin, cout, weight: Param::zeros(cout * cin * 27), bias: Param::zeros(cout) }
    }

    pub fn forward(&self, x: &Volume) -> Volume {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let n = x.voxels();
        let col = im2col(x);
        let mut y = Volume::zeros(self.cout, x.side);
        for (co, b) in self.bias.value.iter().enumerate() {
            y.data[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        let k = self.cin * 27;
        gemm(self.cout, k, n, &self.weight.value, k, 1, &col, n, 1, &mut y.data, 1.0);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Volume, dy: &Volume) -> Volume {
        let n = x.voxels();
        let k = self.cin * 27;
        let col = im2col(x);
        gemm(self.cout, n, k, &dy.data, n, 1, &col, 1, n, &mut self.weight.grad, 1.0);
        for co in 0..self.cout {
            self.bias.grad[co] += dy.data[co * n..(co + 1) * n].iter().sum::<f32>();
        }
        let mut dcol = vec![0.0f32; k * n];
        gemm(k, self.cout, n, &self.weight.value, 1, k, &dy.data, n, 1, &mut dcol, 0.0);
        col2im(&dcol, self.cin, x.side)
    }
}

impl Module for Conv3 {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Pointwise (1x1x1) channel mixing.
#[derive(Clone, Debug)]
pub struct Conv1 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv1 {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (1.0 / cin as f32).sqrt();
        Self { cin, cout, weight: Param::normal(cout * cin, std, rng), bias: Param::zeros(cout) }
    }

    pub fn forward(&self, x: &Volume) -> Volume {
        let n = x.voxels();
        let mut y = Volume::zeros(self.cout, x.side);
        for (co, b) in self.bias.value.iter().enumerate() {
            y.data[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        gemm(self.cout, self.cin, n, &self.weight.value, self.cin, 1, &x.data, n, 1, &mut y.data, 1.0);
        y
    }

    pub fn backward(&mut self, x: &Volume, dy: &Volume) -> Volume {
        let n = x.voxels();
        gemm(self.cout, n, self.cin, &dy.data, n, 1, &x.data, 1, n, &mut self.weight.grad, 1.0);
        for co in 0..self.cout {
            self.bias.grad[co] += dy.data[co * n..(co + 1) * n].iter().sum::<f32>();
        }
        let mut dx = Volume::zeros(self.cin, x.side);
        gemm(self.cin, self.cout, n, &self.weight.value, 1, self.cin, &dy.data, n, 1, &mut dx.data, 0.0);
        dx
    }
}

impl Module for Conv1 {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache {
    xhat: Volume,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    const EPS: f32 = 1e-5;

    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels in {groups} groups");
        Self { groups, channels, gamma: Param::filled(channels, 1.0), beta: Param::zeros(channels) }
    }

    /// Largest group count up to 8 that divides `channels`.
    pub fn default_groups(channels: usize) -> usize {
        (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
    }

    pub fn forward(&self, x: &Volume) -> (Volume, GroupNormCache) {
        let n = x.voxels();
        let per = self.channels / self.groups * n;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let chunk = &mut xhat.data[g * per..(g + 1) * per];
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            let inv = 1.0 / (var + Self::EPS as f64).sqrt();
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
            inv_std.push(inv as f32);
        }
        let mut y = xhat.clone();
        for c in 0..self.channels {
            let (gm, bt) = (self.gamma.value[c], self.beta.value[c]);
            y.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *v * gm + bt);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Volume) -> Volume {
        let n = dy.voxels();
        let cpg = self.channels / self.groups;
        let mut dx = Volume::zeros(self.channels, dy.side);
        for c in 0..self.channels {
            let d = &dy.data[c * n..(c + 1) * n];
            let xh = &cache.xhat.data[c * n..(c + 1) * n];
            self.gamma.grad[c] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
            self.beta.grad[c] += d.iter().sum::<f32>();
        }
        for g in 0..self.groups {
            let m = (cpg * n) as f32;
            let mut sum = 0.0f64;
            let mut sum_x = 0.0f64;
            for c in g * cpg..(g + 1) * cpg {
                let gm = self.gamma.value[c];
                for v in c * n..(c + 1) * n {
                    let dxh = (dy.data[v] * gm) as f64;
                    sum += dxh;
                    sum_x += dxh * cache.xhat.data[v] as f64;
                }
            }
            let inv = cache.inv_std[g];
            let (mean_d, mean_dx) = ((sum / m as f64) as f32, (sum_x / m as f64) as f32);
            for c in g * cpg..(g + 1) * cpg {
                let gm = self.gamma.value[c];
                for v in c * n..(c + 1) * n {
                    dx.data[v] = inv * (dy.data[v] * gm - mean_d - cache.xhat.data[v] * mean_dx);
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input and the output gradient.
pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub fn silu_volume(x: &Volume) -> Volume {
    Volume { channels: x.channels, side: x.side, data: silu(&x.data) }
}

pub fn silu_volume_backward(x: &Volume, dy: &Volume) -> Volume {
    Volume { channels: x.channels, side: x.side, data: silu_backward(&x.data, &dy.data) }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (1.0 / input as f32).sqrt();
        Self { input, output, weight: Param::normal(output * input, std, rng), bias: Param::zeros(output) }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        (0..self.output)
            .map(|o| {
                let row = &self.weight.value[o * self.input..(o + 1) * self.input];
                self.bias.value[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.input];
        for o in 0..self.output {
            let d = dy[o];
            self.bias.grad[o] += d;
            let row = o * self.input..(o + 1) * self.input;
            for ((g, w), (xi, dxi)) in
                self.weight.grad[row.clone()].iter_mut().zip(&self.weight.value[row]).zip(x.iter().zip(dx.iter_mut()))
            {
                *g += d * xi;
                *dxi += d * w;
            }
        }
        dx
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 2x2x2 average pooling; the side must be even.
pub fn avg_pool(x: &Volume) -> Volume {
    let s = x.side;
    assert!(s % 2 == 0, "pooling needs an even side");
    let h = s / 2;
    let mut y = Volume::zeros(x.channels, h);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut y.data[c * h * h * h..(c + 1) * h * h * h];
        for z in 0..s {
            for yy in 0..s {
                for xx in 0..s {
                    dst[xx / 2 + h * (yy / 2 + h * (z / 2))] += 0.125 * src[xx + s * (yy + s * z)];
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Volume) -> Volume {
    let h = dy.side;
    let s = 2 * h;
    let mut dx = Volume::zeros(dy.channels, s);
    for c in 0..dy.channels {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * s * s * s..(c + 1) * s * s * s];
        for z in 0..s {
            for yy in 0..s {
                for xx in 0..s {
                    dst[xx + s * (yy + s * z)] = 0.125 * src[xx / 2 + h * (yy / 2 + h * (z / 2))];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample(x: &Volume) -> Volume {
    let h = x.side;
    let s = 2 * h;
    let mut y = Volume::zeros(x.channels, s);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut y.data[c * s * s * s..(c + 1) * s * s * s];
        for z in 0..s {
            for yy in 0..s {
                for xx in 0..s {
                    dst[xx + s * (yy + s * z)] = src[xx / 2 + h * (yy / 2 + h * (z / 2))];
                }
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &Volume) -> Volume {
    let s = dy.side;
    let h = s / 2;
    let mut dx = Volume::zeros(dy.channels, h);
    for c in 0..dy.channels {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * h * h * h..(c + 1) * h * h * h];
        for z in 0..s {
            for yy in 0..s {
                for xx in 0..s {
                    dst[xx / 2 + h * (yy / 2 + h * (z / 2))] += src[xx + s * (yy + s * z)];
                }
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
        out.push((t * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
        out.push((t * freq).cos());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients scaled by `scale`,
    /// then clears them. Returns the (scaled, pre-clip) gradient norm.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, scale: f32) -> f32 {
        let total = module.param_count();
        if self.m.len() != total {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        }
        let mut sq = 0.0f64;
        module.visit(&mut |p| sq += p.grad.iter().map(|g| ((g * scale) as f64).powi(2)).sum::<f64>());
        let norm = sq.sqrt() as f32;
        let clip = if self.config.clip > 0.0 && norm > self.config.clip { self.config.clip / norm } else { 1.0 };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut at = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        module.visit_mut(&mut |p| {
            for (i, (w, g)) in p.value.iter_mut().zip(p.grad.iter_mut()).enumerate() {
                let g_eff = *g * scale * clip;
                let j = at + i;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g_eff;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g_eff * g_eff;
                *w -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *g = 0.0;
            }
            at += p.value.len();
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Volume {
        Volume::from_data(c, s, (0..c * s * s * s).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Volume, b: &Volume) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv3::new(2, 3, &mut rng);
        let x = random_volume(&mut rng, 2, 4);
        let y = conv.forward(&x);
        let s = 4i64;
        let at = |c: usize, x_: i64, y_: i64, z_: i64| {
            let cl = |v: i64| v.clamp(0, s - 1) as usize;
            x.data[c * 64 + cl(x_) + 4 * (cl(y_) + 4 * cl(z_))]
        };
        for co in 0..3 {
            for z in 0..s {
                for yy in 0..s {
                    for xx in 0..s {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..2 {
                            for dz in 0..3 {
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        let w = conv.weight.value[co * 54 + ci * 27 + dx + 3 * (dy + 3 * dz)];
                                        acc += (w * at(ci, xx + dx as i64 - 1, yy + dy as i64 - 1, z + dz as i64 - 1))
                                            as f64;
                                    }
                                }
                            }
                        }
                        let got = y.data[co * 64 + (xx + 4 * (yy + 4 * z)) as usize] as f64;
                        assert!((got - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv3::new(3, 2, &mut rng);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let x = random_volume(&mut rng, 3, 4);
        let dy = random_volume(&mut rng, 2, 4);
        let y = conv.forward(&x);
        let dx = conv.backward(&x, &dy);
        // linear in x without bias: <Wx, dy> = <x, W^T dy>
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-3);
        // and linear in W: <W, dW> equals <y, dy> as well
        let wdot: f64 =
            conv.weight.value.iter().zip(&conv.weight.grad).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((wdot - dot(&y, &dy)).abs() < 1e-3);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_volume(&mut rng, 2, 4);
        let d = random_volume(&mut rng, 2, 2);
        assert!((dot(&avg_pool(&x), &d) - dot(&x, &avg_pool_backward(&d))).abs() < 1e-5);
        assert!((dot(&upsample(&d), &x) - dot(&d, &upsample_backward(&x))).abs() < 1e-5);
    }

    fn numeric_check<F: Fn(&Volume) -> f64>(f: F, x: &Volume, analytic: &Volume, picks: &[usize]) {
        for &i in picks {
            let h = 1e-2f32;
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h as f64);
            let a = analytic.data[i] as f64;
            assert!((fd - a).abs() < 2e-2 * a.abs().max(0.1), "index {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn group_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gn = GroupNorm::new(4, 2);
        gn.gamma.value = vec![1.0, 0.5, -2.0, 1.5];
        let x = random_volume(&mut rng, 4, 2);
        let w = random_volume(&mut rng, 4, 2);
        let loss = |v: &Volume| dot(&gn.clone().forward(v).0, &w);
        let (_, cache) = gn.forward(&x);
        let dx = gn.clone().backward(&cache, &w);
        numeric_check(loss, &x, &dx, &[0, 5, 17, 31]);
    }

    #[test]
    fn silu_gradient() {
        let xs = [-3.0f32, -0.5, 0.0, 0.7, 2.5];
        let d = silu_backward(&xs, &[1.0; 5]);
        for (x, g) in xs.iter().zip(d) {
            let h = 1e-3;
            let fd = (silu(&[x + h])[0] - silu(&[x - h])[0]) / (2.0 * h);
            assert!((fd - g).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::new(3, 2, &mut rng);
        let x = [0.3f32, -1.2, 0.8];
        let dy = [1.0f32, -0.5];
        let dx = lin.backward(&x, &dy);
        for (i, g) in dx.iter().enumerate() {
            let expect: f32 = (0..2).map(|o| dy[o] * lin.weight.value[o * 3 + i]).sum();
            assert!((g - expect).abs() < 1e-6);
        }
        assert!((lin.weight.grad[4] - dy[1] * x[1]).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        struct Quad(Param);
        impl Module for Quad {
            fn visit(&self, f: &mut dyn FnMut(&Param)) {
                f(&self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                f(&mut self.0)
            }
        }
        let mut q = Quad(Param::filled(3, 2.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            for (g, w) in q.0.grad.iter_mut().zip(&q.0.value) {
                *g = 2.0 * (w - 0.5);
            }
            opt.step(&mut q, 1.0);
        }
        assert!(q.0.value.iter().all(|w| (w - 0.5).abs() < 1e-2));
    }
}
