//! Self-conditioned conditional diffusion over eighth-cell latents with
//! classifier-free guidance, deterministic DDIM sampling and inversion,
//! noise interpolation, and regressor-guided interpolation.
//!
//! The denoiser predicts the clean latent `x0` directly. Clean latents
//! encode solid as `+1` and void as `-1`.

mod checkpoint;
mod regressor;

pub use checkpoint::{load_diffusion, load_regressor, save_diffusion, save_regressor, CHECKPOINT_MAGIC};
pub use regressor::{bulk_ratio, train_regressor, BulkRatioRegressor, RegressorConfig, RegressorReport};

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRecord, DatasetStore, Generator};
use crate::error::{Error, Result};
use crate::metrics::{PropertyPoint, PropertyRanges};
use crate::nn::{Adam, AdamConfig, Module, UNet, UNetConfig, Volume};
use crate::voxel::{symmetrize_permutations, CellRole, VoxelGrid};

pub type LatentGrid = Volume;

/// Solid to `+1`, void to `-1`.
pub fn encode(grid: &VoxelGrid) -> LatentGrid {
    let data = grid.occupancy().iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
    Volume::from_data(1, grid.resolution(), data)
}

/// Positive values are solid.
pub fn decode(x: &LatentGrid) -> VoxelGrid {
    let occupancy = x.data.iter().map(|&v| v > 0.0).collect();
    VoxelGrid::from_occupancy(x.side, CellRole::Eighth, occupancy).expect("latent is a cube")
}

/// Average over the six axis permutations of the eighth cell.
pub fn symmetrize_latent(x: &LatentGrid) -> LatentGrid {
    let n = x.voxels();
    let mut out = Vec::with_capacity(x.data.len());
    for c in 0..x.channels {
        out.extend(symmetrize_permutations(&x.data[c * n..(c + 1) * n], x.side));
    }
    Volume::from_data(x.channels, x.side, out)
}

pub fn gaussian_latent<R: Rng>(side: usize, rng: &mut R) -> LatentGrid {
    Volume::from_data(1, side, (0..side.pow(3)).map(|_| StandardNormal.sample(rng)).collect())
}

/// `(tanh(k x) + 1) / 2` per component.
pub fn soft_project(x: &LatentGrid, k: f32) -> Volume {
    Volume { channels: x.channels, side: x.side, data: x.data.iter().map(|&v| 0.5 * ((k * v).tanh() + 1.0)).collect() }
}

/// `cos(theta) x1 + sin(theta) x2`.
pub fn slerp(x1: &LatentGrid, x2: &LatentGrid, theta: f64) -> Result<LatentGrid> {
    if x1.data.len() != x2.data.len() || x1.side != x2.side {
        return Err(Error::ResolutionMismatch(format!("latent sides {} and {}", x1.side, x2.side)));
    }
    let (c, s) = (theta.cos(), theta.sin());
    // exact endpoints without rounding from cos(pi/2)
    let data = if theta == 0.0 {
        x1.data.clone()
    } else if theta == std::f64::consts::FRAC_PI_2 {
        x2.data.clone()
    } else {
        x1.data.iter().zip(&x2.data).map(|(a, b)| (c * *a as f64 + s * *b as f64) as f32).collect()
    };
    Ok(Volume { channels: x1.channels, side: x1.side, data })
}

/// Signal level `gamma_t` per timestep, decreasing from `1 - 1e-6` to `1e-6`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    gammas: Vec<f64>,
}

impl NoiseSchedule {
    pub const CLIP: f64 = 1e-6;

    /// `gamma_t = cos^2((t / T) pi / 2)`, clipped.
    pub fn cosine(timesteps: usize) -> Self {
        let gammas = (0..=timesteps)
            .map(|t| {
                let g = ((t as f64 / timesteps as f64) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                g.clamp(Self::CLIP, 1.0 - Self::CLIP)
            })
            .collect();
        Self { timesteps, gammas }
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// The `k` DDIM timesteps `round(i T / k)`, `i = 1..=k`, ascending.
    pub fn ddim_timesteps(&self, k: usize) -> Vec<usize> {
        let k = k.clamp(1, self.timesteps);
        (1..=k).map(|i| ((i * self.timesteps) as f64 / k as f64).round() as usize).collect()
    }
}

/// `sqrt(gamma_t) x0 + sqrt(1 - gamma_t) eps`.
pub fn forward_diffuse(x0: &LatentGrid, t: usize, eps: &LatentGrid, s: &NoiseSchedule) -> LatentGrid {
    let g = s.gamma(t);
    let (a, b) = (g.sqrt() as f32, (1.0 - g).sqrt() as f32);
    Volume {
        channels: x0.channels,
        side: x0.side,
        data: x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect(),
    }
}

pub const SENTINEL: f64 = -1.0;

/// Normalized `(c11, c12, c44, vol)`; a component of `-1` is unconditioned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector(pub [f64; 4]);

impl ConditionVector {
    pub fn new(values: [f64; 4]) -> Result<Self> {
        for v in values {
            if !(v == SENTINEL || (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!("condition component {v} outside [0, 1] and not -1")));
            }
        }
        Ok(Self(values))
    }

    /// Clamps into [0, 1], keeping sentinels.
    pub fn clamped(values: PropertyPoint) -> Self {
        Self(values.map(|v| if v == SENTINEL { SENTINEL } else { v.clamp(0.0, 1.0) }))
    }

    pub fn unconditioned() -> Self {
        Self([SENTINEL; 4])
    }

    pub fn is_unconditioned(&self) -> bool {
        self.0.iter().all(|&v| v == SENTINEL)
    }

    /// Each component independently replaced by the sentinel with probability `p`.
    pub fn dropped<R: Rng>(&self, p: f64, rng: &mut R) -> Self {
        Self(self.0.map(|v| if rng.random_bool(p) { SENTINEL } else { v }))
    }

    fn as_f32(&self) -> [f32; 4] {
        self.0.map(|v| v as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// `x = uncond + w (cond - uncond)`; `w = 1` is purely conditional.
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub resolution: usize,
    pub timesteps: usize,
    pub cond_dropout: f64,
    pub self_cond_prob: f64,
    pub adam: AdamConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::desk(),
            resolution: 16,
            timesteps: 1000,
            cond_dropout: 0.1,
            self_cond_prob: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.unet.supports_side(self.resolution) {
            return Err(Error::InvalidArgument(format!(
                "resolution {} is not divisible through {} levels",
                self.resolution,
                self.unet.levels()
            )));
        }
        if self.timesteps < 1 {
            return Err(Error::InvalidArgument("timesteps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) || !(0.0..=1.0).contains(&self.self_cond_prob) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: GuidanceConfig,
    /// Feed the previous clean estimate back as the self-condition channel.
    pub self_condition: bool,
    /// Fixed-point refinements per inversion step.
    pub invert_refine: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { steps: 50, guidance: GuidanceConfig::default(), self_condition: true, invert_refine: 3 }
    }
}

impl SampleOptions {
    /// Unconditional, without self-conditioning: the setting under which
    /// inversion and sampling retrace the same trajectory.
    pub fn deterministic(steps: usize) -> Self {
        Self { steps, self_condition: false, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Items of the batch that took the self-conditioning branch.
    pub self_cond_items: usize,
}

pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub net: UNet,
    pub schedule: NoiseSchedule,
    pub ranges: PropertyRanges,
    optimizer: Adam,
    steps_taken: u64,
}

/// One denoised frame with the latent it came from.
#[derive(Clone, Debug)]
pub struct Sample {
    pub grid: VoxelGrid,
    /// Final clean estimate, symmetrized.
    pub x0: LatentGrid,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, ranges: PropertyRanges, seed: u64) -> Result<Self> {
        config.validate()?;
        ranges.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNet::new(config.unet.clone(), &mut rng);
        Ok(Self {
            schedule: NoiseSchedule::cosine(config.timesteps),
            optimizer: Adam::new(config.adam),
            config,
            net,
            ranges,
            steps_taken: 0,
        })
    }

    pub(crate) fn from_parts(config: DiffusionConfig, net: UNet, ranges: PropertyRanges) -> Self {
        Self {
            schedule: NoiseSchedule::cosine(config.timesteps),
            optimizer: Adam::new(config.adam),
            config,
            net,
            ranges,
            steps_taken: 0,
        }
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    fn check_latent(&self, x: &LatentGrid) -> Result<()> {
        if x.side != self.config.resolution || x.channels != 1 {
            return Err(Error::ResolutionMismatch(format!(
                "latent side {} vs model resolution {}",
                x.side, self.config.resolution
            )));
        }
        Ok(())
    }

    pub fn predict(&self, x_t: &LatentGrid, self_cond: &LatentGrid, t: usize, cond: &ConditionVector) -> LatentGrid {
        self.net.predict(x_t, self_cond, t as f32, &cond.as_f32())
    }

    /// Guided clean estimate; the unconditional branch is skipped at `w = 1`
    /// and the conditional one at `w = 0`.
    pub fn cfg_predict(
        &self,
        x_t: &LatentGrid,
        self_cond: &LatentGrid,
        t: usize,
        cond: &ConditionVector,
        guidance: GuidanceConfig,
    ) -> LatentGrid {
        let w = guidance.scale;
        if w == 1.0 || cond.is_unconditioned() {
            return self.predict(x_t, self_cond, t, cond);
        }
        let uncond = self.predict(x_t, self_cond, t, &ConditionVector::unconditioned());
        if w == 0.0 {
            return uncond;
        }
        let c = self.predict(x_t, self_cond, t, cond);
        let w = w as f32;
        Volume {
            channels: 1,
            side: x_t.side,
            data: uncond.data.iter().zip(&c.data).map(|(u, c)| u + w * (c - u)).collect(),
        }
    }

    /// One optimizer step on a batch of clean latents and conditions.
    pub fn train_step(&mut self, batch: &[(LatentGrid, ConditionVector)], rng: &mut ChaCha8Rng) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len() as f32;
        let mut total = 0.0f64;
        let mut sc_items = 0;
        for (x0, cond) in batch {
            self.check_latent(x0)?;
            let t = rng.random_range(1..=self.config.timesteps);
            let eps = gaussian_latent(x0.side, rng);
            let x_t = forward_diffuse(x0, t, &eps, &self.schedule);
            let cond = cond.dropped(self.config.cond_dropout, rng);
            let sc = if rng.random_bool(self.config.self_cond_prob) {
                sc_items += 1;
                clamp_unit(&self.predict(&x_t, &Volume::zeros(1, x0.side), t, &cond))
            } else {
                Volume::zeros(1, x0.side)
            };
            let (y, cache) = self.net.forward(&x_t, &sc, t as f32, &cond.as_f32());
            let n = y.data.len() as f32;
            let loss = x0_loss(&y, x0);
            total += loss;
            let dout = Volume {
                channels: 1,
                side: y.side,
                data: y.data.iter().zip(&x0.data).map(|(p, q)| 2.0 * (p - q) / (n * b)).collect(),
            };
            self.net.backward(&cache, &dout);
        }
        let loss = total / batch.len() as f64;
        self.steps_taken += 1;
        if !loss.is_finite() {
            self.net.zero_grad();
            return Err(Error::NonFiniteLoss {
                step: self.steps_taken as usize,
                detail: format!("batch of {} items, loss {loss}", batch.len()),
            });
        }
        self.optimizer.step(&mut self.net, 1.0);
        Ok(StepStats { loss, self_cond_items: sc_items })
    }

    /// Samples for paired noises and conditions in parallel; results do not
    /// depend on the thread count.
    pub fn sample_many(
        &self,
        noises: &[LatentGrid],
        conds: &[ConditionVector],
        opts: &SampleOptions,
    ) -> Result<Vec<Sample>> {
        if noises.len() != conds.len() {
            return Err(Error::InvalidArgument(format!("{} noises for {} conditions", noises.len(), conds.len())));
        }
        noises.par_iter().zip(conds).map(|(z, c)| self.ddim_sample(z, c, opts)).collect()
    }

    /// Deterministic DDIM sampling from `noise` (the latent at `t = T`).
    pub fn ddim_sample(&self, noise: &LatentGrid, cond: &ConditionVector, opts: &SampleOptions) -> Result<Sample> {
        self.ddim_run(noise, cond, opts, None)
    }

    fn ddim_run(
        &self,
        noise: &LatentGrid,
        cond: &ConditionVector,
        opts: &SampleOptions,
        mut guide: Option<&mut dyn FnMut(&LatentGrid) -> LatentGrid>,
    ) -> Result<Sample> {
        self.check_latent(noise)?;
        if opts.steps < 1 || opts.steps > self.config.timesteps {
            return Err(Error::InvalidArgument(format!("DDIM steps {} outside [1, T]", opts.steps)));
        }
        let ts = self.schedule.ddim_timesteps(opts.steps);
        let mut x = noise.clone();
        let mut sc = Volume::zeros(1, noise.side);
        let mut x0 = sc.clone();
        for i in (0..ts.len()).rev() {
            let t = ts[i];
            x0 = symmetrize_latent(&clamp_unit(&self.cfg_predict(&x, &sc, t, cond, opts.guidance)));
            if let Some(g) = guide.as_mut() {
                let grad = g(&x0);
                x.data.iter_mut().zip(&grad.data).for_each(|(v, d)| *v -= d);
            }
            if opts.self_condition {
                sc = x0.clone();
            }
            if i == 0 {
                break;
            }
            x = ddim_step(&x, &x0, self.schedule.gamma(t), self.schedule.gamma(ts[i - 1]));
        }
        Ok(Sample { grid: decode(&x0), x0 })
    }

    /// Runs the DDIM recursion backwards from `encode(grid)` without
    /// conditions or self-conditioning, refining each step so that the
    /// forward sampler step lands back on the previous latent.
    pub fn ddim_invert(&self, grid: &VoxelGrid, opts: &SampleOptions) -> Result<LatentGrid> {
        if grid.role() != CellRole::Eighth {
            return Err(Error::InvalidArgument("inversion expects an eighth cell".into()));
        }
        let mut x = encode(grid);
        self.check_latent(&x)?;
        let ts = self.schedule.ddim_timesteps(opts.steps);
        let uncond = ConditionVector::unconditioned();
        let zeros = Volume::zeros(1, x.side);
        let clean = |x: &LatentGrid, t: usize| symmetrize_latent(&clamp_unit(&self.predict(x, &zeros, t, &uncond)));
        for i in 0..ts.len() - 1 {
            let (t, tn) = (ts[i], ts[i + 1]);
            let (g, gn) = (self.schedule.gamma(t), self.schedule.gamma(tn));
            let x0 = clean(&x, t);
            let mut xn = ddim_step(&x, &x0, g, gn);
            // sampler step tn -> t is  x = b xn + c x0(xn)
            let b = ((1.0 - g) / (1.0 - gn)).sqrt();
            let c = g.sqrt() - b * gn.sqrt();
            let residual = |xn: &LatentGrid, x0n: &LatentGrid| -> f64 {
                xn.data
                    .iter()
                    .zip(&x0n.data)
                    .zip(&x.data)
                    .map(|((a, p), q)| (b * *a as f64 + c * *p as f64 - *q as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut x0n = clean(&xn, tn);
            let mut best = (residual(&xn, &x0n), xn.clone());
            for _ in 0..opts.invert_refine {
                let cand = Volume {
                    channels: 1,
                    side: x.side,
                    data: x
                        .data
                        .iter()
                        .zip(&x0n.data)
                        .map(|(q, p)| ((*q as f64 - c * *p as f64) / b) as f32)
                        .collect(),
                };
                x0n = clean(&cand, tn);
                let r = residual(&cand, &x0n);
                if r < best.0 {
                    best = (r, cand.clone());
                }
                xn = cand;
            }
            debug!("invert step {t}->{tn}: residual {:.3e}", best.0);
            x = best.1;
        }
        Ok(x)
    }

    /// `count` frames between two structures along interpolated inverted
    /// noises, sampled unconditionally; optionally steered by a regressor.
    pub fn interpolate_sequence(
        &self,
        start: &VoxelGrid,
        end: &VoxelGrid,
        count: usize,
        opts: &SampleOptions,
        guided: Option<&GuidedInterpolation>,
    ) -> Result<Vec<VoxelGrid>> {
        if count < 2 {
            return Err(Error::InvalidArgument(format!("interpolation needs at least 2 frames, got {count}")));
        }
        let opts = SampleOptions { self_condition: false, ..*opts };
        let z0 = self.ddim_invert(start, &opts)?;
        let z1 = self.ddim_invert(end, &opts)?;
        let uncond = ConditionVector::unconditioned();
        let start_p = occupancy_volume(start);
        let end_p = occupancy_volume(end);
        let mut frames: Vec<VoxelGrid> = Vec::with_capacity(count);
        for i in 1..=count {
            let theta = if i == count {
                std::f64::consts::FRAC_PI_2
            } else {
                (i - 1) as f64 / (count - 1) as f64 * std::f64::consts::FRAC_PI_2
            };
            let z = slerp(&z0, &z1, theta)?;
            let sample = match guided {
                None => self.ddim_sample(&z, &uncond, &opts)?,
                Some(gi) => {
                    let prev = frames.last().map(occupancy_volume).unwrap_or_else(|| start_p.clone());
                    let alpha = i as f64 / count as f64;
                    let mut hook = |x0: &LatentGrid| gi.energy_gradient(x0, &prev, &start_p, &end_p, alpha);
                    self.ddim_run(&z, &uncond, &opts, Some(&mut hook))?
                }
            };
            frames.push(sample.grid);
        }
        Ok(frames)
    }
}

/// Energy weights for regressor-guided interpolation.
pub struct GuidedInterpolation {
    pub regressor: BulkRatioRegressor,
    pub regressor_weight: f64,
    pub boundary_weight: f64,
    pub step_size: f64,
    pub projection_sharpness: f32,
}

impl GuidedInterpolation {
    pub fn new(regressor: BulkRatioRegressor) -> Self {
        Self { regressor, regressor_weight: 100.0, boundary_weight: 1.0, step_size: 0.1, projection_sharpness: 64.0 }
    }

    /// Energy of a clean estimate: regressor reward plus face matching to the
    /// previous frame and the two endpoints.
    pub fn energy(&self, x0: &LatentGrid, prev: &Volume, start: &Volume, end: &Volume, alpha: f64) -> f64 {
        let p = soft_project(x0, self.projection_sharpness);
        let f = self.regressor.predict_raw(&p);
        -self.regressor_weight * f
            + self.boundary_weight
                * (face_distance(&p, prev) + alpha * face_distance(&p, start) + (1.0 - alpha) * face_distance(&p, end))
    }

    /// Guidance step for a clean estimate: the energy gradient with the
    /// projection treated as straight-through (`dp/dx0 = 1/2`; the sharp
    /// tanh has no usable slope away from 0), rescaled to RMS `step_size`.
    pub fn energy_gradient(&self, x0: &LatentGrid, prev: &Volume, start: &Volume, end: &Volume, alpha: f64) -> Volume {
        let p = soft_project(x0, self.projection_sharpness);
        let (_, df) = self.regressor.input_gradient(&p);
        let mut dp: Vec<f64> = df.data.iter().map(|g| -self.regressor_weight * *g as f64).collect();
        for (target, w) in [(prev, 1.0), (start, alpha), (end, 1.0 - alpha)] {
            face_distance_grad(&p, target, w * self.boundary_weight, &mut dp);
        }
        let rms = (dp.iter().map(|g| g * g).sum::<f64>() / dp.len() as f64).sqrt();
        let scale = if rms > 0.0 { self.step_size / rms } else { 0.0 };
        Volume { channels: 1, side: x0.side, data: dp.iter().map(|g| (scale * g) as f32).collect() }
    }
}

/// Voxel indices of the eighth-cell face at index 0 of the first axis.
fn face_indices(side: usize) -> impl Iterator<Item = usize> {
    (0..side * side).map(move |k| k * side)
}

fn face_distance(p: &Volume, target: &Volume) -> f64 {
    face_indices(p.side).map(|i| ((p.data[i] - target.data[i]) as f64).powi(2)).sum::<f64>().sqrt()
}

fn face_distance_grad(p: &Volume, target: &Volume, weight: f64, out: &mut [f64]) {
    let d = face_distance(p, target);
    if d <= 0.0 {
        return;
    }
    for i in face_indices(p.side) {
        out[i] += weight * (p.data[i] - target.data[i]) as f64 / d;
    }
}

fn occupancy_volume(g: &VoxelGrid) -> Volume {
    Volume::from_data(1, g.resolution(), g.occupancy().iter().map(|&s| if s { 1.0 } else { 0.0 }).collect())
}

fn ddim_step(x: &LatentGrid, x0: &LatentGrid, g: f64, g_next: f64) -> LatentGrid {
    let (sg, sn) = (g.sqrt(), (1.0 - g).sqrt());
    let (tg, tn) = (g_next.sqrt(), (1.0 - g_next).sqrt());
    let data = x
        .data
        .iter()
        .zip(&x0.data)
        .map(|(&v, &p)| {
            let eps = (v as f64 - sg * p as f64) / sn;
            (tg * p as f64 + tn * eps) as f32
        })
        .collect();
    Volume { channels: 1, side: x.side, data }
}

fn clamp_unit(x: &LatentGrid) -> LatentGrid {
    Volume { channels: x.channels, side: x.side, data: x.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect() }
}

/// Mean squared error between a prediction and the clean latent.
pub fn x0_loss(pred: &LatentGrid, x0: &LatentGrid) -> f64 {
    pred.data.iter().zip(&x0.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / pred.data.len() as f64
}

/// Clean latents and normalized (clamped) conditions for a manifest.
pub fn training_pairs(
    records: &[DatasetRecord],
    store: &DatasetStore,
    ranges: &PropertyRanges,
) -> Result<Vec<(LatentGrid, ConditionVector)>> {
    records
        .iter()
        .map(|r| Ok((encode(&store.load(r)?), ConditionVector::clamped(ranges.normalize(r.point())))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, seed: 0 }
    }
}

/// Runs `cfg.steps` optimizer steps on random batches; returns every loss.
pub fn train(
    model: &mut DiffusionModel,
    data: &[(LatentGrid, ConditionVector)],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size.max(1)).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        let stats = model.train_step(&batch, rng)?;
        if step % 100 == 0 {
            debug!("train step {step}: loss {:.5}", stats.loss);
        }
        losses.push(stats.loss);
    }
    Ok(losses)
}

/// Active-loop generator backed by a diffusion model.
pub struct DiffusionGenerator {
    pub model: DiffusionModel,
    pub sample: SampleOptions,
    pub train: TrainConfig,
}

impl Generator for DiffusionGenerator {
    fn generate(&mut self, conditions: &[PropertyPoint], rng: &mut ChaCha8Rng) -> Result<Vec<VoxelGrid>> {
        let noises: Vec<_> = conditions.iter().map(|_| gaussian_latent(self.model.resolution(), rng)).collect();
        let conds: Vec<_> = conditions.iter().map(|c| ConditionVector::clamped(*c)).collect();
        Ok(self.model.sample_many(&noises, &conds, &self.sample)?.into_iter().map(|s| s.grid).collect())
    }

    fn retrain(&mut self, records: &[DatasetRecord], store: &DatasetStore, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let data = training_pairs(records, store, &self.model.ranges)?;
        let losses = train(&mut self.model, &data, &self.train, rng)?;
        Ok(window_means(&losses, 100))
    }
}

/// Means of the first and last `window` entries.
pub fn window_means(values: &[f64], window: usize) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let w = window.min(values.len()).max(1);
    let first = values[..w].iter().sum::<f64>() / w as f64;
    let last = values[values.len() - w..].iter().sum::<f64>() / w as f64;
    (first, last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homogenize::BaseMaterial;
    use crate::metrics::Range;

    fn tiny_config() -> DiffusionConfig {
        DiffusionConfig {
            unet: UNetConfig { widths: vec![4, 8], in_channels: 2, time_dim: 8, emb_dim: 8, cond_dim: 4 },
            resolution: 4,
            timesteps: 100,
            ..Default::default()
        }
    }

    fn ranges() -> PropertyRanges {
        let r = Range::new(0.0, 1.0);
        PropertyRanges { c11: r, c12: r, c44: r, vol: r }
    }

    #[test]
    fn encode_decode_round_trip() {
        for bits in 0u32..256 {
            let g = VoxelGrid::from_fn(2, CellRole::Eighth, |x, y, z| bits >> (x + 2 * y + 4 * z) & 1 == 1);
            assert_eq!(decode(&encode(&g)), g);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = VoxelGrid::from_fn(16, CellRole::Eighth, |_, _, _| rng.random_bool(0.4));
        assert_eq!(decode(&encode(&g)), g);
        let solid = VoxelGrid::filled(3, CellRole::Eighth);
        assert!(encode(&solid).data.iter().all(|&v| v == 1.0));
        assert_eq!(decode(&Volume::from_data(1, 3, vec![0.2; 27])), solid);
    }

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::cosine(1000);
        assert_eq!(s.gammas().len(), 1001);
        assert_eq!(s.gamma(0), 1.0 - 1e-6);
        assert_eq!(s.gamma(1000), 1e-6);
        assert!(s.gammas().windows(2).all(|w| w[1] < w[0]));
        let ts = s.ddim_timesteps(50);
        assert_eq!((ts.len(), ts[0], ts[49]), (50, 20, 1000));
    }

    #[test]
    fn forward_diffusion_limits_and_variance() {
        let s = NoiseSchedule::cosine(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = VoxelGrid::from_fn(4, CellRole::Eighth, |x, y, z| (x + y + z) % 2 == 0);
        let x0 = encode(&grid);
        let eps = gaussian_latent(4, &mut rng);
        let at0 = forward_diffuse(&x0, 0, &eps, &s);
        let at_t = forward_diffuse(&x0, 1000, &eps, &s);
        for i in 0..64 {
            assert!((at0.data[i] - x0.data[i]).abs() <= 1e-3 * (1.0 + eps.data[i].abs()));
            assert!((at_t.data[i] - eps.data[i]).abs() <= 1e-3 * (1.0 + 1e-3 * eps.data[i].abs()));
        }
        // variance over 1e5 draws at a mid timestep
        let n = 100_000;
        let g = s.gamma(400);
        let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let v = a * x + b * e;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn symmetrize_examples() {
        let mut x = Volume::zeros(1, 4);
        x.data[1 + 4 * (2 + 4 * 3)] = 6.0;
        let s = symmetrize_latent(&x);
        for p in crate::voxel::AXIS_PERMUTATIONS {
            let c = [1, 2, 3];
            let (a, b, d) = (c[p[0]], c[p[1]], c[p[2]]);
            assert_eq!(s.data[a + 4 * (b + 4 * d)], 1.0);
        }
        assert_eq!(symmetrize_latent(&s), s);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = gaussian_latent(5, &mut rng);
        let once = symmetrize_latent(&r);
        assert_eq!(symmetrize_latent(&once), once);
    }

    #[test]
    fn slerp_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_latent(3, &mut rng);
        let b = gaussian_latent(3, &mut rng);
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(slerp(&a, &b, std::f64::consts::FRAC_PI_2).unwrap(), b);
        // orthogonal, equal norms
        let mut x1 = Volume::zeros(1, 2);
        let mut x2 = Volume::zeros(1, 2);
        x1.data[0] = 3.0;
        x1.data[1] = 4.0;
        x2.data[2] = 5.0;
        let m = slerp(&x1, &x2, 0.7).unwrap();
        let norm: f64 = m.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 5.0).abs() < 1e-5);
    }

    #[test]
    fn soft_projection_limits() {
        let p = soft_project(&Volume::from_data(1, 1, vec![-1.0]), 64.0);
        assert!(p.data[0] as f64 <= 1e-10);
        let p = soft_project(&Volume::from_data(1, 1, vec![1.0]), 64.0);
        assert!(p.data[0] as f64 >= 1.0 - 1e-10);
        assert_eq!(soft_project(&Volume::from_data(1, 1, vec![0.0]), 64.0).data[0], 0.5);
    }

    #[test]
    fn conditions_validate_and_drop() {
        assert!(ConditionVector::new([0.2, -1.0, 1.0, 0.0]).is_ok());
        assert!(ConditionVector::new([1.2, 0.0, 0.0, 0.0]).is_err());
        assert!(ConditionVector::new([-0.5, 0.0, 0.0, 0.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = ConditionVector([0.5; 4]);
        let mut dropped = 0;
        for _ in 0..10_000 {
            dropped += c.dropped(0.1, &mut rng).0.iter().filter(|&&v| v == SENTINEL).count();
        }
        let frac = dropped as f64 / 40_000.0;
        assert!((frac - 0.1).abs() < 0.01);
    }

    #[test]
    fn loss_is_zero_for_exact_prediction() {
        let g = VoxelGrid::from_fn(4, CellRole::Eighth, |x, y, _| x == y);
        assert_eq!(x0_loss(&encode(&g), &encode(&g)), 0.0);
    }

    #[test]
    fn fresh_model_loss_and_self_condition_rate() {
        let mut model = DiffusionModel::new(tiny_config(), ranges(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = VoxelGrid::from_fn(4, CellRole::Eighth, |x, y, z| x == 0 || y == 0 || z == 0);
        let item = (encode(&g), ConditionVector([0.3, 0.4, 0.5, 0.6]));
        let first = model.train_step(&[item.clone()], &mut rng).unwrap();
        assert!(first.loss.is_finite() && first.loss > 0.0);
        let mut taken = first.self_cond_items;
        for _ in 1..10_000 {
            taken += model.train_step(&[item.clone()], &mut rng).unwrap().self_cond_items;
        }
        let frac = taken as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "self-conditioning fraction {frac}");
    }

    #[test]
    fn guidance_is_linear_in_scale() {
        let model = DiffusionModel::new(tiny_config(), ranges(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // give the zero-initialized head weight so predictions differ
        let mut model = model;
        let mut w = model.net.flat_values();
        let n = w.len();
        w.iter_mut().skip(n - 2000).for_each(|v| *v += 0.01);
        let _ = n;
        model.net.load_flat(&w);
        let x = gaussian_latent(4, &mut rng);
        let sc = Volume::zeros(1, 4);
        let cond = ConditionVector([0.9, 0.1, 0.5, 0.3]);
        let c = model.predict(&x, &sc, 50, &cond);
        let u = model.predict(&x, &sc, 50, &ConditionVector::unconditioned());
        assert_eq!(model.cfg_predict(&x, &sc, 50, &cond, GuidanceConfig { scale: 1.0 }), c);
        assert_eq!(model.cfg_predict(&x, &sc, 50, &cond, GuidanceConfig { scale: 0.0 }), u);
        let two = model.cfg_predict(&x, &sc, 50, &cond, GuidanceConfig { scale: 2.0 });
        for i in 0..64 {
            assert!((two.data[i] - (2.0 * c.data[i] - u.data[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_symmetric() {
        let mut model = DiffusionModel::new(tiny_config(), ranges(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = VoxelGrid::from_fn(4, CellRole::Eighth, |x, y, z| x == 0 || y == 0 || z == 0);
        let item = (encode(&g), ConditionVector([0.3, 0.4, 0.5, 0.6]));
        for _ in 0..20 {
            model.train_step(&[item.clone()], &mut rng).unwrap();
        }
        let noise = gaussian_latent(4, &mut rng);
        let opts = SampleOptions { steps: 10, ..Default::default() };
        let a = model.ddim_sample(&noise, &item.1, &opts).unwrap();
        let b = model.ddim_sample(&noise, &item.1, &opts).unwrap();
        assert_eq!(a.grid, b.grid);
        assert!(a.grid.is_permutation_symmetric());
        let inv1 = model.ddim_invert(&g, &SampleOptions::deterministic(10)).unwrap();
        let inv2 = model.ddim_invert(&g, &SampleOptions::deterministic(10)).unwrap();
        assert_eq!(inv1, inv2);
        assert!(model.ddim_sample(&noise, &item.1, &SampleOptions { steps: 0, ..opts }).is_err());
    }

    #[test]
    fn guidance_step_has_set_size_and_descends() {
        let reg = BulkRatioRegressor::new(RegressorConfig::default(), BaseMaterial::default(), 4).unwrap();
        let gi = GuidedInterpolation { projection_sharpness: 1.0, step_size: 0.05, ..GuidedInterpolation::new(reg) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Volume::from_data(1, 4, (0..64).map(|_| rng.random_range(-0.3..0.3)).collect());
        let prev = Volume::from_data(1, 4, (0..64).map(|_| rng.random_range(0.0..1.0)).collect());
        let (start, end) = (prev.clone(), Volume::zeros(1, 4));
        let step = gi.energy_gradient(&x0, &prev, &start, &end, 0.4);
        let rms = (step.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!((rms - 0.05).abs() < 1e-6);
        let small = Volume::from_data(1, 4, x0.data.iter().zip(&step.data).map(|(x, d)| x - 0.1 * d).collect());
        assert!(gi.energy(&small, &prev, &start, &end, 0.4) < gi.energy(&x0, &prev, &start, &end, 0.4));
    }
}
