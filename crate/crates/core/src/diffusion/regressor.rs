use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::error::{Error, Result};
use crate::homogenize::{hs_upper, BaseMaterial};
use crate::nn::{
    avg_pool, avg_pool_backward, silu, silu_backward, silu_volume, silu_volume_backward, Adam, AdamConfig, Conv3,
    GroupNorm, GroupNormCache, Linear, Module, Param, Volume,
};
use crate::voxel::VoxelGrid;

pub const MIN_RECORDS: usize = 100;
pub const RATIO_CLAMP: (f64, f64) = (0.0, 1.1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub widths: [usize; 3],
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32],
            hidden: 32,
            epochs: 30,
            batch_size: 16,
            holdout_fraction: 0.2,
            adam: AdamConfig { lr: 2e-3, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorReport {
    pub n_train: usize,
    pub n_holdout: usize,
    pub train_r2: f64,
    pub holdout_r2: f64,
    pub holdout_mse: f64,
    pub epoch_losses: Vec<f64>,
}

/// Predicts `K / K_hs(vf)` from a (soft) occupancy field in [0, 1].
#[derive(Clone, Debug)]
pub struct BulkRatioRegressor {
    pub config: RegressorConfig,
    pub base: BaseMaterial,
    pub resolution: usize,
    convs: [Conv3; 3],
    norms: [GroupNorm; 3],
    fc1: Linear,
    fc2: Linear,
}

struct Cache {
    x: Volume,
    norm: Vec<(Volume, GroupNormCache)>,
    pooled: Vec<Volume>,
    feat: Vec<f32>,
    hidden: Vec<f32>,
    voxels3: usize,
}

impl Module for BulkRatioRegressor {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for c in &self.convs {
            c.visit(f);
        }
        for n in &self.norms {
            n.visit(f);
        }
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
        for n in &mut self.norms {
            n.visit_mut(f);
        }
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

impl BulkRatioRegressor {
    pub fn new(config: RegressorConfig, base: BaseMaterial, resolution: usize) -> Result<Self> {
        if resolution < 4 || resolution % 4 != 0 {
            return Err(Error::InvalidArgument(format!("regressor needs a side divisible by 4, got {resolution}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [w0, w1, w2] = config.widths;
        let convs = [Conv3::new(1, w0, &mut rng), Conv3::new(w0, w1, &mut rng), Conv3::new(w1, w2, &mut rng)];
        let norms = [w0, w1, w2].map(|w| GroupNorm::new(w, GroupNorm::default_groups(w)));
        let fc1 = Linear::new(w2 + 1, config.hidden, &mut rng);
        let fc2 = Linear::new(config.hidden, 1, &mut rng);
        Ok(Self { config, base, resolution, convs, norms, fc1, fc2 })
    }

    fn forward(&self, x: &Volume) -> (f32, Cache) {
        let mut norm = Vec::with_capacity(3);
        let mut pooled = Vec::with_capacity(2);
        let mut h = x.clone();
        for level in 0..3 {
            let a = self.convs[level].forward(&h);
            let (n, gc) = self.norms[level].forward(&a);
            let s = silu_volume(&n);
            norm.push((n, gc));
            h = if level < 2 {
                let p = avg_pool(&s);
                pooled.push(p.clone());
                p
            } else {
                s
            };
        }
        let voxels3 = h.voxels();
        let mut feat: Vec<f32> = (0..h.channels).map(|c| h.channel(c).iter().sum::<f32>() / voxels3 as f32).collect();
        feat.push(x.data.iter().sum::<f32>() / x.data.len() as f32);
        let hidden = self.fc1.forward(&feat);
        let y = self.fc2.forward(&silu(&hidden))[0];
        (y, Cache { x: x.clone(), norm, pooled, feat, hidden, voxels3 })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, cache: &Cache, dy: f32) -> Volume {
        let hs = silu(&cache.hidden);
        let dhs = self.fc2.backward(&hs, &[dy]);
        let dh = silu_backward(&cache.hidden, &dhs);
        let dfeat = self.fc1.backward(&cache.feat, &dh);
        let w2 = self.config.widths[2];
        let side3 = cache.norm[2].0.side;
        let mut ds = Volume::zeros(w2, side3);
        for c in 0..w2 {
            let g = dfeat[c] / cache.voxels3 as f32;
            ds.data[c * cache.voxels3..(c + 1) * cache.voxels3].iter_mut().for_each(|v| *v = g);
        }
        let mut grad = ds;
        for level in (0..3).rev() {
            if level < 2 {
                grad = avg_pool_backward(&grad);
            }
            let dn = silu_volume_backward(&cache.norm[level].0, &grad);
            let da = self.norms[level].backward(&cache.norm[level].1, &dn);
            let input = if level == 0 { &cache.x } else { &cache.pooled[level - 1] };
            grad = self.convs[level].backward(input, &da);
        }
        let dvf = dfeat[w2] / cache.x.data.len() as f32;
        grad.data.iter_mut().for_each(|v| *v += dvf);
        grad
    }

    fn check(&self, p: &Volume) {
        assert_eq!(p.side, self.resolution, "regressor resolution");
        assert_eq!(p.channels, 1);
    }

    /// Unclamped network output.
    pub fn predict_raw(&self, p: &Volume) -> f64 {
        self.check(p);
        self.forward(p).0 as f64
    }

    pub fn predict(&self, p: &Volume) -> f64 {
        self.predict_raw(p).clamp(RATIO_CLAMP.0, RATIO_CLAMP.1)
    }

    pub fn predict_grid(&self, g: &VoxelGrid) -> f64 {
        self.predict(&occupancy(g))
    }

    /// Unclamped output and its gradient with respect to the input field.
    pub fn input_gradient(&self, p: &Volume) -> (f64, Volume) {
        self.check(p);
        let mut scratch = self.clone();
        let (y, cache) = scratch.forward(p);
        (y as f64, scratch.backward(&cache, 1.0))
    }
}

fn occupancy(g: &VoxelGrid) -> Volume {
    Volume::from_data(1, g.resolution(), g.occupancy().iter().map(|&s| if s { 1.0 } else { 0.0 }).collect())
}

/// `K / K_hs(vf)` for a record.
pub fn bulk_ratio(record: &DatasetRecord, base: &BaseMaterial) -> Option<f64> {
    let (k_hs, _) = hs_upper(base, record.vol);
    (k_hs > 0.0 && record.bulk.is_finite()).then(|| record.bulk / k_hs)
}

fn r_squared(pred: &[f64], target: &[f64]) -> f64 {
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Trains on a random split and reports R^2 on the held-out part.
pub fn train_regressor(
    records: &[DatasetRecord],
    grids: &[VoxelGrid],
    base: &BaseMaterial,
    config: &RegressorConfig,
) -> Result<(BulkRatioRegressor, RegressorReport)> {
    if records.len() != grids.len() {
        return Err(Error::InvalidArgument(format!("{} records but {} grids", records.len(), grids.len())));
    }
    let mut items: Vec<(Volume, f64)> = Vec::with_capacity(records.len());
    for (r, g) in records.iter().zip(grids) {
        if let Some(t) = bulk_ratio(r, base) {
            items.push((occupancy(g), t));
        }
    }
    if items.len() < MIN_RECORDS {
        return Err(Error::InsufficientData { got: items.len(), need: MIN_RECORDS });
    }
    let resolution = items[0].0.side;
    if items.iter().any(|(v, _)| v.side != resolution) {
        return Err(Error::ResolutionMismatch("regressor inputs differ in resolution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    items.shuffle(&mut rng);
    let n_holdout = ((items.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, items.len() - 1);
    let (holdout, train) = items.split_at(n_holdout);

    let mut model = BulkRatioRegressor::new(config.clone(), *base, resolution)?;
    let mean_target = train.iter().map(|(_, t)| t).sum::<f64>() / train.len() as f64;
    model.fc2.bias.value[0] = mean_target as f32;
    let mut opt = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            for &i in batch {
                let (x, t) = &train[i];
                let (y, cache) = model.forward(x);
                let err = y as f64 - t;
                total += err * err;
                model.backward(&cache, (2.0 * err / batch.len() as f64) as f32);
            }
            opt.step(&mut model, 1.0);
        }
        let loss = total / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: epoch, detail: "regressor epoch loss".into() });
        }
        log::debug!("regressor epoch {epoch}: mse {loss:.5}");
        epoch_losses.push(loss);
    }
    let eval = |set: &[(Volume, f64)]| -> (Vec<f64>, Vec<f64>) {
        set.iter().map(|(x, t)| (model.predict(x), *t)).unzip()
    };
    let (tp, tt) = eval(train);
    let (hp, ht) = eval(holdout);
    let holdout_mse = hp.iter().zip(&ht).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / ht.len() as f64;
    let report = RegressorReport {
        n_train: train.len(),
        n_holdout: holdout.len(),
        train_r2: r_squared(&tp, &tt),
        holdout_r2: r_squared(&hp, &ht),
        holdout_mse,
        epoch_losses,
    };
    Ok((model, report))
}
