use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    avg_pool, avg_pool_backward, silu, silu_backward, silu_volume, silu_volume_backward, sinusoidal_embedding,
    upsample, upsample_backward, Conv1, Conv3, GroupNorm, GroupNormCache, Linear, Module, Param, Volume,
};

/// Shape of the denoiser: one residual block per level, widths per level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UNetConfig {
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub cond_dim: usize,
}

impl UNetConfig {
    /// Three levels, widths 16/32/64.
    pub fn desk() -> Self {
        Self { widths: vec![16, 32, 64], in_channels: 2, time_dim: 32, emb_dim: 64, cond_dim: 4 }
    }

    /// Five levels, widths 32/64/128/256/256.
    pub fn full() -> Self {
        Self { widths: vec![32, 64, 128, 256, 256], in_channels: 2, time_dim: 64, emb_dim: 256, cond_dim: 4 }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Sides must halve cleanly down to the coarsest level.
    pub fn supports_side(&self, side: usize) -> bool {
        let f = 1usize << (self.levels() - 1);
        side >= f && side % f == 0
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv3,
    proj: Linear,
    gn2: GroupNorm,
    conv2: Conv3,
    skip: Option<Conv1>,
}

#[derive(Clone, Debug)]
struct ResCache {
    x: Volume,
    gn1: GroupNormCache,
    a1: Volume,
    s1: Volume,
    gn2: GroupNormCache,
    /// `gn2` output before the embedding's scale and shift.
    g2: Volume,
    scale: Vec<f32>,
    a2: Volume,
    s2: Volume,
}

impl ResBlock {
    fn new<R: Rng>(cin: usize, cout: usize, emb: usize, rng: &mut R) -> Self {
        Self {
            gn1: GroupNorm::new(cin, GroupNorm::default_groups(cin)),
            conv1: Conv3::new(cin, cout, rng),
            proj: Linear::new(emb, 2 * cout, rng),
            gn2: GroupNorm::new(cout, GroupNorm::default_groups(cout)),
            conv2: Conv3::new(cout, cout, rng),
            skip: (cin != cout).then(|| Conv1::new(cin, cout, rng)),
        }
    }

    fn forward(&self, x: &Volume, emb: &[f32]) -> (Volume, ResCache) {
        let (a1, gn1) = self.gn1.forward(x);
        let s1 = silu_volume(&a1);
        let h1 = self.conv1.forward(&s1);
        // scale and shift after the norm: a bias before it would be removed
        // whenever a group holds a single channel
        let pe = self.proj.forward(emb);
        let (scale, shift) = pe.split_at(h1.channels);
        let (g2, gn2) = self.gn2.forward(&h1);
        let n = g2.voxels();
        let mut a2 = g2.clone();
        for c in 0..a2.channels {
            let (k, b) = (1.0 + scale[c], shift[c]);
            a2.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *v * k + b);
        }
        let s2 = silu_volume(&a2);
        let mut y = self.conv2.forward(&s2);
        match &self.skip {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        (y, ResCache { x: x.clone(), gn1, a1, s1, gn2, g2, scale: scale.to_vec(), a2, s2 })
    }

    /// Returns the input gradient and adds the embedding gradient to `demb`.
    fn backward(&mut self, c: &ResCache, dy: &Volume, emb: &[f32], demb: &mut [f32]) -> Volume {
        let ds2 = self.conv2.backward(&c.s2, dy);
        let da2 = silu_volume_backward(&c.a2, &ds2);
        let n = da2.voxels();
        let ch = da2.channels;
        let mut dpe = vec![0.0f32; 2 * ch];
        let mut dg2 = da2.clone();
        for k in 0..ch {
            let range = k * n..(k + 1) * n;
            dpe[k] = da2.data[range.clone()].iter().zip(&c.g2.data[range.clone()]).map(|(d, g)| d * g).sum();
            dpe[ch + k] = da2.data[range.clone()].iter().sum();
            dg2.data[range].iter_mut().for_each(|v| *v *= 1.0 + c.scale[k]);
        }
        let dh1 = self.gn2.backward(&c.gn2, &dg2);
        let de = self.proj.backward(emb, &dpe);
        demb.iter_mut().zip(de).for_each(|(a, b)| *a += b);
        let ds1 = self.conv1.backward(&c.s1, &dh1);
        let da1 = silu_volume_backward(&c.a1, &ds1);
        let mut dx = self.gn1.backward(&c.gn1, &da1);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(&c.x, dy)),
            None => dx.add_assign(dy),
        }
        dx
    }
}

impl Module for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.gn1.visit(f);
        self.conv1.visit(f);
        self.proj.visit(f);
        self.gn2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.gn1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.proj.visit_mut(f);
        self.gn2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

/// Denoiser predicting the clean latent from `(x_t, self-condition)`, a
/// timestep and a condition vector.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    conv_in: Conv3,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv3,
    time1: Linear,
    time2: Linear,
    cond1: Linear,
    cond2: Linear,
}

pub struct UNetCache {
    input: Volume,
    temb: Vec<f32>,
    t_pre: Vec<f32>,
    t_act: Vec<f32>,
    cond: Vec<f32>,
    c_pre: Vec<f32>,
    c_act: Vec<f32>,
    e_pre: Vec<f32>,
    emb: Vec<f32>,
    down: Vec<ResCache>,
    mid: ResCache,
    up: Vec<ResCache>,
    up_split: Vec<usize>,
    out_gn: GroupNormCache,
    out_a: Volume,
    out_s: Volume,
}

impl UNet {
    pub fn new<R: Rng>(config: UNetConfig, rng: &mut R) -> Self {
        let w = &config.widths;
        let l = w.len();
        assert!(l >= 1, "at least one level");
        let e = config.emb_dim;
        let conv_in = Conv3::new(config.in_channels, w[0], rng);
        let mut down = Vec::with_capacity(l);
        let mut prev = w[0];
        for &width in w {
            down.push(ResBlock::new(prev, width, e, rng));
            prev = width;
        }
        let mid = ResBlock::new(w[l - 1], w[l - 1], e, rng);
        let up = (0..l - 1).map(|i| ResBlock::new(w[i + 1] + w[i], w[i], e, rng)).collect();
        Self {
            conv_in,
            down,
            mid,
            up,
            out_norm: GroupNorm::new(w[0], GroupNorm::default_groups(w[0])),
            out_conv: Conv3::zero_init(w[0], 1),
            time1: Linear::new(config.time_dim, e, rng),
            time2: Linear::new(e, e, rng),
            cond1: Linear::new(config.cond_dim, e, rng),
            cond2: Linear::new(e, e, rng),
            config,
        }
    }

    pub fn forward(&self, x_t: &Volume, self_cond: &Volume, t: f32, cond: &[f32]) -> (Volume, UNetCache) {
        assert_eq!(cond.len(), self.config.cond_dim, "condition length");
        assert!(self.config.supports_side(x_t.side), "side {} not supported by the level count", x_t.side);
        let levels = self.config.levels();
        let input = Volume::concat(x_t, self_cond);
        let temb = sinusoidal_embedding(t, self.config.time_dim);
        let t_pre = self.time1.forward(&temb);
        let t_act = silu(&t_pre);
        let c_pre = self.cond1.forward(cond);
        let c_act = silu(&c_pre);
        let e_pre: Vec<f32> =
            self.time2.forward(&t_act).iter().zip(self.cond2.forward(&c_act)).map(|(a, b)| a + b).collect();
        let emb = silu(&e_pre);

        let mut h = self.conv_in.forward(&input);
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        for (l, block) in self.down.iter().enumerate() {
            let (y, c) = block.forward(&h, &emb);
            down.push(c);
            h = if l + 1 < levels {
                let pooled = avg_pool(&y);
                skips.push(y);
                pooled
            } else {
                y
            };
        }
        let (y, mid) = self.mid.forward(&h, &emb);
        h = y;
        let mut up = Vec::with_capacity(levels - 1);
        let mut up_split = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            let u = upsample(&h);
            up_split.push(u.channels);
            let (y, c) = self.up[l].forward(&Volume::concat(&u, &skips[l]), &emb);
            up.push(c);
            h = y;
        }
        let (out_a, out_gn) = self.out_norm.forward(&h);
        let out_s = silu_volume(&out_a);
        let out = self.out_conv.forward(&out_s);
        let cache = UNetCache {
            input,
            temb,
            t_pre,
            t_act,
            cond: cond.to_vec(),
            c_pre,
            c_act,
            e_pre,
            emb,
            down,
            mid,
            up,
            up_split,
            out_gn,
            out_a,
            out_s,
        };
        (out, cache)
    }

    pub fn predict(&self, x_t: &Volume, self_cond: &Volume, t: f32, cond: &[f32]) -> Volume {
        self.forward(x_t, self_cond, t, cond).0
    }

    /// Accumulates parameter gradients for output gradient `dout`.
    pub fn backward(&mut self, cache: &UNetCache, dout: &Volume) {
        let levels = self.config.levels();
        let mut demb = vec![0.0f32; self.config.emb_dim];
        let dso = self.out_conv.backward(&cache.out_s, dout);
        let da = silu_volume_backward(&cache.out_a, &dso);
        let mut dh = self.out_norm.backward(&cache.out_gn, &da);

        let mut dskips: Vec<Option<Volume>> = vec![None; levels.saturating_sub(1)];
        // up blocks ran from the coarsest level down; cache.up is in run order
        for level in 0..levels - 1 {
            let run_index = levels - 2 - level;
            let dcat = self.up[level].backward(&cache.up[run_index], &dh, &cache.emb, &mut demb);
            let (du, dskip) = dcat.split(cache.up_split[run_index]);
            dskips[level] = Some(dskip);
            dh = upsample_backward(&du);
        }
        dh = self.mid.backward(&cache.mid, &dh, &cache.emb, &mut demb);
        for l in (0..levels).rev() {
            if l + 1 < levels {
                dh = avg_pool_backward(&dh);
                dh.add_assign(dskips[l].as_ref().expect("skip gradient"));
            }
            dh = self.down[l].backward(&cache.down[l], &dh, &cache.emb, &mut demb);
        }
        self.conv_in.backward(&cache.input, &dh);

        let de = silu_backward(&cache.e_pre, &demb);
        let dt_act = self.time2.backward(&cache.t_act, &de);
        self.time1.backward(&cache.temb, &silu_backward(&cache.t_pre, &dt_act));
        let dc_act = self.cond2.backward(&cache.c_act, &de);
        self.cond1.backward(&cache.cond, &silu_backward(&cache.c_pre, &dc_act));
    }
}

impl Module for UNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv_in.visit(f);
        self.down.iter().for_each(|b| b.visit(f));
        self.mid.visit(f);
        self.up.iter().for_each(|b| b.visit(f));
        self.out_norm.visit(f);
        self.out_conv.visit(f);
        self.time1.visit(f);
        self.time2.visit(f);
        self.cond1.visit(f);
        self.cond2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv_in.visit_mut(f);
        self.down.iter_mut().for_each(|b| b.visit_mut(f));
        self.mid.visit_mut(f);
        self.up.iter_mut().for_each(|b| b.visit_mut(f));
        self.out_norm.visit_mut(f);
        self.out_conv.visit_mut(f);
        self.time1.visit_mut(f);
        self.time2.visit_mut(f);
        self.cond1.visit_mut(f);
        self.cond2.visit_mut(f);
    }
}
