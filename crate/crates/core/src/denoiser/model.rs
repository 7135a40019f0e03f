use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, silu, silu_act, silu_backward, Act, Conv, GroupNorm, Init, Linear, ParamLayout,
    ResBlock, ResCache, UpConv,
};
use super::real::Real;
use crate::dataset::CONDITION_LEN;
use crate::error::{Error, Result};
use crate::rng;

/// Shape of the noise-prediction network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Side of the (quadrant) input grid.
    pub quadrant_side: usize,
    /// Channel width at each resolution level, finest first. Level `l` runs at
    /// `quadrant_side / 2^l`.
    pub channel_widths: Vec<usize>,
    /// Width of the fully connected bottleneck vector.
    pub bottleneck_dim: usize,
    /// Size of the sinusoidal timestep encoding and of the time feature.
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub condition_len: usize,
    /// Group count for every group normalization.
    pub norm_groups: usize,
    /// Number of diffusion steps the network is trained for.
    pub timesteps: usize,
}

impl DenoiserConfig {
    /// 8x8 quadrant (16x16 grid), widths `[16, 32]`, 64-wide bottleneck.
    pub fn desk(timesteps: usize) -> Self {
        Self {
            quadrant_side: 8,
            channel_widths: vec![16, 32],
            bottleneck_dim: 64,
            time_embed_dim: 32,
            cond_embed_dim: 64,
            condition_len: CONDITION_LEN,
            norm_groups: 8,
            timesteps,
        }
    }

    /// 32x32 quadrant, three levels (32 -> 16 -> 8) and a 512-wide bottleneck.
    pub fn paper_scale(timesteps: usize) -> Self {
        Self {
            quadrant_side: 32,
            channel_widths: vec![32, 64, 128],
            bottleneck_dim: 512,
            time_embed_dim: 128,
            cond_embed_dim: 128,
            condition_len: CONDITION_LEN,
            norm_groups: 8,
            timesteps,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_widths.len()
    }

    /// Spatial side at the coarsest level.
    pub fn bottom_side(&self) -> usize {
        self.quadrant_side >> (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::config("channel_widths", "need at least one level"));
        }
        if self.quadrant_side == 0 || self.quadrant_side % (1 << (levels - 1)) != 0 {
            return Err(Error::config(
                "quadrant_side",
                format!("{} is not divisible by 2^{}", self.quadrant_side, levels - 1),
            ));
        }
        if self.condition_len != CONDITION_LEN {
            return Err(Error::config(
                "condition_len",
                format!("must be {CONDITION_LEN}, got {}", self.condition_len),
            ));
        }
        if self.norm_groups == 0 {
            return Err(Error::config("norm_groups", "must be positive"));
        }
        for &w in &self.channel_widths {
            if w == 0 || w % self.norm_groups != 0 {
                return Err(Error::config(
                    "channel_widths",
                    format!("width {w} is not a positive multiple of norm_groups = {}", self.norm_groups),
                ));
            }
        }
        for (field, v) in [
            ("bottleneck_dim", self.bottleneck_dim),
            ("cond_embed_dim", self.cond_embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim", "must be even and at least 2"));
        }
        if self.timesteps < 2 {
            return Err(Error::config("timesteps", "must be at least 2"));
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding of a 1-based timestep: `sin(t f_i)` for the first
/// half, `cos(t f_i)` for the second, with `f_i = 10000^(-i / (dim/2))`.
pub fn embed_time(t: usize, dim: usize, timesteps: usize) -> Result<Vec<f64>> {
    if t == 0 || t > timesteps {
        return Err(Error::InvalidTimestep { t, max: timesteps });
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::config("time_embed_dim", "must be even and at least 2"));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

struct Level {
    enc: ResBlock,
    /// Upsampler feeding this level's decoder from the level below; the
    /// coarsest level is fed by the bottleneck instead.
    up: Option<UpConv>,
    time_proj: Linear,
    cond_proj: Linear,
    dec: ResBlock,
}

struct Net {
    input: Conv,
    levels: Vec<Level>,
    bottleneck_in: Linear,
    bottleneck_out: Linear,
    time1: Linear,
    time2: Linear,
    cond1: Linear,
    cond2: Linear,
    out_norm: GroupNorm,
    output: Conv,
}

impl Net {
    fn build(cfg: &DenoiserConfig) -> (Self, ParamLayout) {
        let mut lay = ParamLayout::default();
        let widths = &cfg.channel_widths;
        let g = cfg.norm_groups;
        let input = Conv::new(&mut lay, "input", 1, widths[0], 3);
        let mut levels = Vec::new();
        for (l, &w) in widths.iter().enumerate() {
            let cin = if l == 0 { widths[0] } else { widths[l - 1] };
            let enc = ResBlock::new(&mut lay, &format!("enc{l}"), cin, w, g);
            let up = widths
                .get(l + 1)
                .map(|&below| UpConv::new(&mut lay, &format!("up{l}"), below, w));
            let time_proj = Linear::new(&mut lay, &format!("time_proj{l}"), cfg.time_embed_dim, w);
            let cond_proj = Linear::new(&mut lay, &format!("cond_proj{l}"), cfg.cond_embed_dim, w);
            let dec = ResBlock::new(&mut lay, &format!("dec{l}"), 2 * w, w, g);
            levels.push(Level {
                enc,
                up,
                time_proj,
                cond_proj,
                dec,
            });
        }
        let flat = widths[widths.len() - 1] * cfg.bottom_side() * cfg.bottom_side();
        let bottleneck_in = Linear::new(&mut lay, "bottleneck.in", flat, cfg.bottleneck_dim);
        let bottleneck_out = Linear::new(&mut lay, "bottleneck.out", cfg.bottleneck_dim, flat);
        let te = cfg.time_embed_dim;
        let time1 = Linear::new(&mut lay, "time.fc1", te, te);
        let time2 = Linear::new(&mut lay, "time.fc2", te, te);
        let ce = cfg.cond_embed_dim;
        let cond1 = Linear::new(&mut lay, "cond.fc1", cfg.condition_len, ce);
        let cond2 = Linear::new(&mut lay, "cond.fc2", ce, ce);
        let out_norm = GroupNorm::new(&mut lay, "out.norm", widths[0], g);
        let output = Conv::new(&mut lay, "out.conv", widths[0], 1, 3);
        let net = Self {
            input,
            levels,
            bottleneck_in,
            bottleneck_out,
            time1,
            time2,
            cond1,
            cond2,
            out_norm,
            output,
        };
        (net, lay)
    }
}

/// The trainable noise predictor `eps(x_t, t, c)`.
///
/// Encoder: input conv, then one residual block per level with 2x2 average
/// pooling between levels. The coarsest map is flattened through a fully
/// connected bottleneck. Decoder, coarsest first: upsample (transposed conv,
/// or the bottleneck output at the bottom), add the projected time and
/// condition features per channel, concatenate the encoder skip, residual
/// block. The encoder never sees the condition.
pub struct DenoiserModel<F: Real = f32> {
    config: DenoiserConfig,
    net: Net,
    layout: ParamLayout,
    params: Vec<F>,
}

impl<F: Real> Clone for DenoiserModel<F> {
    fn clone(&self) -> Self {
        let mut m = Self::zeroed(self.config.clone()).expect("config was valid");
        m.params.clone_from(&self.params);
        m
    }
}

impl<F: Real> std::fmt::Debug for DenoiserModel<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserModel")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .finish()
    }
}

struct DecCache<F> {
    up_in: Option<Act<F>>,
    res: ResCache<F>,
}

struct Cache<F> {
    n: usize,
    x: Act<F>,
    input_cols: Vec<F>,
    enc: Vec<ResCache<F>>,
    /// Finest level first.
    dec: Vec<DecCache<F>>,
    bottleneck_rows: Vec<F>,
    bottleneck_hidden: Vec<F>,
    time_base: Vec<F>,
    time_h: Vec<F>,
    time_feat: Vec<F>,
    cond: Vec<F>,
    cond_h: Vec<F>,
    cond_feat: Vec<F>,
    out_in: Act<F>,
    out_stats: Vec<(F, F)>,
    out_pre: Act<F>,
    out_act: Act<F>,
    out_cols: Vec<F>,
}

impl<F: Real> DenoiserModel<F> {
    fn zeroed(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (net, layout) = Net::build(&config);
        let params = vec![F::zero(); layout.total];
        Ok(Self {
            config,
            net,
            layout,
            params,
        })
    }

    /// Deterministic fan-in-scaled uniform initialisation; normalization
    /// scales start at one and shifts at zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeroed(config)?;
        let mut rng = rng::stream(seed, &[0x1417]);
        for e in &m.layout.entries {
            for v in &mut m.params[e.range()] {
                *v = match e.init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        F::lit(rng.sample(Uniform::new_inclusive(-bound, bound)))
                    }
                    Init::Ones => F::one(),
                    Init::Zeros => F::zero(),
                };
            }
        }
        Ok(m)
    }

    /// Builds a model from raw parameter values laid out as [`DenoiserModel::layout`].
    pub fn from_params(config: DenoiserConfig, params: Vec<F>) -> Result<Self> {
        let mut m = Self::zeroed(config)?;
        if params.len() != m.params.len() {
            return Err(Error::LengthMismatch {
                expected: m.params.len(),
                actual: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        m.params = params;
        Ok(m)
    }

    /// Names, shapes and offsets of the parameter tensors for `config`.
    pub fn layout_for(config: &DenoiserConfig) -> Result<ParamLayout> {
        config.validate()?;
        Ok(Net::build(config).1)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Same architecture and weights in another precision.
    pub fn cast<G: Real>(&self) -> DenoiserModel<G> {
        let mut m = DenoiserModel::<G>::zeroed(self.config.clone()).expect("config was valid");
        for (dst, src) in m.params.iter_mut().zip(&self.params) {
            *dst = G::from_f64(src.to_f64().unwrap()).unwrap();
        }
        m
    }

    /// Order-sensitive digest of the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let bits: Vec<u64> = self.params.iter().map(|v| v.to_f64().unwrap().to_bits()).collect();
        rng::derive_seed(bits.len() as u64, &bits)
    }

    /// Learned time feature for each timestep: sinusoidal encoding followed
    /// by two linear layers with a SiLU between them.
    pub fn embed_time(&self, t: &[usize]) -> Result<Vec<Vec<F>>> {
        let base = self.time_base(t)?;
        let p = &self.params;
        let h = silu(&self.net.time1.forward(p, &base, t.len()));
        let feat = self.net.time2.forward(p, &h, t.len());
        Ok(feat.chunks(self.config.time_embed_dim).map(<[F]>::to_vec).collect())
    }

    fn time_base(&self, t: &[usize]) -> Result<Vec<F>> {
        let mut base = Vec::with_capacity(t.len() * self.config.time_embed_dim);
        for &ti in t {
            base.extend(
                embed_time(ti, self.config.time_embed_dim, self.config.timesteps)?
                    .into_iter()
                    .map(F::lit),
            );
        }
        Ok(base)
    }

    fn check_inputs(&self, x: &[F], t: &[usize], cond: &[F]) -> Result<usize> {
        let n = t.len();
        let q = self.config.quadrant_side;
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if x.len() != n * q * q {
            return Err(Error::shape(format!("{n} x {q} x {q} = {}", n * q * q), x.len()));
        }
        if cond.len() != n * self.config.condition_len {
            return Err(Error::shape(
                format!("{n} x {} condition values", self.config.condition_len),
                cond.len(),
            ));
        }
        if x.iter().chain(cond).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(n)
    }

    /// Predicted noise for a batch. `x` holds `N` row-major quadrants, `t`
    /// one 1-based timestep per sample, `cond` `N` condition vectors (all
    /// zeros selects the unconditional branch). Output is shaped like `x`.
    pub fn forward(&self, x: &[F], t: &[usize], cond: &[F]) -> Result<Vec<F>> {
        self.forward_ablated(x, t, cond, None)
    }

    /// [`DenoiserModel::forward`] with the encoder skip into decoder level
    /// `ablate_skip` replaced by zeros. Only useful for wiring checks.
    #[doc(hidden)]
    pub fn forward_ablated(&self, x: &[F], t: &[usize], cond: &[F], ablate_skip: Option<usize>) -> Result<Vec<F>> {
        let n = self.check_inputs(x, t, cond)?;
        let (y, _) = self.run(x, t, cond, n, ablate_skip)?;
        Ok(y.data)
    }

    /// Mean squared error against `target` over all samples and cells,
    /// and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &[F], t: &[usize], cond: &[F], target: &[F]) -> Result<(f64, Vec<F>)> {
        let n = self.check_inputs(x, t, cond)?;
        if target.len() != x.len() {
            return Err(Error::shape(x.len(), target.len()));
        }
        let (y, cache) = self.run(x, t, cond, n, None)?;
        let count = y.data.len() as f64;
        let loss = y
            .data
            .iter()
            .zip(target)
            .map(|(a, b)| {
                let d = (*a - *b).to_f64().unwrap();
                d * d
            })
            .sum::<f64>()
            / count;
        let scale = F::lit(2.0 / count);
        let dy = Act {
            data: y.data.iter().zip(target).map(|(a, b)| (*a - *b) * scale).collect(),
            ..y
        };
        let grads = self.backward(&cache, dy);
        Ok((loss, grads))
    }

    pub fn loss(&self, x: &[F], t: &[usize], cond: &[F], target: &[F]) -> Result<f64> {
        let y = self.forward(x, t, cond)?;
        if target.len() != y.len() {
            return Err(Error::shape(y.len(), target.len()));
        }
        let sum: f64 = y
            .iter()
            .zip(target)
            .map(|(a, b)| (*a - *b).to_f64().unwrap().powi(2))
            .sum();
        Ok(sum / y.len() as f64)
    }

    fn run(&self, x: &[F], t: &[usize], cond: &[F], n: usize, ablate: Option<usize>) -> Result<(Act<F>, Cache<F>)> {
        let p = &self.params;
        let net = &self.net;
        let q = self.config.quadrant_side;

        let time_base = self.time_base(t)?;
        let time_h = net.time1.forward(p, &time_base, n);
        let time_feat = net.time2.forward(p, &silu(&time_h), n);
        let cond = cond.to_vec();
        let cond_h = net.cond1.forward(p, &cond, n);
        let cond_feat = net.cond2.forward(p, &silu(&cond_h), n);
        let time_act = silu(&time_feat);
        let cond_act = silu(&cond_feat);

        let x = Act {
            c: 1,
            n,
            h: q,
            w: q,
            data: x.to_vec(),
        };
        let (mut h, input_cols) = net.input.forward(p, &x);
        let mut enc = Vec::with_capacity(net.levels.len());
        let mut skips = Vec::with_capacity(net.levels.len());
        for (l, level) in net.levels.iter().enumerate() {
            let inp = if l == 0 { h } else { avg_pool2(&h) };
            let (out, cache) = level.enc.forward(p, inp);
            skips.push(out.clone());
            enc.push(cache);
            h = out;
        }

        let bottom_shape = (h.c, h.h, h.w);
        let bottleneck_rows = h.to_rows();
        let bottleneck_hidden = net.bottleneck_in.forward(p, &bottleneck_rows, n);
        let back = net.bottleneck_out.forward(p, &silu(&bottleneck_hidden), n);
        let mut bottom = Some(Act::from_rows(&back, bottom_shape.0, n, bottom_shape.1, bottom_shape.2));

        let mut dec = Vec::with_capacity(net.levels.len());
        let mut prev: Option<Act<F>> = None;
        for (l, level) in net.levels.iter().enumerate().rev() {
            let (mut u, up_in) = match &level.up {
                Some(up) => {
                    let below = prev.take().expect("coarser level ran first");
                    (up.forward(p, &below), Some(below))
                }
                None => (bottom.take().expect("only the coarsest level reads the bottleneck"), None),
            };
            u.add_per_sample_bias(&level.time_proj.forward(p, &time_act, n));
            u.add_per_sample_bias(&level.cond_proj.forward(p, &cond_act, n));
            let skip = if ablate == Some(l) {
                Act::zeros(skips[l].c, n, skips[l].h, skips[l].w)
            } else {
                skips[l].clone()
            };
            let (d, cache) = level.dec.forward(p, u.concat(&skip));
            dec.push(DecCache { up_in, res: cache });
            prev = Some(d);
        }
        dec.reverse();

        let out_in = prev.expect("at least one level");
        let (out_pre, out_stats) = net.out_norm.forward(p, &out_in);
        let out_act = silu_act(&out_pre);
        let (y, out_cols) = net.output.forward(p, &out_act);
        let cache = Cache {
            n,
            x,
            input_cols,
            enc,
            dec,
            bottleneck_rows,
            bottleneck_hidden,
            time_base,
            time_h,
            time_feat,
            cond,
            cond_h,
            cond_feat,
            out_in,
            out_stats,
            out_pre,
            out_act,
            out_cols,
        };
        Ok((y, cache))
    }

    fn backward(&self, cache: &Cache<F>, dy: Act<F>) -> Vec<F> {
        let p = &self.params;
        let net = &self.net;
        let n = cache.n;
        let mut g = vec![F::zero(); p.len()];

        let d_act = net
            .output
            .backward(p, &cache.out_act, &cache.out_cols, &dy, &mut g, true)
            .unwrap();
        let d_pre = Act {
            data: silu_backward(&cache.out_pre.data, &d_act.data),
            ..d_act
        };
        let mut d_h = net.out_norm.backward(p, &cache.out_in, &cache.out_stats, &d_pre, &mut g);

        let time_act = silu(&cache.time_feat);
        let cond_act = silu(&cache.cond_feat);
        let mut d_time_act = vec![F::zero(); time_act.len()];
        let mut d_cond_act = vec![F::zero(); cond_act.len()];
        let mut d_skips = Vec::with_capacity(net.levels.len());
        let mut d_bottom = None;
        for (level, dc) in net.levels.iter().zip(&cache.dec) {
            let d_cat = level.dec.backward(p, &dc.res, &d_h, &mut g);
            let (d_u, d_skip) = d_cat.split(d_cat.c / 2);
            d_skips.push(d_skip);
            let d_e = d_u.sum_per_sample();
            let dt = level.time_proj.backward(p, &time_act, &d_e, n, &mut g, true).unwrap();
            let dcnd = level.cond_proj.backward(p, &cond_act, &d_e, n, &mut g, true).unwrap();
            accumulate(&mut d_time_act, &dt);
            accumulate(&mut d_cond_act, &dcnd);
            match (&level.up, &dc.up_in) {
                (Some(up), Some(below)) => d_h = up.backward(p, below, &d_u, &mut g),
                _ => d_bottom = Some(d_u),
            }
        }

        let d_bottom = d_bottom.expect("coarsest level visited");
        let (bc, bh, bw) = (d_bottom.c, d_bottom.h, d_bottom.w);
        let hidden_act = silu(&cache.bottleneck_hidden);
        let d_hidden_act = net
            .bottleneck_out
            .backward(p, &hidden_act, &d_bottom.to_rows(), n, &mut g, true)
            .unwrap();
        let d_hidden = silu_backward(&cache.bottleneck_hidden, &d_hidden_act);
        let d_rows = net
            .bottleneck_in
            .backward(p, &cache.bottleneck_rows, &d_hidden, n, &mut g, true)
            .unwrap();
        let mut d_out = Act::from_rows(&d_rows, bc, n, bh, bw);

        for l in (0..net.levels.len()).rev() {
            accumulate(&mut d_out.data, &d_skips[l].data);
            let d_in = net.levels[l].enc.backward(p, &cache.enc[l], &d_out, &mut g);
            d_out = if l > 0 { avg_pool2_backward(&d_in) } else { d_in };
        }
        net.input.backward(p, &cache.x, &cache.input_cols, &d_out, &mut g, false);

        let d_feat = silu_backward(&cache.time_feat, &d_time_act);
        let d_h1 = net.time2.backward(p, &silu(&cache.time_h), &d_feat, n, &mut g, true).unwrap();
        let d_h1 = silu_backward(&cache.time_h, &d_h1);
        net.time1.backward(p, &cache.time_base, &d_h1, n, &mut g, false);

        let d_feat = silu_backward(&cache.cond_feat, &d_cond_act);
        let d_h1 = net.cond2.backward(p, &silu(&cache.cond_h), &d_feat, n, &mut g, true).unwrap();
        let d_h1 = silu_backward(&cache.cond_h, &d_h1);
        net.cond1.backward(p, &cache.cond, &d_h1, n, &mut g, false);
        g
    }
}

fn accumulate<F: Real>(dst: &mut [F], src: &[F]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normals, stream};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            quadrant_side: 4,
            channel_widths: vec![4, 8],
            bottleneck_dim: 8,
            time_embed_dim: 4,
            cond_embed_dim: 4,
            condition_len: CONDITION_LEN,
            norm_groups: 2,
            timesteps: 10,
        }
    }

    fn batch(cfg: &DenoiserConfig, n: usize, seed: u64) -> (Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>) {
        let mut rng = stream(seed, &[]);
        let q = cfg.quadrant_side;
        let x = standard_normals(&mut rng, n * q * q);
        let t: Vec<usize> = (0..n).map(|i| 1 + (i * 7 + 3) % cfg.timesteps).collect();
        let mut cond: Vec<f64> = (0..n * CONDITION_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Exercise the unconditional branch too.
        cond[..CONDITION_LEN].fill(0.0);
        let target = standard_normals(&mut rng, n * q * q);
        (x, t, cond, target)
    }

    fn conv(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }
    fn norm(c: usize) -> usize {
        2 * c
    }
    fn linear(din: usize, dout: usize) -> usize {
        din * dout + dout
    }
    fn res(cin: usize, cout: usize) -> usize {
        let skip = if cin == cout { 0 } else { conv(cin, cout, 1) };
        norm(cin) + conv(cin, cout, 3) + norm(cout) + conv(cout, cout, 3) + skip
    }

    #[test]
    fn desk_parameter_count_matches_hand_count() {
        let cfg = DenoiserConfig::desk(200);
        let (te, ce, b) = (32, 64, 64);
        let flat = 32 * 4 * 4;
        let expect = conv(1, 16, 3)
            + res(16, 16)
            + (16 * 4 * 32 + 16)
            + linear(te, 16)
            + linear(ce, 16)
            + res(32, 16)
            + res(16, 32)
            + linear(te, 32)
            + linear(ce, 32)
            + res(64, 32)
            + linear(flat, b)
            + linear(b, flat)
            + 2 * linear(te, te)
            + linear(55, ce)
            + linear(ce, ce)
            + norm(16)
            + conv(16, 1, 3);
        assert_eq!(expect, 139_857);
        let m = DenoiserModel::<f32>::init(cfg, 0).unwrap();
        assert_eq!(m.num_params(), expect);
    }

    #[test]
    fn init_is_seeded() {
        let a = DenoiserModel::<f32>::init(tiny(), 5).unwrap();
        let b = DenoiserModel::<f32>::init(tiny(), 5).unwrap();
        let c = DenoiserModel::<f32>::init(tiny(), 6).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.params(), b.params());
        assert_ne!(a.checksum(), c.checksum());
        assert!(a.all_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.quadrant_side = 5;
        assert!(DenoiserModel::<f32>::init(c, 0).is_err());
        let mut c = tiny();
        c.condition_len = 54;
        assert!(DenoiserModel::<f32>::init(c, 0).is_err());
        let mut c = tiny();
        c.channel_widths = vec![3, 8];
        assert!(DenoiserModel::<f32>::init(c, 0).is_err());
        let mut c = tiny();
        c.time_embed_dim = 5;
        assert!(DenoiserModel::<f32>::init(c, 0).is_err());
    }

    #[test]
    fn time_embeddings_are_distinct() {
        let t = 200;
        let all: Vec<Vec<f64>> = (1..=t).map(|s| embed_time(s, 32, t).unwrap()).collect();
        for i in 0..t {
            for j in i + 1..t {
                let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "t={} and t={}", i + 1, j + 1);
            }
        }
        assert!(embed_time(0, 32, t).is_err());
        assert!(embed_time(t + 1, 32, t).is_err());
    }

    #[test]
    fn batched_forward_matches_single_samples() {
        let cfg = tiny();
        let m = DenoiserModel::<f64>::init(cfg.clone(), 1).unwrap();
        let (x, t, cond, _) = batch(&cfg, 3, 2);
        let all = m.forward(&x, &t, &cond).unwrap();
        let qq = cfg.quadrant_side * cfg.quadrant_side;
        for i in 0..3 {
            let one = m
                .forward(&x[i * qq..(i + 1) * qq], &t[i..i + 1], &cond[i * 55..(i + 1) * 55])
                .unwrap();
            for (a, b) in one.iter().zip(&all[i * qq..(i + 1) * qq]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_validation() {
        let cfg = tiny();
        let m = DenoiserModel::<f32>::init(cfg, 1).unwrap();
        assert!(matches!(m.forward(&[], &[], &[]), Err(Error::Empty(_))));
        assert!(m.forward(&[0.0; 15], &[1], &[0.0; 55]).is_err());
        assert!(m.forward(&[0.0; 16], &[1], &[0.0; 54]).is_err());
        assert!(m.forward(&[0.0; 16], &[11], &[0.0; 55]).is_err());
        let mut x = [0.0f32; 16];
        x[3] = f32::NAN;
        assert!(matches!(m.forward(&x, &[1], &[0.0; 55]), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn every_skip_connection_is_wired() {
        let cfg = DenoiserConfig {
            channel_widths: vec![4, 8, 8],
            quadrant_side: 8,
            ..tiny()
        };
        let m = DenoiserModel::<f64>::init(cfg.clone(), 3).unwrap();
        let (x, t, cond, _) = batch(&cfg, 2, 4);
        let base = m.forward(&x, &t, &cond).unwrap();
        for level in 0..cfg.levels() {
            let ablated = m.forward_ablated(&x, &t, &cond, Some(level)).unwrap();
            let diff = base.iter().zip(&ablated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff > 1e-6, "skip {level} has no effect");
        }
    }

    #[test]
    fn condition_and_time_change_the_output() {
        let cfg = tiny();
        let m = DenoiserModel::<f64>::init(cfg.clone(), 3).unwrap();
        let (x, t, cond, _) = batch(&cfg, 2, 4);
        let base = m.forward(&x, &t, &cond).unwrap();
        let mut cond2 = cond.clone();
        cond2[60] += 0.5;
        assert_ne!(base, m.forward(&x, &t, &cond2).unwrap());
        assert_ne!(base, m.forward(&x, &[t[0], t[1] + 1], &cond).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut m = DenoiserModel::<f64>::init(cfg.clone(), 9).unwrap();
        assert!(m.num_params() <= 5000, "{}", m.num_params());
        let (x, t, cond, target) = batch(&cfg, 2, 10);
        let (_, grad) = m.loss_and_grad(&x, &t, &cond, &target).unwrap();
        let live = grad.iter().filter(|g| g.abs() > 1e-8).count();
        assert!(live * 10 > m.num_params() * 9, "only {live} non-trivial gradients");
        let h = 1e-5;
        let mut worst = (0.0, 0usize);
        for i in 0..m.num_params() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = m.loss(&x, &t, &cond, &target).unwrap();
            m.params_mut()[i] = orig - h;
            let down = m.loss(&x, &t, &cond, &target).unwrap();
            m.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
        assert!(worst.0 <= 1e-3, "param {} rel err {}", worst.1, worst.0);
    }

    #[test]
    fn f32_and_f64_agree() {
        let cfg = tiny();
        let m32 = DenoiserModel::<f32>::init(cfg.clone(), 2).unwrap();
        let m64: DenoiserModel<f64> = m32.cast();
        let (x, t, cond, _) = batch(&cfg, 2, 3);
        let y64 = m64.forward(&x, &t, &cond).unwrap();
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let c32: Vec<f32> = cond.iter().map(|&v| v as f32).collect();
        let y32 = m32.forward(&x32, &t, &c32).unwrap();
        for (a, b) in y32.iter().zip(&y64) {
            assert!((f64::from(*a) - b).abs() < 1e-4);
        }
    }
}
