//! Forward noising, the pixel-grid denoiser, the noise-prediction loss,
//! classifier-free guidance and deterministic DDIM sampling.

use autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, AttnCapture, LoraLinear, MultiModalCrossAttention};
use crate::conditioning::{ConditioningBundle, EntitySlot};
use crate::nn::{sinusoidal, Fwd, Init, LayerNorm, Linear, Project};
use crate::{Error, Result};

/// Variance schedule with derived `α_t = 1 − β_t` and `ᾱ_t = Π α`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("betas must be non-empty and inside (0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("betas must be non-decreasing"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Evenly spaced betas from `start` to `end` inclusive.
    pub fn linear(t_max: usize, start: f64, end: f64) -> Result<Self> {
        let denom = (t_max.max(2) - 1) as f64;
        Self::from_betas((0..t_max).map(|i| start + (end - start) * i as f64 / denom).collect())
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.t_max() {
            return Err(Error::invalid(format!("timestep {t} outside 0..{}", self.t_max())));
        }
        Ok(())
    }

    /// Descending timesteps visited by an `steps`-step sampler:
    /// `round((i + 1)·T / steps) − 1` for `i = steps−1, …, 0`.
    pub fn sampling_times(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.t_max();
        if steps == 0 || steps > t_max {
            return Err(Error::invalid(format!("steps {steps} must lie in 1..={t_max}")));
        }
        Ok((0..steps)
            .rev()
            .map(|i| (((i + 1) * t_max) as f64 / steps as f64).round() as usize - 1)
            .collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(100, 1e-4, 2e-2).expect("valid default schedule")
    }
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::invalid(format!("noise {:?} vs image {:?}", eps.shape(), z0.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_fn(z0.shape(), |i| s * z0.data()[i] + n * eps.data()[i]))
}

/// Standard normal tensor from a seeded stream.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Residual block on a `[h·w × c]` map:
/// `x + conv3x3(silu(LN(x) + temb))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm: LayerNorm,
    pub temb: Linear,
    pub conv: Linear,
}

impl ResBlock {
    fn new(init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), width, false),
            temb: Linear::new(init, &format!("{name}.temb"), width, width, true, false),
            conv: Linear::new(init, &format!("{name}.conv"), 9 * width, width, true, false),
        }
    }

    fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>, temb: Var<'t>, hw: (usize, usize)) -> Result<Var<'t>> {
        let h = self.norm.forward(f, x)?.add_row(self.temb.forward(f, temb)?)?.silu()?;
        let h = self.conv.forward(f, h.unfold3x3(hw.0, hw.1)?)?;
        Ok(x.add(h)?)
    }
}

/// `h + out(mmca(LN(h), c_t, c_i))`.
#[derive(Clone, Debug)]
pub struct CrossAttnBlock {
    pub norm: LayerNorm,
    pub attn: MultiModalCrossAttention,
    pub out: LoraLinear,
}

impl CrossAttnBlock {
    fn new(init: &mut Init, name: &str, width: usize, d_cond: usize, heads: usize, rank: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), width, false),
            attn: MultiModalCrossAttention::new(init, &format!("{name}.attn"), width, d_cond, heads, rank),
            out: LoraLinear::new(init, &format!("{name}.out"), width, width, rank),
        }
    }

    fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>, cond: &ConditioningBundle<'t>, blend: f64) -> Result<(Var<'t>, Vec<Var<'t>>, Vec<Var<'t>>)> {
        let h = self.norm.forward(f, x)?;
        let o = self.attn.forward(f, h, cond.c_t, cond.c_i, blend)?;
        Ok((x.add(self.out.forward(f, o.out)?)?, o.text_probs, o.image_probs))
    }
}

/// Three-stage encoder/decoder over a `grid × grid × ch` image stored as
/// `[grid² × ch]`, with one multi-modal cross-attention per stage
/// (coarsest first: layer 0 at `grid/4`, layer 1 at `grid/2`, layer 2 at
/// `grid`).
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub grid: usize,
    pub channels: usize,
    pub width: usize,
    pub time_mlp: (Linear, Linear),
    pub input: Linear,
    pub down_a: ResBlock,
    pub down_b: ResBlock,
    pub mid: ResBlock,
    pub xattn_mid: CrossAttnBlock,
    pub merge_b: Linear,
    pub up_b: ResBlock,
    pub xattn_b: CrossAttnBlock,
    pub merge_a: Linear,
    pub up_a: ResBlock,
    pub xattn_a: CrossAttnBlock,
    pub out_norm: LayerNorm,
    pub output: Linear,
}

impl Denoiser {
    #[allow(clippy::too_many_arguments)]
    pub fn new(init: &mut Init, name: &str, grid: usize, channels: usize, width: usize, d_cond: usize, heads: usize, rank: usize) -> Self {
        assert!(grid % 4 == 0, "grid {grid} must be divisible by 4");
        let lin = |init: &mut Init, n: &str, i, o| Linear::new(init, &format!("{name}.{n}"), i, o, true, false);
        let res = |init: &mut Init, n: &str| ResBlock::new(init, &format!("{name}.{n}"), width);
        let xattn = |init: &mut Init, n: &str| CrossAttnBlock::new(init, &format!("{name}.{n}"), width, d_cond, heads, rank);
        Self {
            grid,
            channels,
            width,
            time_mlp: (lin(init, "time.fc1", width, width), lin(init, "time.fc2", width, width)),
            input: lin(init, "input", channels, width),
            down_a: res(init, "down_a"),
            down_b: res(init, "down_b"),
            mid: res(init, "mid"),
            xattn_mid: xattn(init, "xattn_mid"),
            merge_b: lin(init, "merge_b", 2 * width, width),
            up_b: res(init, "up_b"),
            xattn_b: xattn(init, "xattn_b"),
            merge_a: lin(init, "merge_a", 2 * width, width),
            up_a: res(init, "up_a"),
            xattn_a: xattn(init, "xattn_a"),
            out_norm: LayerNorm::new(init, &format!("{name}.out_norm"), width, false),
            output: Linear::zero(init, &format!("{name}.output"), width, channels, true, false),
        }
    }

    pub fn cross_attention_blocks(&self) -> [&CrossAttnBlock; 3] {
        [&self.xattn_mid, &self.xattn_b, &self.xattn_a]
    }

    /// Grid of cross-attention layer `layer_id`.
    pub fn layer_grid(&self, layer_id: usize) -> (usize, usize) {
        let g = self.grid >> (2 - layer_id);
        (g, g)
    }

    /// Noise prediction for `z_t: [grid² × ch]`. Attention probabilities of
    /// every cross-attention layer are appended to `record` when given.
    pub fn forward<'t>(
        &self,
        f: Fwd<'t>,
        z_t: Var<'t>,
        t: usize,
        cond: &ConditioningBundle<'t>,
        blend: f64,
        mut record: Option<&mut Vec<AttnCapture<'t>>>,
    ) -> Result<Var<'t>> {
        let g = self.grid;
        if z_t.shape() != [g * g, self.channels] {
            return Err(Error::invalid(format!("denoiser input {:?}, expected [{}, {}]", z_t.shape(), g * g, self.channels)));
        }
        let temb = f.constant(sinusoidal(t as f64, self.width));
        let temb = self.time_mlp.0.forward(f, temb)?.silu()?;
        let temb = self.time_mlp.1.forward(f, temb)?;

        let mut push = |layer_id: usize, text: Vec<Var<'t>>, image: Vec<Var<'t>>| {
            if let Some(sink) = record.as_deref_mut() {
                sink.push(AttnCapture {
                    layer_id,
                    grid: self.layer_grid(layer_id),
                    text,
                    image,
                });
            }
        };

        let (g2, g4) = (g / 2, g / 4);
        let h = self.input.forward(f, z_t)?;
        let skip_a = self.down_a.forward(f, h, temb, (g, g))?;
        let h = skip_a.avg_pool2(g, g)?;
        let skip_b = self.down_b.forward(f, h, temb, (g2, g2))?;
        let h = skip_b.avg_pool2(g2, g2)?;
        let h = self.mid.forward(f, h, temb, (g4, g4))?;
        let (h, tp, ip) = self.xattn_mid.forward(f, h, cond, blend)?;
        push(0, tp, ip);

        let h = h.upsample2(g4, g4)?;
        let h = self.merge_b.forward(f, f.tape.concat_cols(&[h, skip_b])?)?;
        let h = self.up_b.forward(f, h, temb, (g2, g2))?;
        let (h, tp, ip) = self.xattn_b.forward(f, h, cond, blend)?;
        push(1, tp, ip);

        let h = h.upsample2(g2, g2)?;
        let h = self.merge_a.forward(f, f.tape.concat_cols(&[h, skip_a])?)?;
        let h = self.up_a.forward(f, h, temb, (g, g))?;
        let (h, tp, ip) = self.xattn_a.forward(f, h, cond, blend)?;
        push(2, tp, ip);

        let h = self.out_norm.forward(f, h)?;
        self.output.forward(f, h)
    }
}

/// `mean((eps − ε̂(z_t, t, c))²)` with `z_t = add_noise(z0, eps, t)`.
#[allow(clippy::too_many_arguments)]
pub fn sd_loss<'t>(
    denoiser: &Denoiser,
    f: Fwd<'t>,
    z0: &Tensor,
    cond: &ConditioningBundle<'t>,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
    blend: f64,
    record: Option<&mut Vec<AttnCapture<'t>>>,
) -> Result<Var<'t>> {
    let z_t = add_noise(z0, eps, t, sched)?;
    let pred = denoiser.forward(f, f.constant(z_t), t, cond, blend, record)?;
    mse(pred, f.constant(eps.clone()))
}

pub fn mse<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    Ok(pred.sub(target)?.square()?.mean()?)
}

/// Condition values detached from any tape, re-usable across sampling steps.
#[derive(Clone, Debug, PartialEq)]
pub struct CondValues {
    pub c_t: Tensor,
    pub c_i: Option<Tensor>,
    pub entities: Vec<EntitySlot>,
    pub masks: Vec<Tensor>,
}

impl CondValues {
    pub fn of(b: &ConditioningBundle<'_>) -> Self {
        Self {
            c_t: b.c_t.value(),
            c_i: b.c_i.map(|v| v.value()),
            entities: b.entities.clone(),
            masks: b.masks.clone(),
        }
    }

    pub fn lift<'t>(&self, tape: &'t Tape) -> ConditioningBundle<'t> {
        ConditioningBundle {
            c_t: tape.constant(self.c_t.clone()),
            c_i: self.c_i.clone().map(|c| tape.constant(c)),
            entities: self.entities.clone(),
            masks: self.masks.clone(),
        }
    }

    /// Same text stream with every subject token removed.
    pub fn without_subjects(&self) -> Self {
        Self {
            c_t: self.c_t.clone(),
            c_i: None,
            entities: self
                .entities
                .iter()
                .map(|e| EntitySlot {
                    token_pos: e.token_pos,
                    subject_rows: None,
                })
                .collect(),
            masks: self.masks.clone(),
        }
    }
}

/// `(1 − s)·eps_u + s·eps_c`, i.e. `eps_u + s·(eps_c − eps_u)` arranged so
/// `s = 0` and `s = 1` return the corresponding prediction exactly.
pub fn guide(eps_u: &Tensor, eps_c: &Tensor, scale: f64) -> Tensor {
    Tensor::from_fn(eps_c.shape(), |i| (1.0 - scale) * eps_u.data()[i] + scale * eps_c.data()[i])
}

/// Guided noise prediction plus the conditional pass's attention records.
#[allow(clippy::too_many_arguments)]
pub fn cfg_predict_recorded(
    denoiser: &Denoiser,
    store: &autograd::ParamStore,
    z_t: &Tensor,
    t: usize,
    cond: &CondValues,
    uncond: &CondValues,
    scale: f64,
    blend: f64,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    if !(scale >= 0.0) {
        return Err(Error::invalid(format!("guidance scale {scale} must be non-negative")));
    }
    let tape = Tape::new();
    let f = Fwd::new(&tape, store);
    let mut caps = Vec::new();
    let eps_c = denoiser.forward(f, f.constant(z_t.clone()), t, &cond.lift(&tape), blend, Some(&mut caps))?.value();
    let records = caps.iter().map(AttnCapture::to_record).collect();
    drop(caps);
    let tape = Tape::new();
    let f = Fwd::new(&tape, store);
    let eps_u = denoiser.forward(f, f.constant(z_t.clone()), t, &uncond.lift(&tape), blend, None)?.value();
    Ok((guide(&eps_u, &eps_c, scale), records))
}

#[allow(clippy::too_many_arguments)]
pub fn cfg_predict(
    denoiser: &Denoiser,
    store: &autograd::ParamStore,
    z_t: &Tensor,
    t: usize,
    cond: &CondValues,
    uncond: &CondValues,
    scale: f64,
    blend: f64,
) -> Result<Tensor> {
    Ok(cfg_predict_recorded(denoiser, store, z_t, t, cond, uncond, scale, blend)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub blend: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            guidance_scale: 5.0,
            blend: crate::attention::DEFAULT_BLEND,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.t_max() {
            return Err(Error::invalid(format!("steps {} must lie in 1..={}", self.steps, sched.t_max())));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::invalid("guidance scale must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::invalid("blend must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Partially noised starting point: sampling begins at timestep `t_start`
/// from `add_noise(image, eps, t_start)`.
#[derive(Clone, Copy, Debug)]
pub struct Start<'a> {
    pub image: &'a Tensor,
    pub t_start: usize,
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean).
pub fn ddim_step(x: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>, sched: &NoiseSchedule) -> Tensor {
    let ab = sched.alpha_bar(t);
    let ab_prev = t_prev.map_or(1.0, |p| sched.alpha_bar(p));
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Tensor::from_fn(x.shape(), |i| {
        let x0 = ((x.data()[i] - sn * eps.data()[i]) / sa).clamp(-1.0, 1.0);
        pa * x0 + pn * eps.data()[i]
    })
}

/// Guided DDIM (η = 0) trajectory from seeded Gaussian noise, or from a
/// noised `start` image. `observe` sees the conditional-pass attention
/// records of every step.
#[allow(clippy::too_many_arguments)]
pub fn sample_with(
    denoiser: &Denoiser,
    store: &autograd::ParamStore,
    cfg: &SamplerConfig,
    cond: &CondValues,
    uncond: &CondValues,
    sched: &NoiseSchedule,
    start: Option<Start<'_>>,
    mut observe: impl FnMut(usize, &[AttentionRecord]),
) -> Result<Tensor> {
    cfg.validate(sched)?;
    let shape = [denoiser.grid * denoiser.grid, denoiser.channels];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = gaussian(&shape, &mut rng);
    let mut times = sched.sampling_times(cfg.steps)?;
    let mut x = match start {
        None => noise,
        Some(s) => {
            times.retain(|&t| t <= s.t_start);
            if times.first() != Some(&s.t_start) {
                times.insert(0, s.t_start);
            }
            add_noise(s.image, &noise, s.t_start, sched)?
        }
    };
    for (i, &t) in times.iter().enumerate() {
        let (eps, records) = cfg_predict_recorded(denoiser, store, &x, t, cond, uncond, cfg.guidance_scale, cfg.blend)?;
        observe(i, &records);
        x = ddim_step(&x, &eps, t, times.get(i + 1).copied(), sched);
    }
    Ok(x)
}

/// Guided DDIM (η = 0) sampling from seeded noise; returns `[grid² × ch]`
/// in `[-1, 1]`.
pub fn sample(
    denoiser: &Denoiser,
    store: &autograd::ParamStore,
    cfg: &SamplerConfig,
    cond: &CondValues,
    uncond: &CondValues,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sample_with(denoiser, store, cfg, cond, uncond, sched, None, |_, _| {})
}
