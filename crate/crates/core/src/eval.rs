//! Held-out evaluation: attention localisation, cross-entity leakage,
//! subject fidelity and a template classifier for text agreement.

use std::collections::HashSet;

use autograd::{ParamStore, Tape, Tensor};

use crate::attention::AttentionRecord;
use crate::conditioning::{CondFlags, Reference};
use crate::config::EvalConfig;
use crate::constraints::{aggregate_entity_attention, aggregate_subject_attention, downsample_mask, CONSTRAINED_LAYERS};
use crate::data::{generate, sample_seed, scene_to_grid, SceneRequest, TrainingSample, TEMPLATES};
use crate::diffusion::{sample_with, CondValues, NoiseSchedule, SamplerConfig, Start};
use crate::model::MmDiff;
use crate::nn::Fwd;
use crate::{Error, Result};

/// Grid value painted over subject cells in the layout hint; the
/// background stays at 0.
pub const HINT_LEVEL: f64 = 0.5;

/// Held-out scenes drawn from `cfg`.
pub fn eval_samples(cfg: &EvalConfig) -> Result<Vec<TrainingSample>> {
    let req = SceneRequest {
        n_subjects: if cfg.two_subject { 2 } else { 1 },
        same_class: cfg.same_class,
    };
    (0..cfg.scenes as u64).map(|i| generate(sample_seed(cfg.seed, i), req)).collect()
}

/// Fails when any evaluation scene shares a seed with the training set.
pub fn ensure_disjoint(eval: &[TrainingSample], train: &[TrainingSample]) -> Result<()> {
    let seen: HashSet<u64> = train.iter().map(|s| s.seed).collect();
    match eval.iter().find(|s| seen.contains(&s.seed)) {
        Some(s) => Err(Error::invalid(format!("evaluation seed {} is also a training seed", s.seed))),
        None => Ok(()),
    }
}

/// Subject silhouettes on a flat background, `[grid² × 3]`.
pub fn layout_hint(sample: &TrainingSample, grid: usize) -> Result<Tensor> {
    let masks = sample
        .entities
        .iter()
        .map(|e| downsample_mask(&e.mask, (grid, grid)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_fn(&[grid * grid, 3], |i| {
        let cell = i / 3;
        if masks.iter().any(|m| m.data()[cell] != 0.0) {
            HINT_LEVEL
        } else {
            0.0
        }
    }))
}

/// Appearance descriptor of the masked subject in `image` (`[H × W × 3]` in
/// `[0, 1]`): mean colour of each bounding-box quadrant and of the whole
/// subject, centred on mid-grey.
pub fn subject_descriptor(image: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || mask.shape() != &s[..2] {
        return Err(Error::invalid(format!("image {:?} and mask {:?} disagree", s, mask.shape())));
    }
    let w = s[1];
    let cells: Vec<(usize, usize)> = (0..s[0] * w).filter(|&i| mask.data()[i] != 0.0).map(|i| (i / w, i % w)).collect();
    if cells.is_empty() {
        return Err(Error::invalid("empty subject mask"));
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for &(y, x) in &cells {
        (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
    }
    let (cy, cx) = ((y0 + y1 + 1) as f64 / 2.0, (x0 + x1 + 1) as f64 / 2.0);
    let mut sums = [[0.0; 4]; 5];
    for &(y, x) in &cells {
        let q = 2 * usize::from(y as f64 + 0.5 >= cy) + usize::from(x as f64 + 0.5 >= cx);
        for slot in [q, 4] {
            for ch in 0..3 {
                sums[slot][ch] += image.data()[(y * w + x) * 3 + ch];
            }
            sums[slot][3] += 1.0;
        }
    }
    let mut out = Vec::with_capacity(15);
    for slot in 0..5 {
        let src = if sums[slot][3] > 0.0 { sums[slot] } else { sums[4] };
        out.extend((0..3).map(|ch| src[ch] / src[3] - 0.5));
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `[grid² × 3]` in `[-1, 1]` → `[grid × grid × 3]` in `[0, 1]`.
pub fn grid_image(x: &Tensor, grid: usize) -> Result<Tensor> {
    if x.shape() != [grid * grid, 3] {
        return Err(Error::invalid(format!("grid image {:?}, expected [{}, 3]", x.shape(), grid * grid)));
    }
    Ok(Tensor::from_fn(&[grid, grid, 3], |i| ((x.data()[i] + 1.0) / 2.0).clamp(0.0, 1.0)))
}

/// Index of the template whose background colour is nearest to the mean of
/// cells outside every mask.
pub fn classify_template(image: &Tensor, masks: &[Tensor]) -> Result<usize> {
    let s = image.shape();
    let n = s[0] * s[1];
    let mut mean = [0.0; 3];
    let mut count = 0.0;
    for i in (0..n).filter(|&i| masks.iter().all(|m| m.data()[i] == 0.0)) {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += image.data()[i * 3 + ch];
        }
        count += 1.0;
    }
    if count == 0.0 {
        return Err(Error::invalid("no background cells"));
    }
    let dist = |c: &[f64; 3]| (0..3).map(|ch| (mean[ch] / count - c[ch]).powi(2)).sum::<f64>();
    Ok((0..TEMPLATES.len())
        .min_by(|&a, &b| dist(&TEMPLATES[a].1).total_cmp(&dist(&TEMPLATES[b].1)))
        .unwrap())
}

/// IoU between `map` thresholded at its mean and a binary mask.
pub fn thresholded_iou(map: &Tensor, mask: &Tensor) -> f64 {
    let mean = map.data().iter().sum::<f64>() / map.numel() as f64;
    let (mut inter, mut union) = (0.0, 0.0);
    for (&a, &m) in map.data().iter().zip(mask.data()) {
        let (a, m) = (a > mean, m != 0.0);
        inter += (a && m) as u8 as f64;
        union += (a || m) as u8 as f64;
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Share of `map`'s mass inside `mask`.
pub fn mass_inside(map: &Tensor, mask: &Tensor) -> f64 {
    let total: f64 = map.data().iter().sum();
    let inside: f64 = map.data().iter().zip(mask.data()).map(|(a, m)| a * m).sum();
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

/// Expected IoU between a mask covering fraction `a` of the cells and an
/// independent random selection covering fraction `s`.
pub fn iou_prior(a: f64, s: f64) -> f64 {
    let inter = a * s;
    let union = a + s - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-scene measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneReport {
    pub seed: u64,
    /// One IoU per (step, constrained layer, entity).
    pub iou: Vec<f64>,
    /// Mask-area prior matching each entry of `iou`.
    pub iou_prior: Vec<f64>,
    /// Text-branch leakage per (step, layer, ordered entity pair).
    pub leak_text: Vec<f64>,
    /// Subject-branch leakage per (step, layer, ordered entity pair).
    pub leak_image: Vec<f64>,
    /// Fidelity per entity.
    pub fidelity: Vec<f64>,
    pub template_correct: bool,
    /// Image generated from the layout hint, `[grid² × 3]` in `[-1, 1]`.
    pub generated: Tensor,
    /// Conditional-pass attention of every step of the attention pass.
    pub attention: Vec<Vec<AttentionRecord>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub loc_iou: f64,
    /// Mean mask-area prior of the IoU entries.
    pub loc_iou_prior: f64,
    pub subj_fidelity: f64,
    pub text_fidelity_proxy: f64,
    pub leakage_text: f64,
    pub leakage_image: f64,
    pub scenes: usize,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl Metrics {
    pub fn of(reports: &[SceneReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let flat = |f: fn(&SceneReport) -> &Vec<f64>| mean(reports.iter().flat_map(|r| f(r).iter().copied()));
        Ok(Self {
            loc_iou: flat(|r| &r.iou),
            loc_iou_prior: flat(|r| &r.iou_prior),
            subj_fidelity: flat(|r| &r.fidelity),
            text_fidelity_proxy: mean(reports.iter().map(|r| r.template_correct as u8 as f64)),
            leakage_text: flat(|r| &r.leak_text),
            leakage_image: flat(|r| &r.leak_image),
            scenes: reports.len(),
        })
    }
}

/// Read-only evaluation of one trained model.
pub struct Evaluator<'m> {
    pub model: &'m MmDiff,
    pub store: &'m ParamStore,
    pub sched: NoiseSchedule,
    pub sampler: SamplerConfig,
    /// Noise level both passes start from.
    pub t_start: usize,
    pub flags: CondFlags,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m MmDiff, store: &'m ParamStore, sampler: SamplerConfig, t_start: usize, flags: CondFlags) -> Result<Self> {
        let sched = model.config.schedule()?;
        sampler.validate(&sched)?;
        if t_start >= sched.t_max() {
            return Err(Error::invalid(format!("t_start {t_start} beyond the schedule")));
        }
        Ok(Self {
            model,
            store,
            sched,
            sampler,
            t_start,
            flags,
        })
    }

    /// Conditional and unconditional inputs for a scene, with its subjects
    /// depicted by the scene's own reference crops.
    pub fn condition(&self, s: &TrainingSample) -> Result<(CondValues, CondValues)> {
        let tape = Tape::new();
        let f = Fwd::new(&tape, self.store);
        let refs: Vec<Option<Reference>> = s
            .entities
            .iter()
            .enumerate()
            .map(|(k, e)| {
                Some(Reference {
                    image: &e.reference,
                    mask: &e.reference_mask,
                    noise_seed: s.seed.wrapping_add(k as u64),
                })
            })
            .collect();
        let mut b = self.model.conditioner.bundle(f, &s.caption, &refs, self.flags)?;
        b.masks = s.entities.iter().map(|e| e.mask.clone()).collect();
        let u = self.model.conditioner.unconditional(f)?;
        Ok((CondValues::of(&b), CondValues::of(&u)))
    }

    fn sampler_for(&self, s: &TrainingSample) -> SamplerConfig {
        SamplerConfig {
            seed: self.sampler.seed.wrapping_add(s.seed),
            ..self.sampler
        }
    }

    /// Guided trajectory from the noised scene itself, recording attention.
    pub fn attention_pass(&self, s: &TrainingSample, cond: &CondValues, uncond: &CondValues) -> Result<Vec<Vec<AttentionRecord>>> {
        let z0 = scene_to_grid(&s.scene, self.model.config.grid)?;
        let mut steps = Vec::new();
        let start = Start {
            image: &z0,
            t_start: self.t_start,
        };
        let cfg = self.sampler_for(s);
        sample_with(&self.model.denoiser, self.store, &cfg, cond, uncond, &self.sched, Some(start), |_, r| {
            steps.push(r.to_vec())
        })?;
        Ok(steps)
    }

    /// Guided generation from the layout hint.
    pub fn generate(&self, s: &TrainingSample, cond: &CondValues, uncond: &CondValues) -> Result<Tensor> {
        let hint = layout_hint(s, self.model.config.grid)?;
        let start = Start {
            image: &hint,
            t_start: self.t_start,
        };
        let cfg = self.sampler_for(s);
        sample_with(&self.model.denoiser, self.store, &cfg, cond, uncond, &self.sched, Some(start), |_, _| {})
    }

    pub fn scene(&self, s: &TrainingSample) -> Result<SceneReport> {
        let (cond, uncond) = self.condition(s)?;
        let attention = self.attention_pass(s, &cond, &uncond)?;
        let n = s.entities.len();
        let (mut iou, mut prior, mut leak_text, mut leak_image) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for records in &attention {
            for r in records.iter().filter(|r| CONSTRAINED_LAYERS.contains(&r.layer_id)) {
                let masks = s
                    .entities
                    .iter()
                    .map(|e| downsample_mask(&e.mask, r.grid))
                    .collect::<Result<Vec<_>>>()?;
                let one = std::slice::from_ref(r);
                let text: Vec<Tensor> = cond
                    .entities
                    .iter()
                    .map(|e| aggregate_entity_attention(one, e.token_pos))
                    .collect::<Result<_>>()?;
                let image: Vec<Option<Tensor>> = cond
                    .entities
                    .iter()
                    .map(|e| {
                        e.subject_rows
                            .clone()
                            .map(|rows| aggregate_subject_attention(one, &rows.collect::<Vec<_>>()))
                            .transpose()
                    })
                    .collect::<Result<_>>()?;
                for i in 0..n {
                    let area = mean(masks[i].data().iter().copied());
                    if area == 0.0 {
                        continue;
                    }
                    let m = &text[i];
                    let avg = mean(m.data().iter().copied());
                    let above = mean(m.data().iter().map(|&v| (v > avg) as u8 as f64));
                    iou.push(thresholded_iou(m, &masks[i]));
                    prior.push(iou_prior(area, above));
                    for j in (0..n).filter(|&j| j != i) {
                        leak_text.push(mass_inside(m, &masks[j]));
                        if let Some(im) = &image[i] {
                            leak_image.push(mass_inside(im, &masks[j]));
                        }
                    }
                }
            }
        }

        let g = self.model.config.grid;
        let generated = self.generate(s, &cond, &uncond)?;
        let img = grid_image(&generated, g)?;
        let masks_g = s
            .entities
            .iter()
            .map(|e| downsample_mask(&e.mask, (g, g)))
            .collect::<Result<Vec<_>>>()?;
        let mut fidelity = Vec::new();
        for (e, m) in s.entities.iter().zip(&masks_g) {
            if m.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let gen = subject_descriptor(&img, m)?;
            let reference = subject_descriptor(&e.reference, &e.reference_mask)?;
            fidelity.push(cosine(&gen, &reference));
        }
        let template_correct = classify_template(&img, &masks_g)? == s.template;
        Ok(SceneReport {
            seed: s.seed,
            iou,
            iou_prior: prior,
            leak_text,
            leak_image,
            fidelity,
            template_correct,
            generated,
            attention,
        })
    }

    pub fn evaluate(&self, scenes: &[TrainingSample]) -> Result<(Metrics, Vec<SceneReport>)> {
        if scenes.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let reports = scenes
            .iter()
            .map(|s| {
                let mut r = self.scene(s)?;
                r.attention.clear();
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Metrics::of(&reports)?, reports))
    }
}

/// Fidelity of a generated subject region against an arbitrary reference.
pub fn fidelity_against(generated: &Tensor, grid: usize, scene_mask: &Tensor, reference: &Tensor, reference_mask: &Tensor) -> Result<f64> {
    let img = grid_image(generated, grid)?;
    let m = downsample_mask(scene_mask, (grid, grid))?;
    Ok(cosine(&subject_descriptor(&img, &m)?, &subject_descriptor(reference, reference_mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;

    #[test]
    fn iou_and_mass_examples() {
        let mask = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let map = Tensor::new(&[2, 2], vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        // above-mean cells: 0 and 2
        assert!((thresholded_iou(&map, &mask) - 1.0 / 3.0).abs() < 1e-15);
        assert!((mass_inside(&map, &mask) - 0.5).abs() < 1e-15);
        assert_eq!(thresholded_iou(&Tensor::from_fn(&[2, 2], |_| 0.25), &mask), 0.0);
    }

    #[test]
    fn iou_prior_matches_monte_carlo() {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n = 256;
        let mask = Tensor::from_fn(&[16, 16], |i| (i < 40) as u8 as f64);
        let mut cells: Vec<usize> = (0..n).collect();
        let trials = 4000;
        let mut acc = 0.0;
        for _ in 0..trials {
            cells.shuffle(&mut rng);
            let map = Tensor::from_fn(&[16, 16], |i| (cells[i] < 128) as u8 as f64);
            acc += thresholded_iou(&map, &mask);
        }
        assert!((acc / trials as f64 - iou_prior(40.0 / 256.0, 0.5)).abs() < 0.01);
    }

    #[test]
    fn descriptor_identifies_the_same_identity() {
        let a = generate_sample(5, 1).unwrap();
        let e = &a.entities[0];
        let scene_desc = subject_descriptor(&a.scene, &e.mask).unwrap();
        let ref_desc = subject_descriptor(&e.reference, &e.reference_mask).unwrap();
        let same = cosine(&scene_desc, &ref_desc);
        let mut other = None;
        for seed in 6.. {
            let b = generate_sample(seed, 1).unwrap();
            if b.entities[0].spec.params.color_a != e.spec.params.color_a {
                other = Some(b);
                break;
            }
        }
        let b = other.unwrap();
        let diff = cosine(&scene_desc, &subject_descriptor(&b.entities[0].reference, &b.entities[0].reference_mask).unwrap());
        assert!(same > 0.95, "{same}");
        assert!(same > diff, "{same} vs {diff}");
    }

    #[test]
    fn template_classifier_reads_true_scenes() {
        let mut hits = 0;
        for seed in 0..30 {
            let s = generate_sample(seed, 2).unwrap();
            let img = grid_image(&scene_to_grid(&s.scene, 16).unwrap(), 16).unwrap();
            let masks: Vec<Tensor> = s.entities.iter().map(|e| downsample_mask(&e.mask, (16, 16)).unwrap()).collect();
            hits += (classify_template(&img, &masks).unwrap() == s.template) as usize;
        }
        assert_eq!(hits, 30);
    }

    #[test]
    fn hint_marks_only_subject_cells() {
        let s = generate_sample(3, 2).unwrap();
        let h = layout_hint(&s, 16).unwrap();
        let union: f64 = s
            .entities
            .iter()
            .map(|e| downsample_mask(&e.mask, (16, 16)).unwrap().data().iter().sum::<f64>())
            .sum();
        assert_eq!(h.data().iter().filter(|&&v| v == HINT_LEVEL).count() as f64, 3.0 * union);
    }

    #[test]
    fn disjointness_is_checked() {
        let a = vec![generate_sample(1, 1).unwrap()];
        let b = vec![generate_sample(2, 1).unwrap()];
        assert!(ensure_disjoint(&a, &b).is_ok());
        assert!(ensure_disjoint(&a, &a).is_err());
    }
}
