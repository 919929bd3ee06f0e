//! Optimisation loops for base pretraining and personalisation.

use std::io::Write;
use std::path::Path;

use autograd::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind, RngState};
use crate::conditioning::{CaptionEncoding, CondFlags, Reference};
use crate::config::{BaseConfig, Optimizer, RunConfig, TrainConfig};
use crate::constraints::{constraint_terms, total_loss, ConstraintWeights, CONSTRAINED_LAYERS};
use crate::data::{scene_to_grid, EntitySample, TrainingSample};
use crate::diffusion::{gaussian, sd_loss, NoiseSchedule};
use crate::model::{lr_group, LrGroup, MmDiff, ModelConfig, Phase};
use crate::nn::Fwd;
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Conditioning dropout drawn for one training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropPlan {
    /// Train on the null condition.
    pub uncond: bool,
    /// Per-entity subject drop; ignored when `uncond` is set.
    pub dropped: Vec<bool>,
}

/// Draws the unconditional bit, then one drop bit per entity. Every bit is
/// always drawn so the stream position does not depend on outcomes.
pub fn plan_dropout(rng: &mut ChaCha8Rng, n_entities: usize, uncond_p: f64, subject_drop_p: f64) -> DropPlan {
    let uncond = rng.random::<f64>() < uncond_p;
    let dropped = (0..n_entities).map(|_| rng.random::<f64>() < subject_drop_p).collect();
    DropPlan { uncond, dropped }
}

/// Running dropout counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropStats {
    pub examples: u64,
    pub uncond: u64,
    pub entities: u64,
    pub dropped: u64,
}

impl DropStats {
    pub fn record(&mut self, plan: &DropPlan) {
        self.examples += 1;
        self.uncond += plan.uncond as u64;
        self.entities += plan.dropped.len() as u64;
        self.dropped += plan.dropped.iter().filter(|&&d| d).count() as u64;
    }

    pub fn uncond_rate(&self) -> f64 {
        self.uncond as f64 / self.examples.max(1) as f64
    }

    pub fn drop_rate(&self) -> f64 {
        self.dropped as f64 / self.entities.max(1) as f64
    }
}

/// Losses of one optimisation step, averaged over the batch. Constraint
/// terms are reported even when their weight is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_sd: f64,
    pub l_tcac: f64,
    pub l_icac: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_sd,l_tcac,l_icac,total";

pub fn write_loss_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&format!("{},{},{},{},{}\n", l.step, l.l_sd, l.l_tcac, l.l_icac, l.total));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-phase optimisation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSettings {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr_lora: f64,
    pub lr_other: f64,
    pub optimizer: Optimizer,
    pub uncond_p: f64,
    pub subject_drop_p: f64,
    pub weights: ConstraintWeights,
    pub blend: f64,
    pub flags: CondFlags,
}

impl PhaseSettings {
    pub fn base(c: &BaseConfig) -> Self {
        Self {
            phase: Phase::Base,
            batch_size: c.batch_size,
            lr_lora: c.lr,
            lr_other: c.lr,
            optimizer: Optimizer::Adam,
            uncond_p: c.uncond_p,
            subject_drop_p: 1.0,
            weights: ConstraintWeights::ZERO,
            blend: 0.0,
            flags: CondFlags {
                no_vision_augment: true,
                no_se_refiner: true,
            },
        }
    }

    pub fn personalize(c: &TrainConfig) -> Self {
        Self {
            phase: Phase::Personalize,
            batch_size: c.batch_size,
            lr_lora: c.lr_lora,
            lr_other: c.lr_other,
            optimizer: c.optimizer,
            uncond_p: c.uncond_p,
            subject_drop_p: c.subject_drop_p,
            weights: c.effective_weights(),
            blend: c.train_blend,
            flags: CondFlags {
                no_vision_augment: c.ablation.no_vision_augment,
                no_se_refiner: c.ablation.no_se_refiner,
            },
        }
    }
}

/// Training example with its target latent precomputed.
#[derive(Clone, Debug)]
struct Prepared {
    caption: CaptionEncoding,
    entities: Vec<EntitySample>,
    z0: Tensor,
}

/// Gradient-descent state over one model.
pub struct Trainer {
    pub model: MmDiff,
    pub store: ParamStore,
    pub settings: PhaseSettings,
    pub stats: DropStats,
    sched: NoiseSchedule,
    data: Vec<Prepared>,
    rng: ChaCha8Rng,
    step: usize,
    /// Adam moments indexed by parameter id.
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Trainer {
    /// `model` must already be built into `store`; trainability is reset for
    /// the settings' phase.
    pub fn new(
        model: MmDiff,
        mut store: ParamStore,
        settings: PhaseSettings,
        samples: &[TrainingSample],
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        model.set_phase(&mut store, settings.phase);
        let grid = model.config.grid;
        let data = samples
            .iter()
            .map(|s| {
                Ok(Prepared {
                    caption: s.caption.clone(),
                    entities: s.entities.clone(),
                    z0: scene_to_grid(&s.scene, grid)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match settings.phase {
            Phase::Base => 1,
            Phase::Personalize => 2,
        });
        let n = store.len();
        Ok(Self {
            sched: model.config.schedule()?,
            model,
            store,
            settings,
            stats: DropStats::default(),
            data,
            rng,
            step: 0,
            moments: vec![None; n],
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimisation step over a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let s = self.settings;
        let g = self.model.config.grid;
        let tape = Tape::new();
        let f = Fwd::new(&tape, &self.store);
        let (mut l_sd, mut l_tcac, mut l_icac) = (0.0, 0.0, 0.0);
        let mut batch_total = None;
        for _ in 0..s.batch_size {
            let ex = &self.data[self.rng.random_range(0..self.data.len())];
            let plan = plan_dropout(&mut self.rng, ex.entities.len(), s.uncond_p, s.subject_drop_p);
            self.stats.record(&plan);
            let t = self.rng.random_range(0..self.sched.t_max());
            let eps = gaussian(&[g * g, 3], &mut self.rng);
            let noise_seed: u64 = self.rng.random();

            let cond = if plan.uncond {
                self.model.conditioner.unconditional(f)?
            } else {
                let refs: Vec<Option<Reference>> = ex
                    .entities
                    .iter()
                    .zip(&plan.dropped)
                    .enumerate()
                    .map(|(k, (e, &drop))| {
                        (!drop && s.phase == Phase::Personalize).then_some(Reference {
                            image: &e.reference,
                            mask: &e.reference_mask,
                            noise_seed: noise_seed.wrapping_add(k as u64),
                        })
                    })
                    .collect();
                let mut b = self.model.conditioner.bundle(f, &ex.caption, &refs, s.flags)?;
                b.masks = ex.entities.iter().map(|e| e.mask.clone()).collect();
                b
            };
            let mut caps = Vec::new();
            let sd = sd_loss(&self.model.denoiser, f, &ex.z0, &cond, t, &eps, &self.sched, s.blend, Some(&mut caps))?;
            let terms = constraint_terms(&caps, &cond, &CONSTRAINED_LAYERS)?;
            l_sd += sd.item();
            l_tcac += terms.tcac.map_or(0.0, |v| v.item());
            l_icac += terms.icac.map_or(0.0, |v| v.item());
            let total = total_loss(sd, terms.tcac, terms.icac, s.weights)?;
            batch_total = Some(match batch_total {
                None => total,
                Some(acc) => total.add(acc)?,
            });
        }
        let inv = 1.0 / s.batch_size as f64;
        let total = batch_total.expect("batch_size > 0").scale(inv)?;
        let log = StepLog {
            step: self.step,
            l_sd: l_sd * inv,
            l_tcac: l_tcac * inv,
            l_icac: l_icac * inv,
            total: total.item(),
        };
        for (term, value) in [("l_sd", log.l_sd), ("l_tcac", log.l_tcac), ("l_icac", log.l_icac), ("total", log.total)] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    term,
                    value,
                });
            }
        }
        tape.backward(total)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&tape);
        drop(tape);
        self.update();
        self.step += 1;
        Ok(log)
    }

    fn update(&mut self) {
        let s = self.settings;
        let t = (self.step + 1) as i32;
        for (id, p) in self.store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let lr = match lr_group(&p.name) {
                LrGroup::DenoiserLora => s.lr_lora,
                LrGroup::Other => s.lr_other,
            };
            match s.optimizer {
                Optimizer::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam => {
                    let (m, v) = self.moments[id.index()]
                        .get_or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
                    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
                    let grads = p.grad.data();
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grads[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }

    /// Runs `steps` steps, handing each log to `observe`.
    pub fn run(&mut self, steps: usize, mut observe: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let log = self.step()?;
            observe(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Trainable weights, optimizer moments, step and RNG position.
    pub fn checkpoint(&self, config: &str) -> Checkpoint {
        let kind = match self.settings.phase {
            Phase::Base => CheckpointKind::Base,
            Phase::Personalize => CheckpointKind::Personalized,
        };
        let mut optimizer = Vec::new();
        for (id, p) in self.store.iter() {
            if let Some((m, v)) = &self.moments[id.index()] {
                optimizer.push((format!("adam.m.{}", p.name), m.clone()));
                optimizer.push((format!("adam.v.{}", p.name), v.clone()));
            }
        }
        Checkpoint {
            kind,
            config: config.to_string(),
            step: self.step as u64,
            rng: RngState::of(&self.rng),
            params: Checkpoint::collect(&self.store, |_, trainable| trainable),
            optimizer,
        }
    }

    /// Continues from `ckpt` as if training had never stopped.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.apply(&mut self.store)?;
        self.step = ckpt.step as usize;
        self.rng = ckpt.rng.restore();
        self.moments.iter_mut().for_each(|m| *m = None);
        for pair in ckpt.optimizer.chunks(2) {
            let [(mn, m), (_, v)] = pair else {
                return Err(Error::Format("odd number of optimizer arrays".into()));
            };
            let name = mn
                .strip_prefix("adam.m.")
                .ok_or_else(|| Error::Format(format!("unexpected optimizer array {mn}")))?;
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {name}")))?;
            self.moments[id.index()] = Some((m.clone(), v.clone()));
        }
        Ok(())
    }

    pub fn into_parts(self) -> (MmDiff, ParamStore) {
        (self.model, self.store)
    }
}

/// Builds a model initialised from `seed`, with base weights from `base`
/// when given.
pub fn build_model(
    config: &ModelConfig,
    vocab_size: usize,
    seed: u64,
    base: Option<&Checkpoint>,
) -> Result<(MmDiff, ParamStore)> {
    let mut store = ParamStore::new();
    let model = MmDiff::new(config, vocab_size, &mut store, seed)?;
    if let Some(b) = base {
        if b.kind != CheckpointKind::Base {
            return Err(Error::Format("expected a base checkpoint".into()));
        }
        b.apply(&mut store)?;
        model.sync_image_bases(&mut store);
    }
    Ok((model, store))
}

/// Pretrains the text-conditioned base and returns its checkpoint.
pub fn pretrain_base(
    cfg: &RunConfig,
    vocab_size: usize,
    samples: &[TrainingSample],
    observe: impl FnMut(&StepLog),
) -> Result<(Checkpoint, Vec<StepLog>)> {
    let (model, store) = build_model(&cfg.model, vocab_size, cfg.base.seed, None)?;
    let mut trainer = Trainer::new(model, store, PhaseSettings::base(&cfg.base), samples, cfg.base.seed)?;
    let logs = trainer.run(cfg.base.steps, observe)?;
    Ok((trainer.checkpoint(&cfg.to_toml()), logs))
}

/// Personalisation trainer on top of a pretrained base.
pub fn personalizer(cfg: &RunConfig, vocab_size: usize, base: &Checkpoint, samples: &[TrainingSample]) -> Result<Trainer> {
    let (model, store) = build_model(&cfg.model, vocab_size, cfg.train.seed, Some(base))?;
    Trainer::new(model, store, PhaseSettings::personalize(&cfg.train), samples, cfg.train.seed)
}

/// Rebuilds a personalised model from its base and run checkpoints.
pub fn load_trained(config: &ModelConfig, vocab_size: usize, base: &Checkpoint, run: &Checkpoint) -> Result<(MmDiff, ParamStore)> {
    let (model, mut store) = build_model(config, vocab_size, 0, Some(base))?;
    run.apply(&mut store)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, vocab};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig {
            grid: 8,
            width: 16,
            vision_width: 16,
            vision_layers: 1,
            refiner_layers: 1,
            text_layers: 1,
            subject_tokens: 2,
            ..ModelConfig::small()
        };
        c.base.steps = 2;
        c.train.steps = 3;
        c.train.optimizer = Optimizer::Adam;
        c
    }

    fn samples() -> Vec<TrainingSample> {
        (0..3).map(|i| generate_sample(40 + i, 1 + (i as usize % 2)).unwrap()).collect()
    }

    #[test]
    fn dropout_rates_match_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stats = DropStats::default();
        for _ in 0..20_000 {
            stats.record(&plan_dropout(&mut rng, 2, 0.1, 0.1));
        }
        let sigma = (0.1f64 * 0.9 / 20_000.0).sqrt();
        assert!((stats.uncond_rate() - 0.1).abs() < 4.0 * sigma);
        assert!((stats.drop_rate() - 0.1).abs() < 4.0 * sigma);
    }

    #[test]
    fn base_phase_only_moves_base_weights() {
        let cfg = tiny();
        let v = vocab().len();
        let data = samples();
        let (model, store) = build_model(&cfg.model, v, 0, None).unwrap();
        let before = store.clone();
        let mut tr = Trainer::new(model, store, PhaseSettings::base(&cfg.base), &data, 0).unwrap();
        tr.run(2, |_| {}).unwrap();
        for (id, p) in tr.store.iter() {
            let moved = p.value != before.get(id).value;
            let base = crate::model::trainable_in(Phase::Base, &p.name);
            assert!(!moved || base, "{} moved", p.name);
        }
        assert!(tr.store.iter().any(|(id, p)| p.value != before.get(id).value));
    }

    #[test]
    fn personalization_keeps_base_frozen() {
        let cfg = tiny();
        let v = vocab().len();
        let data = samples();
        let (base, _) = pretrain_base(&cfg, v, &data, |_| {}).unwrap();
        let mut tr = personalizer(&cfg, v, &base, &data).unwrap();
        let before = tr.store.clone();
        tr.run(3, |_| {}).unwrap();
        for (id, p) in tr.store.iter() {
            if !p.trainable {
                assert_eq!(p.value, before.get(id).value, "{}", p.name);
            }
        }
    }

    #[test]
    fn resume_continues_bit_identically() {
        let cfg = tiny();
        let v = vocab().len();
        let data = samples();
        let (base, _) = pretrain_base(&cfg, v, &data, |_| {}).unwrap();
        let mut straight = personalizer(&cfg, v, &base, &data).unwrap();
        let full = straight.run(3, |_| {}).unwrap();

        let mut first = personalizer(&cfg, v, &base, &data).unwrap();
        first.run(1, |_| {}).unwrap();
        let ckpt = Checkpoint::from_bytes(&first.checkpoint("").to_bytes()).unwrap();
        let mut second = personalizer(&cfg, v, &base, &data).unwrap();
        second.resume(&ckpt).unwrap();
        let rest = second.run(2, |_| {}).unwrap();
        assert_eq!(&full[1..], &rest[..]);
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let log = StepLog {
            step: 0,
            l_sd: 1.5,
            l_tcac: 0.25,
            l_icac: 0.125,
            total: 1.5,
        };
        write_loss_csv(&path, &[log]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,l_sd,l_tcac,l_icac,total\n0,1.5,0.25,0.125,1.5\n");
    }
}
