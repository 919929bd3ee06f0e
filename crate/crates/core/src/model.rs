//! Whole-model assembly and parameter-group bookkeeping.

use autograd::{ParamId, ParamStore};
use serde::{Deserialize, Serialize};

use crate::conditioning::{Conditioner, FusionMlp, SeRefiner, SubjectMlp, TextEncoder, VisionEncoder};
use crate::diffusion::Denoiser;
use crate::nn::Init;
use crate::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square diffusion grid.
    pub grid: usize,
    /// Denoiser and condition width.
    pub width: usize,
    pub heads: usize,
    pub lora_rank: usize,
    /// Subject tokens per reference.
    pub subject_tokens: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    /// Side of the reference crop.
    pub crop: usize,
    /// Side of the vision encoder's patch grid.
    pub patch_grid: usize,
    pub text_layers: usize,
    pub max_caption_len: usize,
    pub refiner_layers: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            width: 64,
            heads: 2,
            lora_rank: 4,
            subject_tokens: 8,
            vision_width: 64,
            vision_layers: 4,
            vision_heads: 2,
            crop: 32,
            patch_grid: 8,
            text_layers: 2,
            max_caption_len: 12,
            refiner_layers: 4,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ModelConfig {
    /// Reduced width and depth for quick CPU runs.
    pub fn small() -> Self {
        Self {
            width: 32,
            vision_width: 32,
            vision_layers: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || self.grid % 4 != 0 {
            return bad(format!("grid {} must be a positive multiple of 4", self.grid));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.vision_heads == 0 || self.vision_width % self.vision_heads != 0 {
            return bad(format!("vision width {} not divisible by {} heads", self.vision_width, self.vision_heads));
        }
        if self.patch_grid == 0 || self.crop % self.patch_grid != 0 {
            return bad(format!("crop {} not divisible into a {} patch grid", self.crop, self.patch_grid));
        }
        if self.lora_rank == 0 || self.subject_tokens == 0 || self.max_caption_len == 0 {
            return bad("rank, subject tokens and caption length must be positive".into());
        }
        if self.timesteps < 2 {
            return bad("need at least two timesteps".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<crate::diffusion::NoiseSchedule> {
        crate::diffusion::NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Which parameters an optimisation phase updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Text-to-image base model: denoiser and text encoder base weights.
    Base,
    /// Personalisation: LoRA factors, vision encoder, fusion, null CLS,
    /// subject MLP and refiner. Base weights stay frozen.
    Personalize,
}

/// Learning-rate group of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    DenoiserLora,
    Other,
}

pub fn is_lora(name: &str) -> bool {
    name.contains(".lora_a") || name.contains(".lora_b")
}

pub fn lr_group(name: &str) -> LrGroup {
    if name.starts_with("unet.") && is_lora(name) {
        LrGroup::DenoiserLora
    } else {
        LrGroup::Other
    }
}

/// Whether `name` is updated during `phase`.
pub fn trainable_in(phase: Phase, name: &str) -> bool {
    match phase {
        Phase::Base => (name.starts_with("unet.") || name.starts_with("text.")) && !is_lora(name) && !is_image_base(name),
        Phase::Personalize => {
            is_lora(name)
                || ["vision.", "fusion.", "subject_mlp.", "refiner."].iter().any(|p| name.starts_with(p))
                || name == "null_cls"
        }
    }
}

/// Frozen copies backing the subject key/value projections.
fn is_image_base(name: &str) -> bool {
    name.ends_with(".ki.w0") || name.ends_with(".vi.w0")
}

/// Conditioner plus denoiser over one parameter registry.
#[derive(Clone, Debug)]
pub struct MmDiff {
    pub config: ModelConfig,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
}

impl MmDiff {
    /// Builds every parameter into `store`, initialised from `seed`, with
    /// trainability set for [`Phase::Personalize`].
    pub fn new(config: &ModelConfig, vocab_size: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut init = Init::new(store, seed);
        let vision = VisionEncoder::new(&mut init, "vision", c.crop, c.patch_grid, c.vision_width, c.vision_layers, c.vision_heads);
        let text = TextEncoder::new(&mut init, "text", vocab_size, c.max_caption_len, c.width, c.text_layers, c.heads, c.lora_rank);
        let fusion = FusionMlp::new(&mut init, "fusion", c.width, c.vision_width);
        let null_cls = init.normal("null_cls", &[1, c.vision_width], 0.02, false);
        let subject_mlp = SubjectMlp::new(&mut init, "subject_mlp", c.vision_width, c.subject_tokens, c.width);
        let refiner = SeRefiner::new(&mut init, "refiner", c.vision_width, c.width, c.refiner_layers, c.heads);
        let denoiser = Denoiser::new(&mut init, "unet", c.grid, 3, c.width, c.width, c.heads, c.lora_rank);
        let model = Self {
            config: config.clone(),
            conditioner: Conditioner {
                vision,
                text,
                fusion,
                null_cls,
                subject_mlp,
                refiner,
            },
            denoiser,
        };
        model.set_phase(store, Phase::Personalize);
        Ok(model)
    }

    pub fn set_phase(&self, store: &mut ParamStore, phase: Phase) {
        for (_, p) in store.iter_mut() {
            p.trainable = trainable_in(phase, &p.name);
            p.grad_enabled = false;
        }
    }

    /// Re-copies text key/value bases into the subject branch of every
    /// cross-attention layer.
    pub fn sync_image_bases(&self, store: &mut ParamStore) {
        for b in self.denoiser.cross_attention_blocks() {
            b.attn.sync_image_bases(store);
        }
    }

    pub fn trainable_ids(store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_groups() {
        assert_eq!(lr_group("unet.xattn_a.attn.kt.lora_b"), LrGroup::DenoiserLora);
        assert_eq!(lr_group("unet.xattn_a.attn.kt.w0"), LrGroup::Other);
        assert_eq!(lr_group("text.layers.0.attn.q.lora_a"), LrGroup::Other);
        assert_eq!(lr_group("refiner.layers.0.mlp.fc1.weight"), LrGroup::Other);
    }

    #[test]
    fn personalize_phase_freezes_every_base_weight() {
        let mut store = ParamStore::new();
        MmDiff::new(&ModelConfig::small(), 10, &mut store, 0).unwrap();
        for (_, p) in store.iter() {
            let base = p.name.starts_with("unet.") || p.name.starts_with("text.");
            if base && !is_lora(&p.name) {
                assert!(!p.trainable, "{} should be frozen", p.name);
            }
            if is_lora(&p.name) || p.name.starts_with("refiner.") || p.name.starts_with("vision.") {
                assert!(p.trainable, "{} should train", p.name);
            }
        }
    }

    #[test]
    fn base_phase_leaves_adapters_alone() {
        let mut store = ParamStore::new();
        let m = MmDiff::new(&ModelConfig::small(), 10, &mut store, 0).unwrap();
        m.set_phase(&mut store, Phase::Base);
        for (_, p) in store.iter() {
            if is_lora(&p.name) || is_image_base(&p.name) || p.name.starts_with("vision.") {
                assert!(!p.trainable, "{}", p.name);
            }
        }
        assert!(store.get(store.id("unet.input.weight").unwrap()).trainable);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            width: 30,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
