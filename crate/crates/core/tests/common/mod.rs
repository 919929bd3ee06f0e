#![allow(dead_code)]

use autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use mmdiff::conditioning::{CondFlags, Reference};
use mmdiff::constraints::{constraint_terms, total_loss, ConstraintWeights, CONSTRAINED_LAYERS};
use mmdiff::data::{generate_sample, scene_to_grid, vocab, TrainingSample};
use mmdiff::diffusion::{gaussian, sd_loss, NoiseSchedule};
use mmdiff::model::{MmDiff, ModelConfig};
use mmdiff::nn::Fwd;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest configuration that still exercises every component.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid: 8,
        width: 8,
        heads: 2,
        lora_rank: 2,
        subject_tokens: 2,
        vision_width: 8,
        vision_layers: 1,
        vision_heads: 2,
        patch_grid: 4,
        text_layers: 1,
        refiner_layers: 1,
        ..ModelConfig::default()
    }
}

/// Tiny model with every parameter perturbed so no path starts inert.
pub fn perturbed_model(seed: u64) -> (MmDiff, ParamStore) {
    let mut store = ParamStore::new();
    let model = MmDiff::new(&tiny_config(), vocab().len(), &mut store, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for (_, p) in store.iter_mut() {
        let noise = gaussian(p.value.shape(), &mut rng);
        p.value = Tensor::from_fn(p.value.shape(), |i| p.value.data()[i] + 0.2 * noise.data()[i]);
    }
    (model, store)
}

/// Everything one training example needs besides the weights.
pub struct Example {
    pub sample: TrainingSample,
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub sched: NoiseSchedule,
}

pub fn example(seed: u64, grid: usize) -> Example {
    let sample = generate_sample(seed, 2).unwrap();
    let z0 = scene_to_grid(&sample.scene, grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian(&[grid * grid, 3], &mut rng);
    Example {
        sample,
        z0,
        eps,
        t: rng.random_range(0..100),
        sched: NoiseSchedule::default(),
    }
}

/// Weighted objective (noise prediction plus both constraints) on one
/// example, built on `tape`.
pub fn objective<'t>(model: &MmDiff, tape: &'t Tape, store: &'t ParamStore, ex: &Example, w: ConstraintWeights) -> Var<'t> {
    let f = Fwd::new(tape, store);
    let refs: Vec<Option<Reference>> = ex
        .sample
        .entities
        .iter()
        .map(|e| {
            Some(Reference {
                image: &e.reference,
                mask: &e.reference_mask,
                noise_seed: 5,
            })
        })
        .collect();
    let mut cond = model.conditioner.bundle(f, &ex.sample.caption, &refs, CondFlags::default()).unwrap();
    cond.masks = ex.sample.entities.iter().map(|e| e.mask.clone()).collect();
    let mut caps = Vec::new();
    let sd = sd_loss(&model.denoiser, f, &ex.z0, &cond, ex.t, &ex.eps, &ex.sched, 0.8, Some(&mut caps)).unwrap();
    let terms = constraint_terms(&caps, &cond, &CONSTRAINED_LAYERS).unwrap();
    total_loss(sd, terms.tcac, terms.icac, w).unwrap()
}

/// Two random coordinates from every parameter whose name starts with one
/// of `prefixes`.
pub fn probe_coords(store: &ParamStore, prefixes: &[&str], seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            for _ in 0..2 {
                out.push((id, rng.random_range(0..p.value.numel())));
            }
        }
    }
    out
}
