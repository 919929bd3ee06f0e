//! Condition streams for the denoiser: vision-augmented text embeddings
//! `c_t` and refined subject tokens `c_i`.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use autograd::{ParamId, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, LoraLinear};
use crate::nn::{Fwd, Init, LayerNorm, Linear, Mlp, Project};
use crate::{Error, Result};

/// Token every caption starts with; the unconditional caption is this token
/// alone.
pub const BOS: &str = "<s>";

/// Closed word list; line index in the vocabulary file is the token id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary with [`BOS`] at id 0 followed by `words` in first
    /// occurrence order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec![BOS.to_string()];
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("deduplicated")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!("bad vocabulary token {t:?} on line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if tokens.first().map(String::as_str) != Some(BOS) {
            return Err(Error::Format(format!("vocabulary must start with {BOS}")));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-split lookup; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::invalid(format!("word {w:?} not in vocabulary"))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Token ids of a caption plus the position of each entity's class word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionEncoding {
    pub token_ids: Vec<usize>,
    pub entity_positions: Vec<usize>,
}

impl CaptionEncoding {
    pub fn new(token_ids: Vec<usize>, entity_positions: Vec<usize>) -> Result<Self> {
        if let Some(&p) = entity_positions.iter().find(|&&p| p >= token_ids.len()) {
            return Err(Error::invalid(format!(
                "entity position {p} outside caption of {} tokens",
                token_ids.len()
            )));
        }
        Ok(Self {
            token_ids,
            entity_positions,
        })
    }

    /// The caption holding only [`BOS`].
    pub fn unconditional() -> Self {
        Self {
            token_ids: vec![0],
            entity_positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Pre-LN transformer layer: `x + attn(LN x)`, then `x + mlp(LN x)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer<P> {
    pub ln1: LayerNorm,
    pub attn: Attention<P>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl<P: Project> EncoderLayer<P> {
    pub fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.ln1.forward(f, x)?;
        let x = x.add(self.attn.forward(f, h, h)?)?;
        let h = self.ln2.forward(f, x)?;
        Ok(x.add(self.mlp.forward(f, h)?)?)
    }
}

fn mlp(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize, zero_out: bool) -> Mlp {
    let fc1 = Linear::new(init, &format!("{name}.fc1"), d_in, hidden, true, false);
    let fc2 = if zero_out {
        Linear::zero(init, &format!("{name}.fc2"), hidden, d_out, true, false)
    } else {
        Linear::new(init, &format!("{name}.fc2"), hidden, d_out, true, false)
    };
    Mlp { fc1, fc2 }
}

fn dense_attention(init: &mut Init, name: &str, d_model: usize, d_ctx: usize, heads: usize, zero_out: bool) -> Attention<Linear> {
    let lin = |init: &mut Init, n: &str, i, o| Linear::new(init, &format!("{name}.{n}"), i, o, false, false);
    Attention {
        q: lin(init, "q", d_model, d_model),
        k: lin(init, "k", d_ctx, d_model),
        v: lin(init, "v", d_ctx, d_model),
        o: if zero_out {
            Linear::zero(init, &format!("{name}.o"), d_model, d_model, true, false)
        } else {
            Linear::new(init, &format!("{name}.o"), d_model, d_model, true, false)
        },
        heads,
        head_dim: d_model / heads,
    }
}

/// Global and per-patch features of one reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    /// `[1 × d_v]`.
    pub cls: Tensor,
    /// `[P × d_v]`.
    pub patches: Tensor,
}

/// On-tape counterpart of [`VisualEmbedding`].
#[derive(Clone, Copy, Debug)]
pub struct VisualVars<'t> {
    pub cls: Var<'t>,
    pub patches: Var<'t>,
}

/// Reference crop with its subject mask.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    /// `[H × W × 3]` in `[0, 1]`.
    pub image: &'a Tensor,
    /// `[H × W]`, binary.
    pub mask: &'a Tensor,
    pub noise_seed: u64,
}

/// Replaces pixels where `mask == 0` by seeded uniform noise in `[0, 1)`.
/// Noise is drawn for every pixel in raster order so the value at a given
/// pixel depends only on the seed.
pub fn mask_background(image: &Tensor, mask: &Tensor, noise_seed: u64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || mask.shape() != &s[..2] {
        return Err(Error::invalid(format!(
            "reference image {:?} and mask {:?} disagree",
            s,
            mask.shape()
        )));
    }
    let ch = s[2];
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise: Vec<f64> = (0..image.numel()).map(|_| rng.random::<f64>()).collect();
    Ok(Tensor::from_fn(s, |i| {
        if mask.data()[i / ch] != 0.0 {
            image.data()[i]
        } else {
            noise[i]
        }
    }))
}

/// Splits `[H × W × ch]` into a `grid × grid` raster of flattened patches,
/// each ordered `(row, col, channel)`.
pub fn patchify(image: &Tensor, grid: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] % grid != 0 || s[1] % grid != 0 {
        return Err(Error::invalid(format!("cannot split {s:?} into a {grid}x{grid} patch grid")));
    }
    let (ph, pw, ch, w) = (s[0] / grid, s[1] / grid, s[2], s[1]);
    let dim = ph * pw * ch;
    Ok(Tensor::from_fn(&[grid * grid, dim], |i| {
        let (p, k) = (i / dim, i % dim);
        let (gy, gx) = (p / grid, p % grid);
        let (dy, rest) = (k / (pw * ch), k % (pw * ch));
        let (dx, c) = (rest / ch, rest % ch);
        image.data()[((gy * ph + dy) * w + gx * pw + dx) * ch + c]
    }))
}

/// Patch-grid self-attention encoder producing a CLS token and patch tokens.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_grid: usize,
    pub embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer<Linear>>,
    pub ln_out: LayerNorm,
}

impl VisionEncoder {
    pub fn new(init: &mut Init, name: &str, crop: usize, patch_grid: usize, width: usize, layers: usize, heads: usize) -> Self {
        let patch_dim = (crop / patch_grid).pow(2) * 3;
        let embed = Linear::new(init, &format!("{name}.embed"), patch_dim, width, true, false);
        let cls = init.normal(&format!("{name}.cls"), &[1, width], 0.02, false);
        let pos = init.normal(&format!("{name}.pos"), &[patch_grid * patch_grid, width], 0.02, false);
        let layers = (0..layers)
            .map(|l| {
                let n = format!("{name}.layers.{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(init, &format!("{n}.ln1"), width, false),
                    attn: dense_attention(init, &format!("{n}.attn"), width, width, heads, false),
                    ln2: LayerNorm::new(init, &format!("{n}.ln2"), width, false),
                    mlp: mlp(init, &format!("{n}.mlp"), width, 2 * width, width, false),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(init, &format!("{name}.ln_out"), width, false);
        Self {
            patch_grid,
            embed,
            cls,
            pos,
            layers,
            ln_out,
        }
    }

    /// Encodes an already-masked image with pixels in `[0, 1]`.
    pub fn forward<'t>(&self, f: Fwd<'t>, image: &Tensor) -> Result<VisualVars<'t>> {
        let patches = patchify(image, self.patch_grid)?.map(|v| 2.0 * v - 1.0);
        let tokens = self.embed.forward(f, f.constant(patches))?.add(f.p(self.pos))?;
        let mut x = f.tape.concat_rows(&[f.p(self.cls), tokens])?;
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        let x = self.ln_out.forward(f, x)?;
        let p = self.patch_grid * self.patch_grid;
        Ok(VisualVars {
            cls: x.rows_range(0, 1)?,
            patches: x.rows_range(1, p)?,
        })
    }

    pub fn encode<'t>(&self, f: Fwd<'t>, r: Reference<'_>) -> Result<VisualVars<'t>> {
        self.forward(f, &mask_background(r.image, r.mask, r.noise_seed)?)
    }
}

/// Word embeddings, learned positions and LoRA-adapted self-attention layers.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<EncoderLayer<LoraLinear>>,
    pub ln_out: LayerNorm,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(init: &mut Init, name: &str, vocab: usize, max_len: usize, width: usize, layers: usize, heads: usize, rank: usize) -> Self {
        let tok_emb = init.normal(&format!("{name}.tok_emb"), &[vocab, width], 1.0, false);
        let pos_emb = init.normal(&format!("{name}.pos_emb"), &[max_len, width], 0.1, false);
        let layers = (0..layers)
            .map(|l| {
                let n = format!("{name}.layers.{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(init, &format!("{n}.ln1"), width, false),
                    attn: Attention::lora(init, &format!("{n}.attn"), width, width, heads, rank),
                    ln2: LayerNorm::new(init, &format!("{n}.ln2"), width, false),
                    mlp: mlp(init, &format!("{n}.mlp"), width, 2 * width, width, false),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(init, &format!("{name}.ln_out"), width, false);
        Self {
            tok_emb,
            pos_emb,
            layers,
            ln_out,
        }
    }

    pub fn max_len(&self, f: Fwd<'_>) -> usize {
        f.store.value(self.pos_emb).rows()
    }

    pub fn embed<'t>(&self, f: Fwd<'t>, ids: &[usize]) -> Result<Var<'t>> {
        Ok(f.p(self.tok_emb).gather_rows(ids)?)
    }

    /// Adds positions to (possibly fused) word embeddings and encodes.
    pub fn encode_embedded<'t>(&self, f: Fwd<'t>, words: Var<'t>) -> Result<Var<'t>> {
        let n = words.rows();
        if n > self.max_len(f) {
            return Err(Error::invalid(format!("caption of {n} tokens exceeds {}", self.max_len(f))));
        }
        let mut x = words.add(f.p(self.pos_emb).rows_range(0, n)?)?;
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        self.ln_out.forward(f, x)
    }
}

/// `word + MLP([word, cls])`, with the last MLP layer zero-initialised so the
/// fused embedding starts equal to the word embedding.
#[derive(Clone, Debug)]
pub struct FusionMlp {
    pub mlp: Mlp,
}

impl FusionMlp {
    pub fn new(init: &mut Init, name: &str, width: usize, d_v: usize) -> Self {
        Self {
            mlp: mlp(init, name, width + d_v, width, width, true),
        }
    }

    pub fn forward<'t>(&self, f: Fwd<'t>, word: Var<'t>, cls: Var<'t>) -> Result<Var<'t>> {
        let h = f.tape.concat_cols(&[word, cls])?;
        Ok(word.add(self.mlp.forward(f, h)?)?)
    }
}

/// `d_v → M·d_c` projection reshaped to `M` subject tokens.
#[derive(Clone, Debug)]
pub struct SubjectMlp {
    pub mlp: Mlp,
    pub tokens: usize,
    pub width: usize,
}

impl SubjectMlp {
    pub fn new(init: &mut Init, name: &str, d_v: usize, tokens: usize, width: usize) -> Self {
        Self {
            mlp: mlp(init, name, d_v, 2 * d_v, tokens * width, false),
            tokens,
            width,
        }
    }

    pub fn forward<'t>(&self, f: Fwd<'t>, cls: Var<'t>) -> Result<Var<'t>> {
        Ok(self.mlp.forward(f, cls)?.reshape(&[self.tokens, self.width])?)
    }
}

/// One pre-LN decoder layer of the refiner; every sublayer output projection
/// starts at zero.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention<Linear>,
    pub ln2: LayerNorm,
    pub cross_attn: Attention<Linear>,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), width, false),
            self_attn: dense_attention(init, &format!("{name}.self_attn"), width, width, heads, true),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), width, false),
            cross_attn: dense_attention(init, &format!("{name}.cross_attn"), width, width, heads, true),
            ln3: LayerNorm::new(init, &format!("{name}.ln3"), width, false),
            mlp: mlp(init, &format!("{name}.mlp"), width, 2 * width, width, true),
        }
    }

    pub fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>, memory: Var<'t>) -> Result<Var<'t>> {
        let h = self.ln1.forward(f, x)?;
        let x = x.add(self.self_attn.forward(f, h, h)?)?;
        let h = self.ln2.forward(f, x)?;
        let x = x.add(self.cross_attn.forward(f, h, memory)?)?;
        let h = self.ln3.forward(f, x)?;
        Ok(x.add(self.mlp.forward(f, h)?)?)
    }
}

/// Decoder stack refining subject tokens against projected patch features.
#[derive(Clone, Debug)]
pub struct SeRefiner {
    pub patch_proj: Linear,
    pub layers: Vec<DecoderLayer>,
}

impl SeRefiner {
    pub fn new(init: &mut Init, name: &str, d_v: usize, width: usize, layers: usize, heads: usize) -> Self {
        Self {
            patch_proj: Linear::new(init, &format!("{name}.patch_proj"), d_v, width, true, false),
            layers: (0..layers)
                .map(|l| DecoderLayer::new(init, &format!("{name}.layers.{l}"), width, heads))
                .collect(),
        }
    }

    pub fn forward<'t>(&self, f: Fwd<'t>, tokens: Var<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        let memory = self.patch_proj.forward(f, patches)?;
        let mut x = tokens;
        for layer in &self.layers {
            x = layer.forward(f, x, memory)?;
        }
        Ok(x)
    }
}

/// Which conditioning components are bypassed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CondFlags {
    pub no_vision_augment: bool,
    pub no_se_refiner: bool,
}

/// Per-entity bookkeeping inside a [`ConditioningBundle`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntitySlot {
    /// Class-word position in the caption.
    pub token_pos: usize,
    /// Rows of `c_i` holding this entity's subject tokens; `None` when the
    /// subject was dropped.
    pub subject_rows: Option<Range<usize>>,
}

/// Everything the denoiser is conditioned on for one sample.
#[derive(Clone, Debug)]
pub struct ConditioningBundle<'t> {
    /// `[T × d_c]`.
    pub c_t: Var<'t>,
    /// `[M·active × d_c]`, absent when no subject is active.
    pub c_i: Option<Var<'t>>,
    pub entities: Vec<EntitySlot>,
    /// Entity masks on the diffusion grid, aligned with `entities`; may be
    /// empty when no constraint is computed.
    pub masks: Vec<Tensor>,
}

/// All conditioning sub-models.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fusion: FusionMlp,
    pub null_cls: ParamId,
    pub subject_mlp: SubjectMlp,
    pub refiner: SeRefiner,
}

impl Conditioner {
    /// Fused word embeddings followed by the text encoder. `cls_per_entity`
    /// holds one `[1 × d_v]` vector per entity position.
    pub fn augment_text_embeddings<'t>(
        &self,
        f: Fwd<'t>,
        caption: &CaptionEncoding,
        cls_per_entity: &[Var<'t>],
        flags: CondFlags,
    ) -> Result<Var<'t>> {
        if cls_per_entity.len() != caption.entity_positions.len() {
            return Err(Error::invalid(format!(
                "{} CLS vectors for {} entities",
                cls_per_entity.len(),
                caption.entity_positions.len()
            )));
        }
        let mut words = self.text.embed(f, &caption.token_ids)?;
        if !flags.no_vision_augment && !cls_per_entity.is_empty() {
            let mut rows: Vec<Var<'t>> = (0..caption.len()).map(|i| words.rows_range(i, 1)).collect::<Result<_, _>>()?;
            for (&pos, &cls) in caption.entity_positions.iter().zip(cls_per_entity) {
                rows[pos] = self.fusion.forward(f, rows[pos], cls)?;
            }
            words = f.tape.concat_rows(&rows)?;
        }
        self.text.encode_embedded(f, words)
    }

    pub fn cls_to_subject_tokens<'t>(&self, f: Fwd<'t>, cls: Var<'t>) -> Result<Var<'t>> {
        self.subject_mlp.forward(f, cls)
    }

    pub fn se_refine<'t>(&self, f: Fwd<'t>, tokens: Var<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        self.refiner.forward(f, tokens, patches)
    }

    /// Builds the conditioning for a caption whose entity `k` is depicted by
    /// `refs[k]`; `None` marks a dropped subject (null CLS in the text stream,
    /// no subject tokens).
    pub fn bundle<'t>(
        &self,
        f: Fwd<'t>,
        caption: &CaptionEncoding,
        refs: &[Option<Reference<'_>>],
        flags: CondFlags,
    ) -> Result<ConditioningBundle<'t>> {
        if refs.len() != caption.entity_positions.len() {
            return Err(Error::invalid(format!(
                "{} references for {} entities",
                refs.len(),
                caption.entity_positions.len()
            )));
        }
        let mut cls_list = Vec::with_capacity(refs.len());
        let mut subject = Vec::new();
        let mut entities = Vec::with_capacity(refs.len());
        let mut next = 0;
        for (r, &pos) in refs.iter().zip(&caption.entity_positions) {
            match r {
                Some(r) => {
                    let vis = self.vision.encode(f, *r)?;
                    cls_list.push(vis.cls);
                    let mut tokens = self.cls_to_subject_tokens(f, vis.cls)?;
                    if !flags.no_se_refiner {
                        tokens = self.se_refine(f, tokens, vis.patches)?;
                    }
                    let m = tokens.rows();
                    subject.push(tokens);
                    entities.push(EntitySlot {
                        token_pos: pos,
                        subject_rows: Some(next..next + m),
                    });
                    next += m;
                }
                None => {
                    cls_list.push(f.p(self.null_cls));
                    entities.push(EntitySlot {
                        token_pos: pos,
                        subject_rows: None,
                    });
                }
            }
        }
        let c_t = self.augment_text_embeddings(f, caption, &cls_list, flags)?;
        let c_i = match subject.len() {
            0 => None,
            1 => Some(subject[0]),
            _ => Some(f.tape.concat_rows(&subject)?),
        };
        Ok(ConditioningBundle {
            c_t,
            c_i,
            entities,
            masks: Vec::new(),
        })
    }

    /// Null text and no subject tokens.
    pub fn unconditional<'t>(&self, f: Fwd<'t>) -> Result<ConditioningBundle<'t>> {
        let c_t = self.augment_text_embeddings(f, &CaptionEncoding::unconditional(), &[], CondFlags::default())?;
        Ok(ConditioningBundle {
            c_t,
            c_i: None,
            entities: Vec::new(),
            masks: Vec::new(),
        })
    }
}

/// Detached encoding of one reference image.
pub fn encode_reference(enc: &VisionEncoder, f: Fwd<'_>, r: Reference<'_>) -> Result<VisualEmbedding> {
    let v = enc.encode(f, r)?;
    Ok(VisualEmbedding {
        cls: v.cls.value(),
        patches: v.patches.value(),
    })
}

#[cfg(test)]
mod tests {
    use autograd::{ParamStore, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let d = rand_distr::StandardNormal;
        Tensor::from_fn(shape, |_| rng.sample::<f64, _>(d))
    }

    /// Overwrites every parameter with Gaussian noise.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            p.value = randn(&mut rng, p.value.shape()).map(|v| 0.3 * v);
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[16, 16, 3], |_| rng.random::<f64>())
    }

    fn square_mask() -> Tensor {
        Tensor::from_fn(&[16, 16], |i| ((4..12).contains(&(i / 16)) && (4..12).contains(&(i % 16))) as u8 as f64)
    }

    fn vision(store: &mut ParamStore) -> VisionEncoder {
        VisionEncoder::new(&mut Init::new(store, 1), "vision", 16, 4, 8, 2, 2)
    }

    fn embed(enc: &VisionEncoder, store: &ParamStore, r: Reference) -> VisualEmbedding {
        let tape = Tape::new();
        encode_reference(enc, Fwd::new(&tape, store), r).unwrap()
    }

    #[test]
    fn all_ones_mask_is_the_unmasked_encoding() {
        let mut store = ParamStore::new();
        let enc = vision(&mut store);
        let img = image(0);
        let ones = Tensor::ones(&[16, 16]);
        let masked = embed(&enc, &store, Reference { image: &img, mask: &ones, noise_seed: 3 });
        let tape = Tape::new();
        let plain = enc.forward(Fwd::new(&tape, &store), &img).unwrap();
        assert_eq!(masked.cls, plain.cls.value());
        assert_eq!(masked.patches, plain.patches.value());
    }

    #[test]
    fn reference_encoding_is_deterministic_and_background_invariant() {
        let mut store = ParamStore::new();
        let enc = vision(&mut store);
        let mask = square_mask();
        let a = image(1);
        let mut b = image(2);
        for i in 0..256 {
            if mask.data()[i] != 0.0 {
                for c in 0..3 {
                    b.data_mut()[i * 3 + c] = a.data()[i * 3 + c];
                }
            }
        }
        let r = |img| Reference { image: img, mask: &mask, noise_seed: 9 };
        let ea = embed(&enc, &store, r(&a));
        assert_eq!(ea, embed(&enc, &store, r(&a)));
        assert_eq!(ea, embed(&enc, &store, r(&b)));
        let other_seed = embed(&enc, &store, Reference { noise_seed: 10, ..r(&a) });
        assert_ne!(ea, other_seed);
    }

    struct Rig {
        store: ParamStore,
        cond: Conditioner,
    }

    fn rig(seed: u64) -> Rig {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let (w, dv) = (8, 8);
        let cond = Conditioner {
            vision: VisionEncoder::new(&mut init, "vision", 16, 4, dv, 1, 2),
            text: TextEncoder::new(&mut init, "text", 10, 8, w, 2, 2, 2),
            fusion: FusionMlp::new(&mut init, "fusion", w, dv),
            null_cls: init.normal("null_cls", &[1, dv], 0.02, false),
            subject_mlp: SubjectMlp::new(&mut init, "subject_mlp", dv, 8, w),
            refiner: SeRefiner::new(&mut init, "refiner", dv, w, 2, 2),
        };
        Rig { store, cond }
    }

    fn caption(entities: Vec<usize>) -> CaptionEncoding {
        CaptionEncoding::new(vec![0, 3, 4, 5, 6, 7], entities).unwrap()
    }

    #[test]
    fn no_entities_gives_the_plain_text_encoding() {
        let mut r = rig(0);
        randomize(&mut r.store, 1);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &r.store);
        let c = caption(vec![]);
        let aug = r.cond.augment_text_embeddings(f, &c, &[], CondFlags::default()).unwrap();
        let plain = r.cond.text.encode_embedded(f, r.cond.text.embed(f, &c.token_ids).unwrap()).unwrap();
        assert_eq!(aug.value(), plain.value());
    }

    #[test]
    fn dropped_subjects_equal_explicit_null_cls() {
        let mut r = rig(0);
        randomize(&mut r.store, 2);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &r.store);
        let c = caption(vec![1, 3]);
        let b = r.cond.bundle(f, &c, &[None, None], CondFlags::default()).unwrap();
        let null = f.p(r.cond.null_cls);
        let explicit = r.cond.augment_text_embeddings(f, &c, &[null, null], CondFlags::default()).unwrap();
        assert_eq!(b.c_t.value(), explicit.value());
        assert!(b.c_i.is_none());
        assert!(b.entities.iter().all(|e| e.subject_rows.is_none()));
    }

    #[test]
    fn identity_start_fusion_leaves_text_unchanged() {
        let r = rig(3);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &r.store);
        let c = caption(vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cls = f.constant(randn(&mut rng, &[1, 8]));
        let aug = r.cond.augment_text_embeddings(f, &c, &[cls], CondFlags::default()).unwrap();
        let plain = r.cond.text.encode_embedded(f, r.cond.text.embed(f, &c.token_ids).unwrap()).unwrap();
        assert!(aug.value().max_abs_diff(&plain.value()) <= 1e-12);
    }

    #[test]
    fn subject_mlp_zero_input_shape_and_dense_oracle() {
        let mut r = rig(5);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &r.store);
        let zero = r.cond.cls_to_subject_tokens(f, f.constant(Tensor::zeros(&[1, 8]))).unwrap();
        assert_eq!(zero.shape(), vec![8, 8]);
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
        drop(tape);

        randomize(&mut r.store, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cls = randn(&mut rng, &[1, 8]);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &r.store);
        let got = r.cond.cls_to_subject_tokens(f, f.constant(cls.clone())).unwrap().value();
        let m = &r.cond.subject_mlp.mlp;
        let h = oracle::linear(&r.store, m.fc1.weight, m.fc1.bias, &cls).map(oracle::gelu);
        let want = oracle::linear(&r.store, m.fc2.weight, m.fc2.bias, &h);
        assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn refiner_is_identity_at_init_and_keeps_token_count() {
        let r = rig(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens = randn(&mut rng, &[8, 8]);
        for p in [1, 5, 16] {
            let tape = Tape::new();
            let f = Fwd::new(&tape, &r.store);
            let out = r
                .cond
                .se_refine(f, f.constant(tokens.clone()), f.constant(randn(&mut rng, &[p, 8])))
                .unwrap();
            assert_eq!(out.value(), tokens);
        }
    }

    #[test]
    fn refiner_ignores_patch_order() {
        let mut r = rig(10);
        randomize(&mut r.store, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tokens = randn(&mut rng, &[8, 8]);
        let patches = randn(&mut rng, &[6, 8]);
        let order = [3, 0, 5, 1, 4, 2];
        let shuffled = Tensor::from_fn(&[6, 8], |i| patches.get2(order[i / 8], i % 8));
        let run = |p: &Tensor| {
            let tape = Tape::new();
            let f = Fwd::new(&tape, &r.store);
            let out = r.cond.se_refine(f, f.constant(tokens.clone()), f.constant(p.clone())).unwrap();
            assert_eq!(out.shape(), vec![8, 8]);
            out.value()
        };
        assert!(run(&patches).max_abs_diff(&run(&shuffled)) < 1e-12);
    }

    #[test]
    fn decoder_layer_matches_sublayer_oracle() {
        let mut r = rig(13);
        randomize(&mut r.store, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, &[8, 8]);
        let mem = randn(&mut rng, &[5, 8]);
        let layer = &r.cond.refiner.layers[0];
        let tape = Tape::new();
        let f = Fwd::new(&tape, &r.store);
        let got = layer.forward(f, f.constant(x.clone()), f.constant(mem.clone())).unwrap().value();

        let s = &r.store;
        let h = oracle::layer_norm(s, &layer.ln1, &x);
        let x1 = oracle::add(&x, &oracle::attention(s, &layer.self_attn, &h, &h));
        let h = oracle::layer_norm(s, &layer.ln2, &x1);
        let x2 = oracle::add(&x1, &oracle::attention(s, &layer.cross_attn, &h, &mem));
        let h = oracle::layer_norm(s, &layer.ln3, &x2);
        let m = &layer.mlp;
        let hidden = oracle::linear(s, m.fc1.weight, m.fc1.bias, &h).map(oracle::gelu);
        let want = oracle::add(&x2, &oracle::linear(s, m.fc2.weight, m.fc2.bias, &hidden));
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    /// Loop-based reference implementations over plain tensors.
    mod oracle {
        use super::*;

        pub fn linear(s: &ParamStore, w: ParamId, b: Option<ParamId>, x: &Tensor) -> Tensor {
            let w = s.value(w);
            let (n, d_out, d_in) = (x.rows(), w.rows(), w.cols());
            Tensor::from_fn(&[n, d_out], |i| {
                let (r, o) = (i / d_out, i % d_out);
                let bias = b.map_or(0.0, |b| s.value(b).data()[o]);
                bias + (0..d_in).map(|k| x.get2(r, k) * w.get2(o, k)).sum::<f64>()
            })
        }

        pub fn gelu(x: f64) -> f64 {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        }

        pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
            Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
        }

        pub fn layer_norm(s: &ParamStore, ln: &LayerNorm, x: &Tensor) -> Tensor {
            let (g, b) = (s.value(ln.gain), s.value(ln.bias));
            let d = x.cols();
            Tensor::from_fn(x.shape(), |i| {
                let row = x.row(i / d);
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                (x.data()[i] - mu) / (var + autograd::LN_EPS).sqrt() * g.data()[i % d] + b.data()[i % d]
            })
        }

        pub fn attention(s: &ParamStore, a: &Attention<Linear>, x: &Tensor, ctx: &Tensor) -> Tensor {
            let q = linear(s, a.q.weight, a.q.bias, x);
            let k = linear(s, a.k.weight, a.k.bias, ctx);
            let v = linear(s, a.v.weight, a.v.bias, ctx);
            let (n, m, dh) = (x.rows(), ctx.rows(), a.head_dim);
            let mut out = Tensor::zeros(&[n, a.heads * dh]);
            for h in 0..a.heads {
                for i in 0..n {
                    let logits: Vec<f64> = (0..m)
                        .map(|j| (0..dh).map(|c| q.get2(i, h * dh + c) * k.get2(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dh {
                        let val = (0..m).map(|j| e[j] / z * v.get2(j, h * dh + c)).sum::<f64>();
                        out.data_mut()[i * a.heads * dh + h * dh + c] = val;
                    }
                }
            }
            linear(s, a.o.weight, a.o.bias, &out)
        }
    }
}
