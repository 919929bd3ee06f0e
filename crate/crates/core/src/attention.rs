//! Scaled dot-product attention, low-rank adapted projections and the
//! multi-modal (text + subject) cross-attention.

use autograd::{ParamId, ParamStore, Tensor, Var};

use crate::nn::{Fwd, Init, Project};
use crate::{Error, Result};

/// Default weight of the subject branch at sampling time.
pub const DEFAULT_BLEND: f64 = 0.8;

/// Frozen base matrix `w0: [d_out × d_in]` plus a trainable rank-`r`
/// update `b · a` with `a: [r × d_in]`, `b: [d_out × r]`.
///
/// The update is never merged into `w0`; every application uses the live
/// factors, so the effective weight is always `w0 + b·a`.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub w0: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraLinear {
    /// Random frozen base, Gaussian `a`, zero `b`.
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, rank: usize) -> Self {
        let w0 = init.normal(&format!("{name}.w0"), &[d_out, d_in], (1.0 / d_in as f64).sqrt(), false);
        Self::with_frozen(init, name, w0, d_in, d_out, rank)
    }

    /// New adapter whose frozen base is a value copy of `base`.
    pub fn from_base(init: &mut Init, name: &str, base: &Tensor, rank: usize) -> Self {
        let (d_out, d_in) = (base.rows(), base.cols());
        let w0 = init.store.add(format!("{name}.w0"), base.clone(), false);
        Self::with_frozen(init, name, w0, d_in, d_out, rank)
    }

    fn with_frozen(init: &mut Init, name: &str, w0: ParamId, d_in: usize, d_out: usize, rank: usize) -> Self {
        assert!(rank >= 1, "LoRA rank must be positive");
        let a = init.normal(&format!("{name}.lora_a"), &[rank, d_in], (1.0 / d_in as f64).sqrt(), true);
        let b = init.zeros(&format!("{name}.lora_b"), &[d_out, rank], true);
        Self {
            w0,
            a,
            b,
            rank,
            d_in,
            d_out,
        }
    }

    /// Materialised `w0 + b·a`.
    pub fn effective_weight(&self, store: &ParamStore) -> Tensor {
        let (w0, a, b) = (store.value(self.w0), store.value(self.a), store.value(self.b));
        Tensor::from_fn(&[self.d_out, self.d_in], |idx| {
            let (i, j) = (idx / self.d_in, idx % self.d_in);
            let delta: f64 = (0..self.rank).map(|r| b.get2(i, r) * a.get2(r, j)).sum();
            w0.get2(i, j) + delta
        })
    }
}

impl Project for LoraLinear {
    fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let base = x.matmul_t(f.p(self.w0))?;
        let delta = x.matmul_t(f.p(self.a))?.matmul_t(f.p(self.b))?;
        Ok(base.add(delta)?)
    }
}

/// `(w0 + b·a) x` for each row of `x`.
pub fn lora_apply<'t>(layer: &LoraLinear, f: Fwd<'t>, x: Var<'t>) -> Result<Var<'t>> {
    layer.forward(f, x)
}

/// `Softmax(q kᵀ / √d) v`, returning the output and the probability matrix.
pub fn scaled_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, d: usize) -> Result<(Var<'t>, Var<'t>)> {
    if k.rows() != v.rows() {
        return Err(autograd::TensorError::Shape {
            op: "scaled_attention",
            lhs: k.shape(),
            rhs: v.shape(),
        }
        .into());
    }
    let probs = q.matmul_t(k)?.scale(1.0 / (d as f64).sqrt())?.softmax()?;
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Head-split attention over already-projected `q`, `k`, `v`. Returns the
/// concatenated head outputs and per-head probabilities.
pub fn multi_head<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    head_dim: usize,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let tape = q.tape();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let s = h * head_dim;
        let (o, p) = scaled_attention(
            q.slice_cols(s, head_dim)?,
            k.slice_cols(s, head_dim)?,
            v.slice_cols(s, head_dim)?,
            head_dim,
        )?;
        outs.push(o);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, probs))
}

/// Standard multi-head attention block with output projection, usable as
/// self-attention (`ctx == x`) or cross-attention.
#[derive(Clone, Debug)]
pub struct Attention<P> {
    pub q: P,
    pub k: P,
    pub v: P,
    pub o: P,
    pub heads: usize,
    pub head_dim: usize,
}

impl<P: Project> Attention<P> {
    pub fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>, ctx: Var<'t>) -> Result<Var<'t>> {
        let (out, _) = multi_head(
            self.q.forward(f, x)?,
            self.k.forward(f, ctx)?,
            self.v.forward(f, ctx)?,
            self.heads,
            self.head_dim,
        )?;
        self.o.forward(f, out)
    }
}

impl Attention<LoraLinear> {
    pub fn lora(init: &mut Init, name: &str, d_model: usize, d_ctx: usize, heads: usize, rank: usize) -> Self {
        let inner = d_model;
        Self {
            q: LoraLinear::new(init, &format!("{name}.q"), d_model, inner, rank),
            k: LoraLinear::new(init, &format!("{name}.k"), d_ctx, inner, rank),
            v: LoraLinear::new(init, &format!("{name}.v"), d_ctx, inner, rank),
            o: LoraLinear::new(init, &format!("{name}.o"), inner, d_model, rank),
            heads,
            head_dim: inner / heads,
        }
    }
}

/// Attention probabilities captured from one multi-modal cross-attention
/// call, kept on the tape so constraint losses can differentiate them.
#[derive(Clone, Debug)]
pub struct AttnCapture<'t> {
    pub layer_id: usize,
    /// Spatial grid of the queries, `h × w == queries`.
    pub grid: (usize, usize),
    /// Per head, `[queries × text_tokens]`.
    pub text: Vec<Var<'t>>,
    /// Per head, `[queries × subject_tokens]`; empty without subject tokens.
    pub image: Vec<Var<'t>>,
}

/// Detached copy of an [`AttnCapture`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: usize,
    pub grid: (usize, usize),
    /// `[heads × queries × text_tokens]`.
    pub text_maps: Tensor,
    /// `[heads × queries × subject_tokens]`, absent without subject tokens.
    pub image_maps: Option<Tensor>,
}

fn stack_heads(maps: &[Var<'_>]) -> Tensor {
    let (q, t) = (maps[0].rows(), maps[0].cols());
    let mut data = Vec::with_capacity(maps.len() * q * t);
    for m in maps {
        data.extend_from_slice(m.value().data());
    }
    Tensor::new(&[maps.len(), q, t], data).expect("head stack")
}

impl AttnCapture<'_> {
    pub fn to_record(&self) -> AttentionRecord {
        AttentionRecord {
            layer_id: self.layer_id,
            grid: self.grid,
            text_maps: stack_heads(&self.text),
            image_maps: (!self.image.is_empty()).then(|| stack_heads(&self.image)),
        }
    }
}

/// Query projection shared by both branches; separate LoRA-adapted key and
/// value projections for text tokens (`kt`, `vt`) and subject tokens (`ki`,
/// `vi`). The subject projections start from value copies of the frozen text
/// bases.
#[derive(Clone, Debug)]
pub struct MultiModalCrossAttention {
    pub q_proj: LoraLinear,
    pub kt_proj: LoraLinear,
    pub vt_proj: LoraLinear,
    pub ki_proj: LoraLinear,
    pub vi_proj: LoraLinear,
    pub heads: usize,
    pub head_dim: usize,
    pub blend: f64,
}

/// Outputs of one multi-modal cross-attention evaluation.
pub struct MmcaOutput<'t> {
    /// `text + blend · image`, `[queries × heads·head_dim]`.
    pub out: Var<'t>,
    pub text_out: Var<'t>,
    pub image_out: Option<Var<'t>>,
    pub text_probs: Vec<Var<'t>>,
    pub image_probs: Vec<Var<'t>>,
}

impl MultiModalCrossAttention {
    pub fn new(init: &mut Init, name: &str, d_model: usize, d_cond: usize, heads: usize, rank: usize) -> Self {
        assert!(d_model % heads == 0, "width {d_model} not divisible by {heads} heads");
        let inner = d_model;
        let q_proj = LoraLinear::new(init, &format!("{name}.q"), d_model, inner, rank);
        let kt_proj = LoraLinear::new(init, &format!("{name}.kt"), d_cond, inner, rank);
        let vt_proj = LoraLinear::new(init, &format!("{name}.vt"), d_cond, inner, rank);
        let kt_base = init.store.value(kt_proj.w0).clone();
        let vt_base = init.store.value(vt_proj.w0).clone();
        let ki_proj = LoraLinear::from_base(init, &format!("{name}.ki"), &kt_base, rank);
        let vi_proj = LoraLinear::from_base(init, &format!("{name}.vi"), &vt_base, rank);
        Self {
            q_proj,
            kt_proj,
            vt_proj,
            ki_proj,
            vi_proj,
            heads,
            head_dim: inner / heads,
            blend: DEFAULT_BLEND,
        }
    }

    /// Re-copies the (possibly retrained) text key/value bases into the
    /// subject branch.
    pub fn sync_image_bases(&self, store: &mut ParamStore) {
        let kt = store.value(self.kt_proj.w0).clone();
        let vt = store.value(self.vt_proj.w0).clone();
        store.get_mut(self.ki_proj.w0).value = kt;
        store.get_mut(self.vi_proj.w0).value = vt;
    }

    pub fn forward<'t>(
        &self,
        f: Fwd<'t>,
        z: Var<'t>,
        c_t: Var<'t>,
        c_i: Option<Var<'t>>,
        blend: f64,
    ) -> Result<MmcaOutput<'t>> {
        if c_t.rows() == 0 {
            return Err(Error::invalid("text condition needs at least one token"));
        }
        let q = self.q_proj.forward(f, z)?;
        let (text_out, text_probs) = multi_head(
            q,
            self.kt_proj.forward(f, c_t)?,
            self.vt_proj.forward(f, c_t)?,
            self.heads,
            self.head_dim,
        )?;
        let (out, image_out, image_probs) = match c_i {
            Some(c_i) => {
                let (img, probs) = multi_head(
                    q,
                    self.ki_proj.forward(f, c_i)?,
                    self.vi_proj.forward(f, c_i)?,
                    self.heads,
                    self.head_dim,
                )?;
                (text_out.add(img.scale(blend)?)?, Some(img), probs)
            }
            None => (text_out, None, Vec::new()),
        };
        Ok(MmcaOutput {
            out,
            text_out,
            image_out,
            text_probs,
            image_probs,
        })
    }
}

/// `Attention(Q, K_t, V_t) + blend · Attention(Q, K_i, V_i)` using the
/// module's own blend; the subject term is zero when `c_i` is `None`.
/// Per-head probabilities go to `record` when supplied.
pub fn mm_cross_attention<'t>(
    mmca: &MultiModalCrossAttention,
    f: Fwd<'t>,
    z: Var<'t>,
    c_t: Var<'t>,
    c_i: Option<Var<'t>>,
    record: Option<(&mut Vec<AttnCapture<'t>>, usize, (usize, usize))>,
) -> Result<Var<'t>> {
    let out = mmca.forward(f, z, c_t, c_i, mmca.blend)?;
    if let Some((sink, layer_id, grid)) = record {
        sink.push(AttnCapture {
            layer_id,
            grid,
            text: out.text_probs,
            image: out.image_probs,
        });
    }
    Ok(out.out)
}
