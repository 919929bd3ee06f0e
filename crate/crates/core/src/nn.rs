//! Parameter-registry backed layers shared by every sub-model.

use autograd::{ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Result;

/// Forward-pass context: a tape plus the registry its parameters come from.
#[derive(Clone, Copy)]
pub struct Fwd<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
}

impl<'t> Fwd<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

/// Deterministic parameter construction into a registry.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.store.add(name, t, trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), trainable)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], trainable: bool) -> ParamId {
        self.store.add(name, Tensor::ones(shape), trainable)
    }
}

/// Anything mapping `[n × d_in]` rows to `[n × d_out]`.
pub trait Project {
    fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>) -> Result<Var<'t>>;
}

/// Dense layer `y = x Wᵀ + b` with `W: [d_out × d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool, trainable: bool) -> Self {
        let weight = init.normal(&format!("{name}.weight"), &[d_out, d_in], (1.0 / d_in as f64).sqrt(), trainable);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), &[d_out], trainable));
        Self { weight, bias }
    }

    /// Same as [`Linear::new`] but with all-zero weights.
    pub fn zero(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool, trainable: bool) -> Self {
        let weight = init.zeros(&format!("{name}.weight"), &[d_out, d_in], trainable);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), &[d_out], trainable));
        Self { weight, bias }
    }
}

impl Project for Linear {
    fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul_t(f.p(self.weight))?;
        Ok(match self.bias {
            Some(b) => y.add_row(f.p(b))?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            gain: init.ones(&format!("{name}.gain"), &[dim], trainable),
            bias: init.zeros(&format!("{name}.bias"), &[dim], trainable),
        }
    }

    pub fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(f.p(self.gain), f.p(self.bias), LN_EPS)?)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<'t>(&self, f: Fwd<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(f, x)?.gelu()?;
        self.fc2.forward(f, h)
    }
}

/// Sinusoidal embedding of a scalar position/timestep, `[1 × dim]`.
pub fn sinusoidal(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        if i < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}
