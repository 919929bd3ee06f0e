//! Versioned binary checkpoints of named parameter arrays.

use std::path::Path;

use autograd::{ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::data::{Reader, Writer, FORMAT_VERSION};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MMCK";

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Weights of the pretrained base model.
    Base,
    /// Trainable weights of a personalisation run.
    Personalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// TOML snapshot of the run configuration.
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    /// Optimizer state arrays, empty for plain gradient descent.
    pub optimizer: Vec<(String, Tensor)>,
}

fn put_arrays(w: &mut Writer, arrays: &[(String, Tensor)]) {
    w.u32(arrays.len() as u32);
    for (name, t) in arrays {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.u64(v.to_bits());
        }
    }
}

fn get_arrays(r: &mut Reader) -> Result<Vec<(String, Tensor)>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("{name}: implausible rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

impl Checkpoint {
    /// Parameters of `store` selected by `keep`, in registry order.
    pub fn collect(store: &ParamStore, keep: impl Fn(&str, bool) -> bool) -> Vec<(String, Tensor)> {
        store
            .iter()
            .filter(|(_, p)| keep(&p.name, p.trainable))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites the named parameters in `store`.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} unknown to the model")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(match self.kind {
            CheckpointKind::Base => 0,
            CheckpointKind::Personalized => 1,
        });
        w.str(&self.config);
        w.u64(self.step);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u64(self.rng.word_pos as u64);
        w.u64((self.rng.word_pos >> 64) as u64);
        put_arrays(&mut w, &self.params);
        put_arrays(&mut w, &self.optimizer);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let kind = match r.u8()? {
            0 => CheckpointKind::Base,
            1 => CheckpointKind::Personalized,
            k => return Err(Error::Format(format!("unknown checkpoint kind {k}"))),
        };
        let config = r.str()?;
        let step = r.u64()?;
        let seed = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let params = get_arrays(&mut r)?;
        let optimizer = get_arrays(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind,
            config,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos: lo | (hi << 64),
            },
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
