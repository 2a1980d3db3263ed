//! Binary checkpoint container: config echo, parameters, optimizer moments,
//! epoch counter, generator position and training history.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "NOVOCKPT" | u32 version | u32 flags
//! str config text
//! u64 epoch
//! rng: 32-byte seed, u64 stream, u64 word_pos low, u64 word_pos high
//! u64 n, n x u32 withdrawn classes baked in by sealing
//! u64 n, n x (u64 epoch, 5 x f64 metrics)
//! [u64 optimizer step]                      when flags has OPTIMIZER
//! u64 n, n x (str name, u32 rank, rank x u64 dims, f32 values)
//! ```
//!
//! Strings are a u64 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{fnv1a, Reader, Writer};
use crate::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{EpochMetrics, Optimizer, RngState, Trainer};

const MAGIC: &[u8; 8] = b"NOVOCKPT";
pub const VERSION: u32 = 1;

pub const FLAG_SEALED: u32 = 1;
pub const FLAG_OPTIMIZER: u32 = 2;

const PRIOR: &str = "keys.forget_prior";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    /// Absent in sealed exports.
    pub optimizer: Option<Optimizer>,
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochMetrics>,
    /// Classes whose keys were destroyed by sealing; empty for ordinary checkpoints.
    pub sealed: Vec<usize>,
}

impl Checkpoint {
    pub fn is_sealed(&self) -> bool {
        !self.sealed.is_empty()
    }

    fn flags(&self) -> u32 {
        let mut f = 0;
        if self.is_sealed() {
            f |= FLAG_SEALED;
        }
        if self.optimizer.is_some() {
            f |= FLAG_OPTIMIZER;
        }
        f
    }

    /// Named tensors in file order.
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.model.params.visit(&mut |name, t| out.push((name, t)));
        if let Some(k) = &self.model.params.keys {
            out.push((PRIOR.to_string(), &k.forget_prior));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.flags());
        w.str(&self.config.to_text());
        w.len(self.epoch);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u64(self.rng.word_pos as u64);
        w.u64((self.rng.word_pos >> 64) as u64);
        w.len(self.sealed.len());
        for &c in &self.sealed {
            w.u32(c as u32);
        }
        w.len(self.history.len());
        for h in &self.history {
            w.len(h.epoch);
            for v in [h.l_ce, h.l_u, h.l_i, h.total, h.acc_retain_train] {
                w.u64(v.to_bits());
            }
        }

        let params = self.tensors();
        let mut moments: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        if let Some(opt) = &self.optimizer {
            w.u64(opt.step);
            let trainable = &params[..opt.m.len().min(params.len())];
            for (prefix, store) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for ((name, t), vals) in trainable.iter().zip(store) {
                    moments.push((format!("{prefix}.{name}"), t.shape().to_vec(), vals));
                }
            }
        }
        w.len(params.len() + moments.len());
        let mut put = |name: &str, shape: &[usize], vals: &[f32]| {
            w.str(name);
            w.u32(shape.len() as u32);
            for &d in shape {
                w.len(d);
            }
            w.f32s(vals);
        };
        for (name, t) in &params {
            put(name, t.shape(), t.data());
        }
        for (name, shape, vals) in &moments {
            put(name, shape, vals);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, not a checkpoint file".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: MAGIC.len(),
                msg: format!("unsupported checkpoint version {version}, expected {VERSION}"),
            });
        }
        let flags = r.u32("flags")?;
        if flags & !(FLAG_SEALED | FLAG_OPTIMIZER) != 0 {
            return r.fail(format!("unknown flag bits {flags:#x}"));
        }
        let text_at = r.pos;
        let text = r.str("config")?;
        let config = TrainConfig::parse(&text).map_err(|e| Error::Format {
            offset: text_at,
            msg: format!("embedded config: {e}"),
        })?;
        let epoch = r.u64("epoch")? as usize;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let lo = r.u64("rng position")? as u128;
        let hi = r.u64("rng position")? as u128;
        let rng = RngState {
            seed,
            stream,
            word_pos: lo | (hi << 64),
        };

        let classes = config.model.classes;
        let n = r.len("withdrawn list", 4)?;
        let mut sealed = Vec::with_capacity(n);
        for _ in 0..n {
            let c = r.u32("withdrawn class")? as usize;
            if c >= classes {
                return r.fail(format!("withdrawn class {c} outside {classes} classes"));
            }
            sealed.push(c);
        }
        if (flags & FLAG_SEALED != 0) != !sealed.is_empty() {
            return r.fail("sealed flag disagrees with the withdrawn list");
        }

        let n = r.len("history", 48)?;
        let mut history = Vec::with_capacity(n);
        for _ in 0..n {
            let epoch = r.u64("history")? as usize;
            let mut v = [0.0f64; 5];
            for x in &mut v {
                *x = f64::from_bits(r.u64("history")?);
            }
            history.push(EpochMetrics {
                epoch,
                l_ce: v[0],
                l_u: v[1],
                l_i: v[2],
                total: v[3],
                acc_retain_train: v[4],
            });
        }
        let step = if flags & FLAG_OPTIMIZER != 0 {
            Some(r.u64("optimizer step")?)
        } else {
            None
        };

        let n = r.len("tensor table", 8)?;
        let mut table: BTreeMap<String, (usize, Tensor)> = BTreeMap::new();
        for _ in 0..n {
            let at = r.pos;
            let name = r.str("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return r.fail(format!("tensor {name} has rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len("tensor dim", 0)?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(numel) = numel.filter(|&m| m.saturating_mul(4) <= r.remaining()) else {
                return r.fail(format!("tensor {name} of shape {shape:?} exceeds the {} bytes left", r.remaining()));
            };
            let data = r.f32s(numel, &name)?;
            if table.insert(name.clone(), (at, Tensor::new(shape, data)?)).is_some() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("duplicate tensor {name}"),
                });
            }
        }
        r.finish()?;

        let mut model = Model::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut missing: Option<String> = None;
        let mut mismatch: Option<(usize, String)> = None;
        let mut fill = |name: &str, dst: &mut [f32], shape: &[usize], table: &mut BTreeMap<String, (usize, Tensor)>| {
            match table.remove(name) {
                None => {
                    missing.get_or_insert_with(|| name.to_string());
                }
                Some((at, t)) if t.shape() != shape => {
                    mismatch.get_or_insert((at, format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
                }
                Some((_, t)) => dst.copy_from_slice(t.data()),
            }
        };
        model.params.visit_mut(&mut |name, t| {
            let shape = t.shape().to_vec();
            fill(&name, t.data_mut(), &shape, &mut table);
        });
        if let Some(k) = &mut model.params.keys {
            let shape = k.forget_prior.shape().to_vec();
            fill(PRIOR, k.forget_prior.data_mut(), &shape, &mut table);
        }

        let optimizer = match step {
            None => None,
            Some(step) => {
                let mut opt = Optimizer::new(config.optimizer, config.weight_decay, &model);
                opt.step = step;
                if config.optimizer == OptimizerKind::Adam {
                    let mut names = Vec::new();
                    model.params.visit(&mut |name, t| names.push((name, t.shape().to_vec())));
                    for (i, (name, shape)) in names.iter().enumerate() {
                        fill(&format!("adam.m.{name}"), &mut opt.m[i], shape, &mut table);
                        fill(&format!("adam.v.{name}"), &mut opt.v[i], shape, &mut table);
                    }
                }
                Some(opt)
            }
        };
        if let Some((offset, msg)) = mismatch {
            return Err(Error::Format { offset, msg });
        }
        if let Some(name) = missing {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("missing tensor {name}"),
            });
        }
        if let Some((name, (offset, _))) = table.into_iter().next() {
            return Err(Error::Format {
                offset,
                msg: format!("unexpected tensor {name}"),
            });
        }
        if let Some(k) = &model.params.keys {
            if k.forget_prior.data().iter().any(|&v| v != 0.0) {
                return Err(Error::Contract("forget prior in checkpoint is not all zeros".into()));
            }
        }
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            epoch,
            rng,
            history,
            sealed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Hash of the serialized bytes.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_bytes())
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut model = self.model.clone();
        model.params.visit_mut(&mut |_, t| t.clear_grad());
        Checkpoint {
            config: self.config.clone(),
            model,
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            sealed: Vec::new(),
        }
    }

    /// Continue a run from `ckpt`. Sealed exports carry no optimizer state
    /// and cannot be resumed.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.is_sealed() {
            return Err(Error::Contract("a sealed checkpoint cannot be trained further".into()));
        }
        let Some(optimizer) = ckpt.optimizer else {
            return Err(Error::Contract("checkpoint has no optimizer state".into()));
        };
        let t = Trainer {
            config: ckpt.config,
            model: ckpt.model,
            optimizer,
            epoch: ckpt.epoch,
            rng: ckpt.rng.restore(),
            history: ckpt.history,
        };
        t.audit()?;
        Ok(t)
    }
}
