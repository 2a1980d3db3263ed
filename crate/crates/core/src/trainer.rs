//! Training loop with per-batch drop/expand, joint loss, clipping, Adam and
//! cosine learning-rate decay.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{complement, drop_and_expand, MultiHotClassSet};
use crate::config::{OptimizerKind, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, patchify, Model};
use crate::objectives::{joint_loss, LossReport};
use crate::tape::Tape;
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Adam (or plain SGD) over the model's trainable parameters, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, model: &Model) -> Self {
        let mut m = Vec::new();
        if kind == OptimizerKind::Adam {
            model.params.visit(&mut |_, t| m.push(vec![0.0; t.numel()]));
        }
        Optimizer {
            kind,
            weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update with learning rate `lr` from the `grad` slots of `model`.
    /// Gradients are consumed.
    pub fn apply(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (kind, wd) = (self.kind, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        let mut missing = None;
        model.params.visit_mut(&mut |name, p| {
            let Some(g) = p.take_grad() else {
                missing.get_or_insert(name);
                i += 1;
                return;
            };
            let data = p.data_mut();
            match kind {
                OptimizerKind::Adam => {
                    let (m, v) = (&mut ms[i], &mut vs[i]);
                    for j in 0..data.len() {
                        let gj = g[j] as f64;
                        let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * gj;
                        let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let upd = (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                        let w = data[j] as f64;
                        data[j] = (w - lr * (upd + wd * w)) as f32;
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..data.len() {
                        let w = data[j] as f64;
                        data[j] = (w - lr * (g[j] as f64 + wd * w)) as f32;
                    }
                }
            }
            i += 1;
        });
        match missing {
            Some(name) => Err(Error::Contract(format!("parameter {name} has no gradient"))),
            None => Ok(()),
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scale all `grad` slots so their joint L2 norm is at most `max`; returns
/// the norm before clipping.
pub fn clip_grad_norm(model: &mut Model, max: f64) -> f64 {
    let mut sq = 0.0f64;
    model.params.visit(&mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if max > 0.0 && norm > max {
        let s = (max / norm) as f32;
        model.params.visit_mut(&mut |_, t| {
            if let Some(mut g) = t.take_grad() {
                g.iter_mut().for_each(|x| *x *= s);
                let _ = t.set_grad(g);
            }
        });
    }
    norm
}

/// Means over the batches of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_u: f64,
    pub l_i: f64,
    pub total: f64,
    /// Training accuracy (%) over samples whose label was retained in their batch.
    pub acc_retain_train: f64,
}

pub const METRICS_HEADER: &str = "epoch,l_ce,l_u,l_i,total,acc_retain_train";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            r.epoch, r.l_ce, r.l_u, r.l_i, r.total, r.acc_retain_train
        );
    }
    s
}

/// Model, optimizer and generator state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model.clone(), &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let optimizer = Optimizer::new(config.optimizer, config.weight_decay, &model);
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: 0,
            rng,
            history: Vec::new(),
        })
    }

    fn check_data(&self, ds: &Dataset) -> Result<()> {
        let m = &self.model.config;
        if (ds.classes, ds.height, ds.width, ds.channels) != (m.classes, m.height, m.width, m.channels) {
            return Err(Error::Data(format!(
                "dataset is {} classes of {}x{}x{}, model expects {} classes of {}x{}x{}",
                ds.classes, ds.height, ds.width, ds.channels, m.classes, m.height, m.width, m.channels
            )));
        }
        if ds.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        Ok(())
    }

    fn total_steps(&self, n: usize) -> u64 {
        (self.config.epochs * n.div_ceil(self.config.batch_size)) as u64
    }

    /// One optimizer step on the samples `idx`.
    fn step_batch(&mut self, ds: &Dataset, idx: &[usize], lr: f64) -> Result<(LossReport, usize, usize)> {
        let c = self.model.config.classes;
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let (retain, forget) = if self.model.keyed() {
            let present: BTreeSet<usize> = labels.iter().copied().collect();
            let plan = drop_and_expand(&present, c, self.config.drop_expand, &mut self.rng)?;
            (plan.retain, plan.forget)
        } else {
            (MultiHotClassSet::ones(c), MultiHotClassSet::zeros(c))
        };
        let mut pixels = Vec::with_capacity(idx.len() * ds.image_len());
        for &i in idx {
            pixels.extend_from_slice(ds.image(i));
        }
        let mut tape = Tape::<f32>::new();
        let vars = self.model.bind(&mut tape);
        let p = tape.constant(&patchify(&self.model.config, &pixels, idx.len())?);
        let keys = self.model.keyed().then_some((&retain, &forget));
        let at = (self.epoch + 1, self.optimizer.step + 1);
        let located = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {} step {}", at.0, at.1)),
            other => other,
        };
        let trace = forward(&mut tape, &self.model.config, &vars, p, idx.len(), keys).map_err(located)?;
        let (loss, report) = joint_loss(&mut tape, trace.logits, &labels, &retain, &forget, &self.config.weights)
            .map_err(located)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {} step {}: l_ce={} l_u={} l_i={} total={}",
                self.epoch + 1,
                self.optimizer.step + 1,
                report.l_ce,
                report.l_u,
                report.l_i,
                report.total
            )));
        }
        let logits = Tensor::new(vec![idx.len(), c], tape.value(trace.logits).to_vec())?;
        let mut grads = tape.backward(loss)?;
        self.model.store_grads(&vars, &mut grads)?;
        let norm = clip_grad_norm(&mut self.model, self.config.clip_norm);
        if !norm.is_finite() {
            self.model.params.visit_mut(&mut |_, t| t.clear_grad());
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at epoch {} step {}",
                self.epoch + 1,
                self.optimizer.step + 1
            )));
        }
        self.optimizer.apply(&mut self.model, lr)?;
        let (mut hit, mut seen) = (0, 0);
        for (b, &y) in labels.iter().enumerate() {
            if retain.contains(y) {
                seen += 1;
                if argmax(logits.row(b)) == y {
                    hit += 1;
                }
            }
        }
        Ok((report, hit, seen))
    }

    /// Train one epoch over `train`. On a numeric failure the parameters are
    /// left at the last finite step.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<EpochMetrics> {
        self.check_data(train)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let total = self.total_steps(train.len());
        let mut sum = EpochMetrics {
            epoch: self.epoch + 1,
            ..Default::default()
        };
        let (mut hit, mut seen, mut batches) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let lr = cosine_lr(self.config.lr, self.optimizer.step, total);
            let (r, h, s) = self.step_batch(train, chunk, lr)?;
            sum.l_ce += r.l_ce;
            sum.l_u += r.l_u;
            sum.l_i += r.l_i;
            sum.total += r.total;
            hit += h;
            seen += s;
            batches += 1;
        }
        let n = batches as f64;
        sum.l_ce /= n;
        sum.l_u /= n;
        sum.l_i /= n;
        sum.total /= n;
        sum.acc_retain_train = if seen > 0 { 100.0 * hit as f64 / seen as f64 } else { 0.0 };
        self.epoch += 1;
        self.audit()?;
        self.history.push(sum);
        Ok(sum)
    }

    /// Run the remaining epochs. `on_epoch` may stop early by returning `false`.
    pub fn fit(
        &mut self,
        train: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<bool>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(train)?;
            if !on_epoch(self, &m)? {
                break;
            }
        }
        Ok(())
    }

    /// Frozen-parameter audit: the forget prior is still all zeros and the
    /// optimizer tracks exactly the trainable parameters.
    pub fn audit(&self) -> Result<()> {
        if let Some(k) = &self.model.params.keys {
            if k.forget_prior.data().iter().any(|&v| v != 0.0) || k.forget_prior.grad().is_some() {
                return Err(Error::Contract("forget prior was modified".into()));
            }
        }
        let mut shapes = Vec::new();
        self.model.params.visit(&mut |_, t| shapes.push(t.numel()));
        if self.optimizer.kind == OptimizerKind::Adam {
            let tracked: Vec<usize> = self.optimizer.m.iter().map(Vec::len).collect();
            if tracked != shapes || self.optimizer.v.len() != shapes.len() {
                return Err(Error::Contract("optimizer state does not match trainable parameters".into()));
            }
        }
        Ok(())
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Convenience for the plain all-keys-active pair.
pub fn all_active(classes: usize) -> (MultiHotClassSet, MultiHotClassSet) {
    let a = MultiHotClassSet::ones(classes);
    let u = complement(&a);
    (a, u)
}
