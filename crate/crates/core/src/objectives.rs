//! Retain cross-entropy, forget-uniformity MSE, inverse forget cross-entropy
//! and their weighted sum.

use crate::batch::MultiHotClassSet;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Stabilizer inside the inverse cross-entropy denominator.
pub const INVERSE_EPS: f64 = 1e-3;

/// 1 when `v > 0`, else 0.
pub fn indicator(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub uniform: f64,
    pub inverse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            uniform: 1.0,
            inverse: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(ce: f64, uniform: f64, inverse: f64) -> Result<Self> {
        let w = LossWeights { ce, uniform, inverse };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.ce), ("gamma", self.uniform), ("tau", self.inverse)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weighted sum of already-computed component values.
    pub fn combine(&self, l_ce: f64, l_u: f64, l_i: f64) -> f64 {
        self.ce * l_ce + self.uniform * l_u + self.inverse * l_i
    }
}

/// Component values of one joint-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_u: f64,
    pub l_i: f64,
    pub total: f64,
    pub n_retain: usize,
    pub n_forget: usize,
}

fn check_logits<F: Element>(tape: &Tape<F>, logits: Var, labels: Option<&[usize]>, classes: usize) -> Result<usize> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[1] != classes {
        return Err(Error::shape("loss logits", s, &[s.first().copied().unwrap_or(0), classes]));
    }
    if let Some(l) = labels {
        if l.len() != s[0] {
            return Err(Error::shape("loss labels", &[l.len()], &[s[0]]));
        }
        if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
            return Err(Error::Index { index: bad, len: classes });
        }
    }
    if s[0] == 0 {
        return Err(Error::Contract("loss on an empty batch".into()));
    }
    Ok(s[0])
}

fn zero<F: Element>(tape: &mut Tape<F>) -> Var {
    tape.constant(&Tensor::scalar(0.0))
}

/// Mean cross-entropy over samples whose label is in `set`, plus the count.
fn masked_ce<F: Element>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &[usize],
    set: &MultiHotClassSet,
) -> Result<(Var, usize)> {
    let b = check_logits(tape, logits, Some(labels), set.len())?;
    let mask: Vec<f32> = labels.iter().map(|&y| indicator(set.dot_label(y) as f64) as f32).collect();
    let n = mask.iter().filter(|&&m| m > 0.0).count();
    if n == 0 {
        return Ok((zero(tape), 0));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let m = tape.constant(&Tensor::new(vec![b], mask)?);
    let kept = tape.mul(picked, m)?;
    let s = tape.sum(kept)?;
    Ok((tape.scale(s, F::from_f64(-1.0 / n as f64).unwrap())?, n))
}

/// Cross-entropy averaged over retain-labelled samples; 0 when there are none.
pub fn retain_ce<F: Element>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &[usize],
    retain: &MultiHotClassSet,
) -> Result<(Var, usize)> {
    masked_ce(tape, logits, labels, retain)
}

/// Squared distance of forget-position logits to `1 / |forget|`, averaged
/// over batch and forget positions; 0 when nothing is forgotten.
pub fn forget_mse<F: Element>(tape: &mut Tape<F>, logits: Var, forget: &MultiHotClassSet) -> Result<Var> {
    let b = check_logits(tape, logits, None, forget.len())?;
    let k = forget.count();
    if k == 0 {
        return Ok(zero(tape));
    }
    let target = 1.0 / k as f32;
    let row = forget.to_f32();
    let mask: Vec<f32> = (0..b).flat_map(|_| row.iter().copied()).collect();
    let goal: Vec<f32> = mask.iter().map(|&m| m * target).collect();
    let c = forget.len();
    let m = tape.constant(&Tensor::new(vec![b, c], mask)?);
    let g = tape.constant(&Tensor::new(vec![b, c], goal)?);
    let masked = tape.mul(logits, m)?;
    let diff = tape.sub(masked, g)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    tape.scale(s, F::from_f64(1.0 / (b * k) as f64).unwrap())
}

/// `1 / (eps + mean CE over forget-labelled samples)`; 0 when there are none.
pub fn inverse_ce<F: Element>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &[usize],
    forget: &MultiHotClassSet,
    eps: f64,
) -> Result<(Var, usize)> {
    let (ce, n) = masked_ce(tape, logits, labels, forget)?;
    if n == 0 {
        return Ok((ce, 0));
    }
    let shifted = tape.add_scalar(ce, F::from_f64(eps).unwrap())?;
    Ok((tape.recip(shifted)?, n))
}

/// Weighted joint loss on the tape plus a report of its parts.
pub fn joint_loss<F: Element>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &[usize],
    retain: &MultiHotClassSet,
    forget: &MultiHotClassSet,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let (ce, n_retain) = retain_ce(tape, logits, labels, retain)?;
    let u = forget_mse(tape, logits, forget)?;
    let (inv, n_forget) = inverse_ce(tape, logits, labels, forget, INVERSE_EPS)?;
    let f = |v: f64| F::from_f64(v).unwrap();
    let a = tape.scale(ce, f(weights.ce))?;
    let b = tape.scale(u, f(weights.uniform))?;
    let c = tape.scale(inv, f(weights.inverse))?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let val = |tape: &Tape<F>, v: Var| tape.value(v)[0].to_f64().unwrap();
    let report = LossReport {
        l_ce: val(tape, ce),
        l_u: val(tape, u),
        l_i: val(tape, inv),
        total: val(tape, total),
        n_retain,
        n_forget,
    };
    Ok((total, report))
}
