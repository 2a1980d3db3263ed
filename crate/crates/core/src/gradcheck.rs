//! Central finite-difference gradient checking.
//!
//! The loss is rebuilt from scratch in `f64` for every perturbation; only the
//! forward path of the tape is used on the numeric side.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// A scalar-valued computation that can be replayed in any precision.
pub trait Objective {
    fn eval<F: Element>(&self, tape: &mut Tape<F>, inputs: &[Var]) -> Result<Var>;
}

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Entries smaller than this fraction of the largest analytic gradient of the
/// same input are measured against that fraction instead of their own size.
/// Without it an entry that cancels to nearly zero fails on the truncation
/// error of the difference quotient alone.
pub const SCALE_FLOOR: f64 = 1e-2;

/// Relative error with a denominator floor so exact zeros compare cleanly.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn evaluate<O: Objective>(obj: &O, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars = inputs
        .iter()
        .map(|(s, v)| tape.leaf_raw(s.clone(), v.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = obj.eval(&mut tape, &vars)?;
    Ok(tape.value(out)[0])
}

/// Analytic gradients of `obj` in precision `F`, one vector per input.
pub fn analytic<F: Element, O: Objective>(obj: &O, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<F>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = obj.eval(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match grads.get(v) {
            Some(g) => g.iter().map(|x| x.to_f64().unwrap()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

/// Compare `f64` analytic gradients against central differences with step `h`.
/// The denominator of each relative error is at least `floor` and at least
/// [`SCALE_FLOOR`] times the largest analytic entry of that input.
pub fn check<O: Objective>(obj: &O, inputs: &[Tensor], h: f64, floor: f64) -> Result<GradReport> {
    let grads = analytic::<f64, O>(obj, inputs)?;
    let mut point: Vec<(Vec<usize>, Vec<f64>)> =
        inputs.iter().map(|t| (t.shape().to_vec(), to_f64(t))).collect();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for i in 0..inputs.len() {
        let scale = grads[i].iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let denom_floor = floor.max(SCALE_FLOOR * scale);
        for j in 0..point[i].1.len() {
            let orig = point[i].1[j];
            point[i].1[j] = orig + h;
            let up = evaluate(obj, &point)?;
            point[i].1[j] = orig - h;
            let down = evaluate(obj, &point)?;
            point[i].1[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i][j];
            let err = rel_error(a, numeric, denom_floor);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report = GradReport {
                    max_rel_error: err,
                    worst_input: i,
                    worst_index: j,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
