//! Retain/forget accuracy, membership inference, vicinity analysis, linear
//! probes and the logit-masking comparator.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::argmax;
use crate::unlearn::{state_logits, KeyState};

/// Accuracy split by key state over one labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: usize,
    pub withdrawn: Vec<usize>,
    /// Percent correct over samples whose class is active; `None` when there are none.
    pub acc_retain: Option<f64>,
    /// Percent correct over samples whose class is withdrawn; `None` when there are none.
    pub acc_forget: Option<f64>,
    pub accuracy: f64,
    pub mia: Option<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<Option<f64>>,
}

fn percent(hit: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * hit as f64 / n as f64)
}

impl EvalReport {
    /// Report from logits `[n, classes]`, predicting by argmax over every class.
    pub fn from_logits(logits: &Tensor, labels: &[usize], withdrawn: &[usize], classes: usize) -> Result<Self> {
        if logits.rows() != labels.len() || logits.cols() != classes {
            return Err(Error::shape("evaluate", logits.shape(), &[labels.len(), classes]));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        let (mut hr, mut nr, mut hf, mut nf) = (0, 0, 0, 0);
        for (i, &y) in labels.iter().enumerate() {
            let p = argmax(logits.row(i));
            confusion[y][p] += 1;
            let ok = (p == y) as usize;
            if withdrawn.contains(&y) {
                nf += 1;
                hf += ok;
            } else {
                nr += 1;
                hr += ok;
            }
        }
        let per_class = confusion.iter().enumerate().map(|(c, row)| percent(row[c], row.iter().sum())).collect();
        let mut withdrawn = withdrawn.to_vec();
        withdrawn.sort_unstable();
        withdrawn.dedup();
        Ok(EvalReport {
            classes,
            withdrawn,
            acc_retain: percent(hr, nr),
            acc_forget: percent(hf, nf),
            accuracy: percent(hr + hf, nr + nf).unwrap_or(0.0),
            mia: None,
            confusion,
            per_class,
        })
    }

    pub const METRICS_HEADER: &'static str = "acc_retain,acc_forget,accuracy,mia,samples,withdrawn";

    /// One header line and one value line. Absent metrics are empty fields;
    /// withdrawn classes are `;`-separated.
    pub fn metrics_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let n: usize = self.confusion.iter().flatten().sum();
        let w: Vec<String> = self.withdrawn.iter().map(usize::to_string).collect();
        format!(
            "{}\n{},{},{:.4},{},{},{}\n",
            Self::METRICS_HEADER,
            opt(self.acc_retain),
            opt(self.acc_forget),
            self.accuracy,
            opt(self.mia),
            n,
            w.join(";")
        )
    }

    /// Rows are true classes, columns predicted classes.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true");
        for c in 0..self.classes {
            let _ = write!(s, ",pred_{c}");
        }
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{c},{}", cells.join(","));
        }
        s
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,state,samples,accuracy\n");
        for (c, acc) in self.per_class.iter().enumerate() {
            let state = if self.withdrawn.contains(&c) { "withdrawn" } else { "active" };
            let n: usize = self.confusion[c].iter().sum();
            let _ = writeln!(s, "{c},{state},{n},{}", acc.map(|a| format!("{a:.4}")).unwrap_or_default());
        }
        s
    }

    /// Human-readable block for the terminal.
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}%")).unwrap_or_else(|| "n/a".into());
        let mut s = format!(
            "withdrawn {:?}\n  acc_retain {}\n  acc_forget {}\n  accuracy   {:.2}%\n",
            self.withdrawn,
            opt(self.acc_retain),
            opt(self.acc_forget),
            self.accuracy
        );
        if let Some(m) = self.mia {
            let _ = writeln!(s, "  mia        {m:.2}%");
        }
        s
    }
}

/// Evaluate `model` on `data` with the keys in `state`.
pub fn evaluate(model: &Model, state: &KeyState, data: &Dataset) -> Result<EvalReport> {
    let logits = state_logits(model, state, &data.images, data.len())?;
    EvalReport::from_logits(&logits, &data.labels, &state.withdrawn(), model.config.classes)
}

/// A conventionally trained model whose outputs for some classes are set
/// to negative infinity after the forward pass. Nothing inside the network
/// changes.
pub struct MaskingBaseline<'a> {
    pub model: &'a Model,
    pub forget: Vec<usize>,
}

impl<'a> MaskingBaseline<'a> {
    pub fn new(model: &'a Model, forget: &[usize]) -> Result<Self> {
        if model.keyed() {
            return Err(Error::Contract("the masking baseline wraps a plain model".into()));
        }
        if let Some(&c) = forget.iter().find(|&&c| c >= model.config.classes) {
            return Err(Error::Index {
                index: c,
                len: model.config.classes,
            });
        }
        Ok(MaskingBaseline {
            model,
            forget: forget.to_vec(),
        })
    }

    fn mask(&self, logits: &mut Tensor) {
        let c = self.model.config.classes;
        for row in logits.data_mut().chunks_mut(c) {
            for &k in &self.forget {
                row[k] = f32::NEG_INFINITY;
            }
        }
    }

    /// Masked logits and the unmasked final hidden state of one forward pass.
    pub fn infer(&self, pixels: &[f32], n: usize) -> Result<(Tensor, Tensor)> {
        let (mut logits, hidden) = self.model.infer(pixels, n, None)?;
        self.mask(&mut logits);
        Ok((logits, hidden))
    }

    pub fn logits(&self, pixels: &[f32], n: usize) -> Result<Tensor> {
        let mut logits = self.model.logits(pixels, n, None)?;
        self.mask(&mut logits);
        Ok(logits)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        let logits = self.logits(&data.images, data.len())?;
        EvalReport::from_logits(&logits, &data.labels, &self.forget, self.model.config.classes)
    }
}

/// Per-sample attacker feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiaFeature {
    /// Cross-entropy of the softmax against the true label.
    Loss,
    /// Entropy of the softmax.
    Entropy,
}

impl FromStr for MiaFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" | "ce" => Ok(MiaFeature::Loss),
            "entropy" => Ok(MiaFeature::Entropy),
            _ => Err(Error::Usage(format!("MIA feature must be loss|entropy, got {s:?}"))),
        }
    }
}

/// Attacker feature for every row of `logits`. Masked (infinite negative)
/// logits get zero probability; a label with zero probability has infinite loss.
pub fn mia_features(logits: &Tensor, labels: &[usize], feature: MiaFeature) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            match feature {
                MiaFeature::Loss => lse - row[labels[i]] as f64,
                MiaFeature::Entropy => row
                    .iter()
                    .map(|&v| {
                        let lp = v as f64 - lse;
                        if lp.is_finite() {
                            -lp.exp() * lp
                        } else {
                            0.0
                        }
                    })
                    .sum(),
            }
        })
        .collect()
}

/// Binary logistic regression with per-feature standardization fitted on
/// the training rows and class-balanced log-loss, trained by full-batch
/// gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iterations: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticRegression {
    /// `x` is row-major `[y.len(), dim]`.
    pub fn fit(x: &[f64], dim: usize, y: &[bool], opts: FitOptions) -> Result<Self> {
        let n = y.len();
        if dim == 0 || x.len() != n * dim {
            return Err(Error::shape("logistic regression", &[x.len()], &[n, dim]));
        }
        let pos = y.iter().filter(|&&b| b).count();
        if pos == 0 || pos == n {
            return Err(Error::Data(format!(
                "attacker data has a single class ({pos} positive of {n})"
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature at row {}", i / dim)));
        }
        let mut mean = vec![0.0; dim];
        for row in x.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; dim];
        for row in x.chunks(dim) {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
        let z: Vec<f64> = x
            .chunks(dim)
            .flat_map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s))
            .collect();
        // each class carries half the total weight
        let w_pos = 0.5 / pos as f64;
        let w_neg = 0.5 / (n - pos) as f64;
        let mut weights = vec![0.0; dim];
        let mut bias = 0.0;
        let mut grad = vec![0.0; dim];
        for _ in 0..opts.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (row, &label) in z.chunks(dim).zip(y) {
                let s: f64 = row.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias;
                let (t, w) = if label { (1.0, w_pos) } else { (0.0, w_neg) };
                let e = w * (sigmoid(s) - t);
                for (g, v) in grad.iter_mut().zip(row) {
                    *g += e * v;
                }
                gb += e;
            }
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= opts.lr * (g + opts.l2 * *w);
            }
            bias -= opts.lr * gb;
        }
        Ok(LogisticRegression {
            mean,
            scale,
            weights,
            bias,
        })
    }

    pub fn decision(&self, row: &[f64]) -> f64 {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| if *w == 0.0 { 0.0 } else { w * (v - m) / s })
            .sum::<f64>()
            + self.bias
    }

    /// Positive when the decision is strictly above zero; NaN is negative.
    pub fn predict(&self, row: &[f64]) -> bool {
        self.decision(row) > 0.0
    }

    /// Percent of rows of `x` predicted as `y`.
    pub fn accuracy(&self, x: &[f64], y: &[bool]) -> f64 {
        let dim = self.weights.len();
        let hit = x.chunks(dim).zip(y).filter(|(row, &t)| self.predict(row) == t).count();
        100.0 * hit as f64 / y.len().max(1) as f64
    }
}

/// Seeded 80/20 split of `0..n` into (fit, held out).
fn attacker_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n as f64 * 0.8).round() as usize;
    let (a, b) = idx.split_at(cut);
    (a.to_vec(), b.to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaReport {
    /// Percent of forget-class training samples the attacker calls members.
    pub score: f64,
    /// Attacker accuracy on its held-out 20%.
    pub heldout_accuracy: f64,
    /// Percent of held-out members called members.
    pub heldout_member_rate: f64,
    pub attacker: LogisticRegression,
}

/// Membership inference from per-sample features.
///
/// The attacker is fitted on retain-class training samples (members) and
/// retain-class test samples (non-members), 80% of each pool, and scores the
/// forget-class training samples.
pub fn mia_from_features(
    train_feat: &[f64],
    train_labels: &[usize],
    test_feat: &[f64],
    test_labels: &[usize],
    forget: &[usize],
    seed: u64,
) -> Result<MiaReport> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (&f, c) in train_feat.iter().zip(train_labels) {
        if !forget.contains(c) {
            x.push(f);
            y.push(true);
        }
    }
    for (&f, c) in test_feat.iter().zip(test_labels) {
        if !forget.contains(c) {
            x.push(f);
            y.push(false);
        }
    }
    let (fit_idx, held_idx) = attacker_split(x.len(), seed);
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) { (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| y[i]).collect()) };
    let (fx, fy) = pick(&fit_idx);
    let (hx, hy) = pick(&held_idx);
    let attacker = LogisticRegression::fit(&fx, 1, &fy, FitOptions::default())?;
    let members: Vec<f64> = hx.iter().zip(&hy).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let member_rate = 100.0 * members.iter().filter(|&&v| attacker.predict(&[v])).count() as f64 / members.len().max(1) as f64;
    let targets: Vec<f64> = train_feat
        .iter()
        .zip(train_labels)
        .filter(|(_, c)| forget.contains(c))
        .map(|(&f, _)| f)
        .collect();
    if targets.is_empty() {
        return Err(Error::Data("no forget-class training samples to score".into()));
    }
    let score = 100.0 * targets.iter().filter(|&&v| attacker.predict(&[v])).count() as f64 / targets.len() as f64;
    Ok(MiaReport {
        score,
        heldout_accuracy: attacker.accuracy(&hx, &hy),
        heldout_member_rate: member_rate,
        attacker,
    })
}

/// Membership inference against a keyed (possibly sealed) model under `state`.
pub fn mia_score(
    model: &Model,
    state: &KeyState,
    train: &Dataset,
    test: &Dataset,
    feature: MiaFeature,
    seed: u64,
) -> Result<MiaReport> {
    let tl = state_logits(model, state, &train.images, train.len())?;
    let sl = state_logits(model, state, &test.images, test.len())?;
    mia_from_features(
        &mia_features(&tl, &train.labels, feature),
        &train.labels,
        &mia_features(&sl, &test.labels, feature),
        &test.labels,
        &state.withdrawn(),
        seed,
    )
}

/// Membership inference against the masking baseline.
pub fn mia_masking(
    baseline: &MaskingBaseline<'_>,
    train: &Dataset,
    test: &Dataset,
    feature: MiaFeature,
    seed: u64,
) -> Result<MiaReport> {
    let tl = baseline.logits(&train.images, train.len())?;
    let sl = baseline.logits(&test.images, test.len())?;
    mia_from_features(
        &mia_features(&tl, &train.labels, feature),
        &train.labels,
        &mia_features(&sl, &test.labels, feature),
        &test.labels,
        &baseline.forget,
        seed,
    )
}

/// Forget accuracy (%) at or below which a class counts as forgotten.
pub const FORGOTTEN: f64 = 5.0;

/// First epoch (1-based) from which forget accuracy stays at or below
/// `threshold` for the rest of the curve. `None` if the last epoch is above it.
pub fn epochs_to_forget(acc_forget: &[f64], threshold: f64) -> Option<usize> {
    let above = acc_forget.iter().rposition(|&a| !(a <= threshold));
    match above {
        None if acc_forget.is_empty() => None,
        None => Some(1),
        Some(i) if i + 1 == acc_forget.len() => None,
        Some(i) => Some(i + 2),
    }
}

/// Similarity below which a class counts as having no near neighbour.
pub const NEAR_SIMILARITY: f64 = 0.26;

#[derive(Clone, Debug, PartialEq)]
pub struct VicinityRow {
    pub class: usize,
    /// Most frequent prediction for samples of `class`.
    pub modal: Option<usize>,
    /// Fraction of those samples predicted as `modal`.
    pub share: f64,
    /// Most similar active class, when a similarity matrix is given.
    pub nearest_active: Option<usize>,
    pub modal_is_nearest: Option<bool>,
    /// The nearest active class is below [`NEAR_SIMILARITY`].
    pub no_near_neighbor: bool,
}

/// Where each withdrawn class's samples went.
pub fn vicinity_confusion(report: &EvalReport, similarity: Option<&[f64]>) -> Vec<VicinityRow> {
    let c = report.classes;
    let active: Vec<usize> = (0..c).filter(|k| !report.withdrawn.contains(k)).collect();
    report
        .withdrawn
        .iter()
        .map(|&k| {
            let row = &report.confusion[k];
            let total: usize = row.iter().sum();
            let modal = (total > 0).then(|| argmax_count(row));
            let share = modal.map_or(0.0, |m| row[m] as f64 / total as f64);
            let nearest = similarity.and_then(|s| crate::data::nearest_neighbor(s, c, k, &active));
            let no_near = match (similarity, nearest) {
                (Some(s), Some(n)) => s[k * c + n] < NEAR_SIMILARITY,
                (Some(_), None) => true,
                _ => false,
            };
            VicinityRow {
                class: k,
                modal,
                share,
                nearest_active: nearest,
                modal_is_nearest: nearest.and_then(|n| modal.map(|m| m == n)),
                no_near_neighbor: no_near,
            }
        })
        .collect()
}

fn argmax_count(row: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn vicinity_csv(rows: &[VicinityRow]) -> String {
    let mut s = String::from("class,modal,share,nearest_active,modal_is_nearest,no_near_neighbor\n");
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{},{},{}",
            r.class,
            opt(r.modal),
            r.share,
            opt(r.nearest_active),
            r.modal_is_nearest.map(|b| b.to_string()).unwrap_or_default(),
            r.no_near_neighbor
        );
    }
    s
}

/// Held-out accuracy (%) of a logistic probe separating two classes by
/// feature rows. `fit` and `held` are `(features [n, d], is_first_class)`.
pub fn linear_probe(fit: (&Tensor, &[bool]), held: (&Tensor, &[bool])) -> Result<f64> {
    let dim = fit.0.cols();
    if held.0.cols() != dim {
        return Err(Error::shape("linear probe", fit.0.shape(), held.0.shape()));
    }
    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let opts = FitOptions {
        iterations: 300,
        lr: 0.5,
        l2: 1e-3,
    };
    let probe = LogisticRegression::fit(&to64(fit.0), dim, fit.1, opts)?;
    Ok(probe.accuracy(&to64(held.0), held.1))
}
