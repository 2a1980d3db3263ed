//! Forgetting without gradient steps: which class keys are active, keyed
//! prediction, and sealing a withdrawal into a checkpoint.

use std::collections::BTreeSet;

use crate::batch::{complement, multi_hot, MultiHotClassSet};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{FeatureToken, Model};
use crate::tensor::Tensor;
use crate::trainer::argmax;

/// Active and withdrawn class keys. Values are immutable; every operation
/// returns a new state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyState {
    classes: usize,
    withdrawn: BTreeSet<usize>,
    /// Withdrawn classes whose keys no longer exist; these cannot be restored.
    sealed: BTreeSet<usize>,
}

impl KeyState {
    pub fn all_active(classes: usize) -> Self {
        KeyState {
            classes,
            withdrawn: BTreeSet::new(),
            sealed: BTreeSet::new(),
        }
    }

    /// Starting state for a checkpoint: its sealed classes stay withdrawn.
    pub fn for_checkpoint(ckpt: &Checkpoint) -> Self {
        let sealed: BTreeSet<usize> = ckpt.sealed.iter().copied().collect();
        KeyState {
            classes: ckpt.model.config.classes,
            withdrawn: sealed.clone(),
            sealed,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.classes).filter(|c| !self.withdrawn.contains(c)).collect()
    }

    pub fn withdrawn(&self) -> Vec<usize> {
        self.withdrawn.iter().copied().collect()
    }

    pub fn sealed(&self) -> Vec<usize> {
        self.sealed.iter().copied().collect()
    }

    pub fn is_withdrawn(&self, class: usize) -> bool {
        self.withdrawn.contains(&class)
    }

    /// No class is active; predictions carry no meaning.
    pub fn is_degenerate(&self) -> bool {
        self.withdrawn.len() == self.classes
    }

    fn check(&self, classes: &[usize]) -> Result<()> {
        match classes.iter().find(|&&c| c >= self.classes) {
            Some(&c) => Err(Error::Index {
                index: c,
                len: self.classes,
            }),
            None => Ok(()),
        }
    }

    pub fn withdraw(&self, classes: &[usize]) -> Result<KeyState> {
        self.check(classes)?;
        let mut next = self.clone();
        next.withdrawn.extend(classes.iter().copied());
        Ok(next)
    }

    /// Inverse of [`KeyState::withdraw`]. Restoring an active class is a no-op.
    pub fn restore(&self, classes: &[usize]) -> Result<KeyState> {
        self.check(classes)?;
        if let Some(c) = classes.iter().find(|c| self.sealed.contains(c)) {
            return Err(Error::Contract(format!("class {c} was sealed and its key no longer exists")));
        }
        let mut next = self.clone();
        for c in classes {
            next.withdrawn.remove(c);
        }
        Ok(next)
    }

    /// `(A, U)`: `U` marks withdrawn classes and `A` is its complement.
    pub fn pair(&self) -> (MultiHotClassSet, MultiHotClassSet) {
        let forget = multi_hot(self.withdrawn.iter().copied(), self.classes).expect("indices checked on insert");
        (complement(&forget), forget)
    }
}

/// Parse `"3,7"` into class indices; the empty string is the empty set.
pub fn parse_classes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Usage(format!("bad class index {t:?}"))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f32>,
    /// Set when every key was withdrawn.
    pub degenerate: bool,
}

fn keyed_run<T>(
    model: &Model,
    state: &KeyState,
    f: impl FnOnce(Option<(&MultiHotClassSet, &MultiHotClassSet)>) -> Result<T>,
) -> Result<T> {
    if state.classes != model.config.classes {
        return Err(Error::shape("key state", &[state.classes], &[model.config.classes]));
    }
    if model.keyed() {
        let (a, u) = state.pair();
        f(Some((&a, &u)))
    } else if state.withdrawn.is_empty() {
        f(None)
    } else {
        Err(Error::Contract("a plain model has no keys to withdraw".into()))
    }
}

/// Logits for `n` images under `state`.
pub fn state_logits(model: &Model, state: &KeyState, pixels: &[f32], n: usize) -> Result<Tensor> {
    keyed_run(model, state, |keys| model.logits(pixels, n, keys))
}

pub fn state_features(model: &Model, state: &KeyState, pixels: &[f32], n: usize, which: FeatureToken) -> Result<Tensor> {
    keyed_run(model, state, |keys| model.extract_features(pixels, n, keys, which))
}

/// Class and logits for one image. The argmax runs over all classes,
/// withdrawn ones included.
pub fn predict(model: &Model, state: &KeyState, image: &[f32]) -> Result<Prediction> {
    let len = model.config.image_len();
    if image.len() != len {
        return Err(Error::shape("predict image", &[image.len()], &[len]));
    }
    let logits = state_logits(model, state, image, 1)?.into_data();
    Ok(Prediction {
        class: argmax(&logits),
        logits,
        degenerate: state.is_degenerate(),
    })
}

/// Predicted classes for `n` images.
pub fn predict_batch(model: &Model, state: &KeyState, pixels: &[f32], n: usize) -> Result<Vec<usize>> {
    let logits = state_logits(model, state, pixels, n)?;
    Ok((0..n).map(|i| argmax(logits.row(i))).collect())
}

/// Bake the withdrawal in `state` into a new checkpoint.
///
/// Rows of the retain network's first layer for withdrawn classes are
/// zeroed; their input is 0 once withdrawn anyway. Rows of the forget
/// network's first layer for withdrawn classes are folded into its bias
/// (their input is 1 once withdrawn) and then zeroed. The sealed model
/// behaves the same whatever the withdrawn bits are set to, so restoring a
/// class no longer brings it back. Optimizer state is dropped.
pub fn seal(ckpt: &Checkpoint, state: &KeyState) -> Result<Checkpoint> {
    if state.classes != ckpt.model.config.classes {
        return Err(Error::shape("key state", &[state.classes], &[ckpt.model.config.classes]));
    }
    if let Some(c) = ckpt.sealed.iter().find(|c| !state.withdrawn.contains(c)) {
        return Err(Error::Contract(format!("sealed class {c} is missing from the key state")));
    }
    if state.withdrawn.is_empty() {
        return Err(Error::Usage("nothing to seal: no class is withdrawn".into()));
    }
    let mut out = ckpt.clone();
    let Some(keys) = out.model.params.keys.as_mut() else {
        return Err(Error::Contract("a plain model has no keys to seal".into()));
    };
    let retain = &mut keys.retain_net.fc1.weight;
    let width = retain.cols();
    for &c in &state.withdrawn {
        retain.data_mut()[c * width..(c + 1) * width].fill(0.0);
    }
    let forget = &mut keys.forget_net.fc1;
    let width = forget.weight.cols();
    for &c in &state.withdrawn {
        if ckpt.sealed.contains(&c) {
            continue;
        }
        let row = c * width..(c + 1) * width;
        let (w, b) = (forget.weight.data_mut(), forget.bias.data_mut());
        for (bj, wj) in b.iter_mut().zip(&mut w[row]) {
            *bj += *wj;
            *wj = 0.0;
        }
    }
    out.optimizer = None;
    out.sealed = state.withdrawn();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::trainer::Trainer;

    fn ckpt() -> Checkpoint {
        let mut c = TrainConfig::default();
        c.apply_text("classes=4\nheight=8\nwidth=8\nchannels=1\npatch=4\ndim=8\nheads=2\nlayers=2\nmlp_ratio=2\ntoken_hidden=8")
            .unwrap();
        Trainer::new(c).unwrap().checkpoint()
    }

    #[test]
    fn withdraw_restore_algebra() {
        let s = KeyState::all_active(5);
        assert_eq!(s.withdraw(&[]).unwrap(), s);
        let w = s.withdraw(&[1, 3]).unwrap();
        assert_eq!(w.withdraw(&[1, 3]).unwrap(), w);
        assert_eq!(w.active(), vec![0, 2, 4]);
        assert_eq!(w.restore(&[1, 3]).unwrap(), s);
        assert_eq!(s.restore(&[2]).unwrap(), s);
        assert_eq!(w.restore(&[]).unwrap(), w);
        assert_eq!(s.withdraw(&[1]).unwrap().withdraw(&[3]).unwrap(), w);
        assert!(matches!(s.withdraw(&[5]), Err(Error::Index { index: 5, len: 5 })));
        assert!(s.restore(&[7]).is_err());

        let all = s.withdraw(&[0, 1, 2, 3, 4]).unwrap();
        assert!(all.active().is_empty() && all.is_degenerate());
    }

    #[test]
    fn pair_is_complementary() {
        let (a, u) = KeyState::all_active(4).withdraw(&[2]).unwrap().pair();
        assert_eq!(a.bits(), &[1, 1, 0, 1]);
        assert_eq!(u.bits(), &[0, 0, 1, 0]);
        let (a, u) = KeyState::all_active(3).pair();
        assert_eq!((a.count(), u.count()), (3, 0));
    }

    #[test]
    fn parse_class_lists() {
        assert_eq!(parse_classes("3, 7").unwrap(), vec![3, 7]);
        assert!(parse_classes("").unwrap().is_empty());
        assert!(parse_classes("a").is_err());
    }

    #[test]
    fn predict_is_read_only_and_checks_shape() {
        let ck = ckpt();
        let sum = ck.model.checksum();
        let s = KeyState::all_active(4).withdraw(&[1]).unwrap();
        let img = vec![0.5; 64];
        let p = predict(&ck.model, &s, &img).unwrap();
        assert_eq!(p.logits.len(), 4);
        assert!(!p.degenerate);
        assert_eq!(ck.model.checksum(), sum);
        assert!(matches!(predict(&ck.model, &s, &img[..10]), Err(Error::Shape { .. })));
    }

    #[test]
    fn sealed_model_ignores_withdrawn_bits() {
        let ck = ckpt();
        let s = KeyState::all_active(4).withdraw(&[0, 2]).unwrap();
        let sealed = seal(&ck, &s).unwrap();
        assert_eq!(sealed.sealed, vec![0, 2]);
        assert!(sealed.optimizer.is_none());
        let back = Checkpoint::from_bytes(&sealed.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), sealed.to_bytes());

        let img: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        let runtime = predict(&ck.model, &s, &img).unwrap().logits;
        let baked = predict(&sealed.model, &KeyState::for_checkpoint(&sealed), &img).unwrap().logits;
        let reopened = predict(&sealed.model, &KeyState::all_active(4), &img).unwrap().logits;
        for ((r, b), o) in runtime.iter().zip(&baked).zip(&reopened) {
            assert!((r - b).abs() < 1e-5, "{runtime:?} vs {baked:?}");
            assert!((b - o).abs() < 1e-5);
        }
        assert!(KeyState::for_checkpoint(&sealed).restore(&[0]).is_err());
        assert!(seal(&ck, &KeyState::all_active(4)).is_err());
    }
}
