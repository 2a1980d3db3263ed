//! The prompt-keyed vision transformer.
//!
//! Images are cut into patches and embedded; a retain token (LT) and a
//! forget token (UT) are computed from the active/withdrawn class vectors
//! and spliced in right after CLS. The same two tokens overwrite rows 1 and 2
//! before every later encoder layer, and the classifier reads the final CLS,
//! LT and UT rows together.

use rand::Rng;

use crate::batch::MultiHotClassSet;
use crate::codec::fnv1a;
use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Element, Tensor};

const LN_EPS: f64 = 1e-5;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    /// Width of the hidden and output layers of the key networks.
    pub token_hidden: usize,
    /// `false` builds the conventional prompt-free model.
    pub keyed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
            dim: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            classes: 8,
            token_hidden: 32,
            keyed: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.height, self.width, self.patch, self.patch
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.layers == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.token_hidden == 0 {
            return bad("layers, channels, mlp_ratio and token_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Leading tokens per sample: CLS, plus LT and UT when keyed.
    pub fn prefix_tokens(&self) -> usize {
        if self.keyed {
            3
        } else {
            1
        }
    }

    pub fn tokens(&self) -> usize {
        self.prefix_tokens() + self.num_patches()
    }
}

/// Affine map `x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T = Tensor> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T = Tensor> {
    pub norm1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Backbone parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub patch_embed: Linear<T>,
    pub cls_token: T,
    pub pos_embed: T,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_norm: Norm<T>,
    /// `[prefix_tokens * dim, classes]`.
    pub classifier: Linear<T>,
}

/// Two-layer GELU network from a class vector to a token-sized code.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenNet<T = Tensor> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Class-key parameters: retain/forget token networks and their projections.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptKeys<T = Tensor> {
    pub retain_net: TokenNet<T>,
    pub forget_net: TokenNet<T>,
    pub retain_proj: Linear<T>,
    pub forget_proj: Linear<T>,
    /// Frozen all-zero vector OR-ed into the forget input; never trained.
    pub forget_prior: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub keys: Option<PromptKeys<T>>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(p, "weight"), &self.weight);
        f(join(p, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(p, "weight"), &mut self.weight);
        f(join(p, "bias"), &mut self.bias);
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(p, "gain"), &self.gain);
        f(join(p, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(p, "gain"), &mut self.gain);
        f(join(p, "bias"), &mut self.bias);
    }
}

impl<T> EncoderLayer<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            norm1: self.norm1.map(f),
            qkv: self.qkv.map(f),
            proj: self.proj.map(f),
            norm2: self.norm2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        self.norm1.visit(&join(p, "norm1"), f);
        self.qkv.visit(&join(p, "qkv"), f);
        self.proj.visit(&join(p, "proj"), f);
        self.norm2.visit(&join(p, "norm2"), f);
        self.fc1.visit(&join(p, "fc1"), f);
        self.fc2.visit(&join(p, "fc2"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        self.norm1.visit_mut(&join(p, "norm1"), f);
        self.qkv.visit_mut(&join(p, "qkv"), f);
        self.proj.visit_mut(&join(p, "proj"), f);
        self.norm2.visit_mut(&join(p, "norm2"), f);
        self.fc1.visit_mut(&join(p, "fc1"), f);
        self.fc2.visit_mut(&join(p, "fc2"), f);
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            patch_embed: self.patch_embed.map(f),
            cls_token: f(&self.cls_token),
            pos_embed: f(&self.pos_embed),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            classifier: self.classifier.map(f),
        }
    }
    pub fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        self.patch_embed.visit(&join(p, "patch_embed"), f);
        f(join(p, "cls_token"), &self.cls_token);
        f(join(p, "pos_embed"), &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(p, &format!("layers.{i}")), f);
        }
        self.final_norm.visit(&join(p, "final_norm"), f);
        self.classifier.visit(&join(p, "classifier"), f);
    }
    pub fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        self.patch_embed.visit_mut(&join(p, "patch_embed"), f);
        f(join(p, "cls_token"), &mut self.cls_token);
        f(join(p, "pos_embed"), &mut self.pos_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(p, &format!("layers.{i}")), f);
        }
        self.final_norm.visit_mut(&join(p, "final_norm"), f);
        self.classifier.visit_mut(&join(p, "classifier"), f);
    }
}

impl<T> TokenNet<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TokenNet<U> {
        TokenNet {
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        self.fc1.visit(&join(p, "fc1"), f);
        self.fc2.visit(&join(p, "fc2"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        self.fc1.visit_mut(&join(p, "fc1"), f);
        self.fc2.visit_mut(&join(p, "fc2"), f);
    }
}

impl<T> PromptKeys<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PromptKeys<U> {
        PromptKeys {
            retain_net: self.retain_net.map(f),
            forget_net: self.forget_net.map(f),
            retain_proj: self.retain_proj.map(f),
            forget_proj: self.forget_proj.map(f),
            forget_prior: self.forget_prior.clone(),
        }
    }
    /// Trainable key parameters only; `forget_prior` is not visited.
    pub fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        self.retain_net.visit(&join(p, "retain_net"), f);
        self.forget_net.visit(&join(p, "forget_net"), f);
        self.retain_proj.visit(&join(p, "retain_proj"), f);
        self.forget_proj.visit(&join(p, "forget_proj"), f);
    }
    pub fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        self.retain_net.visit_mut(&join(p, "retain_net"), f);
        self.forget_net.visit_mut(&join(p, "forget_net"), f);
        self.retain_proj.visit_mut(&join(p, "retain_proj"), f);
        self.forget_proj.visit_mut(&join(p, "forget_proj"), f);
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            keys: self.keys.as_ref().map(|k| k.map(f)),
        }
    }
    /// Every trainable parameter in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.encoder.visit("encoder", f);
        if let Some(k) = &self.keys {
            k.visit("keys", f);
        }
    }
    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.encoder.visit_mut("encoder", f);
        if let Some(k) = &mut self.keys {
            k.visit_mut("keys", f);
        }
    }
}

fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Linear {
    Linear {
        weight: Tensor::xavier(fan_in, fan_out, rng).with_grad(),
        bias: Tensor::zeros(&[fan_out]).with_grad(),
    }
}

fn norm_init(dim: usize) -> Norm {
    Norm {
        gain: Tensor::ones(&[dim]).with_grad(),
        bias: Tensor::zeros(&[dim]).with_grad(),
    }
}

/// Which final-layer token to read as a feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureToken {
    Cls,
    Lt,
    Ut,
}

impl FeatureToken {
    pub fn row(self) -> usize {
        match self {
            FeatureToken::Cls => 0,
            FeatureToken::Lt => 1,
            FeatureToken::Ut => 2,
        }
    }
}

impl std::str::FromStr for FeatureToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CLS" => Ok(FeatureToken::Cls),
            "LT" => Ok(FeatureToken::Lt),
            "UT" => Ok(FeatureToken::Ut),
            _ => Err(Error::Usage(format!("unknown token {s:?}, expected CLS, LT or UT"))),
        }
    }
}

/// Values recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[batch, classes]`.
    pub logits: Var,
    /// Output of every encoder layer, `[batch*tokens, dim]`.
    pub hidden: Vec<Var>,
    /// Final hidden state after the output norm; rows feed the classifier.
    pub final_hidden: Var,
    pub prompts: Option<(Var, Var)>,
    pub tokens: usize,
    pub batch: usize,
}

fn linear<F: Element>(tape: &mut Tape<F>, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_tiled(y, l.bias)
}

fn token_net<F: Element>(tape: &mut Tape<F>, x: Var, n: &TokenNet<Var>) -> Result<Var> {
    let h = linear(tape, x, &n.fc1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, &n.fc2)
}

/// Retain and forget tokens, each `[1, dim]`, from the class vectors.
///
/// The forget network sees `forget_prior OR forget`, computed as an
/// elementwise max.
pub fn make_prompts<F: Element>(
    tape: &mut Tape<F>,
    keys: &PromptKeys<Var>,
    retain: &MultiHotClassSet,
    forget: &MultiHotClassSet,
) -> Result<(Var, Var)> {
    let c = keys.forget_prior.numel();
    if retain.len() != c || forget.len() != c {
        return Err(Error::shape("make_prompts", &[retain.len(), forget.len()], &[c]));
    }
    let forget_in: Vec<f32> = keys
        .forget_prior
        .data()
        .iter()
        .zip(forget.to_f32())
        .map(|(&h, u)| h.max(u))
        .collect();
    let a = tape.constant(&Tensor::new(vec![1, c], retain.to_f32())?);
    let u = tape.constant(&Tensor::new(vec![1, c], forget_in)?);
    let lt = token_net(tape, a, &keys.retain_net)?;
    let lt = linear(tape, lt, &keys.retain_proj)?;
    let ut = token_net(tape, u, &keys.forget_net)?;
    let ut = linear(tape, ut, &keys.forget_proj)?;
    Ok((lt, ut))
}

/// `[CLS, LT, UT, patches..]` per sample from `[batch*k, d]` patch tokens.
pub fn inject<F: Element>(tape: &mut Tape<F>, cls: Var, lt: Var, ut: Var, patches: Var, per_sample: usize) -> Result<Var> {
    let prefix = tape.concat_rows(&[cls, lt, ut])?;
    tape.assemble_tokens(prefix, patches, per_sample)
}

/// Overwrite rows 1 and 2 of every sample with fresh LT and UT.
pub fn reinject<F: Element>(tape: &mut Tape<F>, hidden: Var, lt: Var, ut: Var, tokens: usize) -> Result<Var> {
    let src = tape.concat_rows(&[lt, ut])?;
    tape.overwrite_rows(hidden, src, tokens, 1)
}

fn encoder_layer<F: Element>(
    tape: &mut Tape<F>,
    h: Var,
    l: &EncoderLayer<Var>,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<Var> {
    let eps = F::from_f64(LN_EPS).unwrap();
    let n = tape.layer_norm(h, l.norm1.gain, l.norm1.bias, eps)?;
    let qkv = linear(tape, n, &l.qkv)?;
    let a = tape.attention(qkv, batch, tokens, heads)?;
    let o = linear(tape, a, &l.proj)?;
    let h = tape.add(h, o)?;
    let n = tape.layer_norm(h, l.norm2.gain, l.norm2.bias, eps)?;
    let f = linear(tape, n, &l.fc1)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, f, &l.fc2)?;
    tape.add(h, f)
}

/// Cut `[batch, H, W, C]` pixels into `[batch*patches, patch*patch*C]` rows.
pub fn patchify(cfg: &ModelConfig, pixels: &[f32], batch: usize) -> Result<Tensor> {
    cfg.validate()?;
    if pixels.len() != batch * cfg.image_len() {
        return Err(Error::shape(
            "patchify",
            &[pixels.len()],
            &[batch, cfg.height, cfg.width, cfg.channels],
        ));
    }
    let (ps, ch, w) = (cfg.patch, cfg.channels, cfg.width);
    let (gh, gw) = (cfg.height / ps, cfg.width / ps);
    let mut out = Vec::with_capacity(pixels.len());
    for b in 0..batch {
        let img = &pixels[b * cfg.image_len()..(b + 1) * cfg.image_len()];
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..ps {
                    let row = (py * ps + dy) * w + px * ps;
                    out.extend_from_slice(&img[row * ch..(row + ps) * ch]);
                }
            }
        }
    }
    Tensor::new(vec![batch * cfg.num_patches(), cfg.patch_pixels()], out)
}

/// Full forward pass for a batch sharing one `(retain, forget)` pair.
///
/// `keys` must be given exactly when the model is keyed.
pub fn forward<F: Element>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    patches: Var,
    batch: usize,
    keys: Option<(&MultiHotClassSet, &MultiHotClassSet)>,
) -> Result<ForwardTrace> {
    let enc = &params.encoder;
    let k = cfg.num_patches();
    let x = linear(tape, patches, &enc.patch_embed)?;
    let x = tape.add_tiled(x, enc.pos_embed)?;
    let tokens = cfg.tokens();
    let (mut h, prompts) = match (&params.keys, keys) {
        (Some(pk), Some((a, u))) => {
            let (lt, ut) = make_prompts(tape, pk, a, u)?;
            (inject(tape, enc.cls_token, lt, ut, x, k)?, Some((lt, ut)))
        }
        (None, None) => (tape.assemble_tokens(enc.cls_token, x, k)?, None),
        (Some(_), None) => return Err(Error::Contract("keyed model needs retain/forget vectors".into())),
        (None, Some(_)) => return Err(Error::Contract("plain model takes no class keys".into())),
    };
    let mut hidden = Vec::with_capacity(enc.layers.len());
    for (i, layer) in enc.layers.iter().enumerate() {
        if let (Some((lt, ut)), true) = (prompts, i > 0) {
            h = reinject(tape, h, lt, ut, tokens)?;
        }
        h = encoder_layer(tape, h, layer, batch, tokens, cfg.heads)?;
        hidden.push(h);
    }
    let eps = F::from_f64(LN_EPS).unwrap();
    let final_hidden = tape.layer_norm(h, enc.final_norm.gain, enc.final_norm.bias, eps)?;
    let head_in = tape.gather_block_rows(final_hidden, tokens, 0, cfg.prefix_tokens())?;
    let logits = linear(tape, head_in, &enc.classifier)?;
    Ok(ForwardTrace {
        logits,
        hidden,
        final_hidden,
        prompts,
        tokens,
        batch,
    })
}

/// Model configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Keyed-model inputs for inference: which classes are active/withdrawn.
pub type KeyPair<'a> = Option<(&'a MultiHotClassSet, &'a MultiHotClassSet)>;

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                norm1: norm_init(d),
                qkv: linear_init(d, 3 * d, rng),
                proj: linear_init(d, d, rng),
                norm2: norm_init(d),
                fc1: linear_init(d, hidden, rng),
                fc2: linear_init(hidden, d, rng),
            })
            .collect();
        let encoder = EncoderParams {
            patch_embed: linear_init(config.patch_pixels(), d, rng),
            cls_token: Tensor::randn(&[1, d], 0.02, rng).with_grad(),
            pos_embed: Tensor::randn(&[config.num_patches(), d], 0.02, rng).with_grad(),
            layers,
            final_norm: norm_init(d),
            classifier: linear_init(config.prefix_tokens() * d, config.classes, rng),
        };
        let keys = config.keyed.then(|| {
            let c = config.classes;
            let th = config.token_hidden;
            let net = |rng: &mut R| TokenNet {
                fc1: linear_init(c, th, rng),
                fc2: linear_init(th, th, rng),
            };
            PromptKeys {
                retain_net: net(rng),
                forget_net: net(rng),
                retain_proj: linear_init(th, d, rng),
                forget_proj: linear_init(th, d, rng),
                forget_prior: Tensor::zeros(&[c]),
            }
        });
        Ok(Model {
            config,
            params: ModelParams { encoder, keys },
        })
    }

    pub fn keyed(&self) -> bool {
        self.params.keys.is_some()
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn key_param_count(&self) -> usize {
        let mut n = 0;
        if let Some(k) = &self.params.keys {
            k.visit("", &mut |_, t: &Tensor| n += t.numel());
        }
        n
    }

    /// Register all trainable parameters as gradient leaves.
    pub fn bind<F: Element>(&self, tape: &mut Tape<F>) -> ModelParams<Var> {
        self.params.map(&mut |t| tape.param(t))
    }

    /// Register parameters as constants (no gradient bookkeeping).
    pub fn bind_frozen<F: Element>(&self, tape: &mut Tape<F>) -> ModelParams<Var> {
        self.params.map(&mut |t| tape.constant(t))
    }

    /// Store gradients from `grads` into each parameter's `grad` slot.
    pub fn store_grads(&mut self, vars: &ModelParams<Var>, grads: &mut Gradients<f32>) -> Result<()> {
        let mut order = Vec::new();
        vars.visit(&mut |_, v| order.push(*v));
        let mut i = 0;
        let mut result = Ok(());
        self.params.visit_mut(&mut |_, t| {
            let g = grads.take(order[i]).unwrap_or_else(|| vec![0.0; t.numel()]);
            if result.is_ok() {
                result = t.set_grad(g);
            }
            i += 1;
        });
        result
    }

    /// FNV-1a over every parameter bit pattern, including the frozen prior.
    pub fn checksum(&self) -> u64 {
        let mut all: Vec<&Tensor> = Vec::new();
        self.params.visit(&mut |_, t| all.push(t));
        if let Some(k) = &self.params.keys {
            all.push(&k.forget_prior);
        }
        fnv1a(all.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_bits().to_le_bytes())))
    }

    fn check_keys(&self, keys: KeyPair<'_>) -> Result<()> {
        match (self.keyed(), keys) {
            (true, Some((a, u))) if a.len() == self.config.classes && u.len() == self.config.classes => Ok(()),
            (true, Some((a, _))) => Err(Error::shape("class vector", &[a.len()], &[self.config.classes])),
            (true, None) => Err(Error::Contract("keyed model needs retain/forget vectors".into())),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::Contract("plain model takes no class keys".into())),
        }
    }

    /// Inference-only forward over a batch of images in `[n, H, W, C]` layout.
    /// Returns logits `[n, classes]` and the post-norm hidden state.
    pub fn infer(&self, pixels: &[f32], n: usize, keys: KeyPair<'_>) -> Result<(Tensor, Tensor)> {
        self.check_keys(keys)?;
        let mut tape = Tape::<f32>::new();
        let vars = self.bind_frozen(&mut tape);
        let patches = patchify(&self.config, pixels, n)?;
        let p = tape.constant(&patches);
        let trace = forward(&mut tape, &self.config, &vars, p, n, keys)?;
        Ok((tape.to_tensor(trace.logits), tape.to_tensor(trace.final_hidden)))
    }

    /// Logits for `n` images, evaluated in chunks.
    pub fn logits(&self, pixels: &[f32], n: usize, keys: KeyPair<'_>) -> Result<Tensor> {
        const CHUNK: usize = 128;
        let len = self.config.image_len();
        let mut out = Vec::with_capacity(n * self.config.classes);
        let mut start = 0;
        while start < n {
            let m = CHUNK.min(n - start);
            let (l, _) = self.infer(&pixels[start * len..(start + m) * len], m, keys)?;
            out.extend_from_slice(l.data());
            start += m;
        }
        Tensor::new(vec![n, self.config.classes], out)
    }

    /// Final-layer row of the chosen token for each of `n` images: `[n, dim]`.
    pub fn extract_features(&self, pixels: &[f32], n: usize, keys: KeyPair<'_>, which: FeatureToken) -> Result<Tensor> {
        if !self.keyed() && which != FeatureToken::Cls {
            return Err(Error::Usage(format!("{which:?} token does not exist in a plain model")));
        }
        const CHUNK: usize = 128;
        let len = self.config.image_len();
        let d = self.config.dim;
        let tokens = self.config.tokens();
        let mut out = Vec::with_capacity(n * d);
        let mut start = 0;
        while start < n {
            let m = CHUNK.min(n - start);
            let (_, hidden) = self.infer(&pixels[start * len..(start + m) * len], m, keys)?;
            for b in 0..m {
                out.extend_from_slice(hidden.row(b * tokens + which.row()));
            }
            start += m;
        }
        Tensor::new(vec![n, d], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{complement, multi_hot};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            channels: 1,
            patch: 4,
            dim: 8,
            heads: 2,
            layers: 2,
            mlp_ratio: 2,
            classes: 4,
            token_hidden: 8,
            keyed: true,
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[cfg.image_len()], 0.5, &mut rng).into_data()
    }

    #[test]
    fn forget_prior_or_is_identity() {
        let u = MultiHotClassSet::from_bits(vec![0, 1, 1, 0]).unwrap();
        let prior = MultiHotClassSet::zeros(4);
        assert_eq!(prior.or(&u).unwrap(), u);
    }

    #[test]
    fn prompt_shapes_and_zero_input() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = model.bind(&mut tape);
        let keys = vars.keys.as_ref().unwrap();
        let zero = MultiHotClassSet::zeros(4);
        let ones = MultiHotClassSet::ones(4);
        let (lt, ut) = make_prompts(&mut tape, keys, &zero, &ones).unwrap();
        assert_eq!(tape.shape(lt), &[1, cfg.dim]);
        assert_eq!(tape.shape(ut), &[1, cfg.dim]);

        // A = 0 leaves only the bias pathway: fc2(gelu(b1)) then projection
        let k = &model.params.keys.as_ref().unwrap();
        let gelu = |x: f32| {
            let u = 0.797_884_6 * (x + 0.044_715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };
        let h1: Vec<f32> = k.retain_net.fc1.bias.data().iter().map(|&b| gelu(b)).collect();
        let mat = |x: &[f32], l: &Linear| -> Vec<f32> {
            let (i, o) = (l.weight.shape()[0], l.weight.shape()[1]);
            (0..o)
                .map(|j| (0..i).map(|r| x[r] * l.weight.data()[r * o + j]).sum::<f32>() + l.bias.data()[j])
                .collect()
        };
        let expect = mat(&mat(&h1, &k.retain_net.fc2), &k.retain_proj);
        for (a, b) in tape.value(lt).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5);
        }

        let short = MultiHotClassSet::zeros(3);
        assert!(make_prompts(&mut tape, keys, &short, &ones).is_err());
    }

    #[test]
    fn inject_and_reinject_layout() {
        let mut tape = Tape::<f32>::new();
        let row = |tape: &mut Tape<f32>, v: f32| tape.constant(&Tensor::new(vec![1, 2], vec![v, v]).unwrap());
        let cls = row(&mut tape, 0.0);
        let lt = row(&mut tape, 1.0);
        let ut = row(&mut tape, 2.0);
        let patches = tape.constant(&Tensor::new(vec![2, 2], vec![5., 5., 6., 6.]).unwrap());
        let x = inject(&mut tape, cls, lt, ut, patches, 2).unwrap();
        assert_eq!(tape.value(x), &[0., 0., 1., 1., 2., 2., 5., 5., 6., 6.]);

        let empty = tape.constant(&Tensor::zeros(&[0, 2]));
        assert!(inject(&mut tape, cls, lt, ut, empty, 0).is_err());

        let lt2 = row(&mut tape, 8.0);
        let ut2 = row(&mut tape, 9.0);
        let y = reinject(&mut tape, x, lt2, ut2, 5).unwrap();
        let z = reinject(&mut tape, y, lt2, ut2, 5).unwrap();
        assert_eq!(tape.value(y), tape.value(z));
        assert_eq!(tape.value(y), &[0., 0., 8., 8., 9., 9., 5., 5., 6., 6.]);
    }

    #[test]
    fn forward_shapes_and_token_counts() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = model.bind_frozen(&mut tape);
        let px: Vec<f32> = (0..3).flat_map(|s| image(&cfg, s)).collect();
        let p = tape.constant(&patchify(&cfg, &px, 3).unwrap());
        let a = MultiHotClassSet::ones(4);
        let u = complement(&a);
        let tr = forward(&mut tape, &cfg, &vars, p, 3, Some((&a, &u))).unwrap();
        assert_eq!(tape.shape(tr.logits), &[3, 4]);
        assert_eq!(tr.tokens, 2 + 1 + cfg.num_patches());
        for h in &tr.hidden {
            assert_eq!(tape.shape(*h), &[3 * tr.tokens, cfg.dim]);
        }
        assert!(tape.value(tr.logits).iter().all(|v| v.is_finite()));
        assert_eq!(model.params.encoder.classifier.weight.shape()[0], 3 * cfg.dim);
    }

    #[test]
    fn flipping_one_forget_bit_changes_logits() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let px = image(&cfg, 7);
        let a = multi_hot([0, 1, 2, 3], 4).unwrap();
        let u = complement(&a);
        let base = model.logits(&px, 1, Some((&a, &u))).unwrap();
        let a2 = multi_hot([0, 1, 2], 4).unwrap();
        let u2 = complement(&a2);
        let moved = model.logits(&px, 1, Some((&a2, &u2))).unwrap();
        let diff: f32 = base.data().iter().zip(moved.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-4, "logit change {diff}");
    }

    #[test]
    fn single_layer_forward_has_no_reinjection() {
        // With one layer the deep-prompt path reduces to input injection only.
        let cfg = ModelConfig { layers: 1, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let px = image(&cfg, 1);
        let a = MultiHotClassSet::ones(4);
        let u = complement(&a);
        let mut tape = Tape::<f32>::new();
        let vars = model.bind_frozen(&mut tape);
        let p = tape.constant(&patchify(&cfg, &px, 1).unwrap());
        let tr = forward(&mut tape, &cfg, &vars, p, 1, Some((&a, &u))).unwrap();
        let got = tape.value(tr.logits).to_vec();

        // manual: inject, one layer, norm, head
        let mut t2 = Tape::<f32>::new();
        let v2 = model.bind_frozen(&mut t2);
        let p2 = t2.constant(&patchify(&cfg, &px, 1).unwrap());
        let keys = v2.keys.as_ref().unwrap();
        let (lt, ut) = make_prompts(&mut t2, keys, &a, &u).unwrap();
        let x = linear(&mut t2, p2, &v2.encoder.patch_embed).unwrap();
        let x = t2.add_tiled(x, v2.encoder.pos_embed).unwrap();
        let h = inject(&mut t2, v2.encoder.cls_token, lt, ut, x, cfg.num_patches()).unwrap();
        let h = encoder_layer(&mut t2, h, &v2.encoder.layers[0], 1, cfg.tokens(), cfg.heads).unwrap();
        let fnorm = &v2.encoder.final_norm;
        let h = t2.layer_norm(h, fnorm.gain, fnorm.bias, 1e-5).unwrap();
        let head = t2.gather_block_rows(h, cfg.tokens(), 0, 3).unwrap();
        let l = linear(&mut t2, head, &v2.encoder.classifier).unwrap();
        assert_eq!(t2.value(l), &got[..]);
    }

    #[test]
    fn features_pick_rows_and_are_deterministic() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let px = image(&cfg, 2);
        let a = multi_hot([0, 2], 4).unwrap();
        let u = complement(&a);
        let f1 = model.extract_features(&px, 1, Some((&a, &u)), FeatureToken::Ut).unwrap();
        let f2 = model.extract_features(&px, 1, Some((&a, &u)), FeatureToken::Ut).unwrap();
        assert!(f1.bit_eq(&f2));
        let (_, hidden) = model.infer(&px, 1, Some((&a, &u))).unwrap();
        assert_eq!(f1.data(), hidden.row(2));
        assert!("XYZ".parse::<FeatureToken>().is_err());
    }

    #[test]
    fn indivisible_patch_grid_is_config_error() {
        let cfg = ModelConfig { height: 10, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Model::new(cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn default_key_parameters_are_a_small_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(ModelConfig::default(), &mut rng).unwrap();
        let frac = model.key_param_count() as f64 / model.num_params() as f64;
        assert!(frac <= 0.05, "fraction {frac}");
        assert!(frac > 0.01);
        let prior = &model.params.keys.as_ref().unwrap().forget_prior;
        assert!(prior.data().iter().all(|&v| v == 0.0));
        let mut names = Vec::new();
        model.params.visit(&mut |n, _| names.push(n));
        assert!(!names.iter().any(|n| n.contains("prior")));
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let cfg = ModelConfig {
            height: 4,
            width: 4,
            channels: 1,
            patch: 2,
            ..small()
        };
        let px: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let p = patchify(&cfg, &px, 1).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0., 1., 4., 5.]);
        assert_eq!(p.row(1), &[2., 3., 6., 7.]);
        assert_eq!(p.row(3), &[10., 11., 14., 15.]);
    }
}
