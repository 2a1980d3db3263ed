//! Labelled image sets: the procedural generator, train/test split and the
//! binary dataset file.

use std::collections::HashSet;
use std::f32::consts::PI;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{fnv1a, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NOVODATA";
const VERSION: u32 = 1;
const HEADER_BYTES: usize = 8 + 4 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

impl SplitTag {
    fn code(self) -> u32 {
        match self {
            SplitTag::Full => 0,
            SplitTag::Train => 1,
            SplitTag::Test => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(SplitTag::Full),
            1 => Some(SplitTag::Train),
            2 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        })
    }
}

/// Images stored `[count, height, width, channels]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
        split: SplitTag,
    ) -> Result<Self> {
        let ds = Dataset {
            height,
            width,
            channels,
            classes,
            images,
            labels,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.image_len() {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {}x{}x{}",
                self.images.len(),
                self.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.classes) {
            return Err(Error::Data(format!("label {y} of sample {i} outside {} classes", self.classes)));
        }
        if let Some(i) = self.images.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite pixel at value index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Copy of the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }

    /// Samples whose label satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx, self.split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn sample_hash(&self, i: usize) -> u64 {
        fnv1a(self.image(i).iter().flat_map(|v| v.to_bits().to_le_bytes()))
    }

    /// Hash of the whole dataset (pixels, labels and shape).
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for v in [self.len(), self.height, self.width, self.channels, self.classes] {
            w.u32(v as u32);
        }
        w.u32(self.split.code());
        w.u32(4);
        w.f32s(&self.images);
        for &y in &self.labels {
            w.u32(y as u32);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, not a dataset file".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return r.fail(format!("unsupported dataset version {version}"));
        }
        let count = r.u32("count")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let channels = r.u32("channels")? as usize;
        let classes = r.u32("classes")? as usize;
        let split_code = r.u32("split")?;
        let split = match SplitTag::from_code(split_code) {
            Some(s) => s,
            None => return r.fail(format!("unknown split tag {split_code}")),
        };
        let label_width = r.u32("label width")?;
        if label_width != 4 {
            return r.fail(format!("unsupported label width {label_width}"));
        }
        debug_assert_eq!(r.pos, HEADER_BYTES);
        let pixels = count as u128 * height as u128 * width as u128 * channels as u128;
        let expected = pixels * 4 + count as u128 * 4;
        if expected != r.remaining() as u128 {
            return r.fail(format!(
                "payload for {count} images of {height}x{width}x{channels}: expected {expected} bytes, found {}",
                r.remaining()
            ));
        }
        let images = r.f32s(pixels as usize, "pixels")?;
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(r.u32("label")? as usize);
        }
        r.finish()?;
        Dataset::new(height, width, channels, classes, images, labels, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

/// Indices `(train, test)` of a seeded split; depends only on `(seed, count)`.
pub fn split_indices(count: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (count as f64 * test_fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&train, SplitTag::Train), ds.subset(&test, SplitTag::Test)))
}

/// True when no image of `a` has the same content hash as an image of `b`.
pub fn disjoint(a: &Dataset, b: &Dataset) -> bool {
    let seen: HashSet<u64> = (0..a.len()).map(|i| a.sample_hash(i)).collect();
    (0..b.len()).all(|i| !seen.contains(&b.sample_hash(i)))
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            per_class: 200,
            height: 16,
            width: 16,
            channels: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Parameters of one class's grating.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPattern {
    /// Cycles across the image.
    pub frequency: f32,
    pub orientation: f32,
    pub phase: f32,
    pub colour: Vec<f32>,
    /// The class built to resemble this one.
    pub partner: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub patterns: Vec<ClassPattern>,
    /// Row-major `classes x classes` cosine similarity of mean-centred templates.
    pub similarity: Vec<f64>,
}

const AMPLITUDE: f32 = 0.25;
/// Orientation offset between partners, divided by the grating frequency.
const PAIR_TURN: f32 = 0.3;
/// Frequency offset between partners, in cycles across the image.
const PAIR_SHIFT: f32 = 0.15;

fn patterns(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<ClassPattern> {
    let pairs = spec.classes.div_ceil(2);
    let mut out = Vec::with_capacity(spec.classes);
    for p in 0..pairs {
        let base = ClassPattern {
            frequency: rng.random_range(1.0..3.0),
            orientation: p as f32 * PI / pairs as f32 + rng.random_range(-0.1..0.1),
            phase: rng.random_range(0.0..2.0 * PI),
            colour: (0..spec.channels).map(|_| rng.random_range(0.3..0.7)).collect(),
            partner: None,
        };
        let (a, b) = (2 * p, 2 * p + 1);
        if b < spec.classes {
            let twin = ClassPattern {
                frequency: base.frequency + PAIR_SHIFT,
                orientation: base.orientation + PAIR_TURN / base.frequency,
                partner: Some(a),
                ..base.clone()
            };
            out.push(ClassPattern {
                partner: Some(b),
                ..base
            });
            out.push(twin);
        } else {
            out.push(base);
        }
    }
    out
}

fn render(spec: &SynthSpec, p: &ClassPattern) -> Vec<f32> {
    let (c, s) = (p.orientation.cos(), p.orientation.sin());
    let mut img = Vec::with_capacity(spec.height * spec.width * spec.channels);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let u = (x as f32 + 0.5) / spec.width as f32 - 0.5;
            let v = (y as f32 + 0.5) / spec.height as f32 - 0.5;
            let g = (2.0 * PI * p.frequency * (u * c + v * s) + p.phase).sin();
            for ch in 0..spec.channels {
                // alternate channels see the grating with opposite sign
                let sign = if ch % 2 == 0 { 1.0 } else { -1.0 };
                img.push(p.colour[ch] + sign * AMPLITUDE * g);
            }
        }
    }
    img
}

fn cosine_similarity(templates: &[Vec<f32>]) -> Vec<f64> {
    let n = templates.len();
    let len = templates[0].len();
    let mean: Vec<f64> = (0..len)
        .map(|j| templates.iter().map(|t| t[j] as f64).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = templates
        .iter()
        .map(|t| t.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
        .collect();
    let norm: Vec<f64> = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            sim[i * n + j] = dot / (norm[i] * norm[j]).max(1e-12);
        }
    }
    sim
}

/// Procedural class patterns: a sinusoid grating plus a colour bias per
/// class, with Gaussian pixel noise. Classes `(0,1), (2,3), ..` share colour
/// and have nearby orientation and frequency; with an odd count the last
/// class has no partner.
pub fn synth_generate(spec: &SynthSpec) -> Result<Synthetic> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise {} must be finite and >= 0", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns = patterns(spec, &mut rng);
    let templates: Vec<Vec<f32>> = patterns.iter().map(|p| render(spec, p)).collect();
    let noise = Normal::new(0.0f32, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let count = spec.classes * spec.per_class;
    let mut images = Vec::with_capacity(count * templates[0].len());
    let mut labels = Vec::with_capacity(count);
    for _ in 0..spec.per_class {
        for (class, t) in templates.iter().enumerate() {
            images.extend(t.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    let dataset = Dataset::new(
        spec.height,
        spec.width,
        spec.channels,
        spec.classes,
        images,
        labels,
        SplitTag::Full,
    )?;
    Ok(Synthetic {
        dataset,
        similarity: cosine_similarity(&templates),
        patterns,
    })
}

/// Most similar other class among `candidates`, by the similarity matrix.
pub fn nearest_neighbor(similarity: &[f64], classes: usize, class: usize, candidates: &[usize]) -> Option<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&c| c != class)
        .max_by(|&a, &b| similarity[class * classes + a].total_cmp(&similarity[class * classes + b]))
}
