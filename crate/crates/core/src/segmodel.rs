//! One-hidden-layer ReLU softmax classifier applied per pixel, trained by
//! mini-batch SGD on ignore-filtered cross-entropy.
//!
//! Parameters are stored as f32 (the checkpoint format); the forward and
//! backward passes and the SGD state run in f64.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Result};
use crate::fusion::{extract_features_into, FeatureConfig};
use crate::imagecore::{Image, LabelMap, ProbMap, IGNORE};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FAMD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    in_dim: usize,
    hidden: usize,
    classes: usize,
    /// hidden × in_dim, row-major
    w1: Vec<f32>,
    b1: Vec<f32>,
    /// classes × hidden, row-major
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// Gradient of the loss with the same layout as [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &Model) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }
}

/// Uniform Glorot bound for a layer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded Glorot-uniform weights and zero biases.
pub fn init_model(in_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Model> {
    if in_dim == 0 || hidden == 0 || classes == 0 {
        return invalid(format!(
            "model dims must be positive, got {in_dim}/{hidden}/{classes}"
        ));
    }
    if classes > IGNORE as usize {
        return invalid(format!("at most {} classes supported", IGNORE));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a1 = glorot_bound(in_dim, hidden) as f32;
    let a2 = glorot_bound(hidden, classes) as f32;
    let w1 = (0..hidden * in_dim)
        .map(|_| rng.random_range(-a1..a1))
        .collect();
    let w2 = (0..classes * hidden)
        .map(|_| rng.random_range(-a2..a2))
        .collect();
    Ok(Model {
        in_dim,
        hidden,
        classes,
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; classes],
    })
}

impl Model {
    /// Builds a model from explicit parameter arrays.
    pub fn from_parts(
        in_dim: usize,
        hidden: usize,
        classes: usize,
        w1: Vec<f32>,
        b1: Vec<f32>,
        w2: Vec<f32>,
        b2: Vec<f32>,
    ) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || classes == 0 {
            return invalid("model dims must be positive");
        }
        if w1.len() != hidden * in_dim
            || b1.len() != hidden
            || w2.len() != classes * hidden
            || b2.len() != classes
        {
            return invalid("parameter array sizes do not match model dims");
        }
        Ok(Self {
            in_dim,
            hidden,
            classes,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn w1(&self) -> &[f32] {
        &self.w1
    }

    pub fn b1(&self) -> &[f32] {
        &self.b1
    }

    pub fn w2(&self) -> &[f32] {
        &self.w2
    }

    pub fn b2(&self) -> &[f32] {
        &self.b2
    }

    /// Mutable views of the four parameter tensors in declaration order.
    pub fn params_mut(&mut self) -> [&mut Vec<f32>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Class probabilities for one feature vector.
    pub fn forward(&self, features: &[f32]) -> Result<Vec<f32>> {
        if features.len() != self.in_dim {
            return invalid(format!(
                "feature length {} does not match model input {}",
                features.len(),
                self.in_dim
            ));
        }
        let net = Net::from_model(self);
        let mut scratch = Scratch::new(self);
        net.forward(features, &mut scratch);
        Ok(scratch.probs.iter().map(|&p| p as f32).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [self.in_dim, self.hidden, self.classes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            return format_err("not a model checkpoint");
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return format_err(format!("unsupported checkpoint version {version}"));
        }
        let (in_dim, hidden, classes) = (word(8) as usize, word(12) as usize, word(16) as usize);
        if in_dim == 0 || hidden == 0 || classes == 0 {
            return format_err("checkpoint has zero dimension");
        }
        let sizes = [hidden * in_dim, hidden, classes * hidden, classes];
        let total: usize = sizes.iter().sum();
        if bytes.len() != 20 + 4 * total {
            return format_err(format!(
                "checkpoint payload is {} bytes, expected {}",
                bytes.len() - 20,
                4 * total
            ));
        }
        let mut floats = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
        let (w1, b1, w2, b2) = (
            take(sizes[0]),
            take(sizes[1]),
            take(sizes[2]),
            take(sizes[3]),
        );
        Self::from_parts(in_dim, hidden, classes, w1, b1, w2, b2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// f64 working copy of the parameters.
#[derive(Clone)]
struct Net {
    in_dim: usize,
    hidden: usize,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct Scratch {
    pre: Vec<f64>,
    act: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    fn new(m: &Model) -> Self {
        Self {
            pre: vec![0.0; m.hidden],
            act: vec![0.0; m.hidden],
            probs: vec![0.0; m.classes],
            dlogits: vec![0.0; m.classes],
            dhidden: vec![0.0; m.hidden],
        }
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl Net {
    fn from_model(m: &Model) -> Self {
        Self {
            in_dim: m.in_dim,
            hidden: m.hidden,
            classes: m.classes,
            w1: widen(&m.w1),
            b1: widen(&m.b1),
            w2: widen(&m.w2),
            b2: widen(&m.b2),
        }
    }

    fn write_to(&self, m: &mut Model) {
        for (dst, src) in [
            (&mut m.w1, &self.w1),
            (&mut m.b1, &self.b1),
            (&mut m.w2, &self.w2),
            (&mut m.b2, &self.b2),
        ] {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s as f32;
            }
        }
    }

    fn forward(&self, x: &[f32], s: &mut Scratch) {
        for j in 0..self.hidden {
            let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
            let z = self.b1[j] + row.iter().zip(x).map(|(&w, &v)| w * v as f64).sum::<f64>();
            s.pre[j] = z;
            s.act[j] = z.max(0.0);
        }
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.classes {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            let z = self.b2[k] + row.iter().zip(&s.act).map(|(w, a)| w * a).sum::<f64>();
            s.probs[k] = z;
            max = max.max(z);
        }
        let mut total = 0.0;
        for p in s.probs.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        for p in s.probs.iter_mut() {
            *p /= total;
        }
    }

    /// Adds `scale ·` the cross-entropy gradient of one sample into `g` and
    /// returns the sample's cross-entropy.
    fn backward(
        &self,
        x: &[f32],
        label: usize,
        scale: f64,
        s: &mut Scratch,
        g: &mut Gradients,
    ) -> f64 {
        self.forward(x, s);
        let ce = -s.probs[label].max(f64::MIN_POSITIVE).ln();
        for k in 0..self.classes {
            s.dlogits[k] = scale * (s.probs[k] - if k == label { 1.0 } else { 0.0 });
        }
        s.dhidden.iter_mut().for_each(|d| *d = 0.0);
        for k in 0..self.classes {
            let d = s.dlogits[k];
            g.b2[k] += d;
            let grow = &mut g.w2[k * self.hidden..(k + 1) * self.hidden];
            let wrow = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            for j in 0..self.hidden {
                grow[j] += d * s.act[j];
                s.dhidden[j] += d * wrow[j];
            }
        }
        for j in 0..self.hidden {
            if s.pre[j] <= 0.0 {
                continue;
            }
            let d = s.dhidden[j];
            g.b1[j] += d;
            let grow = &mut g.w1[j * self.in_dim..(j + 1) * self.in_dim];
            for (gw, &v) in grow.iter_mut().zip(x) {
                *gw += d * v as f64;
            }
        }
        ce
    }

    fn weight_norm_sq(&self) -> f64 {
        self.w1.iter().chain(&self.w2).map(|w| w * w).sum()
    }
}

/// Labeled feature vectors stored contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: &[f32], label: u8) -> Result<()> {
        if features.len() != self.dim {
            return invalid(format!(
                "feature length {} does not match dataset dim {}",
                features.len(),
                self.dim
            ));
        }
        if label == IGNORE {
            return invalid("ignored pixels cannot be added to a training set");
        }
        self.features.extend_from_slice(features);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.dim != self.dim {
            return invalid("datasets disagree on feature dim");
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn features(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Up to `n` distinct non-IGNORE pixels of `labels`, drawn uniformly,
    /// with features gathered from `img`.
    pub fn sample_pixels(
        &mut self,
        img: &Image,
        labels: &LabelMap,
        n: usize,
        cfg: &FeatureConfig,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        if img.dims() != labels.dims() {
            return invalid("image and label map sizes differ");
        }
        if cfg.len(img.channels()) != self.dim {
            return invalid(format!(
                "feature config yields {} values, dataset expects {}",
                cfg.len(img.channels()),
                self.dim
            ));
        }
        let candidates: Vec<usize> = labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, _)| i)
            .collect();
        let take = n.min(candidates.len());
        let mut picks: Vec<usize> = index::sample(rng, candidates.len(), take)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        picks.sort_unstable();
        let mut buf = vec![0f32; self.dim];
        let w = img.width();
        for i in picks {
            extract_features_into(img, i % w, i / w, cfg, &mut buf)?;
            self.push(&buf, labels.data()[i])?;
        }
        Ok(take)
    }

    /// Samples up to `n_per_image` labeled pixels from every image, in
    /// order, from one generator seeded with `seed`.
    pub fn sample_images(
        images: &[Image],
        labels: &[LabelMap],
        n_per_image: usize,
        cfg: &FeatureConfig,
        seed: u64,
    ) -> Result<Self> {
        let Some(first) = images.first() else {
            return invalid("no images to sample from");
        };
        if images.len() != labels.len() {
            return invalid("every image needs a label map");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Dataset::new(cfg.len(first.channels()));
        for (img, lm) in images.iter().zip(labels) {
            set.sample_pixels(img, lm, n_per_image, cfg, &mut rng)?;
        }
        Ok(set)
    }
}

/// Mean cross-entropy over `batch` plus `l2 / 2 · ‖W‖²` (weights only),
/// with the gradient of that loss.
pub fn loss_and_grad(
    model: &Model,
    data: &Dataset,
    batch: &[usize],
    l2: f64,
) -> Result<(f64, Gradients)> {
    let net = Net::from_model(model);
    batch_loss_and_grad(&net, model, data, batch, l2)
}

fn batch_loss_and_grad(
    net: &Net,
    shape: &Model,
    data: &Dataset,
    batch: &[usize],
    l2: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if data.dim != net.in_dim {
        return invalid(format!(
            "dataset dim {} does not match model input {}",
            data.dim, net.in_dim
        ));
    }
    let mut g = Gradients::zeros_like(shape);
    let mut s = Scratch::new(shape);
    let scale = 1.0 / batch.len() as f64;
    let mut ce = 0.0;
    for &i in batch {
        let label = data.labels[i] as usize;
        if label >= net.classes {
            return invalid(format!(
                "label {label} out of range for {} classes",
                net.classes
            ));
        }
        ce += net.backward(data.features(i), label, scale, &mut s, &mut g);
    }
    if l2 > 0.0 {
        for (gw, w) in g.w1.iter_mut().zip(&net.w1) {
            *gw += l2 * w;
        }
        for (gw, w) in g.w2.iter_mut().zip(&net.w2) {
            *gw += l2 * w;
        }
    }
    Ok((ce * scale + 0.5 * l2 * net.weight_norm_sq(), g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            l2: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return invalid("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        if self.batch_size < 1 {
            return invalid("batch size must be at least 1");
        }
        if !(self.l2 >= 0.0) {
            return invalid("l2 must be non-negative");
        }
        Ok(())
    }
}

/// Mini-batch SGD with momentum. Samples are reshuffled every epoch from a
/// generator seeded with `cfg.seed`. Returns the model and the mean batch
/// loss of each epoch.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("training set is empty");
    }
    if data.dim != model.in_dim {
        return invalid(format!(
            "dataset dim {} does not match model input {}",
            data.dim, model.in_dim
        ));
    }
    let mut net = Net::from_model(model);
    let mut velocity = Gradients::zeros_like(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, g) = batch_loss_and_grad(&net, model, data, batch, cfg.l2)?;
            epoch_loss += loss;
            batches += 1;
            if cfg.learning_rate == 0.0 {
                continue;
            }
            for (p, v, gr) in [
                (&mut net.w1, &mut velocity.w1, &g.w1),
                (&mut net.b1, &mut velocity.b1, &g.b1),
                (&mut net.w2, &mut velocity.w2, &g.w2),
                (&mut net.b2, &mut velocity.b2, &g.b2),
            ] {
                for ((p, v), gr) in p.iter_mut().zip(v.iter_mut()).zip(gr) {
                    *v = cfg.momentum * *v + gr;
                    *p -= cfg.learning_rate * *v;
                }
            }
        }
        trace.push(epoch_loss / batches as f64);
    }

    let mut out = model.clone();
    if cfg.learning_rate != 0.0 {
        net.write_to(&mut out);
    }
    if !out.is_finite() {
        return invalid("training diverged to non-finite parameters");
    }
    Ok((out, trace))
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return invalid("empty dataset");
    }
    let mut hits = 0;
    for i in 0..data.len() {
        let p = model.forward(data.features(i))?;
        if crate::imagecore::argmax(&p) == data.label(i) as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Runs the model at every pixel of a standardized fused image.
pub fn predict_probmap(model: &Model, img: &Image, cfg: &FeatureConfig) -> Result<ProbMap> {
    let dim = cfg.len(img.channels());
    if dim != model.in_dim {
        return invalid(format!(
            "feature dim {dim} does not match model input {}",
            model.in_dim
        ));
    }
    let (w, h) = img.dims();
    let k = model.classes;
    let net = Net::from_model(model);
    let mut out = vec![0f32; w * h * k];
    out.par_chunks_mut(w * k)
        .enumerate()
        .try_for_each(|(y, row)| -> Result<()> {
            let mut buf = vec![0f32; dim];
            let mut s = Scratch::new(model);
            for x in 0..w {
                extract_features_into(img, x, y, cfg, &mut buf)?;
                net.forward(&buf, &mut s);
                for (o, &p) in row[x * k..(x + 1) * k].iter_mut().zip(&s.probs) {
                    *o = p as f32;
                }
            }
            Ok(())
        })?;
    ProbMap::from_vec(w, h, k, out)
}
