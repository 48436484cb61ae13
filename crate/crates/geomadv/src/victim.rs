//! The white-box victim classifier: a small, self-contained differentiable
//! network with training, inference, exact input gradients, and checkpoint
//! persistence.
//!
//! The supported layer set (valid convolutions, ReLU, 2x2 max-pooling,
//! flatten, dense) is deliberately tiny: forward passes take milliseconds and
//! reverse-mode gradients are written out by hand and verified against finite
//! differences. Activations use a planar channel-major layout internally;
//! the public API speaks [`Image`].

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// One layer of the architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, stride: usize },
    Relu,
    /// 2x2 max-pooling with stride 2.
    MaxPool,
    Flatten,
    Dense { units: usize },
}

/// Network architecture: input shape, layer list, and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    /// Input (height, width, channels).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

/// Shape of an activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { channels, height, width } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArchitectureDescriptor {
    /// The default benchmark architecture for `size` x `size` grayscale
    /// inputs: two conv/pool stages followed by a small dense head.
    pub fn default_cnn(size: usize, num_classes: usize) -> Self {
        Self {
            input: (size, size, 1),
            layers: vec![
                LayerSpec::Conv { filters: 8, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv { filters: 16, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: num_classes },
            ],
            num_classes,
        }
    }

    /// Walks the layer list and returns the activation shape after every
    /// layer (entry 0 is the input shape). Fails when shapes do not chain or
    /// the network does not end in a dense layer of `num_classes` units.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || (c != 1 && c != 3) {
            return Err(Error::ShapeMismatch(format!("bad input shape {:?}", self.input)));
        }
        let mut shapes = vec![Shape::Map { channels: c, height: h, width: w }];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (layer, cur) {
                (LayerSpec::Conv { filters, kernel, stride }, Shape::Map { height, width, .. }) => {
                    if *kernel == 0 || *stride == 0 || *filters == 0 {
                        return Err(Error::ShapeMismatch(format!("layer {i}: bad conv params")));
                    }
                    if height < *kernel || width < *kernel {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: kernel {kernel} larger than {height}x{width} input"
                        )));
                    }
                    Shape::Map {
                        channels: *filters,
                        height: (height - kernel) / stride + 1,
                        width: (width - kernel) / stride + 1,
                    }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool, Shape::Map { channels, height, width }) => {
                    if height < 2 || width < 2 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: cannot pool {height}x{width}"
                        )));
                    }
                    Shape::Map { channels, height: height / 2, width: width / 2 }
                }
                (LayerSpec::Flatten, Shape::Map { .. }) => Shape::Flat(cur.len()),
                (LayerSpec::Dense { units }, Shape::Flat(_)) => {
                    if *units == 0 {
                        return Err(Error::ShapeMismatch(format!("layer {i}: zero-unit dense")));
                    }
                    Shape::Flat(*units)
                }
                (l, s) => {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: {l:?} cannot follow activation shape {s:?}"
                    )))
                }
            };
            shapes.push(next);
        }
        match (self.layers.last(), shapes.last()) {
            (Some(LayerSpec::Dense { units }), Some(Shape::Flat(n)))
                if *units == self.num_classes && *n == self.num_classes => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "network must end in dense({})",
                    self.num_classes
                )))
            }
        }
        Ok(shapes)
    }
}

/// A dense parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Defense provenance, present on adversarially trained checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseStamp {
    pub kind: String,
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub adv_fraction: f64,
}

/// A trained (or freshly initialized) classifier.
#[derive(Debug, Clone)]
pub struct VictimModel {
    descriptor: ArchitectureDescriptor,
    params: Vec<Tensor>,
    meta: TrainingMeta,
    defense: Option<DefenseStamp>,
}

/// Classifier output: raw logits and their softmax.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    fn from_logits(logits: Vec<f64>) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probabilities = exps.iter().map(|e| e / z).collect();
        Self { logits, probabilities }
    }

    /// Index of the highest logit.
    pub fn argmax(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Negative log softmax probability of `class`, computed with log-sum-exp
/// stabilization. Always nonnegative.
pub fn softmax_cost(prediction: &Prediction, class: usize) -> Result<f64> {
    let logits = &prediction.logits;
    if class >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, epochs: 30, batch_size: 32, seed: 0 }
    }
}

struct ForwardCache {
    /// Activation after each layer; entry 0 is the planar input.
    acts: Vec<Vec<f64>>,
    /// For each max-pool layer, the flat input index that won each window.
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl VictimModel {
    /// Initializes a model with He-style fan-in-scaled weights drawn from the
    /// seeded generator; biases start at zero.
    pub fn init(descriptor: &ArchitectureDescriptor, seed: u64) -> Result<Self> {
        let shapes = descriptor.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in descriptor.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { filters, kernel, .. } => {
                    let in_c = match shapes[i] {
                        Shape::Map { channels, .. } => channels,
                        _ => unreachable!("validated"),
                    };
                    let fan_in = in_c * kernel * kernel;
                    params.push(he_tensor(vec![*filters, in_c, *kernel, *kernel], fan_in, &mut rng));
                    params.push(Tensor::zeros(vec![*filters]));
                }
                LayerSpec::Dense { units } => {
                    let fan_in = shapes[i].len();
                    params.push(he_tensor(vec![*units, fan_in], fan_in, &mut rng));
                    params.push(Tensor::zeros(vec![*units]));
                }
                _ => {}
            }
        }
        Ok(Self {
            descriptor: descriptor.clone(),
            params,
            meta: TrainingMeta { epochs: 0, seed, train_accuracy: 0.0, test_accuracy: 0.0 },
            defense: None,
        })
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Direct parameter access for tests and tooling.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn defense(&self) -> Option<&DefenseStamp> {
        self.defense.as_ref()
    }

    pub fn set_defense(&mut self, stamp: DefenseStamp) {
        self.defense = Some(stamp);
    }

    pub fn num_classes(&self) -> usize {
        self.descriptor.num_classes
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        let (h, w, c) = self.descriptor.input;
        if x.height() != h || x.width() != w || x.channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{}x{} does not match model input {h}x{w}x{c}",
                x.height(),
                x.width(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass.
    pub fn forward(&self, x: &Image) -> Result<Prediction> {
        self.check_input(x)?;
        let cache = self.forward_cache(&planar_from_image(x));
        Ok(Prediction::from_logits(cache.acts.last().unwrap().clone()))
    }

    fn forward_cache(&self, planar_input: &[f64]) -> ForwardCache {
        let shapes = self.descriptor.shapes().expect("descriptor validated at construction");
        let mut acts: Vec<Vec<f64>> = vec![planar_input.to_vec()];
        let mut pool_argmax: Vec<Option<Vec<usize>>> =
            Vec::with_capacity(self.descriptor.layers.len());
        let mut p = 0usize;
        for (i, layer) in self.descriptor.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let (out, argmax) = match layer {
                LayerSpec::Conv { stride, .. } => {
                    let (w, b) = (&self.params[p], &self.params[p + 1]);
                    p += 2;
                    (conv_forward(input, shapes[i], w, b, *stride, shapes[i + 1]), None)
                }
                LayerSpec::Relu => (input.iter().map(|&v| v.max(0.0)).collect(), None),
                LayerSpec::MaxPool => {
                    let (out, idx) = maxpool_forward(input, shapes[i]);
                    (out, Some(idx))
                }
                LayerSpec::Flatten => (input.clone(), None),
                LayerSpec::Dense { .. } => {
                    let (w, b) = (&self.params[p], &self.params[p + 1]);
                    p += 2;
                    (dense_forward(input, w, b), None)
                }
            };
            acts.push(out);
            pool_argmax.push(argmax);
        }
        ForwardCache { acts, pool_argmax }
    }

    /// Exact reverse-mode gradient of the softmax cost for `class` with
    /// respect to every input pixel, in the image's interleaved layout.
    pub fn input_gradient(&self, x: &Image, class: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if class >= self.descriptor.num_classes {
            return Err(Error::OutOfRange(format!("class {class} out of range")));
        }
        let cache = self.forward_cache(&planar_from_image(x));
        let (_, input_grad, _) = self.backprop(&cache, class);
        Ok(interleaved_from_planar(&input_grad, self.descriptor.input))
    }

    /// Backpropagates the softmax cost; returns parameter gradients (matching
    /// the parameter list), the planar input gradient, and the loss value.
    fn backprop(&self, cache: &ForwardCache, class: usize) -> (Vec<Tensor>, Vec<f64>, f64) {
        let shapes = self.descriptor.shapes().expect("descriptor validated at construction");
        let pred = Prediction::from_logits(cache.acts.last().unwrap().clone());
        let loss = softmax_cost(&pred, class).expect("class validated");

        let mut grads: Vec<Tensor> =
            self.params.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
        let mut delta: Vec<f64> = pred
            .probabilities
            .iter()
            .enumerate()
            .map(|(i, &pv)| if i == class { pv - 1.0 } else { pv })
            .collect();

        let mut p = self.params.len();
        for (i, layer) in self.descriptor.layers.iter().enumerate().rev() {
            let input = &cache.acts[i];
            delta = match layer {
                LayerSpec::Conv { stride, .. } => {
                    p -= 2;
                    let w = &self.params[p];
                    let (dw, db, din) =
                        conv_backward(input, shapes[i], w, *stride, shapes[i + 1], &delta);
                    grads[p].data = dw;
                    grads[p + 1].data = db;
                    din
                }
                LayerSpec::Relu => {
                    let out = &cache.acts[i + 1];
                    delta.iter().zip(out).map(|(&d, &o)| if o > 0.0 { d } else { 0.0 }).collect()
                }
                LayerSpec::MaxPool => {
                    let idx = cache.pool_argmax[i].as_ref().expect("pool layer cached indices");
                    let mut din = vec![0.0; input.len()];
                    for (d, &src) in delta.iter().zip(idx) {
                        din[src] += d;
                    }
                    din
                }
                LayerSpec::Flatten => delta,
                LayerSpec::Dense { .. } => {
                    p -= 2;
                    let w = &self.params[p];
                    let (dw, db, din) = dense_backward(input, w, &delta);
                    grads[p].data = dw;
                    grads[p + 1].data = db;
                    din
                }
            };
        }
        (grads, delta, loss)
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn accuracy(&self, set: &[(&Image, usize)]) -> Result<f64> {
        if set.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (img, label) in set {
            if self.forward(img)?.argmax() == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / set.len() as f64)
    }

    /// Smallest distance of this forward pass from an activation kink (ReLU
    /// zero crossing or max-pool tie). Finite-difference probes are only
    /// valid when this margin comfortably exceeds the probe's reach.
    pub fn kink_margin(&self, x: &Image) -> Result<f64> {
        self.check_input(x)?;
        let shapes = self.descriptor.shapes()?;
        let cache = self.forward_cache(&planar_from_image(x));
        let mut margin = f64::INFINITY;
        for (i, layer) in self.descriptor.layers.iter().enumerate() {
            match layer {
                LayerSpec::Relu => {
                    for &v in &cache.acts[i] {
                        margin = margin.min(v.abs());
                    }
                }
                LayerSpec::MaxPool => {
                    if let Shape::Map { channels, height, width } = shapes[i] {
                        let input = &cache.acts[i];
                        for c in 0..channels {
                            for r in 0..height / 2 {
                                for col in 0..width / 2 {
                                    let mut vals = [0.0f64; 4];
                                    for (n, (dr, dc)) in
                                        [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                                    {
                                        vals[n] =
                                            input[(c * height + r * 2 + dr) * width + col * 2 + dc];
                                    }
                                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                    // Ties between exact zeros come from ReLU
                                    // clamping; they are locally constant and
                                    // carry no kink.
                                    if !(vals[0] == 0.0 && vals[1] == 0.0) {
                                        margin = margin.min(vals[0] - vals[1]);
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(margin)
    }
}

fn he_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| dist.sample(rng)).collect() }
}

fn planar_from_image(x: &Image) -> Vec<f64> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    if c == 1 {
        return x.pixels().to_vec();
    }
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(ch * h + r) * w + col] = x.get(r, col, ch);
            }
        }
    }
    out
}

fn interleaved_from_planar(planar: &[f64], (h, w, c): (usize, usize, usize)) -> Vec<f64> {
    if c == 1 {
        return planar.to_vec();
    }
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(r * w + col) * c + ch] = planar[(ch * h + r) * w + col];
            }
        }
    }
    out
}

fn conv_forward(
    input: &[f64],
    in_shape: Shape,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    out_shape: Shape,
) -> Vec<f64> {
    let (in_c, in_h, in_w) = map_dims(in_shape);
    let (out_c, out_h, out_w) = map_dims(out_shape);
    let k = weights.shape[2];
    let mut out = vec![0.0; out_c * out_h * out_w];
    for f in 0..out_c {
        let base = f * out_h * out_w;
        out[base..base + out_h * out_w].fill(bias.data[f]);
        for ci in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights.data[((f * in_c + ci) * k + ky) * k + kx];
                    for oy in 0..out_h {
                        let in_row = (ci * in_h + oy * stride + ky) * in_w + kx;
                        let out_row = base + oy * out_w;
                        if stride == 1 {
                            let src = &input[in_row..in_row + out_w];
                            let dst = &mut out[out_row..out_row + out_w];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in 0..out_w {
                                out[out_row + ox] += wv * input[in_row + ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    input: &[f64],
    in_shape: Shape,
    weights: &Tensor,
    stride: usize,
    out_shape: Shape,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (in_c, in_h, in_w) = map_dims(in_shape);
    let (out_c, out_h, out_w) = map_dims(out_shape);
    let k = weights.shape[2];
    let mut dw = vec![0.0; weights.data.len()];
    let mut db = vec![0.0; out_c];
    let mut din = vec![0.0; input.len()];
    for f in 0..out_c {
        let base = f * out_h * out_w;
        db[f] = dout[base..base + out_h * out_w].iter().sum();
        for ci in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((f * in_c + ci) * k + ky) * k + kx;
                    let wv = weights.data[widx];
                    let mut acc = 0.0;
                    for oy in 0..out_h {
                        let in_row = (ci * in_h + oy * stride + ky) * in_w + kx;
                        let out_row = base + oy * out_w;
                        if stride == 1 {
                            let src = &input[in_row..in_row + out_w];
                            let d = &dout[out_row..out_row + out_w];
                            for (dv, sv) in d.iter().zip(src) {
                                acc += dv * sv;
                            }
                            let dst = &mut din[in_row..in_row + out_w];
                            for (iv, dv) in dst.iter_mut().zip(d) {
                                *iv += wv * dv;
                            }
                        } else {
                            for ox in 0..out_w {
                                let dv = dout[out_row + ox];
                                acc += dv * input[in_row + ox * stride];
                                din[in_row + ox * stride] += wv * dv;
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    (dw, db, din)
}

fn maxpool_forward(input: &[f64], in_shape: Shape) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = map_dims(in_shape);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn dense_forward(input: &[f64], weights: &Tensor, bias: &Tensor) -> Vec<f64> {
    let out_n = weights.shape[0];
    let in_n = weights.shape[1];
    let mut out = bias.data.clone();
    for (o, ov) in out.iter_mut().enumerate().take(out_n) {
        let row = &weights.data[o * in_n..(o + 1) * in_n];
        let mut acc = 0.0;
        for (wv, iv) in row.iter().zip(input) {
            acc += wv * iv;
        }
        *ov += acc;
    }
    out
}

fn dense_backward(input: &[f64], weights: &Tensor, dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_n = weights.shape[0];
    let in_n = weights.shape[1];
    let mut dw = vec![0.0; weights.data.len()];
    let mut din = vec![0.0; in_n];
    for o in 0..out_n {
        let d = dout[o];
        let row = &weights.data[o * in_n..(o + 1) * in_n];
        let drow = &mut dw[o * in_n..(o + 1) * in_n];
        for i in 0..in_n {
            drow[i] = d * input[i];
            din[i] += d * row[i];
        }
    }
    (dw, dout.to_vec(), din)
}

fn map_dims(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Map { channels, height, width } => (channels, height, width),
        Shape::Flat(_) => unreachable!("map layer on flat activation"),
    }
}

/// Minibatch SGD with momentum on the softmax cost. Deterministic given the
/// seed; aborts with a diagnostic when the loss goes non-finite.
pub fn train(
    descriptor: &ArchitectureDescriptor,
    train_set: &[(&Image, usize)],
    test_set: &[(&Image, usize)],
    hp: &TrainParams,
) -> Result<VictimModel> {
    train_with_augment(descriptor, train_set, test_set, hp, |_, _| Ok(()))
}

/// Training loop with a per-batch hook that may rewrite batch contents
/// against the current parameters (used for adversarial training).
pub fn train_with_augment<F>(
    descriptor: &ArchitectureDescriptor,
    train_set: &[(&Image, usize)],
    test_set: &[(&Image, usize)],
    hp: &TrainParams,
    mut augment: F,
) -> Result<VictimModel>
where
    F: FnMut(&VictimModel, &mut Vec<(Image, usize)>) -> Result<()>,
{
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let num_classes = descriptor.num_classes;
    if let Some((_, bad)) = train_set.iter().chain(test_set).find(|(_, l)| *l >= num_classes) {
        return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
    }
    if hp.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let mut model = VictimModel::init(descriptor, hp.seed)?;
    let mut velocity: Vec<Tensor> =
        model.params.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x5eed));
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..hp.epochs {
        indices.shuffle(&mut rng);
        for (batch_no, chunk) in indices.chunks(hp.batch_size).enumerate() {
            let mut batch: Vec<(Image, usize)> =
                chunk.iter().map(|&i| (train_set[i].0.clone(), train_set[i].1)).collect();
            augment(&model, &mut batch)?;

            let mut acc: Vec<Tensor> =
                model.params.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
            let mut batch_loss = 0.0;
            for (img, label) in &batch {
                let cache = model.forward_cache(&planar_from_image(img));
                let (grads, _, loss) = model.backprop(&cache, *label);
                batch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.data.iter_mut().zip(&g.data) {
                        *av += gv;
                    }
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {batch_loss} at epoch {epoch}, batch {batch_no}"
                )));
            }
            let scale = 1.0 / batch.len() as f64;
            let mut finite = true;
            for ((param, vel), grad) in model.params.iter_mut().zip(&mut velocity).zip(&acc) {
                for ((pv, vv), gv) in param.data.iter_mut().zip(&mut vel.data).zip(&grad.data) {
                    *vv = hp.momentum * *vv - hp.lr * gv * scale;
                    *pv += *vv;
                    finite &= pv.is_finite();
                }
            }
            if !finite {
                return Err(Error::Diverged(format!(
                    "non-finite parameter after update at epoch {epoch}, batch {batch_no}"
                )));
            }
        }
    }

    model.meta = TrainingMeta {
        epochs: hp.epochs,
        seed: hp.seed,
        train_accuracy: model.accuracy(train_set)?,
        test_accuracy: model.accuracy(test_set)?,
    };
    Ok(model)
}

// --- Checkpoint persistence -------------------------------------------------
//
// Layout: magic "FGCK", format-version u32 LE, metadata JSON (u32 LE length
// prefix), then every parameter tensor as float32 little-endian in descriptor
// order.

const CHECKPOINT_MAGIC: &[u8; 4] = b"FGCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    descriptor: ArchitectureDescriptor,
    training: TrainingMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    defense: Option<DefenseStamp>,
}

/// Writes a checkpoint file.
pub fn save_checkpoint(model: &VictimModel, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        descriptor: model.descriptor.clone(),
        training: model.meta.clone(),
        defense: model.defense.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in &model.params {
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, validating magic, version, and the shape chain.
pub fn load_checkpoint(path: &Path) -> Result<VictimModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = read_u32(&mut r, path)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad metadata: {e}")))?;

    // Re-derive parameter shapes from the descriptor; this validates the
    // shape chain before any tensor data is trusted.
    let template = VictimModel::init(&meta.descriptor, 0)?;
    let mut params = Vec::with_capacity(template.params.len());
    for t in &template.params {
        let mut data = Vec::with_capacity(t.data.len());
        let mut bytes = [0u8; 4];
        for _ in 0..t.data.len() {
            r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
            let v = f32::from_le_bytes(bytes) as f64;
            if !v.is_finite() {
                return Err(Error::Format("non-finite parameter in checkpoint".into()));
            }
            data.push(v);
        }
        params.push(Tensor { shape: t.shape.clone(), data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format("trailing bytes after parameter tensors".into()));
    }
    Ok(VictimModel {
        descriptor: meta.descriptor,
        params,
        meta: meta.training,
        defense: meta.defense,
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}
