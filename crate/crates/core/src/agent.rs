//! Small convolutional distance estimator.
//!
//! Architecture: conv(k x k) -> act -> maxpool -> conv(k x k) -> act ->
//! maxpool -> dense -> act -> linear output in meters. Convolutions are
//! "valid" (no padding) and pooling drops any remainder rows/columns.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scene::{Dataset, Image, Sample, Split, IMAGE_HEIGHT, IMAGE_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Rectifiers bypassed; used for closed-form gradient checks.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub kernel: usize,
    pub conv1_filters: usize,
    pub pool1: usize,
    pub conv2_filters: usize,
    pub pool2: usize,
    pub dense_units: usize,
    pub activation: Activation,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            input_width: IMAGE_WIDTH,
            input_height: IMAGE_HEIGHT,
            kernel: 3,
            conv1_filters: 8,
            pool1: 2,
            conv2_filters: 16,
            pool2: 2,
            dense_units: 32,
            activation: Activation::Relu,
            init_seed: 0,
            init_scale: 0.1,
        }
    }
}

/// Spatial sizes of every stage, derived from an [`AgentConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shapes {
    pub conv1: (usize, usize),
    pub pool1: (usize, usize),
    pub conv2: (usize, usize),
    pub pool2: (usize, usize),
    pub flat: usize,
}

impl AgentConfig {
    pub fn shapes(&self) -> Result<Shapes> {
        let bad = |what: &str| Error::Configuration(format!("inconsistent layer shapes: {what}"));
        if self.kernel == 0 || self.pool1 == 0 || self.pool2 == 0 {
            return Err(bad("kernel and pool sizes must be positive"));
        }
        if self.conv1_filters == 0 || self.conv2_filters == 0 || self.dense_units == 0 {
            return Err(bad("every layer needs at least one unit"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(bad("init scale must be finite and nonnegative"));
        }
        let conv = |(w, h): (usize, usize), stage: &str| {
            if w < self.kernel || h < self.kernel {
                Err(bad(&format!("{stage} input {w}x{h} smaller than kernel")))
            } else {
                Ok((w - self.kernel + 1, h - self.kernel + 1))
            }
        };
        let pool = |(w, h): (usize, usize), p: usize, stage: &str| {
            if w < p || h < p {
                Err(bad(&format!("{stage} input {w}x{h} smaller than pool")))
            } else {
                Ok((w / p, h / p))
            }
        };
        let conv1 = conv((self.input_width, self.input_height), "conv1")?;
        let pool1 = pool(conv1, self.pool1, "pool1")?;
        let conv2 = conv(pool1, "conv2")?;
        let pool2 = pool(conv2, self.pool2, "pool2")?;
        Ok(Shapes {
            conv1,
            pool1,
            conv2,
            pool2,
            flat: pool2.0 * pool2.1 * self.conv2_filters,
        })
    }

    pub fn trace_len(&self) -> usize {
        self.conv1_filters + self.conv2_filters + self.dense_units
    }
}

/// Weights and biases of every layer. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layers {
    /// `[filter][ky][kx]`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `[filter][in_channel][ky][kx]`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `[unit][flat]`, flat index is `[channel][y][x]`
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl Layers {
    fn zeros(config: &AgentConfig, shapes: &Shapes) -> Self {
        let k2 = config.kernel * config.kernel;
        Self {
            conv1_w: vec![0.0; config.conv1_filters * k2],
            conv1_b: vec![0.0; config.conv1_filters],
            conv2_w: vec![0.0; config.conv2_filters * config.conv1_filters * k2],
            conv2_b: vec![0.0; config.conv2_filters],
            dense_w: vec![0.0; config.dense_units * shapes.flat],
            dense_b: vec![0.0; config.dense_units],
            out_w: vec![0.0; config.dense_units],
            out_b: vec![0.0; 1],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.dense_w,
            &self.dense_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.dense_w,
            &mut self.dense_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range")
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn add_scaled(&mut self, other: &Layers, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Per-layer activation summary for one input: conv1 channel means,
/// conv2 channel means (both post-activation, before pooling), then every
/// dense unit activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub values: Vec<f64>,
    /// Start offsets of the conv1, conv2 and dense segments.
    pub layer_offsets: [usize; 3],
}

impl AsRef<[f64]> for ActivationTrace {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub layers: Layers,
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Cache {
    input: Vec<f64>,
    z1: Vec<f64>,
    p1: Vec<f64>,
    arg1: Vec<usize>,
    z2: Vec<f64>,
    p2: Vec<f64>,
    arg2: Vec<usize>,
    zd: Vec<f64>,
    ad: Vec<f64>,
    output: f64,
}

pub fn init_agent(config: AgentConfig) -> Result<Agent> {
    let shapes = config.shapes()?;
    let mut layers = Layers::zeros(&config, &shapes);
    let mut rng = rng::rng(config.init_seed, Stream::Init);
    let scale = config.init_scale;
    for t in [
        &mut layers.conv1_w,
        &mut layers.conv2_w,
        &mut layers.dense_w,
        &mut layers.out_w,
    ] {
        for w in t.iter_mut() {
            *w = scale * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    Ok(Agent { config, layers })
}

impl Agent {
    pub fn with_layers(config: AgentConfig, layers: Layers) -> Result<Self> {
        let shapes = config.shapes()?;
        let expect = Layers::zeros(&config, &shapes);
        for (have, want) in layers.tensors().iter().zip(expect.tensors()) {
            if have.len() != want.len() {
                return Err(Error::Configuration(format!(
                    "layer tensor has {} entries, config implies {}",
                    have.len(),
                    want.len()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.width != self.config.input_width
            || image.height != self.config.input_height
            || image.pixels.len() != image.width * image.height
        {
            return Err(Error::InvalidInput(format!(
                "image {}x{} does not match agent input {}x{}",
                image.width, image.height, self.config.input_width, self.config.input_height
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image) -> Result<(f64, ActivationTrace)> {
        self.check_image(image)?;
        let input: Vec<f64> = image.pixels.iter().map(|&p| p as f64).collect();
        let cache = self.forward_cached(input);
        Ok((cache.output, self.trace_from(&cache)))
    }

    pub fn estimate(&self, image: &Image) -> Result<f64> {
        self.check_image(image)?;
        let input = image.pixels.iter().map(|&p| p as f64).collect();
        Ok(self.forward_cached(input).output)
    }

    fn trace_from(&self, c: &Cache) -> ActivationTrace {
        let cfg = &self.config;
        let shapes = cfg.shapes().expect("validated at construction");
        let act = cfg.activation;
        let channel_means = |z: &[f64], channels: usize, (w, h): (usize, usize)| {
            let area = w * h;
            (0..channels)
                .map(move |ch| {
                    z[ch * area..(ch + 1) * area]
                        .iter()
                        .map(|&v| act.apply(v))
                        .sum::<f64>()
                        / area as f64
                })
                .collect::<Vec<_>>()
        };
        let mut values = channel_means(&c.z1, cfg.conv1_filters, shapes.conv1);
        values.extend(channel_means(&c.z2, cfg.conv2_filters, shapes.conv2));
        values.extend_from_slice(&c.ad);
        ActivationTrace {
            values,
            layer_offsets: [0, cfg.conv1_filters, cfg.conv1_filters + cfg.conv2_filters],
        }
    }

    fn forward_cached(&self, input: Vec<f64>) -> Cache {
        let cfg = &self.config;
        let s = cfg.shapes().expect("validated at construction");
        let l = &self.layers;
        let act = cfg.activation;
        let k = cfg.kernel;

        let z1 = conv_valid(
            &input,
            1,
            (cfg.input_width, cfg.input_height),
            &l.conv1_w,
            &l.conv1_b,
            cfg.conv1_filters,
            k,
        );
        let a1: Vec<f64> = z1.iter().map(|&z| act.apply(z)).collect();
        let (p1, arg1) = max_pool(&a1, cfg.conv1_filters, s.conv1, cfg.pool1);

        let z2 = conv_valid(
            &p1,
            cfg.conv1_filters,
            s.pool1,
            &l.conv2_w,
            &l.conv2_b,
            cfg.conv2_filters,
            k,
        );
        let a2: Vec<f64> = z2.iter().map(|&z| act.apply(z)).collect();
        let (p2, arg2) = max_pool(&a2, cfg.conv2_filters, s.conv2, cfg.pool2);

        let mut zd = l.dense_b.clone();
        for (u, z) in zd.iter_mut().enumerate() {
            let row = &l.dense_w[u * s.flat..(u + 1) * s.flat];
            *z += row.iter().zip(&p2).map(|(w, x)| w * x).sum::<f64>();
        }
        let ad: Vec<f64> = zd.iter().map(|&z| act.apply(z)).collect();
        let output = l.out_b[0] + l.out_w.iter().zip(&ad).map(|(w, a)| w * a).sum::<f64>();

        Cache {
            input,
            z1,
            p1,
            arg1,
            z2,
            p2,
            arg2,
            zd,
            ad,
            output,
        }
    }

    /// Squared-error loss `(output - target)^2` and its gradient.
    fn backward(&self, cache: &Cache, target: f64, grad: &mut Layers) -> f64 {
        let cfg = &self.config;
        let s = cfg.shapes().expect("validated at construction");
        let l = &self.layers;
        let act = cfg.activation;
        let k = cfg.kernel;

        let diff = cache.output - target;
        let d_out = 2.0 * diff;
        grad.out_b[0] += d_out;
        let mut d_zd = vec![0.0; cfg.dense_units];
        for u in 0..cfg.dense_units {
            grad.out_w[u] += d_out * cache.ad[u];
            d_zd[u] = d_out * l.out_w[u] * act.derivative(cache.zd[u]);
        }

        let mut d_p2 = vec![0.0; s.flat];
        for (u, &dz) in d_zd.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            grad.dense_b[u] += dz;
            let row = u * s.flat;
            for i in 0..s.flat {
                grad.dense_w[row + i] += dz * cache.p2[i];
                d_p2[i] += dz * l.dense_w[row + i];
            }
        }

        let mut d_z2 = vec![0.0; cache.z2.len()];
        for (i, &src) in cache.arg2.iter().enumerate() {
            d_z2[src] += d_p2[i];
        }
        for (dz, &z) in d_z2.iter_mut().zip(&cache.z2) {
            *dz *= act.derivative(z);
        }

        let mut d_p1 = vec![0.0; cache.p1.len()];
        conv_backward(
            &cache.p1,
            cfg.conv1_filters,
            s.pool1,
            &l.conv2_w,
            cfg.conv2_filters,
            k,
            &d_z2,
            &mut grad.conv2_w,
            &mut grad.conv2_b,
            Some(&mut d_p1),
        );

        let mut d_z1 = vec![0.0; cache.z1.len()];
        for (i, &src) in cache.arg1.iter().enumerate() {
            d_z1[src] += d_p1[i];
        }
        for (dz, &z) in d_z1.iter_mut().zip(&cache.z1) {
            *dz *= act.derivative(z);
        }
        conv_backward(
            &cache.input,
            1,
            (cfg.input_width, cfg.input_height),
            &l.conv1_w,
            cfg.conv1_filters,
            k,
            &d_z1,
            &mut grad.conv1_w,
            &mut grad.conv1_b,
            None,
        );
        diff * diff
    }

    /// Loss and analytic gradient for one `(image, target)` pair.
    pub fn loss_and_gradient(&self, image: &Image, target_m: f64) -> Result<(f64, Layers)> {
        self.check_image(image)?;
        let cache = self.forward_cached(image.pixels.iter().map(|&p| p as f64).collect());
        let shapes = self.config.shapes()?;
        let mut grad = Layers::zeros(&self.config, &shapes);
        let loss = self.backward(&cache, target_m, &mut grad);
        Ok((loss, grad))
    }

    pub fn loss(&self, image: &Image, target_m: f64) -> Result<f64> {
        let out = self.estimate(image)?;
        Ok((out - target_m) * (out - target_m))
    }

    /// Rectifier signs and pooling winners; a change means a kink was crossed.
    fn activation_pattern(&self, image: &Image) -> Vec<u64> {
        let c = self.forward_cached(image.pixels.iter().map(|&p| p as f64).collect());
        let mut sig = Vec::with_capacity(c.z1.len() + c.z2.len() + c.zd.len() + c.arg1.len() + c.arg2.len());
        if self.config.activation == Activation::Relu {
            sig.extend(c.z1.iter().chain(&c.z2).chain(&c.zd).map(|&z| (z > 0.0) as u64));
        }
        sig.extend(c.arg1.iter().chain(&c.arg2).map(|&a| a as u64));
        sig
    }

    /// Mean squared error over the given samples.
    pub fn mse<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in samples {
            total += self.loss(&s.image, s.true_distance_m)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidInput("no samples to evaluate".into()));
        }
        Ok(total / n as f64)
    }
}

fn conv_valid(
    input: &[f64],
    channels: usize,
    (w, h): (usize, usize),
    weights: &[f64],
    bias: &[f64],
    filters: usize,
    k: usize,
) -> Vec<f64> {
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut out = vec![0.0; filters * ow * oh];
    for f in 0..filters {
        let plane = &mut out[f * ow * oh..(f + 1) * ow * oh];
        plane.fill(bias[f]);
        for c in 0..channels {
            let src = &input[c * w * h..(c + 1) * w * h];
            let kern = &weights[(f * channels + c) * k * k..(f * channels + c + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    for y in 0..oh {
                        let row_in = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let row_out = &mut plane[y * ow..(y + 1) * ow];
                        for (o, i) in row_out.iter_mut().zip(row_in) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    channels: usize,
    (w, h): (usize, usize),
    weights: &[f64],
    filters: usize,
    k: usize,
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut Vec<f64>>,
) {
    let (ow, oh) = (w - k + 1, h - k + 1);
    for f in 0..filters {
        let plane = &d_out[f * ow * oh..(f + 1) * ow * oh];
        d_bias[f] += plane.iter().sum::<f64>();
        for c in 0..channels {
            let src = &input[c * w * h..(c + 1) * w * h];
            let base = (f * channels + c) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row_in = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let row_d = &plane[y * ow..(y + 1) * ow];
                        acc += row_in.iter().zip(row_d).map(|(a, b)| a * b).sum::<f64>();
                    }
                    d_weights[base + ky * k + kx] += acc;
                    if let Some(d_in) = d_input.as_deref_mut() {
                        let wv = weights[base + ky * k + kx];
                        let dst = &mut d_in[c * w * h..(c + 1) * w * h];
                        for y in 0..oh {
                            let row_d = &plane[y * ow..(y + 1) * ow];
                            let row_dst = &mut dst[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                            for (o, g) in row_dst.iter_mut().zip(row_d) {
                                *o += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; returns pooled values and the flat source index of each
/// winner (first maximum in raster order).
fn max_pool(
    input: &[f64],
    channels: usize,
    (w, h): (usize, usize),
    p: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ow, oh) = (w / p, h / p);
    let mut out = Vec::with_capacity(channels * ow * oh);
    let mut arg = Vec::with_capacity(channels * ow * oh);
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = c * w * h + (y * p) * w + x * p;
                for dy in 0..p {
                    for dx in 0..p {
                        let i = c * w * h + (y * p + dy) * w + x * p + dx;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Upper bound on the L2 norm of each batch-mean gradient.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            shuffle_seed: 0,
            max_grad_norm: Some(CLIP_NORM),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss seen during each epoch (before each batch update).
    pub epoch_train_mse: Vec<f64>,
    /// `None` when the dataset has no assess split.
    pub assess_mse: Option<f64>,
    pub train_samples: usize,
    pub params: TrainParams,
}

/// Mini-batch gradient descent with classical momentum on the train split.
pub fn train(agent: &Agent, data: &Dataset, params: &TrainParams) -> Result<(Agent, TrainReport)> {
    let train_idx: Vec<usize> = data.indices(Split::Train).collect();
    if train_idx.is_empty() {
        return Err(Error::InvalidInput("dataset has no train samples".into()));
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let shapes = agent.config.shapes()?;
    let mut model = agent.clone();
    let mut velocity = Layers::zeros(&model.config, &shapes);
    let mut grad = Layers::zeros(&model.config, &shapes);
    let mut order = train_idx.clone();
    let mut rng = rng::rng(params.shuffle_seed, Stream::Shuffle);
    let mut epoch_train_mse = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &data.samples[i];
                model.check_image(&s.image)?;
                let cache =
                    model.forward_cached(s.image.pixels.iter().map(|&p| p as f64).collect());
                batch_loss += model.backward(&cache, s.true_distance_m, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NumericFailure {
                    epoch,
                    detail: "non-finite training loss".into(),
                });
            }
            epoch_loss += batch_loss;
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(max_norm) = params.max_grad_norm {
                let norm = scale * grad.norm();
                if norm > max_norm {
                    scale *= max_norm / norm;
                }
            }
            for (v, g) in velocity.tensors_mut().into_iter().zip(grad.tensors()) {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = params.momentum * *vi - params.learning_rate * scale * gi;
                }
            }
            model.layers.add_scaled(&velocity, 1.0);
            if !model.layers.all_finite() {
                return Err(Error::NumericFailure {
                    epoch,
                    detail: "non-finite weights after update".into(),
                });
            }
        }
        let mse = epoch_loss / order.len() as f64;
        log::debug!("epoch {epoch}: train mse {mse:.4}");
        epoch_train_mse.push(mse);
    }

    let assess: Vec<&Sample> = data.assess().collect();
    let assess_mse = if assess.is_empty() {
        None
    } else {
        Some(model.mse(assess)?)
    };
    let report = TrainReport {
        epoch_train_mse,
        assess_mse,
        train_samples: train_idx.len(),
        params: params.clone(),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
    /// Candidates dropped because the finite-difference step crossed a
    /// rectifier or pooling kink.
    pub skipped_at_kinks: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const GRAD_CHECK_WEIGHTS: usize = 100;

/// Compares analytic gradients with central finite differences on a
/// seed-chosen subset of weights.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// near-zero gradients from amplifying rounding noise. Weights whose
/// perturbation flips any rectifier sign or pooling winner are replaced by
/// other candidates, so the check is always evaluated away from kinks.
pub fn gradient_check(
    agent: &Agent,
    image: &Image,
    target_m: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = agent.loss_and_gradient(image, target_m)?;
    let base_pattern = agent.activation_pattern(image);
    let mut candidates: Vec<usize> = (0..agent.layers.len()).collect();
    candidates.shuffle(&mut rng::rng(seed, Stream::GradCheck));

    let mut probe = agent.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for idx in candidates {
        if report.checked == GRAD_CHECK_WEIGHTS {
            break;
        }
        let w = agent.layers.get(idx);
        probe.layers.set(idx, w + GRAD_CHECK_STEP);
        let plus_pattern = probe.activation_pattern(image);
        let plus = probe.loss(image, target_m)?;
        probe.layers.set(idx, w - GRAD_CHECK_STEP);
        let minus_pattern = probe.activation_pattern(image);
        let minus = probe.loss(image, target_m)?;
        probe.layers.set(idx, w);
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic.get(idx);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, FactorWeights};

    fn tiny_config() -> AgentConfig {
        AgentConfig {
            input_width: 2,
            input_height: 2,
            kernel: 1,
            conv1_filters: 1,
            pool1: 2,
            conv2_filters: 1,
            pool2: 1,
            dense_units: 1,
            activation: Activation::Relu,
            init_seed: 0,
            init_scale: 0.1,
        }
    }

    #[test]
    fn default_shapes_and_trace_length() {
        let cfg = AgentConfig::default();
        let s = cfg.shapes().unwrap();
        assert_eq!(s.conv1, (30, 22));
        assert_eq!(s.pool1, (15, 11));
        assert_eq!(s.conv2, (13, 9));
        assert_eq!(s.pool2, (6, 4));
        assert_eq!(s.flat, 384);
        assert_eq!(cfg.trace_len(), 56);
    }

    #[test]
    fn inconsistent_config_is_rejected() {
        let cfg = AgentConfig {
            input_width: 4,
            input_height: 4,
            kernel: 3,
            ..AgentConfig::default()
        };
        assert!(matches!(init_agent(cfg), Err(Error::Configuration(_))));
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = init_agent(AgentConfig::default()).unwrap();
        let b = init_agent(AgentConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = init_agent(AgentConfig {
            init_seed: 1,
            ..AgentConfig::default()
        })
        .unwrap();
        assert_ne!(a.layers.conv1_w, c.layers.conv1_w);
        for b in [&a.layers.conv1_b, &a.layers.conv2_b, &a.layers.dense_b, &a.layers.out_b] {
            assert!(b.iter().all(|v| *v == 0.0));
        }
        assert!(a.layers.conv2_w.iter().all(|w| w.abs() <= 0.1));
    }

    #[test]
    fn zero_network_outputs_output_bias() {
        let mut agent = init_agent(AgentConfig::default()).unwrap();
        for t in agent.layers.tensors_mut() {
            t.fill(0.0);
        }
        agent.layers.out_b[0] = 4.25;
        let img = Image::filled(IMAGE_WIDTH, IMAGE_HEIGHT, 0.7);
        assert_eq!(agent.forward(&img).unwrap().0, 4.25);
    }

    #[test]
    fn zero_image_propagates_zeros() {
        let agent = init_agent(AgentConfig::default()).unwrap();
        let img = Image::filled(IMAGE_WIDTH, IMAGE_HEIGHT, 0.0);
        let (est, trace) = agent.forward(&img).unwrap();
        assert_eq!(est, 0.0);
        assert_eq!(trace.values.len(), 56);
        assert!(trace.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_computed_tiny_forward() {
        // 2x2 input, 1x1 kernels: conv1 -> relu -> 2x2 max pool -> conv2 ->
        // relu -> dense(1) -> relu -> linear output.
        let layers = Layers {
            conv1_w: vec![2.0],
            conv1_b: vec![-0.5],
            conv2_w: vec![3.0],
            conv2_b: vec![0.25],
            dense_w: vec![-1.5],
            dense_b: vec![10.0],
            out_w: vec![0.5],
            out_b: vec![1.0],
        };
        let agent = Agent::with_layers(tiny_config(), layers).unwrap();
        let img = Image::new(2, 2, vec![0.125, 0.5, 0.375, 0.25]).unwrap();
        // conv1: 2x-0.5 -> [-0.25, 0.5, 0.25, 0] -> relu [0, 0.5, 0.25, 0], max 0.5
        // conv2: 3*0.5+0.25 = 1.75; dense: -1.5*1.75+10 = 7.375; out: 0.5*7.375+1
        let (est, trace) = agent.forward(&img).unwrap();
        assert!((est - 4.6875).abs() < 1e-12);
        let expected = [0.1875, 1.75, 7.375];
        for (t, e) in trace.values.iter().zip(expected) {
            assert!((t - e).abs() < 1e-12, "{t} vs {e}");
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let agent = init_agent(AgentConfig::default()).unwrap();
        let img = Image::filled(10, 10, 0.5);
        assert!(matches!(agent.forward(&img), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradient_check_fresh_agent() {
        let ds = generate_dataset(2, 8, &FactorWeights::default()).unwrap();
        let agent = init_agent(AgentConfig {
            init_seed: 3,
            ..AgentConfig::default()
        })
        .unwrap();
        let s = &ds.samples[0];
        let report = gradient_check(&agent, &s.image, s.true_distance_m, 1).unwrap();
        assert_eq!(report.checked, GRAD_CHECK_WEIGHTS);
        assert!(report.max_relative_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn gradient_check_at_stationary_zero_point() {
        let mut agent = init_agent(AgentConfig::default()).unwrap();
        for t in agent.layers.tensors_mut() {
            t.fill(0.0);
        }
        let img = Image::filled(IMAGE_WIDTH, IMAGE_HEIGHT, 0.0);
        let (loss, grad) = agent.loss_and_gradient(&img, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.tensors().iter().all(|t| t.iter().all(|g| *g == 0.0)));
        let report = gradient_check(&agent, &img, 0.0, 4).unwrap();
        assert!(report.max_absolute_error <= 1e-8, "{report:?}");
    }

    #[test]
    fn gradient_check_linear_agent() {
        let cfg = AgentConfig {
            input_width: 5,
            input_height: 5,
            kernel: 3,
            conv1_filters: 1,
            pool1: 1,
            conv2_filters: 1,
            pool2: 1,
            dense_units: 1,
            activation: Activation::Identity,
            init_seed: 9,
            init_scale: 0.5,
        };
        let agent = init_agent(cfg).unwrap();
        let pixels = (0..25).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let img = Image::new(5, 5, pixels).unwrap();
        let report = gradient_check(&agent, &img, 3.0, 2).unwrap();
        assert_eq!(report.skipped_at_kinks, 0);
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn zero_epochs_is_identity_and_training_is_deterministic() {
        let ds = generate_dataset(8, 2, &FactorWeights::default()).unwrap();
        let agent = init_agent(AgentConfig::default()).unwrap();
        let none = TrainParams {
            epochs: 0,
            ..TrainParams::default()
        };
        let (same, report) = train(&agent, &ds, &none).unwrap();
        assert_eq!(same, agent);
        assert!(report.epoch_train_mse.is_empty());

        let hp = TrainParams {
            epochs: 2,
            batch_size: 2,
            ..TrainParams::default()
        };
        let (a, ra) = train(&agent, &ds, &hp).unwrap();
        let (b, rb) = train(&agent, &ds, &hp).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.assess_mse.unwrap() >= 0.0);
    }

    #[test]
    fn single_sample_overfits() {
        let ds = generate_dataset(2, 21, &FactorWeights::default()).unwrap();
        let agent = init_agent(AgentConfig::default()).unwrap();
        let hp = TrainParams {
            learning_rate: 0.002,
            momentum: 0.0,
            epochs: 200,
            batch_size: 1,
            shuffle_seed: 0,
            max_grad_norm: None,
        };
        let (_, report) = train(&agent, &ds, &hp).unwrap();
        let mse = &report.epoch_train_mse;
        let monotone = mse.windows(2).skip(1).all(|w| w[1] <= w[0]);
        assert!(
            monotone || *mse.last().unwrap() < 1e-4,
            "first {:?} last {:?}",
            &mse[..5],
            mse.last()
        );
        assert!(mse.last().unwrap() < &mse[0]);
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let mut ds = generate_dataset(2, 1, &FactorWeights::default()).unwrap();
        ds.split = vec![Split::Assess; 2];
        let agent = init_agent(AgentConfig::default()).unwrap();
        assert!(matches!(
            train(&agent, &ds, &TrainParams::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn divergence_reports_epoch() {
        let ds = generate_dataset(4, 1, &FactorWeights::default()).unwrap();
        let agent = init_agent(AgentConfig::default()).unwrap();
        let hp = TrainParams {
            learning_rate: 1e6,
            epochs: 50,
            max_grad_norm: None,
            ..TrainParams::default()
        };
        match train(&agent, &ds, &hp) {
            Err(Error::NumericFailure { epoch, .. }) => assert!(epoch < 50),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }
}
