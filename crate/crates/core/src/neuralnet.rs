//! Dense feed-forward networks with hand-written reverse mode, an Adam
//! optimizer and a versioned JSON model format.
//!
//! Layers may be block-diagonal: a network with `k` streams stacks `k`
//! independent sub-networks that share the input. The first layer is dense
//! (every stream reads the whole input); later layers only connect units of
//! the same stream. Off-block weights are stored as zeros and never touched.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seeds::Rng;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Linear,
    Softmax,
    /// Mean from the last layer plus a state-independent log-std vector.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "one")]
    pub blocks: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn one() -> usize {
    1
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize, blocks: usize) -> Self {
        Self {
            rows,
            cols,
            blocks,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    #[inline]
    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    /// Columns that feed row `r`.
    #[inline]
    pub fn col_range(&self, r: usize) -> std::ops::Range<usize> {
        if self.blocks == 1 {
            0..self.cols
        } else {
            let b = r / (self.rows / self.blocks);
            let cb = self.cols / self.blocks;
            b * cb..(b + 1) * cb
        }
    }

    fn in_block(&self, r: usize, c: usize) -> bool {
        self.col_range(r).contains(&c)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let err = |m: String| Err(Error::Format(format!("layer {index}: {m}")));
        if self.rows == 0 || self.cols == 0 {
            return err("empty layer".into());
        }
        if self.weights.len() != self.rows * self.cols {
            return err(format!(
                "declared {}x{} but {} weights",
                self.rows,
                self.cols,
                self.weights.len()
            ));
        }
        if self.bias.len() != self.rows {
            return err(format!("declared {} rows but {} biases", self.rows, self.bias.len()));
        }
        if self.blocks == 0 || self.rows % self.blocks != 0 || self.cols % self.blocks != 0 {
            return err(format!(
                "{} blocks do not divide {}x{}",
                self.blocks, self.rows, self.cols
            ));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return err("non-finite parameter".into());
        }
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.in_block(r, c) && self.weight(r, c) != 0.0 {
                    return err(format!("off-block weight at ({r}, {c}) is non-zero"));
                }
            }
        }
        Ok(())
    }
}

/// Construction recipe. Hidden widths and `outputs` are per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub streams: usize,
    pub activation: Activation,
    pub head: OutputHead,
    pub init_log_std: f64,
    /// Multiplier on the initial output-layer weights.
    pub output_scale: f64,
}

impl NetSpec {
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize) -> Self {
        Self {
            inputs,
            hidden: hidden.to_vec(),
            outputs,
            streams: 1,
            activation: Activation::Tanh,
            head: OutputHead::Linear,
            init_log_std: 0.0,
            output_scale: 1.0,
        }
    }

    pub fn streams(mut self, k: usize) -> Self {
        self.streams = k;
        self
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn head(mut self, h: OutputHead) -> Self {
        self.head = h;
        self
    }

    pub fn init_log_std(mut self, v: f64) -> Self {
        self.init_log_std = v;
        self
    }

    pub fn output_scale(mut self, s: f64) -> Self {
        self.output_scale = s;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
    activation: Activation,
    head: OutputHead,
    log_std: Vec<f64>,
    generation: u64,
}

/// Values recorded during a forward pass, consumed by [`MlpNetwork::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Input to every layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer; the last entry is the raw head input.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
    generation: u64,
}

impl Forward {
    /// Head output (probabilities, `mean ++ log_std`, or raw values).
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Last-layer values before the head.
    pub fn raw(&self) -> &[f64] {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Parameter gradients laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub log_std: Vec<f64>,
}

impl GradientTape {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            log_std: vec![0.0; net.log_std.len()],
        }
    }

    pub fn zero(&mut self) {
        self.for_each_mut(|g| *g = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|g| *g *= s);
    }

    pub fn add(&mut self, other: &GradientTape) -> Result<()> {
        if !self.aligned_with(other) {
            return Err(Error::InvalidParameter("gradient tapes are not aligned".into()));
        }
        for (a, b) in self.flat_mut().zip(other.flat()) {
            *a += b;
        }
        Ok(())
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .chain(self.log_std.iter())
            .copied()
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
            .chain(self.log_std.iter_mut())
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for g in self.flat_mut() {
            f(g);
        }
    }

    pub fn norm(&self) -> f64 {
        self.flat().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(f64::is_finite)
    }

    fn aligned_with(&self, other: &GradientTape) -> bool {
        self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.len() == b.len())
            && self.bias.iter().zip(&other.bias).all(|(a, b)| a.len() == b.len())
            && self.log_std.len() == other.log_std.len()
    }

    fn aligned(&self, net: &MlpNetwork) -> bool {
        self.weights.len() == net.layers.len()
            && self
                .weights
                .iter()
                .zip(&net.layers)
                .all(|(w, l)| w.len() == l.weights.len())
            && self.bias.iter().zip(&net.layers).all(|(b, l)| b.len() == l.bias.len())
            && self.log_std.len() == net.log_std.len()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)[i]`.
pub fn log_softmax(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}

impl MlpNetwork {
    pub fn new(spec: &NetSpec, rng: &mut Rng) -> Result<Self> {
        if spec.inputs == 0 || spec.outputs == 0 || spec.streams == 0 {
            return Err(Error::InvalidParameter("network dimensions must be positive".into()));
        }
        if spec.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter("hidden widths must be positive".into()));
        }
        let k = spec.streams;
        let mut widths = vec![spec.inputs];
        widths.extend(spec.hidden.iter().map(|h| h * k));
        widths.push(spec.outputs * k);
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let blocks = if i == 0 { 1 } else { k };
            let mut layer = Layer::zeros(widths[i + 1], widths[i], blocks);
            let fan_in = layer.cols / blocks;
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if i == n_layers - 1 {
                bound *= spec.output_scale;
            }
            for r in 0..layer.rows {
                for c in layer.col_range(r) {
                    layer.weights[r * layer.cols + c] = if bound > 0.0 {
                        rng.random_range(-bound..bound)
                    } else {
                        0.0
                    };
                }
            }
            layers.push(layer);
        }
        let log_std = match spec.head {
            OutputHead::Gaussian => vec![spec.init_log_std; spec.outputs * k],
            _ => Vec::new(),
        };
        Self::from_parts(layers, spec.activation, spec.head, log_std)
    }

    pub fn from_parts(layers: Vec<Layer>, activation: Activation, head: OutputHead, log_std: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Format("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            l.validate(i)?;
            if i > 0 && l.cols != layers[i - 1].rows {
                return Err(Error::Format(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.cols,
                    i - 1,
                    layers[i - 1].rows
                )));
            }
        }
        let out = layers.last().map(|l| l.rows).unwrap_or(0);
        match head {
            OutputHead::Gaussian if log_std.len() != out => {
                return Err(Error::Format(format!(
                    "gaussian head needs {out} log-std entries, found {}",
                    log_std.len()
                )))
            }
            OutputHead::Linear | OutputHead::Softmax if !log_std.is_empty() => {
                return Err(Error::Format("log-std is only valid for a gaussian head".into()))
            }
            _ => {}
        }
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite log-std".into()));
        }
        Ok(Self {
            layers,
            activation,
            head,
            log_std,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn set_log_std(&mut self, v: &[f64]) -> Result<()> {
        check_dim("log-std", self.log_std.len(), v.len())?;
        self.log_std.copy_from_slice(v);
        self.generation += 1;
        Ok(())
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    /// Width of the last layer (number of logits / means).
    pub fn raw_dim(&self) -> usize {
        self.layers.last().expect("non-empty").rows
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            OutputHead::Gaussian => 2 * self.raw_dim(),
            _ => self.raw_dim(),
        }
    }

    /// Number of trainable parameters, including log-std.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
            + self.log_std.len()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        // (slot, offset) where slot 2k = weights of layer k, 2k+1 = bias, 2L = log-std.
        for (k, l) in self.layers.iter().enumerate() {
            if i < l.weights.len() {
                return (2 * k, i);
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return (2 * k + 1, i);
            }
            i -= l.bias.len();
        }
        (2 * self.layers.len(), i)
    }

    /// Flat parameter access in the same order as [`GradientTape::flat`].
    pub fn param(&self, i: usize) -> f64 {
        match self.locate(i) {
            (s, o) if s == 2 * self.layers.len() => self.log_std[o],
            (s, o) if s % 2 == 0 => self.layers[s / 2].weights[o],
            (s, o) => self.layers[s / 2].bias[o],
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let n = self.layers.len();
        match self.locate(i) {
            (s, o) if s == 2 * n => self.log_std[o] = v,
            (s, o) if s % 2 == 0 => self.layers[s / 2].weights[o] = v,
            (s, o) => self.layers[s / 2].bias[o] = v,
        }
        self.generation += 1;
    }

    /// Direct mutable access to a layer; bumps the generation.
    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        self.generation += 1;
        &mut self.layers[i]
    }

    /// Whether every hidden unit is a ReLU, i.e. the raw output is piecewise linear.
    pub fn is_relu(&self) -> bool {
        self.activation == Activation::Relu || self.layers.len() == 1
    }

    fn apply_head(&self, raw: &[f64]) -> Vec<f64> {
        match self.head {
            OutputHead::Linear => raw.to_vec(),
            OutputHead::Softmax => softmax(raw),
            OutputHead::Gaussian => {
                let mut out = raw.to_vec();
                out.extend_from_slice(&self.log_std);
                out
            }
        }
    }

    /// Evaluates the last layer without the head (logits or means).
    pub fn forward_raw(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), input.len())?;
        let last = self.layers.len() - 1;
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &x);
            if i < last {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let raw = self.forward_raw(input)?;
        Ok(self.apply_head(&raw))
    }

    pub fn forward_recorded(&self, input: &[f64]) -> Result<Forward> {
        check_dim("network input", self.input_dim(), input.len())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &x);
            let next = if i < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        let output = self.apply_head(pre.last().expect("non-empty"));
        Ok(Forward {
            inputs,
            pre,
            output,
            generation: self.generation,
        })
    }

    /// Gradients of `upstream . output` with respect to every parameter.
    pub fn backward(&self, fwd: &Forward, upstream: &[f64]) -> Result<GradientTape> {
        let mut tape = GradientTape::zeros_like(self);
        self.backward_into(fwd, upstream, &mut tape)?;
        Ok(tape)
    }

    /// Like [`backward`](Self::backward) but accumulates into `tape`.
    pub fn backward_into(&self, fwd: &Forward, upstream: &[f64], tape: &mut GradientTape) -> Result<()> {
        if fwd.generation != self.generation {
            return Err(Error::StaleTape {
                recorded: fwd.generation,
                current: self.generation,
            });
        }
        if !tape.aligned(self) {
            return Err(Error::InvalidParameter("gradient tape does not match network".into()));
        }
        check_dim("upstream gradient", self.output_dim(), upstream.len())?;
        let raw_dim = self.raw_dim();
        let mut delta: Vec<f64> = match self.head {
            OutputHead::Linear => upstream.to_vec(),
            OutputHead::Softmax => {
                let p = &fwd.output;
                let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
                p.iter().zip(upstream).map(|(pi, gi)| pi * (gi - dot)).collect()
            }
            OutputHead::Gaussian => {
                for (g, u) in tape.log_std.iter_mut().zip(&upstream[raw_dim..]) {
                    *g += u;
                }
                upstream[..raw_dim].to_vec()
            }
        };
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = &fwd.inputs[li];
            let gw = &mut tape.weights[li];
            let gb = &mut tape.bias[li];
            let mut dx = if li > 0 { vec![0.0; layer.cols] } else { Vec::new() };
            for r in 0..layer.rows {
                let d = delta[r];
                gb[r] += d;
                if d == 0.0 {
                    continue;
                }
                let base = r * layer.cols;
                for c in layer.col_range(r) {
                    gw[base + c] += d * x[c];
                    if li > 0 {
                        dx[c] += layer.weights[base + c] * d;
                    }
                }
            }
            if li > 0 {
                let z = &fwd.pre[li - 1];
                for c in 0..dx.len() {
                    dx[c] *= self.activation.derivative(z[c], x[c]);
                }
                delta = dx;
            }
        }
        Ok(())
    }

    /// Model file text.
    pub fn save(&self) -> String {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            activation: self.activation,
            head: self.head,
            layers: self.layers.clone(),
            log_std: self.log_std.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn load(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        let version = probe
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(probe)?;
        Self::from_parts(file.layers, file.activation, file.head, file.log_std)
    }
}

#[inline]
fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut z = layer.bias.clone();
    for (r, zr) in z.iter_mut().enumerate() {
        let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
        let range = layer.col_range(r);
        let mut s = 0.0;
        for c in range {
            s += row[c] * x[c];
        }
        *zr += s;
    }
    z
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    activation: Activation,
    head: OutputHead,
    layers: Vec<Layer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    log_std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Maximize the objective whose gradient is on the tape.
    Ascent,
    /// Minimize it.
    Descent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient to this global norm when exceeded; `0` disables.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: 0.0,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(net: &MlpNetwork, config: AdamConfig) -> Self {
        let n = net.num_params();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. A tape containing NaN or infinity is rejected
    /// and leaves both the network and the optimizer state untouched.
    pub fn step(&mut self, net: &mut MlpNetwork, tape: &GradientTape, direction: Direction) -> Result<()> {
        if !tape.aligned(net) || self.m.len() != net.num_params() {
            return Err(Error::InvalidParameter("gradient tape does not match network".into()));
        }
        if !tape.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let c = self.config;
        let mut scale = 1.0;
        if c.max_grad_norm > 0.0 {
            let norm = tape.norm();
            if norm > c.max_grad_norm {
                scale = c.max_grad_norm / norm;
            }
        }
        let sign = match direction {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut idx = 0;
        let mut update = |p: &mut f64, g: f64, m: &mut [f64], v: &mut [f64]| {
            let g = g * scale;
            m[idx] = c.beta1 * m[idx] + (1.0 - c.beta1) * g;
            v[idx] = c.beta2 * v[idx] + (1.0 - c.beta2) * g * g;
            if g != 0.0 || m[idx] != 0.0 {
                let mh = m[idx] / bc1;
                let vh = v[idx] / bc2;
                *p += sign * c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
            idx += 1;
        };
        for (li, layer) in net.layers.iter_mut().enumerate() {
            for (p, &g) in layer.weights.iter_mut().zip(&tape.weights[li]) {
                update(p, g, &mut self.m, &mut self.v);
            }
            for (p, &g) in layer.bias.iter_mut().zip(&tape.bias[li]) {
                update(p, g, &mut self.m, &mut self.v);
            }
        }
        for (p, &g) in net.log_std.iter_mut().zip(&tape.log_std) {
            update(p, g, &mut self.m, &mut self.v);
        }
        net.generation += 1;
        Ok(())
    }
}

/// Convenience wrapper with the signature used throughout the trainer.
pub fn optimizer_step(net: &mut MlpNetwork, tape: &GradientTape, adam: &mut Adam, direction: Direction) -> Result<()> {
    adam.step(net, tape, direction)
}
