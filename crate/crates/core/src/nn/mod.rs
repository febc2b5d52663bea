//! A small sequential network stack: valid convolutions, max pooling,
//! ReLU, inverted dropout and dense layers over CHW tensors of f64, with
//! exact reverse-mode gradients and plain SGD.
//!
//! Per-sample results never depend on the thread count: each sample is
//! processed in its own workspace and batch gradients are summed in sample
//! order.

mod io;
mod kernels;
mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::error::{invalid, Error, Result};
use crate::parallel;
use crate::rng;
use kernels::ConvGeom;

pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use loss::{huber_svm_loss, softmax, softmax_ce_loss, HUBER_DELTA};
pub use train::{gradient_check, train, EpochStats, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv1D {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Conv2D {
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool1D {
        width: usize,
    },
    MaxPool2D {
        size: (usize, usize),
    },
    ReLU,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        out_units: usize,
    },
}

impl LayerSpec {
    fn validate(&self) -> std::result::Result<(), String> {
        let ok = match *self {
            LayerSpec::Conv1D {
                out_channels,
                kernel,
                stride,
            } => out_channels >= 1 && kernel >= 1 && stride >= 1,
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                stride,
            } => out_channels >= 1 && kernel.0 >= 1 && kernel.1 >= 1 && stride.0 >= 1 && stride.1 >= 1,
            LayerSpec::MaxPool1D { width } => width >= 1,
            LayerSpec::MaxPool2D { size } => size.0 >= 1 && size.1 >= 1,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::Dense { out_units } => out_units >= 1,
            LayerSpec::ReLU | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid hyperparameters {self}"))
        }
    }

    fn conv_geom(&self, input: Shape) -> Option<std::result::Result<ConvGeom, String>> {
        let (o, k, s) = match *self {
            LayerSpec::Conv1D {
                out_channels,
                kernel,
                stride,
            } => {
                if input.h != 1 {
                    return Some(Err(format!("conv1d needs height 1, got input {input}")));
                }
                (out_channels, (1, kernel), (1, stride))
            }
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                stride,
            } => (out_channels, kernel, stride),
            _ => return None,
        };
        Some(
            ConvGeom::new((input.c, input.h, input.w), o, k, s)
                .ok_or_else(|| format!("kernel {}x{} does not fit input {input}", k.0, k.1)),
        )
    }

    fn pool_size(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::MaxPool1D { width } => Some((1, width)),
            LayerSpec::MaxPool2D { size } => Some(size),
            _ => None,
        }
    }

    fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        self.validate()?;
        if let Some(g) = self.conv_geom(input) {
            let g = g?;
            return Ok(Shape::new(g.o, g.oh, g.ow));
        }
        if let Some((ph, pw)) = self.pool_size() {
            if input.h < ph || input.w < pw {
                return Err(format!("pool {ph}x{pw} does not fit input {input}"));
            }
            return Ok(Shape::new(input.c, input.h / ph, input.w / pw));
        }
        Ok(match *self {
            LayerSpec::Flatten => Shape::new(input.len(), 1, 1),
            LayerSpec::Dense { out_units } => Shape::new(out_units, 1, 1),
            _ => input,
        })
    }

    /// `(weights, biases)` counts.
    fn param_counts(&self, input: Shape) -> (usize, usize) {
        match *self {
            LayerSpec::Conv1D {
                out_channels,
                kernel,
                ..
            } => (out_channels * input.c * kernel, out_channels),
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                ..
            } => (out_channels * input.c * kernel.0 * kernel.1, out_channels),
            LayerSpec::Dense { out_units } => (out_units * input.len(), out_units),
            _ => (0, 0),
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv1D { .. } | LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. }
        )
    }
}

/// Layer-list syntax: `conv1d(16,7,2)`, `conv2d(16,3x7,1x2)`,
/// `maxpool1d(2)`, `maxpool2d(1x2)`, `relu`, `dropout(0.3)`, `flatten`,
/// `dense(64)`.
impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv1D {
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv1d({out_channels},{kernel},{stride})"),
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                stride,
            } => write!(
                f,
                "conv2d({out_channels},{}x{},{}x{})",
                kernel.0, kernel.1, stride.0, stride.1
            ),
            LayerSpec::MaxPool1D { width } => write!(f, "maxpool1d({width})"),
            LayerSpec::MaxPool2D { size } => write!(f, "maxpool2d({}x{})", size.0, size.1),
            LayerSpec::ReLU => f.write_str("relu"),
            LayerSpec::Dropout { rate } => write!(f, "dropout({rate})"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dense { out_units } => write!(f, "dense({out_units})"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| invalid(format!("unclosed parenthesis in layer {s:?}")))?;
                (n.trim().to_string(), inner.split(',').map(|a| a.trim().to_string()).collect())
            }
            None => (s.clone(), Vec::new()),
        };
        let bad = || invalid(format!("cannot parse layer {s:?}"));
        let num = |a: &str| a.parse::<usize>().map_err(|_| bad());
        let pair = |a: &str| -> Result<(usize, usize)> {
            match a.split_once('x') {
                Some((x, y)) => Ok((num(x)?, num(y)?)),
                None => Err(bad()),
            }
        };
        let arity = |n: usize| if args.len() == n { Ok(()) } else { Err(bad()) };
        let spec = match name.as_str() {
            "conv1d" => {
                arity(3)?;
                LayerSpec::Conv1D {
                    out_channels: num(&args[0])?,
                    kernel: num(&args[1])?,
                    stride: num(&args[2])?,
                }
            }
            "conv2d" => {
                arity(3)?;
                LayerSpec::Conv2D {
                    out_channels: num(&args[0])?,
                    kernel: pair(&args[1])?,
                    stride: pair(&args[2])?,
                }
            }
            "maxpool1d" => {
                arity(1)?;
                LayerSpec::MaxPool1D { width: num(&args[0])? }
            }
            "maxpool2d" => {
                arity(1)?;
                LayerSpec::MaxPool2D { size: pair(&args[0])? }
            }
            "relu" => {
                arity(0)?;
                LayerSpec::ReLU
            }
            "dropout" => {
                arity(1)?;
                LayerSpec::Dropout {
                    rate: args[0].parse().map_err(|_| bad())?,
                }
            }
            "flatten" => {
                arity(0)?;
                LayerSpec::Flatten
            }
            "dense" => {
                arity(1)?;
                LayerSpec::Dense { out_units: num(&args[0])? }
            }
            _ => return Err(bad()),
        };
        spec.validate().map_err(invalid)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    /// Raw linear outputs trained with elementwise Huber loss against
    /// one-hot targets.
    SvmLinear,
    Softmax,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::SvmLinear => "svm",
            Head::Softmax => "softmax",
        })
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svm" | "svmlinear" | "huber" => Ok(Head::SvmLinear),
            "softmax" => Ok(Head::Softmax),
            _ => Err(invalid(format!("unknown head {s:?}; expected svm or softmax"))),
        }
    }
}

impl Head {
    /// Per-class scores from the final layer's raw outputs.
    pub fn scores(self, raw: &[f64]) -> Vec<f64> {
        match self {
            Head::SvmLinear => raw.to_vec(),
            Head::Softmax => softmax(raw),
        }
    }

    /// Loss and its gradient with respect to the raw outputs.
    pub fn loss(self, raw: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        match self {
            Head::SvmLinear => {
                if label >= raw.len() {
                    return Err(invalid(format!("label {label} out of range for {} classes", raw.len())));
                }
                let mut g = vec![0.0; raw.len()];
                g[label] = 1.0;
                huber_svm_loss(raw, &g, HUBER_DELTA)
            }
            Head::Softmax => softmax_ce_loss(raw, label),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    geom: Option<ConvGeom>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
    head: Head,
    feature_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn divide(&mut self, n: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v /= n);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub label: usize,
}

/// Index of the largest score; the lowest index wins exact ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

const RUN_CHUNK: usize = 32;

/// Per-sample buffers, reused across batches.
///
/// `acts[l]` holds the output of layer `l` unless the layer works in place
/// (ReLU, dropout, flatten), in which case it writes into the buffer of
/// the layer it follows. `grads` holds conv layers only; dense gradients
/// are reduced over the whole batch directly.
#[derive(Debug, Clone, Default)]
pub(crate) struct Workspace {
    acts: Vec<Vec<f64>>,
    slots: Vec<usize>,
    argmax: Vec<Vec<u32>>,
    masks: Vec<Vec<f64>>,
    delta: Vec<f64>,
    grads: Vec<LayerGrad>,
    training: bool,
    ready: bool,
}

fn in_place(spec: &LayerSpec) -> bool {
    matches!(spec, LayerSpec::ReLU | LayerSpec::Dropout { .. } | LayerSpec::Flatten)
}

impl Workspace {
    pub fn new(net: &Network) -> Self {
        let n = net.layers.len();
        let mut slots = Vec::with_capacity(n);
        for (l, layer) in net.layers.iter().enumerate() {
            let s = if l > 0 && in_place(&layer.spec) { slots[l - 1] } else { l };
            slots.push(s);
        }
        Workspace {
            acts: net
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| {
                    if slots[l] == l && !net.transient(l) {
                        vec![0.0; layer.output.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
            slots,
            argmax: vec![Vec::new(); n],
            masks: vec![Vec::new(); n],
            delta: Vec::new(),
            grads: net
                .layers
                .iter()
                .map(|l| {
                    let (w, b) = if l.geom.is_some() {
                        (l.weights.len(), l.bias.len())
                    } else {
                        (0, 0)
                    };
                    LayerGrad {
                        weights: vec![0.0; w],
                        bias: vec![0.0; b],
                    }
                })
                .collect(),
            training: false,
            ready: false,
        }
    }

    /// Output of layer `l`; valid until a later in-place layer runs.
    fn act(&self, l: usize) -> &[f64] {
        &self.acts[self.slots[l]]
    }

    /// Input of layer `l`.
    fn input<'a>(&'a self, l: usize, x: &'a [f64]) -> &'a [f64] {
        if l == 0 {
            x
        } else {
            self.act(l - 1)
        }
    }

    pub fn output(&self) -> &[f64] {
        self.slots.last().map_or(&[], |&s| &self.acts[s])
    }
}

/// Per-thread scratch shared by every sample a thread processes.
#[derive(Default)]
struct Scratch {
    phased: Vec<f64>,
    raw: Vec<f64>,
    dphase: Vec<f64>,
    cur: Vec<f64>,
    next: Vec<f64>,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Scratch> = std::cell::RefCell::new(Scratch::default());
}

/// Activations kept by `Network::forward` for a matching `backward`.
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    inputs: Vec<Vec<f64>>,
    workspaces: Vec<Workspace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    /// Final-layer outputs before the head.
    pub raw: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

fn he_uniform<R: Rng>(fan_in: usize, n: usize, r: &mut R) -> Vec<f64> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| r.gen_range(-limit..limit)).collect()
}

impl Network {
    /// Chains `specs` from `input`, failing at the first layer whose
    /// shape does not fit. Weights are He-uniform from `seed`, biases zero.
    pub fn new(input: Shape, specs: &[LayerSpec], head: Head, seed: u64) -> Result<Self> {
        let mut net = Network::with_zero_params(input, specs, head)?;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if !layer.weights.is_empty() {
                let fan_in = layer.weights.len() / layer.bias.len();
                let mut r = rng::stream(seed, rng::TAG_INIT, i as u64);
                layer.weights = he_uniform(fan_in, layer.weights.len(), &mut r);
            }
        }
        Ok(net)
    }

    pub(crate) fn with_zero_params(input: Shape, specs: &[LayerSpec], head: Head) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Shape {
                layer: 0,
                msg: format!("empty input shape {input}"),
            });
        }
        if specs.is_empty() {
            return Err(invalid("network has no layers"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        for (i, spec) in specs.iter().enumerate() {
            let out = spec.output_shape(shape).map_err(|msg| Error::Shape { layer: i, msg })?;
            let (nw, nb) = spec.param_counts(shape);
            let geom = spec.conv_geom(shape).map(|g| g.unwrap());
            layers.push(Layer {
                spec: *spec,
                input: shape,
                output: out,
                geom,
                weights: vec![0.0; nw],
                bias: vec![0.0; nb],
            });
            shape = out;
        }
        let feature_layer = default_feature_layer(&layers);
        Ok(Network {
            input,
            layers,
            head,
            feature_layer,
        })
    }

    pub fn with_feature_layer(mut self, index: usize) -> Result<Self> {
        if index >= self.layers.len() {
            return Err(invalid(format!(
                "feature layer {index} out of range for {} layers",
                self.layers.len()
            )));
        }
        self.feature_layer = Some(index);
        Ok(self)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn feature_layer(&self) -> Option<usize> {
        self.feature_layer
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output.len())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input.len() {
            return Err(Error::Shape {
                layer: 0,
                msg: format!(
                    "input has {} values, network expects {} ({})",
                    x.len(),
                    self.input.len(),
                    self.input
                ),
            });
        }
        Ok(())
    }

    fn is_dense(&self, l: usize) -> bool {
        matches!(self.layers[l].spec, LayerSpec::Dense { .. })
    }

    /// End (exclusive) of the run of non-dense layers starting at `l`,
    /// capped at `limit`.
    fn segment_end(&self, l: usize, limit: usize) -> usize {
        (l..limit).find(|&k| self.is_dense(k)).unwrap_or(limit)
    }

    /// Start of the run of non-dense layers ending at `l`.
    fn segment_start(&self, l: usize) -> usize {
        (0..=l).rev().find(|&k| self.is_dense(k)).map_or(0, |k| k + 1)
    }

    /// A ReLU feeding straight into a max pool runs as one step: the pool
    /// reads the raw values and clamps its maxima, which equals pooling
    /// the rectified values.
    fn fuses_into_pool(&self, l: usize) -> bool {
        l > 0
            && self.layers.get(l).is_some_and(|r| matches!(r.spec, LayerSpec::ReLU))
            && self.layers.get(l + 1).is_some_and(|n| n.spec.pool_size().is_some())
    }

    /// A conv whose output only feeds a fused ReLU and pool. Backward never
    /// reads that output, so it lives in thread scratch rather than in
    /// every sample's workspace.
    fn transient(&self, l: usize) -> bool {
        self.layers[l].geom.is_some() && self.fuses_into_pool(l + 1)
    }

    /// Layers `from..to`, all non-dense, for one sample.
    fn segment_forward(&self, from: usize, to: usize, x: &[f64], training: bool, key: u64, ws: &mut Workspace, sc: &mut Scratch) {
        let mut k = from;
        while k < to {
            if k + 2 < to && self.transient(k) {
                let input = ws.input(k, x);
                let mut raw = std::mem::take(&mut sc.raw);
                raw.resize(self.layers[k].output.len(), 0.0);
                self.conv_into(k, input, &mut sc.phased, &mut raw);
                let s = self.layers[k + 2].input;
                let p = self.layers[k + 2].spec.pool_size().unwrap();
                let out = &mut ws.acts[k + 2];
                kernels::maxpool_forward(&raw, (s.c, s.h, s.w), p, out, &mut ws.argmax[k + 2]);
                for v in out.iter_mut() {
                    if !(*v > 0.0) {
                        *v = 0.0;
                    }
                }
                sc.raw = raw;
                k += 3;
            } else if k + 1 < to && self.fuses_into_pool(k) {
                self.layer_forward(k + 1, x, training, key, ws, sc);
                for v in ws.acts[k + 1].iter_mut() {
                    if !(*v > 0.0) {
                        *v = 0.0;
                    }
                }
                k += 2;
            } else {
                self.layer_forward(k, x, training, key, ws, sc);
                k += 1;
            }
        }
    }

    fn conv_into(&self, l: usize, input: &[f64], phased: &mut Vec<f64>, out: &mut [f64]) {
        let layer = &self.layers[l];
        let g = layer.geom.as_ref().unwrap();
        let src = if g.sw > 1 {
            kernels::decimate(input, g, phased);
            &phased[..]
        } else {
            input
        };
        kernels::conv_forward(src, g, &layer.weights, &layer.bias, out);
    }

    /// One non-dense layer for one sample.
    fn layer_forward(&self, l: usize, x: &[f64], training: bool, dropout_key: u64, ws: &mut Workspace, sc: &mut Scratch) {
        let layer = &self.layers[l];
        if in_place(&layer.spec) {
            let slot = ws.slots[l];
            if l == 0 {
                ws.acts[0].copy_from_slice(x);
            }
            let buf = &mut ws.acts[slot];
            match layer.spec {
                LayerSpec::ReLU => {
                    for v in buf.iter_mut() {
                        if !(*v > 0.0) {
                            *v = 0.0;
                        }
                    }
                }
                LayerSpec::Dropout { rate } if training && rate > 0.0 => {
                    let mask = &mut ws.masks[l];
                    dropout_mask(rate, rng::derive(dropout_key, rng::TAG_DROPOUT, l as u64), buf.len(), mask);
                    for (v, &m) in buf.iter_mut().zip(mask.iter()) {
                        *v *= m;
                    }
                }
                _ => {}
            }
            return;
        }
        let (prev, rest) = ws.acts.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &prev[ws.slots[l - 1]] };
        // Transient slots are only allocated if a partial pass needs them.
        rest[0].resize(layer.output.len(), 0.0);
        let out = &mut rest[0][..];
        match layer.spec {
            LayerSpec::Conv1D { .. } | LayerSpec::Conv2D { .. } => self.conv_into(l, input, &mut sc.phased, out),
            LayerSpec::MaxPool1D { .. } | LayerSpec::MaxPool2D { .. } => {
                let s = layer.input;
                let p = layer.spec.pool_size().unwrap();
                kernels::maxpool_forward(input, (s.c, s.h, s.w), p, out, &mut ws.argmax[l]);
            }
            _ => unreachable!("dense layers run batched"),
        }
    }

    /// Forward pass over a batch through layers `0..upto`. Runs of
    /// non-dense layers go sample by sample; dense layers run over the
    /// whole batch at once. Sample `s` uses `xs[s]`, `keys[s]` and `wss[s]`.
    pub(crate) fn forward_batch(
        &self,
        xs: &[&[f64]],
        training: bool,
        keys: &[u64],
        wss: &mut [Workspace],
        upto: usize,
    ) {
        let mut l = 0;
        while l < upto {
            let layer = &self.layers[l];
            if let LayerSpec::Dense { .. } = layer.spec {
                let mut pairs: Vec<(&[f64], &mut [f64])> = wss
                    .iter_mut()
                    .zip(xs)
                    .map(|(ws, &x)| {
                        let (prev, rest) = ws.acts.split_at_mut(l);
                        let input: &[f64] = if l == 0 { x } else { &prev[ws.slots[l - 1]] };
                        (input, &mut rest[0][..])
                    })
                    .collect();
                let chunk = pairs.len().div_ceil(parallel::threads()).max(1);
                let mut parts: Vec<&mut [(&[f64], &mut [f64])]> = pairs.chunks_mut(chunk).collect();
                parallel::for_each_mut(&mut parts, |_, part| {
                    let (ins, mut outs): (Vec<&[f64]>, Vec<&mut [f64]>) =
                        part.iter_mut().map(|(i, o)| (*i, &mut **o)).unzip();
                    kernels::dense_forward_batch(&ins, &layer.weights, &layer.bias, &mut outs);
                });
                l += 1;
            } else {
                let end = self.segment_end(l, upto);
                parallel::for_each_mut(wss, |s, ws| {
                    SCRATCH.with(|sc| {
                        self.segment_forward(l, end, xs[s], training, keys[s], ws, &mut sc.borrow_mut());
                    })
                });
                l = end;
            }
        }
        for ws in wss.iter_mut() {
            ws.training = training;
            ws.ready = upto == self.layers.len();
        }
    }

    /// One non-dense layer for one sample: maps `sc.cur` to `sc.next` and
    /// writes conv parameter gradients into `ws.grads`.
    fn layer_backward(&self, l: usize, x: &[f64], ws: &mut Workspace, sc: &mut Scratch) {
        let layer = &self.layers[l];
        let need_dx = l > 0;
        let Scratch {
            phased,
            dphase,
            cur,
            next,
            ..
        } = sc;
        next.clear();
        next.resize(if need_dx { layer.input.len() } else { 0 }, 0.0);
        match layer.spec {
            LayerSpec::Conv1D { .. } | LayerSpec::Conv2D { .. } => {
                let geom = layer.geom.as_ref().unwrap();
                let input: &[f64] = if l == 0 { x } else { &ws.acts[ws.slots[l - 1]] };
                let src = if geom.sw > 1 {
                    kernels::decimate(input, geom, phased);
                    &phased[..]
                } else {
                    input
                };
                let g = &mut ws.grads[l];
                kernels::conv_backward_params(src, geom, cur, &mut g.weights, &mut g.bias);
                if need_dx {
                    if geom.sw > 1 {
                        dphase.clear();
                        dphase.resize(geom.phased_len(), 0.0);
                        kernels::conv_backward_input(geom, &layer.weights, cur, dphase);
                        kernels::interleave(dphase, geom, next);
                    } else {
                        kernels::conv_backward_input(geom, &layer.weights, cur, next);
                    }
                }
            }
            LayerSpec::MaxPool1D { .. } | LayerSpec::MaxPool2D { .. } => {
                if need_dx {
                    kernels::maxpool_backward(cur, &ws.argmax[l], next);
                }
            }
            LayerSpec::ReLU => {
                // The stored output may since have been masked by an
                // in-place dropout; the incoming gradient is zero there.
                if need_dx {
                    for ((n, &d), &a) in next.iter_mut().zip(cur.iter()).zip(ws.act(l)) {
                        *n = if a > 0.0 { d } else { 0.0 };
                    }
                }
            }
            LayerSpec::Dropout { rate } if ws.training && rate > 0.0 => {
                if need_dx {
                    for ((n, &d), &m) in next.iter_mut().zip(cur.iter()).zip(&ws.masks[l]) {
                        *n = d * m;
                    }
                }
            }
            LayerSpec::Dropout { .. } | LayerSpec::Flatten => {
                if need_dx {
                    next.copy_from_slice(cur);
                }
            }
            LayerSpec::Dense { .. } => unreachable!("dense layers run batched"),
        }
        std::mem::swap(cur, next);
    }

    /// Backward through a fused ReLU and pool. The stored pool output may
    /// since have been masked by an in-place dropout, which leaves its sign
    /// intact or zeroes the incoming gradient.
    fn relu_pool_backward(input_len: usize, argmax: &[u32], pooled: &[f64], sc: &mut Scratch) {
        sc.next.clear();
        sc.next.resize(input_len, 0.0);
        for ((&d, &at), &v) in sc.cur.iter().zip(argmax).zip(pooled) {
            if v > 0.0 {
                sc.next[at as usize] += d;
            }
        }
        std::mem::swap(&mut sc.cur, &mut sc.next);
    }

    /// Backward pass over a batch after a full `forward_batch`. `dlast[s]`
    /// is the loss gradient of sample `s` at the final layer. `total`
    /// receives the parameter gradients summed over samples in order.
    pub(crate) fn backward_batch(
        &self,
        xs: &[&[f64]],
        wss: &mut [Workspace],
        dlast: &[&[f64]],
        total: &mut Gradients,
    ) {
        for (ws, d) in wss.iter_mut().zip(dlast) {
            ws.delta.clear();
            ws.delta.extend_from_slice(d);
        }
        let mut l = self.layers.len();
        while l > 0 {
            let top = l - 1;
            let layer = &self.layers[top];
            if let LayerSpec::Dense { .. } = layer.spec {
                let n = layer.input.len();
                let mut nexts: Vec<Vec<f64>> = (0..wss.len())
                    .map(|_| vec![0.0; if top > 0 { n } else { 0 }])
                    .collect();
                let ins: Vec<&[f64]> = wss.iter().zip(xs).map(|(ws, &x)| ws.input(top, x)).collect();
                let dys: Vec<&[f64]> = wss.iter().map(|ws| &ws.delta[..]).collect();
                let g = &mut total.layers[top];
                let mut jobs: Vec<(usize, &mut [f64], &mut [f64])> = g
                    .weights
                    .chunks_mut(n * 8)
                    .zip(g.bias.chunks_mut(8))
                    .enumerate()
                    .map(|(b, (w, d))| (b * 8, w, d))
                    .collect();
                parallel::for_each_mut(&mut jobs, |_, (first, w, b)| {
                    let rows: Vec<&[f64]> = dys.iter().map(|d| &d[*first..*first + b.len()]).collect();
                    kernels::dense_params_batch(&ins, &rows, w, b);
                });
                if top > 0 {
                    let chunk = nexts.len().div_ceil(parallel::threads()).max(1);
                    let mut parts: Vec<(usize, &mut [Vec<f64>])> =
                        nexts.chunks_mut(chunk).enumerate().map(|(c, p)| (c * chunk, p)).collect();
                    parallel::for_each_mut(&mut parts, |_, (start, part)| {
                        let mut outs: Vec<&mut [f64]> = part.iter_mut().map(|v| &mut v[..]).collect();
                        kernels::dense_backward_input_batch(&layer.weights, &dys[*start..*start + outs.len()], &mut outs);
                    });
                }
                for (ws, v) in wss.iter_mut().zip(nexts) {
                    ws.delta = v;
                }
                l = top;
            } else {
                let start = self.segment_start(top);
                parallel::for_each_mut(wss, |s, ws| {
                    SCRATCH.with(|sc| {
                        let sc = &mut *sc.borrow_mut();
                        sc.cur.clear();
                        sc.cur.extend_from_slice(&ws.delta);
                        let mut k = top + 1;
                        while k > start {
                            k -= 1;
                            if k > start && self.fuses_into_pool(k - 1) {
                                Self::relu_pool_backward(self.layers[k].input.len(), &ws.argmax[k], ws.act(k), sc);
                                k -= 1;
                            } else {
                                self.layer_backward(k, xs[s], ws, sc);
                            }
                        }
                        ws.delta.clear();
                        ws.delta.extend_from_slice(&sc.cur);
                    })
                });
                l = start;
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.geom.is_none() {
                continue;
            }
            let t = &mut total.layers[l];
            t.weights.fill(0.0);
            t.bias.fill(0.0);
            for ws in wss.iter() {
                let g = &ws.grads[l];
                for (a, b) in t.weights.iter_mut().zip(&g.weights) {
                    *a += b;
                }
                for (a, b) in t.bias.iter_mut().zip(&g.bias) {
                    *a += b;
                }
            }
        }
    }

    /// Runs a batch. In training mode each sample draws one dropout key
    /// from `rng`, in batch order; evaluation mode leaves `rng` untouched.
    pub fn forward<R: RngCore>(
        &self,
        batch: &[&[f64]],
        training: bool,
        rng: &mut R,
    ) -> Result<(BatchOutput, BatchCache)> {
        for x in batch {
            self.check_input(x)?;
        }
        let keys: Vec<u64> = batch
            .iter()
            .map(|_| if training { rng.next_u64() } else { 0 })
            .collect();
        let mut workspaces: Vec<Workspace> = batch.iter().map(|_| Workspace::new(self)).collect();
        self.forward_batch(batch, training, &keys, &mut workspaces, self.layers.len());
        let raw: Vec<Vec<f64>> = workspaces.iter().map(|ws| ws.output().to_vec()).collect();
        let scores = raw.iter().map(|r| self.head.scores(r)).collect();
        let cache = BatchCache {
            inputs: batch.iter().map(|x| x.to_vec()).collect(),
            workspaces,
        };
        Ok((BatchOutput { raw, scores }, cache))
    }

    /// Mean over the batch of per-sample parameter gradients.
    pub fn backward(&self, cache: &BatchCache, loss_grads: &[Vec<f64>]) -> Result<Gradients> {
        if cache.workspaces.is_empty()
            || cache.workspaces.len() != loss_grads.len()
            || cache.workspaces.iter().any(|ws| !ws.ready || ws.slots.len() != self.layers.len())
        {
            return Err(Error::MissingCache);
        }
        let k = self.num_classes();
        if let Some(g) = loss_grads.iter().find(|g| g.len() != k) {
            return Err(Error::Shape {
                layer: self.layers.len() - 1,
                msg: format!("loss gradient has {} entries, network outputs {k}", g.len()),
            });
        }
        let mut workspaces = cache.workspaces.clone();
        let xs: Vec<&[f64]> = cache.inputs.iter().map(|x| &x[..]).collect();
        let dlast: Vec<&[f64]> = loss_grads.iter().map(|g| &g[..]).collect();
        let mut total = Gradients::zeros_like(self);
        self.backward_batch(&xs, &mut workspaces, &dlast, &mut total);
        total.divide(workspaces.len() as f64);
        Ok(total)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        Ok(self.predict_many(&[x])?.remove(0))
    }

    pub fn predict_many(&self, xs: &[&[f64]]) -> Result<Vec<Prediction>> {
        Ok(self
            .run_many(xs, self.layers.len(), |ws| ws.output().to_vec())?
            .into_iter()
            .map(|raw| {
                let scores = self.head.scores(&raw);
                Prediction {
                    label: argmax(&scores),
                    scores,
                }
            })
            .collect())
    }

    /// Activation of the feature layer (the penultimate dense layer unless
    /// set otherwise) in evaluation mode.
    pub fn extract_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self
            .feature_layer
            .ok_or_else(|| invalid("network has no feature layer"))?;
        Ok(self.run_many(&[x], f + 1, |ws| ws.act(f).to_vec())?.remove(0))
    }

    /// Evaluation-mode forward through layers `0..upto` over `xs` in
    /// batches of `RUN_CHUNK`.
    fn run_many<T: Send, F>(&self, xs: &[&[f64]], upto: usize, take: F) -> Result<Vec<T>>
    where
        F: Fn(&Workspace) -> T + Sync,
    {
        for x in xs {
            self.check_input(x)?;
        }
        let keys = [0u64; RUN_CHUNK];
        let mut wss: Vec<Workspace> = (0..RUN_CHUNK.min(xs.len())).map(|_| Workspace::new(self)).collect();
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(RUN_CHUNK) {
            let wss = &mut wss[..chunk.len()];
            self.forward_batch(chunk, false, &keys[..chunk.len()], wss, upto);
            out.extend(wss.iter().map(&take));
        }
        Ok(out)
    }

    /// `θ ← θ − lr·grad` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        let matches = grads.layers.len() == self.layers.len()
            && grads
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len());
        if !matches {
            return Err(invalid("gradient shapes do not match the network"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, d) in layer.weights.iter_mut().zip(&g.weights) {
                *p -= learning_rate * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= learning_rate * d;
            }
        }
        Ok(())
    }
}

/// Penultimate dense layer, if the stack has two or more.
fn default_feature_layer(layers: &[Layer]) -> Option<usize> {
    let dense: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.spec, LayerSpec::Dense { .. }))
        .map(|(i, _)| i)
        .collect();
    (dense.len() >= 2).then(|| dense[dense.len() - 2])
}

/// Inverted-dropout scales: 0 with probability `rate`, else `1/(1−rate)`.
fn dropout_mask(rate: f64, key: u64, n: usize, mask: &mut Vec<f64>) {
    use rand::SeedableRng;
    let mut r = rng::Stream::seed_from_u64(key);
    let threshold = (rate * 4_294_967_296.0).round() as u64;
    let keep = 1.0 / (1.0 - rate);
    mask.clear();
    mask.extend((0..n).map(|_| if u64::from(r.next_u32()) < threshold { 0.0 } else { keep }));
}
