//! A small feed-forward network with hand-written forward and backward
//! passes, sized for the synthetic-image experiments.
//!
//! Layers operate on batch-first tensors: `b x C x H x W` for convolutional
//! stages and `b x D` after [`LayerSpec::Flatten`]. A training forward pass
//! records a [`ForwardTape`] that [`Network::backward`] consumes.
//!
//! PMDN coefficients are part of the network but never receive task-loss
//! gradients; the trainer updates them separately from the metadata loss.

pub mod checkpoint;
mod conv;
mod dense;
pub mod gradcheck;
pub mod loss;
mod meta;
mod norm;
pub mod optim;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use conv::Conv2d;
pub use dense::Dense;
pub use norm::{BatchNorm, LayerNorm, BATCHNORM_MOMENTUM, NORM_EPS};

use crate::error::{Error, Result};
use crate::linalg::{MetaBatch, MetadataMatrix};
use crate::mdn::{MdnState, PmdnParams};
use crate::tensor::{Scalar, Tensor};
use meta::{MdnCache, PmdnCache};
use norm::NormCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Structural description of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Relu,
    /// 3x3 kernel, stride 1, padding 1.
    Conv2d { in_channels: usize, out_channels: usize },
    Flatten,
    LayerNorm { dim: usize },
    BatchNorm { dim: usize, momentum: f64 },
    Mdn,
    Pmdn,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::LayerNorm { .. } => "layernorm",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Mdn => "mdn",
            LayerSpec::Pmdn => "pmdn",
        }
    }
}

/// Which normalization fills the slots of the baseline CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormMode {
    None,
    BatchNorm,
    Mdn,
    Pmdn,
}

impl NormMode {
    pub const ALL: [NormMode; 4] = [NormMode::None, NormMode::BatchNorm, NormMode::Mdn, NormMode::Pmdn];

    /// Method name used on the command line and in CSV output.
    pub fn name(self) -> &'static str {
        match self {
            NormMode::None => "baseline",
            NormMode::BatchNorm => "batchnorm",
            NormMode::Mdn => "mdn",
            NormMode::Pmdn => "pmdn",
        }
    }

    pub fn needs_metadata(self) -> bool {
        matches!(self, NormMode::Mdn | NormMode::Pmdn)
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" | "none" => Ok(NormMode::None),
            "batchnorm" | "bn" => Ok(NormMode::BatchNorm),
            "mdn" => Ok(NormMode::Mdn),
            "pmdn" => Ok(NormMode::Pmdn),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Widths of the baseline CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub image_size: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            conv1: 16,
            conv2: 32,
            hidden: 84,
        }
    }
}

impl CnnConfig {
    /// Conv-[norm]-ReLU-Conv-[norm]-ReLU-Flatten-Dense-[norm]-ReLU-Dense.
    /// Returns the layer list and the index of the ReLU that closes the
    /// first fully connected block (the feature layer used for evaluation).
    pub fn layers(&self, norm: NormMode) -> (Vec<LayerSpec>, usize) {
        let slot = |dim: usize, out: &mut Vec<LayerSpec>| match norm {
            NormMode::None => {}
            NormMode::BatchNorm => out.push(LayerSpec::BatchNorm {
                dim,
                momentum: BATCHNORM_MOMENTUM,
            }),
            NormMode::Mdn => out.push(LayerSpec::Mdn),
            NormMode::Pmdn => {
                out.push(LayerSpec::LayerNorm { dim });
                out.push(LayerSpec::Pmdn);
            }
        };
        let mut l = vec![LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: self.conv1,
        }];
        slot(self.conv1, &mut l);
        l.push(LayerSpec::Relu);
        l.push(LayerSpec::Conv2d {
            in_channels: self.conv1,
            out_channels: self.conv2,
        });
        slot(self.conv2, &mut l);
        l.push(LayerSpec::Relu);
        l.push(LayerSpec::Flatten);
        l.push(LayerSpec::Dense {
            input: self.conv2 * self.image_size * self.image_size,
            output: self.hidden,
        });
        slot(self.hidden, &mut l);
        l.push(LayerSpec::Relu);
        let tap = l.len() - 1;
        l.push(LayerSpec::Dense {
            input: self.hidden,
            output: 1,
        });
        (l, tap)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.image_size, self.image_size]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer<T> {
    Dense(Dense<T>),
    Relu,
    Conv2d(Conv2d<T>),
    Flatten,
    LayerNorm(LayerNorm<T>),
    BatchNorm(BatchNorm<T>),
    Mdn(MdnState),
    Pmdn(PmdnParams),
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Norm(NormCache<T>),
    Mdn(MdnCache),
    Pmdn(PmdnCache),
}

/// Values recorded by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    mode: Mode,
    layers: usize,
    batch: usize,
    /// Input to each executed layer (training mode only).
    inputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

/// Pooled features and metadata seen by one PMDN layer during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PmdnInput<'a> {
    pub layer: usize,
    pub features: &'a Tensor,
    pub meta: &'a MetaBatch,
}

impl<T: Scalar> ForwardTape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of layer slots (equals the network's layer count).
    pub fn len(&self) -> usize {
        self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers == 0
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Whether every layer was executed and cached.
    pub fn is_complete(&self) -> bool {
        self.mode == Mode::Train && self.inputs.len() == self.layers
    }

    /// Input activation of layer `i` (training tapes only).
    pub fn input(&self, i: usize) -> Option<&Tensor<T>> {
        self.inputs.get(i)
    }

    pub fn pmdn_inputs(&self) -> Vec<PmdnInput<'_>> {
        self.caches
            .iter()
            .enumerate()
            .filter_map(|(layer, c)| match c {
                Cache::Pmdn(p) => Some(PmdnInput {
                    layer,
                    features: &p.features,
                    meta: &p.meta,
                }),
                _ => None,
            })
            .collect()
    }
}

/// Task-loss gradients, aligned with [`Network::task_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub task: Vec<Vec<T>>,
    /// Gradient reaching each PMDN coefficient block from this pass; always
    /// zero because the coefficients are frozen during the weight update.
    pub pmdn_beta: Vec<Tensor>,
}

/// Location and size of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub layer: usize,
    pub name: &'static str,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    seed: u64,
    feature_tap: Option<usize>,
}

fn propagate(shape: &[usize], spec: &LayerSpec, index: usize) -> Result<Vec<usize>> {
    let bad = |want: String| Error::shape("layer composition", want, format!("layer {index} ({}) given {shape:?}", spec.kind()));
    match *spec {
        LayerSpec::Dense { input, output } => {
            if shape != [input] {
                return Err(bad(format!("[{input}]")));
            }
            Ok(vec![output])
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
        } => match shape {
            &[c, h, w] if c == in_channels && h >= 2 && w >= 2 => Ok(vec![out_channels, h, w]),
            _ => Err(bad(format!("[{in_channels}, h, w]"))),
        },
        LayerSpec::Relu | LayerSpec::Mdn | LayerSpec::Pmdn => Ok(shape.to_vec()),
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
        LayerSpec::LayerNorm { dim } | LayerSpec::BatchNorm { dim, .. } => {
            if shape.first() != Some(&dim) {
                return Err(bad(format!("[{dim}, ..]")));
            }
            Ok(shape.to_vec())
        }
    }
}

/// Checks that `specs` compose starting from `input_shape`.
pub(crate) fn validate_chain(input_shape: &[usize], specs: &[LayerSpec]) -> Result<()> {
    let mut shape = input_shape.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        shape = propagate(&shape, spec, i)?;
    }
    Ok(())
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network. MDN/PMDN layers need the training
    /// metadata matrix (its column layout, and for MDN its gram inverse).
    ///
    /// Every Dense/Conv layer draws its weights from its own RNG stream keyed
    /// by `(seed, ordinal)`, so inserting normalization layers does not change
    /// the initial weights of the others.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], meta: Option<&MetadataMatrix>, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut ordinal = 0u64;
        let mut mdn_gram = None;
        for (i, spec) in specs.iter().enumerate() {
            let next = propagate(&shape, spec, i)?;
            let mut stream = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ordinal);
                ordinal += 1;
                rng
            };
            let layer = match *spec {
                LayerSpec::Dense { input, output } => Layer::Dense(Dense::new(input, output, &mut stream())),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                } => Layer::Conv2d(Conv2d::new(in_channels, out_channels, &mut stream())),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::LayerNorm { dim } => Layer::LayerNorm(LayerNorm::new(dim)),
                LayerSpec::BatchNorm { dim, momentum } => Layer::BatchNorm(BatchNorm::new(dim, momentum)),
                LayerSpec::Mdn => {
                    let meta = meta.ok_or_else(|| Error::Config("MDN layer requires training metadata".into()))?;
                    if mdn_gram.is_none() {
                        mdn_gram = Some(meta.gram_inverse(crate::linalg::DEFAULT_RIDGE_EPS)?);
                    }
                    let gram = mdn_gram.clone().expect("set above");
                    Layer::Mdn(MdnState::with_gram(gram, meta.roles().to_vec(), shape[0])?)
                }
                LayerSpec::Pmdn => {
                    let meta = meta.ok_or_else(|| Error::Config("PMDN layer requires training metadata".into()))?;
                    Layer::Pmdn(PmdnParams::zeros(shape[0], meta.roles().to_vec()))
                }
            };
            layers.push(layer);
            shape = next;
        }
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            input_shape: input_shape.to_vec(),
            seed,
            feature_tap: None,
        })
    }

    pub fn baseline_cnn(cfg: &CnnConfig, norm: NormMode, meta: Option<&MetadataMatrix>, seed: u64) -> Result<Self> {
        let (specs, tap) = cfg.layers(norm);
        let mut net = Self::new(&cfg.input_shape(), &specs, meta, seed)?;
        net.feature_tap = Some(tap);
        Ok(net)
    }

    pub(crate) fn from_parts(
        specs: Vec<LayerSpec>,
        layers: Vec<Layer<T>>,
        input_shape: Vec<usize>,
        seed: u64,
        feature_tap: Option<usize>,
    ) -> Self {
        Self {
            specs,
            layers,
            input_shape,
            seed,
            feature_tap,
        }
    }

    pub(crate) fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Layer whose output [`Network::infer_with_features`] reports.
    pub fn feature_tap(&self) -> Option<usize> {
        self.feature_tap
    }

    pub fn set_feature_tap(&mut self, tap: Option<usize>) -> Result<()> {
        if let Some(t) = tap {
            if t >= self.layers.len() {
                return Err(Error::Config(format!("feature tap {t} out of range")));
            }
        }
        self.feature_tap = tap;
        Ok(())
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            let mut push = |name, len| out.push(ParamInfo { layer, name, len });
            match l {
                Layer::Dense(d) => {
                    push("weight", d.weight.len());
                    push("bias", d.bias.len());
                }
                Layer::Conv2d(c) => {
                    push("weight", c.weight.len());
                    push("bias", c.bias.len());
                }
                Layer::LayerNorm(n) => {
                    push("gamma", n.gamma.len());
                    push("beta", n.beta.len());
                }
                Layer::BatchNorm(n) => {
                    push("gamma", n.gamma.len());
                    push("beta", n.beta.len());
                }
                Layer::Relu | Layer::Flatten | Layer::Mdn(_) | Layer::Pmdn(_) => {}
            }
        }
        out
    }

    /// Weights updated by the task loss, in a fixed order.
    pub fn task_params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => out.extend([&d.weight[..], &d.bias[..]]),
                Layer::Conv2d(c) => out.extend([&c.weight[..], &c.bias[..]]),
                Layer::LayerNorm(n) => out.extend([&n.gamma[..], &n.beta[..]]),
                Layer::BatchNorm(n) => out.extend([&n.gamma[..], &n.beta[..]]),
                Layer::Relu | Layer::Flatten | Layer::Mdn(_) | Layer::Pmdn(_) => {}
            }
        }
        out
    }

    pub fn task_params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => out.extend([&mut d.weight[..], &mut d.bias[..]]),
                Layer::Conv2d(c) => out.extend([&mut c.weight[..], &mut c.bias[..]]),
                Layer::LayerNorm(n) => out.extend([&mut n.gamma[..], &mut n.beta[..]]),
                Layer::BatchNorm(n) => out.extend([&mut n.gamma[..], &mut n.beta[..]]),
                Layer::Relu | Layer::Flatten | Layer::Mdn(_) | Layer::Pmdn(_) => {}
            }
        }
        out
    }

    /// Trainable values: task weights plus PMDN coefficients.
    pub fn param_count(&self) -> usize {
        let task: usize = self.param_info().iter().map(|p| p.len).sum();
        let beta: usize = self.pmdn_layers().iter().map(|&i| self.pmdn_params(i).map_or(0, |p| p.beta().len())).sum();
        task + beta
    }

    pub fn pmdn_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Pmdn(_)).then_some(i))
            .collect()
    }

    pub fn pmdn_params(&self, layer: usize) -> Option<&PmdnParams> {
        match self.layers.get(layer) {
            Some(Layer::Pmdn(p)) => Some(p),
            _ => None,
        }
    }

    pub fn pmdn_params_mut(&mut self, layer: usize) -> Option<&mut PmdnParams> {
        match self.layers.get_mut(layer) {
            Some(Layer::Pmdn(p)) => Some(p),
            _ => None,
        }
    }

    pub fn mdn_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Mdn(_)).then_some(i))
            .collect()
    }

    pub fn mdn_state(&self, layer: usize) -> Option<&MdnState> {
        match self.layers.get(layer) {
            Some(Layer::Mdn(s)) => Some(s),
            _ => None,
        }
    }

    pub fn mdn_state_mut(&mut self, layer: usize) -> Option<&mut MdnState> {
        match self.layers.get_mut(layer) {
            Some(Layer::Mdn(s)) => Some(s),
            _ => None,
        }
    }

    pub fn dense_mut(&mut self, layer: usize) -> Option<&mut Dense<T>> {
        match self.layers.get_mut(layer) {
            Some(Layer::Dense(d)) => Some(d),
            _ => None,
        }
    }

    pub fn batchnorm(&self, layer: usize) -> Option<&BatchNorm<T>> {
        match self.layers.get(layer) {
            Some(Layer::BatchNorm(b)) => Some(b),
            _ => None,
        }
    }

    /// Frobenius norm over all PMDN coefficients, or over the MDN running
    /// coefficients when the network has no PMDN layer.
    pub fn beta_norm(&self) -> f64 {
        let sq: f64 = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Pmdn(p) => p.beta().norm().powi(2),
                Layer::Mdn(s) => s.running_beta().norm().powi(2),
                _ => 0.0,
            })
            .sum();
        sq.sqrt()
    }

    fn check_input(&self, x: &Tensor<T>, meta: Option<&MetaBatch>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "network input",
                format!("[b, {:?}]", self.input_shape),
                format!("{:?}", x.shape()),
            ));
        }
        if let Some(m) = meta {
            if m.rows() != x.rows() {
                return Err(Error::shape("metadata batch rows", x.rows(), m.rows()));
            }
        }
        Ok(())
    }

    /// Runs the network. Training mode records a tape and updates running
    /// statistics (BatchNorm, MDN); evaluation mode is a pure function of the
    /// parameters and returns an empty tape.
    pub fn forward(&mut self, x: &Tensor<T>, meta: Option<&MetaBatch>, mode: Mode) -> Result<(Tensor<T>, ForwardTape<T>)> {
        match mode {
            Mode::Train => {
                let (out, tape) = self.forward_train(x, meta, self.layers.len())?;
                Ok((out, tape))
            }
            Mode::Eval => {
                let out = self.infer(x, meta)?;
                let tape = ForwardTape {
                    mode: Mode::Eval,
                    layers: self.layers.len(),
                    batch: x.rows(),
                    inputs: Vec::new(),
                    caches: vec![Cache::None; self.layers.len()],
                };
                Ok((out, tape))
            }
        }
    }

    /// Training-mode pass through layers `[0, stop)` only; the returned tape
    /// is partial and cannot be used for [`Network::backward`].
    pub fn forward_prefix(&mut self, x: &Tensor<T>, meta: Option<&MetaBatch>, stop: usize) -> Result<ForwardTape<T>> {
        let stop = stop.min(self.layers.len());
        Ok(self.forward_train(x, meta, stop)?.1)
    }

    fn forward_train(&mut self, x: &Tensor<T>, meta: Option<&MetaBatch>, stop: usize) -> Result<(Tensor<T>, ForwardTape<T>)> {
        self.check_input(x, meta)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(stop);
        let mut caches = vec![Cache::None; n];
        let mut act = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().take(stop) {
            let (out, cache) = match layer {
                Layer::Dense(d) => (d.forward(&act)?, Cache::None),
                Layer::Relu => (act.map(|v| if v > T::ZERO { v } else { T::ZERO }), Cache::None),
                Layer::Conv2d(c) => (c.forward(&act)?, Cache::None),
                Layer::Flatten => {
                    let b = act.rows();
                    let w = act.row_len();
                    (act.clone().reshape([b, w])?, Cache::None)
                }
                Layer::LayerNorm(l) => {
                    let (out, c) = l.forward(&act, true)?;
                    (out, Cache::Norm(c.expect("cache requested")))
                }
                Layer::BatchNorm(bn) => {
                    let (out, c) = bn.forward_train(&act)?;
                    (out, Cache::Norm(c))
                }
                Layer::Mdn(state) => {
                    let (out, c) = meta::mdn_forward(state, &act, meta)?;
                    (out, Cache::Mdn(c))
                }
                Layer::Pmdn(params) => {
                    let (out, c) = meta::pmdn_forward(params, &act, meta, Mode::Train, true)?;
                    (out, Cache::Pmdn(c.expect("cache requested")))
                }
            };
            if out.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    layer: i,
                    kind: self.specs[i].kind(),
                });
            }
            caches[i] = cache;
            inputs.push(std::mem::replace(&mut act, out));
        }
        let tape = ForwardTape {
            mode: Mode::Train,
            layers: n,
            batch: x.rows(),
            inputs,
            caches,
        };
        Ok((act, tape))
    }

    /// Evaluation-mode forward pass.
    pub fn infer(&self, x: &Tensor<T>, meta: Option<&MetaBatch>) -> Result<Tensor<T>> {
        Ok(self.infer_with_features(x, meta)?.0)
    }

    /// Evaluation-mode forward pass that also returns the output of the
    /// feature-tap layer, if one is set.
    pub fn infer_with_features(&self, x: &Tensor<T>, meta: Option<&MetaBatch>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.check_input(x, meta)?;
        let mut act = x.clone();
        let mut features = None;
        for (i, layer) in self.layers.iter().enumerate() {
            act = match layer {
                Layer::Dense(d) => d.forward(&act)?,
                Layer::Relu => act.map(|v| if v > T::ZERO { v } else { T::ZERO }),
                Layer::Conv2d(c) => c.forward(&act)?,
                Layer::Flatten => {
                    let (b, w) = (act.rows(), act.row_len());
                    act.reshape([b, w])?
                }
                Layer::LayerNorm(l) => l.forward(&act, false)?.0,
                Layer::BatchNorm(bn) => bn.forward_eval(&act)?,
                Layer::Mdn(state) => meta::mdn_eval(state, &act, meta)?,
                Layer::Pmdn(params) => meta::pmdn_forward(params, &act, meta, Mode::Eval, false)?.0,
            };
            if act.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    layer: i,
                    kind: self.specs[i].kind(),
                });
            }
            if self.feature_tap == Some(i) {
                features = Some(act.clone());
            }
        }
        Ok((act, features))
    }

    /// Task-loss gradients for every weight given `dL/dlogits`.
    pub fn backward(&self, tape: &ForwardTape<T>, d_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if tape.mode != Mode::Train {
            return Err(Error::TapeMismatch("evaluation tapes carry no cached activations".into()));
        }
        if tape.layers != self.layers.len() || tape.inputs.len() != self.layers.len() {
            return Err(Error::TapeMismatch(format!(
                "tape covers {} of {} layers",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        if d_logits.rows() != tape.batch {
            return Err(Error::TapeMismatch(format!(
                "gradient batch {} vs tape batch {}",
                d_logits.rows(),
                tape.batch
            )));
        }

        // first task-parameter slot of each layer
        let mut slot_of = Vec::with_capacity(self.layers.len());
        let mut slots = 0usize;
        for l in &self.layers {
            slot_of.push(slots);
            slots += match l {
                Layer::Dense(_) | Layer::Conv2d(_) | Layer::LayerNorm(_) | Layer::BatchNorm(_) => 2,
                _ => 0,
            };
        }
        let mut task: Vec<Vec<T>> = vec![Vec::new(); slots];

        let out_len = d_logits.len() / d_logits.rows();
        let mut g = d_logits.clone().reshape([tape.batch, out_len])?;
        for i in (0..self.layers.len()).rev() {
            let x = &tape.inputs[i];
            let need_dx = i > 0;
            let s = slot_of[i];
            let mismatch = || Error::TapeMismatch(format!("missing cache for layer {i}"));
            let dx = match (&self.layers[i], &tape.caches[i]) {
                (Layer::Dense(d), _) => {
                    let (dx, dw, db) = d.backward(x, &g, need_dx)?;
                    task[s] = dw;
                    task[s + 1] = db;
                    dx
                }
                (Layer::Conv2d(c), _) => {
                    let (dx, dw, db) = c.backward(x, &g, need_dx)?;
                    task[s] = dw;
                    task[s + 1] = db;
                    dx
                }
                (Layer::Relu, _) => {
                    let mut dx = g.clone();
                    for (o, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if !(xv > T::ZERO) {
                            *o = T::ZERO;
                        }
                    }
                    Some(dx)
                }
                (Layer::Flatten, _) => Some(g.clone().reshape(x.shape().to_vec())?),
                (Layer::LayerNorm(l), Cache::Norm(c)) => {
                    let (dx, dg, db) = l.backward(c, &g.clone().reshape(x.shape().to_vec())?)?;
                    task[s] = dg;
                    task[s + 1] = db;
                    Some(dx)
                }
                (Layer::BatchNorm(bn), Cache::Norm(c)) => {
                    let (dx, dg, db) = bn.backward(c, &g.clone().reshape(x.shape().to_vec())?)?;
                    task[s] = dg;
                    task[s + 1] = db;
                    Some(dx)
                }
                (Layer::Mdn(state), Cache::Mdn(c)) => Some(meta::mdn_backward(c, &g, state.channels())?),
                // identity Jacobian; coefficients are frozen here
                (Layer::Pmdn(_), Cache::Pmdn(_)) => Some(g.clone()),
                _ => return Err(mismatch()),
            };
            if let Some(dx) = dx {
                g = dx.reshape(x.shape().to_vec())?;
            }
        }

        let pmdn_beta = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Pmdn(p) => Some(Tensor::zeros(p.beta().shape().to_vec())),
                _ => None,
            })
            .collect();
        Ok(Gradients { task, pmdn_beta })
    }
}

impl<T: Scalar> Network<T> {
    /// Same architecture and parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense {
                    input: d.input,
                    output: d.output,
                    weight: conv(&d.weight),
                    bias: conv(&d.bias),
                }),
                Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                }),
                Layer::Relu => Layer::Relu,
                Layer::Flatten => Layer::Flatten,
                Layer::LayerNorm(n) => Layer::LayerNorm(LayerNorm {
                    channels: n.channels,
                    gamma: conv(&n.gamma),
                    beta: conv(&n.beta),
                    eps: n.eps,
                }),
                Layer::BatchNorm(n) => Layer::BatchNorm(BatchNorm {
                    channels: n.channels,
                    gamma: conv(&n.gamma),
                    beta: conv(&n.beta),
                    running_mean: n.running_mean.clone(),
                    running_var: n.running_var.clone(),
                    momentum: n.momentum,
                    eps: n.eps,
                }),
                Layer::Mdn(s) => Layer::Mdn(s.clone()),
                Layer::Pmdn(p) => Layer::Pmdn(p.clone()),
            })
            .collect();
        Network {
            specs: self.specs.clone(),
            layers,
            input_shape: self.input_shape.clone(),
            seed: self.seed,
            feature_tap: self.feature_tap,
        }
    }
}
