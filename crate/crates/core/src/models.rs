//! ReLU multilayer perceptrons with manual forward/backward passes, and the
//! first-order optimizers that update them.
//!
//! Weights are stored `out × in`, so a layer maps a row batch `X` to
//! `X Wᵀ + b`. Hidden layers use ReLU (subgradient 0 at 0); the last layer
//! is the identity for classifiers and ReLU for a shared trunk.

use std::io::{Read, Write};

use ndarray::{ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::numerics::{affine_batch, Matrix, SeededRng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

/// Layer widths from input to output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    output_activation: Activation,
}

impl MlpSpec {
    /// Classifier/regressor: ReLU hidden layers, identity output.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        Self::with_output(layer_sizes, Activation::Identity)
    }

    /// Feature extractor whose last layer is also ReLU-activated.
    pub fn trunk(layer_sizes: Vec<usize>) -> Result<Self> {
        Self::with_output(layer_sizes, Activation::Relu)
    }

    pub fn with_output(layer_sizes: Vec<usize>, output_activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(AceError::config(
                "layer_sizes",
                format!("need input and output widths, got {layer_sizes:?}"),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(AceError::config(
                "layer_sizes",
                format!("zero-width layer in {layer_sizes:?}"),
            ));
        }
        Ok(MlpSpec {
            layer_sizes,
            output_activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros((fan_out, fan_in)),
            bias: Vector::zeros(fan_out),
        }
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Dense>,
    version: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vector {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .flatten()
            .copied()
            .collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    /// `self += scale * other`.
    pub fn scaled_add(&mut self, scale: f64, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

/// Per-layer activations of one forward pass: `activations[0]` is the input
/// batch and `activations[l + 1]` the (post-activation) output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Matrix>,
    version: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }

    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

/// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
///
/// Layers are filled in order, each weight matrix row-major, with
/// `w = a (2u - 1)` for `u` a 53-bit uniform draw in `[0, 1)`.
pub fn init_mlp(spec: &MlpSpec, rng: &mut SeededRng) -> MlpParams {
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / fan_in as f64).sqrt();
            let weight = Matrix::from_shape_simple_fn((fan_out, fan_in), || {
                a * (2.0 * rng.random::<f64>() - 1.0)
            });
            Dense {
                weight,
                bias: Vector::zeros(fan_out),
            }
        })
        .collect();
    MlpParams {
        spec: spec.clone(),
        layers,
        version: 0,
    }
}

fn relu_inplace(m: &mut Matrix) {
    m.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Zero `grad` wherever the ReLU output was not positive.
fn relu_mask(grad: &mut Matrix, activation: &Matrix) {
    Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

impl MlpParams {
    pub fn from_layers(spec: MlpSpec, layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != spec.depth() {
            return Err(AceError::dim(format!(
                "{} layers for a spec of depth {}",
                layers.len(),
                spec.depth()
            )));
        }
        for (l, (layer, w)) in layers.iter().zip(spec.layer_sizes.windows(2)).enumerate() {
            if layer.weight.dim() != (w[1], w[0]) || layer.bias.len() != w[1] {
                return Err(AceError::dim(format!(
                    "layer {l}: weight {:?} and bias {} do not fit {} -> {}",
                    layer.weight.dim(),
                    layer.bias.len(),
                    w[0],
                    w[1]
                )));
            }
            if layer
                .weight
                .iter()
                .chain(layer.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(AceError::InvalidInput(format!(
                    "layer {l} has non-finite entries"
                )));
            }
        }
        // Owned arrays in standard layout are required by the flat views.
        let layers = layers
            .into_iter()
            .map(|l| Dense {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias,
            })
            .collect();
        Ok(MlpParams {
            spec,
            layers,
            version: 0,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        MlpParams {
            spec: spec.clone(),
            layers,
            version: 0,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Number of optimizer updates applied since construction.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn flat(&self) -> Vector {
        self.tensors().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &Vector) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(AceError::dim(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter();
        for t in self.layers.iter_mut().flat_map(|l| l.tensors_mut()) {
            for v in t.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    /// Logits for a row batch, plus the intermediates needed by
    /// [`MlpParams::backward`].
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Matrix, ForwardCache)> {
        if x.ncols() != self.spec.input_width() {
            return Err(AceError::dim(format!(
                "input width {} but the network expects {}",
                x.ncols(),
                self.spec.input_width()
            )));
        }
        let depth = self.layers.len();
        let mut activations = Vec::with_capacity(depth + 1);
        activations.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = affine_batch(activations[l].view(), &layer.weight, &layer.bias)?;
            if l + 1 < depth || self.spec.output_activation == Activation::Relu {
                relu_inplace(&mut out);
            }
            activations.push(out);
        }
        let output = activations[depth].clone();
        Ok((
            output,
            ForwardCache {
                activations,
                version: self.version,
            },
        ))
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Matrix> {
        if x.ncols() != self.spec.input_width() {
            return Err(AceError::dim(format!(
                "input width {} but the network expects {}",
                x.ncols(),
                self.spec.input_width()
            )));
        }
        let depth = self.layers.len();
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            a = affine_batch(a.view(), &layer.weight, &layer.bias)?;
            if l + 1 < depth || self.spec.output_activation == Activation::Relu {
                relu_inplace(&mut a);
            }
        }
        Ok(a)
    }

    /// Backpropagate per-sample output gradients.
    ///
    /// Row `i` of `grad_out` is `∂ℓ_i/∂out_i`. The returned parameter
    /// gradients are those of the batch mean `(1/n) Σ ℓ_i`; the returned
    /// input gradient keeps the per-sample convention (row `i` is
    /// `∂ℓ_i/∂x_i`) so it can be fed to an upstream network's `backward`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<(MlpGrads, Matrix)> {
        let (grads, input) = self.backward_impl(cache, grad_out, true)?;
        Ok((grads, input.expect("input gradient requested")))
    }

    /// [`MlpParams::backward`] without the input gradient.
    pub fn backward_params(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<MlpGrads> {
        Ok(self.backward_impl(cache, grad_out, false)?.0)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<'_, f64>,
        want_input: bool,
    ) -> Result<(MlpGrads, Option<Matrix>)> {
        let depth = self.layers.len();
        if cache.version != self.version || cache.activations.len() != depth + 1 {
            return Err(AceError::InvalidState(format!(
                "forward cache from parameter version {} used with version {}",
                cache.version, self.version
            )));
        }
        if grad_out.dim() != cache.activations[depth].dim() {
            return Err(AceError::InvalidState(format!(
                "output gradient {:?} does not match cached output {:?}",
                grad_out.dim(),
                cache.activations[depth].dim()
            )));
        }
        let n = grad_out.nrows() as f64;
        let mut g = grad_out.to_owned();
        if self.spec.output_activation == Activation::Relu {
            relu_mask(&mut g, &cache.activations[depth]);
        }
        let mut layers = Vec::with_capacity(depth);
        let mut input_grad = None;
        for l in (0..depth).rev() {
            let a_in = &cache.activations[l];
            let mut dw = g.t().dot(a_in);
            dw.mapv_inplace(|v| v / n);
            let mut db = g.sum_axis(Axis(0));
            db.mapv_inplace(|v| v / n);
            layers.push(Dense {
                weight: dw,
                bias: db,
            });
            if l > 0 {
                let mut prev = g.dot(&self.layers[l].weight);
                relu_mask(&mut prev, a_in);
                g = prev;
            } else if want_input {
                input_grad = Some(g.dot(&self.layers[0].weight));
            }
        }
        layers.reverse();
        Ok((MlpGrads { layers }, input_grad))
    }

    const MAGIC: &'static [u8; 8] = b"ACEMLP01";

    /// Write a little-endian binary checkpoint:
    ///
    /// ```text
    /// b"ACEMLP01"
    /// u32 layer-size count S, then S × u32 layer sizes
    /// u8  output activation (0 identity, 1 ReLU)
    /// per layer: weight (out × in, row-major f64), bias (out × f64)
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.spec.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.spec.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        w.write_all(&[match self.spec.output_activation {
            Activation::Identity => 0u8,
            Activation::Relu => 1u8,
        }])?;
        for t in self.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |what: &str| AceError::InvalidInput(format!("checkpoint: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("missing header"))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let read_u32 = |r: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let count = read_u32(&mut r)? as usize;
        if count > 1 << 16 {
            return Err(bad("implausible layer count"));
        }
        let sizes = (0..count)
            .map(|_| read_u32(&mut r).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut act = [0u8; 1];
        r.read_exact(&mut act)
            .map_err(|_| bad("truncated header"))?;
        let activation = match act[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            other => return Err(bad(&format!("unknown activation tag {other}"))),
        };
        let spec = MlpSpec::with_output(sizes, activation)?;
        let mut params = MlpParams::zeros(&spec);
        let mut buf = [0u8; 8];
        for t in params.layers.iter_mut().flat_map(|l| l.tensors_mut()) {
            for v in t.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| bad("truncated parameters"))?;
                *v = f64::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(bad("non-finite parameter"));
                }
            }
        }
        Ok(params)
    }
}

/// Update rule and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    /// `θ ← θ - lr g`
    Sgd { lr: f64 },
    /// `v ← μ v + g; θ ← θ - lr v`
    Momentum { lr: f64, momentum: f64 },
    /// Bias-corrected Adam.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: 0.1 }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr }
            | OptimizerConfig::Momentum { lr, .. }
            | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !lr.is_finite() || lr < 0.0 {
            return Err(AceError::config(
                "lr",
                format!("{lr} must be finite and >= 0"),
            ));
        }
        match *self {
            OptimizerConfig::Sgd { .. } => {}
            OptimizerConfig::Momentum { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(AceError::config(
                        "momentum",
                        format!("{momentum} is outside [0, 1)"),
                    ));
                }
            }
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => {
                if !(0.0..1.0).contains(&beta1) {
                    return Err(AceError::config(
                        "beta1",
                        format!("{beta1} is outside [0, 1)"),
                    ));
                }
                if !(0.0..1.0).contains(&beta2) {
                    return Err(AceError::config(
                        "beta2",
                        format!("{beta2} is outside [0, 1)"),
                    ));
                }
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(AceError::config("adam_eps", format!("{eps} must be > 0")));
                }
            }
        }
        Ok(())
    }
}

/// Optimizer plus its per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &MlpParams) -> Result<Self> {
        config.validate()?;
        let buffers = || params.tensors().map(|t| vec![0.0; t.len()]).collect();
        let (first, second) = match config {
            OptimizerConfig::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerConfig::Momentum { .. } => (buffers(), Vec::new()),
            OptimizerConfig::Adam { .. } => (buffers(), buffers()),
        };
        Ok(Optimizer {
            config,
            first,
            second,
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len()
            || grads
                .layers
                .iter()
                .zip(&params.layers)
                .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len())
        {
            return Err(AceError::dim("gradients do not match parameter shapes"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let tensors = params.layers.iter_mut().flat_map(|l| l.tensors_mut());
        for (i, (theta, g)) in tensors.zip(grads.tensors()).enumerate() {
            match self.config {
                OptimizerConfig::Sgd { lr } => {
                    for (p, &g) in theta.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
                OptimizerConfig::Momentum { lr, momentum } => {
                    for ((p, &g), v) in theta.iter_mut().zip(g).zip(self.first[i].iter_mut()) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (p, &g)) in theta.iter_mut().zip(g).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        params.version += 1;
        Ok(())
    }
}
