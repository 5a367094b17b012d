//! Minimal dense-network machinery.
//!
//! Each layer is `affine -> optional LayerNorm -> activation`. Parameters of
//! a whole network live in one flat vector so optimizers, checkpoints and
//! gradient buffers all share a single layout:
//!
//! ```text
//! per layer: W (out x in, row-major) | b (out) | [gain (out) | offset (out)]
//! ```

mod checkpoint;
mod optim;

pub use checkpoint::Checkpoint;
pub use optim::{adamw_step, adamw_update, lr_schedule, AdamState, OptimizerConfig};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LayerNorm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Identity => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Normalizes `x` to zero mean and unit variance, then applies `gain` and `offset`.
pub fn layer_norm(x: &[f64], gain: &[f64], offset: &[f64]) -> Vec<f64> {
    let (xhat, _) = normalize(x);
    xhat.iter()
        .zip(gain)
        .zip(offset)
        .map(|((h, g), o)| g * h + o)
        .collect()
}

fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Layer widths, activations and LayerNorm flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub layer_norm: Vec<bool>,
}

impl NetworkSpec {
    pub fn new(
        layer_dims: Vec<usize>,
        activations: Vec<Activation>,
        layer_norm: Vec<bool>,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            layer_dims,
            activations,
            layer_norm,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hidden layers use LayerNorm + SiLU; the output layer is affine followed by `output`.
    pub fn mlp(dims: &[usize], output: Activation) -> Result<Self> {
        let layers = dims.len().saturating_sub(1);
        let mut activations = vec![Activation::Silu; layers];
        let mut layer_norm = vec![true; layers];
        if layers > 0 {
            activations[layers - 1] = output;
            layer_norm[layers - 1] = false;
        }
        Self::new(dims.to_vec(), activations, layer_norm)
    }

    /// Every layer uses LayerNorm + SiLU.
    pub fn trunk(dims: &[usize]) -> Result<Self> {
        let layers = dims.len().saturating_sub(1);
        Self::new(dims.to_vec(), vec![Activation::Silu; layers], vec![true; layers])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("a network needs at least two layer dims".into()));
        }
        let layers = self.layer_dims.len() - 1;
        if self.activations.len() != layers || self.layer_norm.len() != layers {
            return Err(Error::Config(format!(
                "{layers} layers but {} activations and {} layer-norm flags",
                self.activations.len(),
                self.layer_norm.len()
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        for (l, ln) in self.layer_norm.iter().enumerate() {
            if *ln && self.layer_dims[l + 1] < 2 {
                return Err(Error::Config(format!(
                    "layer {l} uses LayerNorm on a width-1 output"
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn layer_param_count(&self, l: usize) -> usize {
        let (i, o) = (self.layer_dims[l], self.layer_dims[l + 1]);
        i * o + o + if self.layer_norm[l] { 2 * o } else { 0 }
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_param_count(l)).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
    norm: Option<usize>,
    activation: Activation,
}

/// A network's parameters together with its spec.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
    stamp: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Intermediate values retained by [`Network::forward`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Vec<f64>>,
    /// Value fed to the activation (post-LayerNorm when enabled).
    pre_activation: Vec<Vec<f64>>,
    normalized: Vec<Option<(Vec<f64>, f64)>>,
}

/// Parameter gradient (flat, same layout as the network) and input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn build_layout(spec: &NetworkSpec) -> Vec<LayerLayout> {
    let mut offset = 0;
    (0..spec.num_layers())
        .map(|l| {
            let (i, o) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            let weights = offset;
            let bias = weights + i * o;
            let norm = spec.layer_norm[l].then_some(bias + o);
            offset += spec.layer_param_count(l);
            LayerLayout {
                inputs: i,
                outputs: o,
                weights,
                bias,
                norm,
                activation: spec.activations[l],
            }
        })
        .collect()
}

impl Network {
    /// All weights and biases zero; LayerNorm gains one.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layout = build_layout(&spec);
        let mut params = vec![0.0; spec.param_count()];
        for l in &layout {
            if let Some(n) = l.norm {
                params[n..n + l.outputs].fill(1.0);
            }
        }
        Ok(Network {
            spec,
            layout,
            params,
            stamp: fresh_stamp(),
        })
    }

    /// Glorot-uniform weights `U(-sqrt(6 / (fan_in + fan_out)), +...)`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for l in net.layout.clone() {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for w in &mut net.params[l.weights..l.weights + l.inputs * l.outputs] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::dim(spec.param_count(), params.len(), "network parameters"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        let layout = build_layout(&spec);
        Ok(Network {
            spec,
            layout,
            params,
            stamp: fresh_stamp(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters. Any cache produced before this call
    /// becomes stale.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    /// Mutable view of the output layer's bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = *self.layout.last().unwrap();
        self.stamp = fresh_stamp();
        &mut self.params[l.bias..l.bias + l.outputs]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::dim(self.spec.input_dim(), x.len(), "network input"));
        }
        Ok(())
    }

    fn affine(&self, l: &LayerLayout, x: &[f64]) -> Vec<f64> {
        let w = &self.params[l.weights..l.weights + l.inputs * l.outputs];
        let b = &self.params[l.bias..l.bias + l.outputs];
        w.chunks_exact(l.inputs)
            .zip(b)
            .map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Forward pass without retaining intermediates.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for l in &self.layout {
            let mut a = self.affine(l, &h);
            if let Some(n) = l.norm {
                let gain = &self.params[n..n + l.outputs];
                let offset = &self.params[n + l.outputs..n + 2 * l.outputs];
                a = layer_norm(&a, gain, offset);
            }
            h = a.into_iter().map(|v| l.activation.apply(v)).collect();
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let layers = self.layout.len();
        let mut cache = ForwardCache {
            stamp: self.stamp,
            inputs: Vec::with_capacity(layers),
            pre_activation: Vec::with_capacity(layers),
            normalized: Vec::with_capacity(layers),
        };
        let mut h = x.to_vec();
        for l in &self.layout {
            let mut a = self.affine(l, &h);
            let norm = l.norm.map(|n| {
                let (xhat, inv_std) = normalize(&a);
                let gain = &self.params[n..n + l.outputs];
                let offset = &self.params[n + l.outputs..n + 2 * l.outputs];
                a = xhat
                    .iter()
                    .zip(gain)
                    .zip(offset)
                    .map(|((x, g), o)| g * x + o)
                    .collect();
                (xhat, inv_std)
            });
            let out: Vec<f64> = a.iter().map(|v| l.activation.apply(*v)).collect();
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre_activation.push(a);
            cache.normalized.push(norm);
        }
        Ok((h, cache))
    }

    /// Reverse-mode gradients of `sum_i output_grad_i * output_i`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_into(cache, output_grad, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Like [`backward`](Self::backward) but accumulates the parameter
    /// gradient into `grad`; returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if cache.stamp != self.stamp {
            return Err(Error::Usage(
                "forward cache does not belong to the current network parameters".into(),
            ));
        }
        if output_grad.len() != self.spec.output_dim() {
            return Err(Error::dim(self.spec.output_dim(), output_grad.len(), "output gradient"));
        }
        if grad.len() != self.params.len() {
            return Err(Error::dim(self.params.len(), grad.len(), "gradient buffer"));
        }
        let mut upstream = output_grad.to_vec();
        for (li, l) in self.layout.iter().enumerate().rev() {
            let pre = &cache.pre_activation[li];
            let mut da: Vec<f64> = upstream
                .iter()
                .zip(pre)
                .map(|(g, y)| g * l.activation.derivative(*y))
                .collect();
            if let (Some(n), Some((xhat, inv_std))) = (l.norm, &cache.normalized[li]) {
                let gain = &self.params[n..n + l.outputs];
                for k in 0..l.outputs {
                    grad[n + k] += da[k] * xhat[k];
                    grad[n + l.outputs + k] += da[k];
                }
                let dxhat: Vec<f64> = da.iter().zip(gain).map(|(d, g)| d * g).collect();
                let m = l.outputs as f64;
                let sum: f64 = dxhat.iter().sum();
                let dot: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
                da = dxhat
                    .iter()
                    .zip(xhat)
                    .map(|(d, x)| inv_std * (d - sum / m - x * dot / m))
                    .collect();
            }
            let x = &cache.inputs[li];
            let w = &self.params[l.weights..l.weights + l.inputs * l.outputs];
            let mut dx = vec![0.0; l.inputs];
            for (o, dao) in da.iter().enumerate() {
                grad[l.bias + o] += dao;
                let row = l.weights + o * l.inputs;
                for i in 0..l.inputs {
                    grad[row + i] += dao * x[i];
                    dx[i] += dao * w[o * l.inputs + i];
                }
            }
            upstream = dx;
        }
        Ok(upstream)
    }
}

/// Largest relative discrepancy between backprop and central finite
/// differences (step `h`) for the scalar `c . f(x)`, over every parameter and
/// input coordinate. Denominators are floored at 1e-4.
pub fn gradient_check(net: &Network, x: &[f64], c: &[f64], h: f64) -> Result<f64> {
    let (_, cache) = net.forward(x)?;
    let grads = net.backward(&cache, c)?;
    let loss = |n: &Network, x: &[f64]| -> Result<f64> {
        Ok(n.output(x)?.iter().zip(c).map(|(a, b)| a * b).sum())
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..net.params().len() {
        let orig = net.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe, x)?;
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe, x)?;
        probe.params_mut()[i] = orig;
        worst = worst.max(rel((up - down) / (2.0 * h), grads.params[i]));
    }
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = loss(net, &xp)?;
        xp[i] = x[i] - h;
        let down = loss(net, &xp)?;
        xp[i] = x[i];
        worst = worst.max(rel((up - down) / (2.0 * h), grads.input[i]));
    }
    Ok(worst)
}
