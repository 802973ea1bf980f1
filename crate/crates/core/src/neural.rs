//! Small dense networks with hand-written backpropagation, Adam, and the
//! tanh-squashed Gaussian policy head.
//!
//! Parameters live in one flat vector, layer by layer: the `in x out`
//! weight matrix (row-major) followed by the `out` bias.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const CHECKPOINT_FORMAT: &str = "rdrl-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// ReLU hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept by a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

fn layer_len(n_in: usize, n_out: usize) -> usize {
    n_in * n_out + n_out
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| layer_len(w[0], w[1])).sum();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for l in 0..net.n_layers() {
            let bound = 1.0 / (net.sizes[l] as f64).sqrt();
            net.init_layer_uniform(l, bound, rng);
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Data("non-finite network parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn init_layer_uniform(&mut self, layer: usize, bound: f64, rng: &mut impl Rng) {
        let range = self.layer_range(layer);
        for p in &mut self.params[range] {
            *p = if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            };
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| layer_len(w[0], w[1]))
            .sum()
    }

    fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.layer_offset(layer);
        start..start + layer_len(self.sizes[layer], self.sizes[layer + 1])
    }

    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let slice = &self.params[self.layer_range(layer)];
        let (w, b) = slice.split_at(n_in * n_out);
        (
            ArrayView2::from_shape((n_in, n_out), w).unwrap(),
            ArrayView1::from(b),
        )
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Forward pass over a batch (one row per sample).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut hidden_pre = Vec::with_capacity(self.n_layers() - 1);
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            inputs.push(h);
            if l + 1 == self.n_layers() {
                return Ok((z, ForwardCache { inputs, hidden_pre }));
            }
            h = z.mapv(|v| v.max(0.0));
            hidden_pre.push(z);
        }
        unreachable!("at least one layer")
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            if l + 1 < self.n_layers() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        let (out, cache) = self.forward_batch(x)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    /// Gradients of `sum(output * grad_out)` with respect to the parameters
    /// and the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Gradients {
        let mut grads = vec![0.0; self.params.len()];
        let mut dz = grad_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let range = self.layer_range(l);
            let (gw, gb) = grads[range].split_at_mut(n_in * n_out);
            let mut gw = ArrayViewMut2::from_shape((n_in, n_out), gw).unwrap();
            gw.assign(&cache.inputs[l].t().dot(&dz));
            for (g, s) in gb.iter_mut().zip(dz.sum_axis(Axis(0))) {
                *g = s;
            }
            let (w, _) = self.layer(l);
            let mut dx = dz.dot(&w.t());
            if l > 0 {
                dx.zip_mut_with(&cache.hidden_pre[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            dz = dx;
        }
        Gradients {
            params: grads,
            input: dz,
        }
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        let layers = (0..self.n_layers())
            .map(|l| {
                let (w, b) = self.layer(l);
                LayerRecord {
                    rows: self.sizes[l],
                    cols: self.sizes[l + 1],
                    weights: w.iter().copied().collect(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        MlpCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layers,
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported network checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.layers.is_empty() {
            return Err(Error::Checkpoint("no layers".into()));
        }
        let mut sizes = vec![ck.layers[0].rows];
        let mut params = Vec::new();
        for layer in &ck.layers {
            if layer.rows != *sizes.last().unwrap()
                || layer.weights.len() != layer.rows * layer.cols
                || layer.bias.len() != layer.cols
            {
                return Err(Error::Checkpoint(format!(
                    "layer shape header {}x{} does not chain or match its data",
                    layer.rows, layer.cols
                )));
            }
            sizes.push(layer.cols);
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        Self::from_params(&sizes, params).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn squash(u: f64) -> f64 {
    let bound = 1.0 - f64::EPSILON;
    u.tanh().clamp(-bound, bound)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussianSample {
    pub pre_action: Vec<f64>,
    pub log_prob: f64,
    pub mean_pre_action: Vec<f64>,
}

/// Reparameterized draw `tanh(mean + exp(log_std) * noise)` with its log
/// density.
pub fn sample_squashed_gaussian(
    mean: &[f64],
    log_std: &[f64],
    noise: &[f64],
) -> SquashedGaussianSample {
    let mut pre_action = Vec::with_capacity(mean.len());
    let mut log_prob = 0.0;
    for ((&mu, &ls), &xi) in mean.iter().zip(log_std).zip(noise) {
        let ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let u = mu + ls.exp() * xi;
        pre_action.push(squash(u));
        log_prob += -0.5 * xi * xi - ls - 0.5 * LN_2PI - log_one_minus_tanh_sq(u);
    }
    SquashedGaussianSample {
        pre_action,
        log_prob,
        mean_pre_action: deterministic_action(mean),
    }
}

pub fn deterministic_action(mean: &[f64]) -> Vec<f64> {
    mean.iter().map(|&m| squash(m)).collect()
}

/// Chain rule through one sample: given `dL/d pre_action` and `dL/d log_prob`,
/// returns `(dL/d mean, dL/d log_std)` for the raw (unclamped) log-std.
pub fn squashed_gaussian_backward(
    mean: &[f64],
    log_std: &[f64],
    noise: &[f64],
    d_action: &[f64],
    d_log_prob: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_log_std = Vec::with_capacity(mean.len());
    for i in 0..mean.len() {
        let raw = log_std[i];
        let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let std = ls.exp();
        let u = mean[i] + std * noise[i];
        let t = u.tanh();
        // d log_prob / du = 2 tanh(u); d a / du = 1 - tanh(u)^2.
        let du = d_action[i] * (1.0 - t * t) + d_log_prob * 2.0 * t;
        d_mean.push(du);
        let inside = (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw);
        d_log_std.push(if inside {
            du * std * noise[i] - d_log_prob
        } else {
            0.0
        });
    }
    (d_mean, d_log_std)
}
