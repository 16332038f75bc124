//! Small multilayer perceptrons with exact backward passes.
//!
//! Hidden layers are `linear → [batch norm] → activation`; the output layer is
//! always linear. Batches are `B × d` row-major matrices.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight given to the previous running statistic when absorbing a batch.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x < 0.0 => LEAKY_RELU_SLOPE * x,
            _ => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x < 0.0 => LEAKY_RELU_SLOPE,
            _ => 1.0,
        }
    }
}

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per-batch mean and variance (training).
    Batch,
    /// Running averages (inference).
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormState {
    fn new(width: usize) -> Self {
        NormState {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    /// `weights[l]` is `layer_dims[l+1] × layer_dims[l]`.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// One entry per hidden layer when batch normalization is enabled.
    pub norm_state: Option<Vec<NormState>>,
    /// Hidden-layer activation.
    pub activation: Activation,
}

/// Gradients (or velocities) shaped like the weights and biases of an [`MlpParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::Dimension("gradient layer counts differ".into()));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if a.len() != b.len() {
                return Err(Error::Dimension("bias gradient lengths differ".into()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| w.scale(s));
        self.biases.iter_mut().for_each(|b| b.iter_mut().for_each(|x| *x *= s));
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// Flat view in the same order as [`MlpParams::param_mut`].
    pub fn get(&self, mut k: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let nw = w.as_slice().len();
            if k < nw {
                return w.as_slice()[k];
            }
            k -= nw;
            if k < b.len() {
                return b[k];
            }
            k -= b.len();
        }
        panic!("gradient index out of range");
    }

    pub fn max_abs(&self) -> f64 {
        let w = self.weights.iter().map(Matrix::max_abs).fold(0.0, f64::max);
        let b = self.biases.iter().flatten().fold(0.0_f64, |m, x| m.max(x.abs()));
        w.max(b)
    }
}

#[derive(Clone, Debug)]
struct BatchNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Matrix,
    /// Value entering the activation (after batch norm, if any).
    activation_input: Option<Matrix>,
    norm: Option<BatchNormCache>,
}

/// Per-layer intermediates recorded by [`MlpParams::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    batch: usize,
    mode: NormMode,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Hash of the sign pattern of every leaky-ReLU input. Two forward passes with
    /// equal signatures lie on the same linear piece of the network.
    pub fn kink_signature(&self) -> u64 {
        let mut h = WordHash::new();
        for layer in &self.layers {
            if let Some(a) = &layer.activation_input {
                for &x in a.as_slice() {
                    h.write_u64((x < 0.0) as u64);
                }
            }
        }
        h.finish()
    }

    /// Batch statistics of each normalized layer, `(mean, variance)`.
    pub fn batch_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.layers
            .iter()
            .filter_map(|l| l.norm.as_ref())
            .map(|n| (n.mean.as_slice(), n.var.as_slice()))
            .collect()
    }

    /// Smallest |pre-activation| over all leaky-ReLU units.
    pub fn min_kink_distance(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.activation_input.as_ref())
            .flat_map(|a| a.as_slice().iter())
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }
}

impl MlpParams {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activation: Activation,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must list at least two positive widths, got {layer_dims:?}"
            )));
        }
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        let norm_state = batch_norm.then(|| {
            layer_dims[1..layer_dims.len() - 1]
                .iter()
                .map(|&w| NormState::new(w))
                .collect()
        });
        Ok(MlpParams {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            norm_state,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated layer dims")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Checks shape and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.layer_dims.len();
        if n < 2 || self.weights.len() != n - 1 || self.biases.len() != n - 1 {
            return Err(Error::Dimension(format!(
                "{} layer dims need {} weight matrices, found {}",
                n,
                n.saturating_sub(1),
                self.weights.len()
            )));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let expect = (self.layer_dims[l + 1], self.layer_dims[l]);
            if w.shape() != expect || b.len() != expect.0 {
                return Err(Error::Dimension(format!(
                    "layer {l}: weights {:?} and bias {} do not match dims {expect:?}",
                    w.shape(),
                    b.len()
                )));
            }
            if !w.is_finite() || b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    layer: l,
                    what: "parameter".into(),
                });
            }
        }
        if let Some(norms) = &self.norm_state {
            if norms.len() != n - 2 {
                return Err(Error::Dimension(format!(
                    "{} normalization states for {} hidden layers",
                    norms.len(),
                    n - 2
                )));
            }
            for (l, s) in norms.iter().enumerate() {
                let w = self.layer_dims[l + 1];
                if s.running_mean.len() != w || s.running_var.len() != w {
                    return Err(Error::Dimension(format!(
                        "normalization state {l} does not match width {w}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// Flat parameter access: layer 0 weights (row-major), layer 0 biases, layer 1 …
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.as_slice().len();
            if k < nw {
                return &mut w.as_mut_slice()[k];
            }
            k -= nw;
            if k < b.len() {
                return &mut b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Hash over every parameter bit (and running statistics).
    pub fn fingerprint(&self) -> u64 {
        let mut h = WordHash::new();
        for d in &self.layer_dims {
            h.write_u64(*d as u64);
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            w.as_slice().iter().chain(b).for_each(|x| h.write_u64(x.to_bits()));
        }
        if let Some(norms) = &self.norm_state {
            for s in norms {
                s.running_mean
                    .iter()
                    .chain(&s.running_var)
                    .for_each(|x| h.write_u64(x.to_bits()));
            }
        }
        h.finish()
    }

    pub fn forward(&self, batch: &Matrix, mode: NormMode) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if !batch.is_finite() {
            return Err(Error::NonFinite {
                layer: 0,
                what: "input batch".into(),
            });
        }
        let last = self.num_layers() - 1;
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut x = batch.clone();
        for l in 0..self.num_layers() {
            let mut pre = x.matmul_transposed(&self.weights[l])?;
            for r in 0..pre.rows() {
                pre.row_mut(r)
                    .iter_mut()
                    .zip(&self.biases[l])
                    .for_each(|(v, b)| *v += b);
            }
            if l == last {
                layers.push(LayerCache {
                    input: x,
                    activation_input: None,
                    norm: None,
                });
                x = pre;
                break;
            }
            let norm = match &self.norm_state {
                Some(states) => {
                    let c = batch_norm_forward(&pre, &states[l], mode);
                    pre = c.normalized.clone();
                    Some(c)
                }
                None => None,
            };
            let mut out = pre.clone();
            let act = self.activation;
            out.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            layers.push(LayerCache {
                input: x,
                activation_input: Some(pre),
                norm,
            });
            x = out;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                layer: last,
                what: "forward output".into(),
            });
        }
        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            batch: batch.rows(),
            mode,
            layers,
        };
        Ok((x, cache))
    }

    /// Returns `(parameter gradients, input gradients)` for `upstream = ∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.fingerprint != self.fingerprint() || cache.layers.len() != self.num_layers() {
            return Err(Error::Usage(
                "forward cache was produced by different parameters".into(),
            ));
        }
        if upstream.shape() != (cache.batch, self.output_dim()) {
            return Err(Error::Usage(format!(
                "upstream gradient {:?} does not match forward output ({}, {})",
                upstream.shape(),
                cache.batch,
                self.output_dim()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = upstream.clone();
        for l in (0..self.num_layers()).rev() {
            let layer = &cache.layers[l];
            if let Some(a) = &layer.activation_input {
                let act = self.activation;
                g.as_mut_slice()
                    .iter_mut()
                    .zip(a.as_slice())
                    .for_each(|(gi, &ai)| *gi *= act.derivative(ai));
            }
            if let Some(n) = &layer.norm {
                g = batch_norm_backward(&g, n, cache.mode);
            }
            grads.weights[l] = g.transpose_matmul(&layer.input)?;
            let db = &mut grads.biases[l];
            for r in g.row_iter() {
                db.iter_mut().zip(r).for_each(|(d, x)| *d += x);
            }
            g = g.matmul(&self.weights[l])?;
        }
        Ok((grads, g))
    }

    /// Folds the batch statistics recorded in `cache` into the running averages.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        if cache.mode != NormMode::Batch {
            return Ok(());
        }
        let Some(states) = self.norm_state.as_mut() else {
            return Ok(());
        };
        let stats = cache.batch_stats();
        if stats.len() != states.len() {
            return Err(Error::Usage("cache does not match normalization layers".into()));
        }
        let b = cache.batch as f64;
        let unbias = if cache.batch > 1 { b / (b - 1.0) } else { 1.0 };
        for (s, (mean, var)) in states.iter_mut().zip(stats) {
            for (r, m) in s.running_mean.iter_mut().zip(mean) {
                *r = BATCH_NORM_MOMENTUM * *r + (1.0 - BATCH_NORM_MOMENTUM) * m;
            }
            for (r, v) in s.running_var.iter_mut().zip(var) {
                *r = BATCH_NORM_MOMENTUM * *r + (1.0 - BATCH_NORM_MOMENTUM) * v * unbias;
            }
        }
        Ok(())
    }
}

fn batch_norm_forward(pre: &Matrix, state: &NormState, mode: NormMode) -> BatchNormCache {
    let (b, w) = pre.shape();
    let (mean, var) = match mode {
        NormMode::Running => (state.running_mean.clone(), state.running_var.clone()),
        NormMode::Batch => {
            let mut mean = vec![0.0; w];
            for r in pre.row_iter() {
                mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; w];
            for r in pre.row_iter() {
                for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
    let mut normalized = pre.clone();
    for r in 0..b {
        for ((x, m), s) in normalized.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
            *x = (*x - m) * s;
        }
    }
    BatchNormCache {
        normalized,
        inv_std,
        mean,
        var,
    }
}

fn batch_norm_backward(g: &Matrix, cache: &BatchNormCache, mode: NormMode) -> Matrix {
    let (b, w) = g.shape();
    let mut out = g.clone();
    match mode {
        NormMode::Running => {
            for r in 0..b {
                out.row_mut(r).iter_mut().zip(&cache.inv_std).for_each(|(x, s)| *x *= s);
            }
        }
        NormMode::Batch => {
            let mut sum_g = vec![0.0; w];
            let mut sum_gx = vec![0.0; w];
            for r in 0..b {
                for j in 0..w {
                    sum_g[j] += g[(r, j)];
                    sum_gx[j] += g[(r, j)] * cache.normalized[(r, j)];
                }
            }
            let n = b as f64;
            for r in 0..b {
                for j in 0..w {
                    out[(r, j)] =
                        cache.inv_std[j] / n * (n * g[(r, j)] - sum_g[j] - cache.normalized[(r, j)] * sum_gx[j]);
                }
            }
        }
    }
    out
}

/// FNV-1a over 64-bit words.
/// Word-at-a-time multiplicative hash.
struct WordHash(u64);

impl WordHash {
    fn new() -> Self {
        WordHash(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, x: u64) {
        self.0 = (self.0.rotate_left(5) ^ x).wrapping_mul(0x517c_c1b7_2722_0a95);
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
