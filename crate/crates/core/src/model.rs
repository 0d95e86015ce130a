//! Desk-scale model family: multinomial logistic regression and fully
//! connected networks, trained with plain minibatch SGD on mean cross-entropy.
//!
//! Parameters live in a single flat `f32` vector. The flatten order is fixed
//! because package indices are derived from it: layers in order, each layer's
//! weight matrix row-major with shape `(out, in)` followed by its `out` biases.
//! Losses, gradients, dot products and norms accumulate in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear (softmax is
/// folded into the loss).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
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

/// Layer layout of a model. Each entry of `layer_dims` is `(in, out)`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "ShapeSpecRepr"))]
pub struct ShapeSpec {
    layer_dims: Vec<(usize, usize)>,
    activation: Activation,
    total_params: usize,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeSpecRepr {
    layer_dims: Vec<(usize, usize)>,
    activation: Activation,
    #[serde(default)]
    total_params: Option<usize>,
}

#[cfg(feature = "serde")]
impl TryFrom<ShapeSpecRepr> for ShapeSpec {
    type Error = Error;

    fn try_from(repr: ShapeSpecRepr) -> Result<Self> {
        let shape = ShapeSpec::new(repr.layer_dims, repr.activation)?;
        match repr.total_params {
            Some(n) if n != shape.total_params => {
                Err(Error::shape("model.total_params", shape.total_params, n))
            }
            _ => Ok(shape),
        }
    }
}

impl ShapeSpec {
    pub fn new(layer_dims: Vec<(usize, usize)>, activation: Activation) -> Result<Self> {
        if layer_dims.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for (l, &(i, o)) in layer_dims.iter().enumerate() {
            if i == 0 || o == 0 {
                return Err(Error::config(alloc::format!(
                    "layer {l} has a zero dimension"
                )));
            }
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if pair[0].1 != pair[1].0 {
                return Err(Error::config(alloc::format!(
                    "layer {} takes {} inputs but layer {l} produces {}",
                    l + 1,
                    pair[1].0,
                    pair[0].1
                )));
            }
        }
        let total_params = layer_dims.iter().map(|&(i, o)| i * o + o).sum();
        Ok(ShapeSpec {
            layer_dims,
            activation,
            total_params,
        })
    }

    /// Multinomial logistic regression.
    pub fn logistic(input: usize, classes: usize) -> Result<Self> {
        Self::new(vec![(input, classes)], Activation::Identity)
    }

    /// One hidden ReLU layer.
    pub fn mlp(input: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::new(vec![(input, hidden), (hidden, classes)], Activation::Relu)
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].0
    }

    pub fn num_classes(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1].1
    }

    /// Start offset of each layer's block in the flat vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layer_dims
            .iter()
            .map(|&(i, o)| {
                let here = off;
                off += i * o + o;
                here
            })
            .collect()
    }
}

/// A model's parameters flattened into one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f32>,
    shape: ShapeSpec,
}

impl FlatParams {
    pub fn new(shape: ShapeSpec, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.total_params {
            return Err(Error::shape(
                "parameter vector",
                shape.total_params,
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: first_bad_layer(&shape, &values),
            });
        }
        Ok(FlatParams { values, shape })
    }

    pub fn zeros(shape: ShapeSpec) -> Self {
        FlatParams {
            values: vec![0.0; shape.total_params],
            shape,
        }
    }

    /// Uniform initialization in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(shape: ShapeSpec, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(shape.total_params);
        for &(i, o) in &shape.layer_dims {
            let bound = 1.0 / libm::sqrt(i as f64);
            for _ in 0..i * o {
                values.push(rng.random_range(-bound..bound) as f32);
            }
            values.extend(core::iter::repeat_n(0.0f32, o));
        }
        FlatParams { values, shape }
    }

    /// Build from per-layer `(weights, bias)` blocks, weights row-major `(out, in)`.
    pub fn from_layers(shape: ShapeSpec, layers: &[(Vec<f32>, Vec<f32>)]) -> Result<Self> {
        if layers.len() != shape.layer_dims.len() {
            return Err(Error::shape(
                "layer count",
                shape.layer_dims.len(),
                layers.len(),
            ));
        }
        let mut values = Vec::with_capacity(shape.total_params);
        for (&(i, o), (w, b)) in shape.layer_dims.iter().zip(layers) {
            if w.len() != i * o {
                return Err(Error::shape("layer weights", i * o, w.len()));
            }
            if b.len() != o {
                return Err(Error::shape("layer bias", o, b.len()));
            }
            values.extend_from_slice(w);
            values.extend_from_slice(b);
        }
        Self::new(shape, values)
    }

    /// Inverse of [`FlatParams::from_layers`].
    pub fn to_layers(&self) -> Vec<(Vec<f32>, Vec<f32>)> {
        let mut out = Vec::with_capacity(self.shape.layer_dims.len());
        let mut off = 0;
        for &(i, o) in &self.shape.layer_dims {
            let w = self.values[off..off + i * o].to_vec();
            off += i * o;
            let b = self.values[off..off + o].to_vec();
            off += o;
            out.push((w, b));
        }
        out
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shape(&self) -> &ShapeSpec {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Replace the values in place; used by aggregation which preserves shape.
    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub(crate) fn check_same_shape(&self, other: &FlatParams) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "model shape",
                self.shape.total_params,
                other.shape.total_params,
            ));
        }
        Ok(())
    }

    fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

fn first_bad_layer(shape: &ShapeSpec, values: &[impl Into<f64> + Copy]) -> usize {
    let mut off = 0;
    for (l, &(i, o)) in shape.layer_dims.iter().enumerate() {
        let end = (off + i * o + o).min(values.len());
        if values[off..end].iter().any(|&v| !v.into().is_finite()) {
            return l;
        }
        off = end;
    }
    shape.layer_dims.len().saturating_sub(1)
}

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f32>,
    dim: usize,
    labels: Vec<u32>,
}

impl Batch {
    pub fn new(features: Vec<f32>, dim: usize, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::shape(
                "batch features",
                dim * labels.len(),
                features.len(),
            ));
        }
        Ok(Batch {
            features,
            dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.features[r * self.dim..(r + 1) * self.dim]
    }

    /// Gather the listed rows into a new batch, in the listed order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Batch {
            features,
            dim: self.dim,
            labels,
        }
    }
}

fn check_batch(shape: &ShapeSpec, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyData);
    }
    if batch.dim != shape.input_dim() {
        return Err(Error::shape(
            "batch feature dimension",
            shape.input_dim(),
            batch.dim,
        ));
    }
    let classes = shape.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::shape("label range", classes, bad as usize + 1));
    }
    Ok(())
}

/// Mean cross-entropy and (optionally) its gradient for `f64` parameters.
/// Returns `(loss, correct)`.
fn loss_and_grad(
    shape: &ShapeSpec,
    params: &[f64],
    batch: &Batch,
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let offsets = shape.layer_offsets();
    let n_layers = shape.layer_dims.len();
    let act = shape.activation;

    // pre-activations per layer and the input/post-activations feeding each layer
    let mut inputs: Vec<Vec<f64>> = shape
        .layer_dims
        .iter()
        .map(|&(i, _)| vec![0.0; i])
        .collect();
    let mut pre: Vec<Vec<f64>> = shape
        .layer_dims
        .iter()
        .map(|&(_, o)| vec![0.0; o])
        .collect();
    let mut delta: Vec<Vec<f64>> = shape
        .layer_dims
        .iter()
        .map(|&(_, o)| vec![0.0; o])
        .collect();

    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }

    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;

    for r in 0..batch.len() {
        for (dst, &x) in inputs[0].iter_mut().zip(batch.row(r)) {
            *dst = x as f64;
        }
        for l in 0..n_layers {
            let (i_dim, o_dim) = shape.layer_dims[l];
            let w = &params[offsets[l]..offsets[l] + i_dim * o_dim];
            let b = &params[offsets[l] + i_dim * o_dim..offsets[l] + i_dim * o_dim + o_dim];
            for o in 0..o_dim {
                let row = &w[o * i_dim..(o + 1) * i_dim];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(&inputs[l]) {
                    z += wi * xi;
                }
                pre[l][o] = z;
            }
            if l + 1 < n_layers {
                let (next, cur) = (l + 1, l);
                for o in 0..o_dim {
                    inputs[next][o] = act.apply(pre[cur][o]);
                }
            }
        }

        let logits = &pre[n_layers - 1];
        let label = batch.labels[r] as usize;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in logits {
            denom += libm::exp(z - max);
        }
        let log_denom = libm::log(denom);
        loss_sum += log_denom - (logits[label] - max);

        // argmax, ties to the lowest class index
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        {
            let out = &mut delta[n_layers - 1];
            for (c, d) in out.iter_mut().enumerate() {
                *d = libm::exp(logits[c] - max - log_denom);
            }
            out[label] -= 1.0;
        }
        for l in (0..n_layers).rev() {
            let (i_dim, o_dim) = shape.layer_dims[l];
            let w_off = offsets[l];
            let b_off = w_off + i_dim * o_dim;
            for o in 0..o_dim {
                let d = delta[l][o];
                if d == 0.0 {
                    continue;
                }
                let grow = &mut g[w_off + o * i_dim..w_off + (o + 1) * i_dim];
                for (gw, xi) in grow.iter_mut().zip(&inputs[l]) {
                    *gw += d * xi;
                }
                g[b_off + o] += d;
            }
            if l > 0 {
                let w = &params[w_off..w_off + i_dim * o_dim];
                let (lower, upper) = delta.split_at_mut(l);
                let prev = &mut lower[l - 1];
                let cur = &upper[0];
                for (k, p) in prev.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for o in 0..o_dim {
                        s += w[o * i_dim + k] * cur[o];
                    }
                    *p = s * act.derivative(pre[l - 1][k]);
                }
            }
        }
    }

    let n = batch.len() as f64;
    if let Some(g) = grad {
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    (loss_sum / n, correct)
}

/// Mean cross-entropy over the batch and the number of argmax-correct rows.
pub fn forward_loss(params: &FlatParams, batch: &Batch) -> Result<(f64, usize)> {
    check_batch(&params.shape, batch)?;
    Ok(loss_and_grad(&params.shape, &params.to_f64(), batch, None))
}

/// Same as [`forward_loss`] on `f64` parameters. Useful for finite differences.
pub fn forward_loss_f64(shape: &ShapeSpec, params: &[f64], batch: &Batch) -> Result<(f64, usize)> {
    if params.len() != shape.total_params {
        return Err(Error::shape(
            "parameter vector",
            shape.total_params,
            params.len(),
        ));
    }
    check_batch(shape, batch)?;
    Ok(loss_and_grad(shape, params, batch, None))
}

/// Analytic gradient of the mean cross-entropy. Returns `(loss, gradient)`.
pub fn gradient(params: &FlatParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    gradient_f64(&params.shape, &params.to_f64(), batch)
}

pub fn gradient_f64(shape: &ShapeSpec, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    if params.len() != shape.total_params {
        return Err(Error::shape(
            "parameter vector",
            shape.total_params,
            params.len(),
        ));
    }
    check_batch(shape, batch)?;
    let mut grad = vec![0.0; shape.total_params];
    let (loss, _) = loss_and_grad(shape, params, batch, Some(&mut grad));
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            layer: first_bad_layer(shape, &grad),
        });
    }
    Ok((loss, grad))
}

pub fn accuracy(params: &FlatParams, batch: &Batch) -> Result<f64> {
    let (_, correct) = forward_loss(params, batch)?;
    Ok(correct as f64 / batch.len() as f64)
}

/// One plain gradient step. The input is left untouched.
pub fn sgd_step(params: &FlatParams, batch: &Batch, lr: f64) -> Result<FlatParams> {
    step_with_prox(params, batch, lr, 0.0, None)
}

/// Gradient step on the loss plus an optional `mu/2 * |w - anchor|^2` term.
///
/// The proximal term is applied in closed form,
/// `w' = (w - lr*g + lr*mu*anchor) / (1 + lr*mu)`, which is stable for any
/// `mu` and reduces to the plain step when `mu == 0`.
fn step_with_prox(
    params: &FlatParams,
    batch: &Batch,
    lr: f64,
    prox_mu: f64,
    anchor: Option<&FlatParams>,
) -> Result<FlatParams> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config(
            "learning rate must be finite and non-negative",
        ));
    }
    let (_, grad) = gradient(params, batch)?;
    let scale = 1.0 / (1.0 + lr * prox_mu);
    let mut values = Vec::with_capacity(params.len());
    for (k, (&w, &g)) in params.values.iter().zip(&grad).enumerate() {
        let mut next = w as f64 - lr * g;
        if let Some(a) = anchor {
            if prox_mu > 0.0 {
                next = (next + lr * prox_mu * a.values[k] as f64) * scale;
            }
        }
        values.push(next as f32);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            layer: first_bad_layer(&params.shape, &values),
        });
    }
    Ok(FlatParams {
        values,
        shape: params.shape.clone(),
    })
}

/// Local optimizer settings for one client round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// FedProx coefficient; zero disables the proximal term.
    pub prox_mu: f64,
}

/// `epochs` passes of minibatch SGD over `data`, each pass in a fresh shuffle
/// drawn from `rng`.
pub fn local_train<R: Rng + ?Sized>(
    params: &FlatParams,
    data: &Batch,
    cfg: &TrainConfig,
    anchor: &FlatParams,
    rng: &mut R,
) -> Result<FlatParams> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if cfg.epochs == 0 {
        return Err(Error::config("local_epochs must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if cfg.prox_mu.is_nan() || cfg.prox_mu < 0.0 {
        return Err(Error::config("prox_mu must be non-negative"));
    }
    params.check_same_shape(anchor)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut current = params.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mb = data.select(chunk);
            current = step_with_prox(&current, &mb, cfg.lr, cfg.prox_mu, Some(anchor))?;
        }
    }
    Ok(current)
}
