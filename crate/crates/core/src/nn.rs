//! Dense multi-layer perceptron with per-layer flat parameter vectors.
//!
//! Each layer's parameters live in one flat vector: the `fan_out × fan_in`
//! weight matrix in row-major order followed by `fan_out` biases. That vector
//! is the unit the server fuses, so everything here works on
//! [`ModelParams::layers`] directly instead of hiding it behind a layer object.
//!
//! Layers are numbered from 1 in every public API and error.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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
}

/// What a layer does in the network; decides its default fusion strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    /// Raw-feature extraction (personalized by default).
    Feature,
    /// Fully connected decision layers (shared by default).
    Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub role: LayerRole,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation, role: LayerRole) -> Self {
        Self {
            fan_in,
            fan_out,
            activation,
            role,
        }
    }

    /// Length of the flat parameter vector: weights then biases.
    pub fn param_len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }
}

/// A validated layer stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.fan_in == 0 || layer.fan_out == 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer {} has zero width ({}→{})",
                    i + 1,
                    layer.fan_in,
                    layer.fan_out
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::InvalidSpec(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i + 1,
                    pair[0].fan_out,
                    i + 2,
                    pair[1].fan_in
                )));
            }
            if pair[0].role == LayerRole::Decision && pair[1].role == LayerRole::Feature {
                return Err(Error::InvalidSpec(format!(
                    "feature layer {} follows a decision layer",
                    i + 2
                )));
            }
        }
        if layers[layers.len() - 1].activation != Activation::Identity {
            return Err(Error::InvalidSpec("last layer must use identity activation".into()));
        }
        Ok(Self { layers })
    }

    /// Fully connected stack over `widths` (input width first, class count
    /// last) with ReLU hidden layers. The first `feature_layers` layers get the
    /// feature role, the rest the decision role.
    pub fn mlp(widths: &[usize], feature_layers: usize) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec("need at least an input and an output width".into()));
        }
        let depth = widths.len() - 1;
        if feature_layers > depth {
            return Err(Error::InvalidSpec(format!(
                "{feature_layers} feature layers requested for depth {depth}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let activation = if i + 1 == depth {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let role = if i < feature_layers {
                    LayerRole::Feature
                } else {
                    LayerRole::Decision
                };
                LayerSpec::new(w[0], w[1], activation, role)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    /// Number of leading feature-role layers.
    pub fn feature_depth(&self) -> usize {
        self.layers.iter().take_while(|l| l.role == LayerRole::Feature).count()
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::param_len).collect()
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.layers.len() != self.depth() {
            return Err(Error::InvalidSpec(format!(
                "params have {} layers, model has {}",
                params.layers.len(),
                self.depth()
            )));
        }
        for (i, (layer, values)) in self.layers.iter().zip(&params.layers).enumerate() {
            if values.len() != layer.param_len() {
                return Err(Error::ShapeMismatch {
                    layer: i + 1,
                    expected: layer.param_len(),
                    found: values.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-layer flat parameter vectors `[ν_1, …, ν_L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Vec<f64>>,
}

/// Gradients share the parameter layout.
pub type Gradient = ModelParams;

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            layers: spec.param_lens().into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        Self {
            layers: other.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.len() == b.len())
    }

    /// All layers joined into one vector (the whole-model view).
    pub fn concat(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    /// Inverse of [`concat`](Self::concat).
    pub fn split(flat: &[f64], lens: &[usize]) -> Result<Self> {
        let total: usize = lens.iter().sum();
        if total != flat.len() {
            return Err(Error::LengthMismatch {
                left: flat.len(),
                right: total,
            });
        }
        let mut layers = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &n in lens {
            layers.push(flat[start..start + n].to_vec());
            start += n;
        }
        Ok(Self { layers })
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Inputs and integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidBatch("batch is empty".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::InvalidBatch(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activations saved by [`forward`]: entry 0 is the input, entry `l` the
/// output of layer `l` (the last one being the logits).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Matrix>,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers()
        .iter()
        .map(|layer| {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
            let mut values = vec![0.0; layer.param_len()];
            for w in &mut values[..layer.weight_len()] {
                *w = dist.sample(&mut rng);
            }
            values
        })
        .collect();
    ModelParams { layers }
}

fn check_inputs(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<()> {
    spec.check_params(params)?;
    if batch.inputs.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            layer: 1,
            expected: spec.input_dim(),
            found: batch.inputs.cols(),
        });
    }
    let classes = spec.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidBatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn layer_forward(layer: &LayerSpec, values: &[f64], input: &Matrix) -> Matrix {
    let (weights, bias) = values.split_at(layer.weight_len());
    let mut out = Matrix::zeros(input.rows(), layer.fan_out);
    for b in 0..input.rows() {
        let x = input.row(b);
        let y = out.row_mut(b);
        for (j, yj) in y.iter_mut().enumerate() {
            let w = &weights[j * layer.fan_in..(j + 1) * layer.fan_in];
            let z = bias[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *yj = layer.activation.apply(z);
        }
    }
    out
}

/// Chained affine + activation maps; returns logits and the activation cache.
pub fn forward(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<(Matrix, ForwardCache)> {
    spec.check_params(params)?;
    if batch.inputs.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            layer: 1,
            expected: spec.input_dim(),
            found: batch.inputs.cols(),
        });
    }
    let mut activations = Vec::with_capacity(spec.depth() + 1);
    activations.push(batch.inputs.clone());
    for (layer, values) in spec.layers().iter().zip(&params.layers) {
        let next = layer_forward(layer, values, activations.last().expect("non-empty"));
        activations.push(next);
    }
    let logits = activations.last().expect("non-empty").clone();
    Ok((logits, ForwardCache { activations }))
}

/// Logits only, without keeping the cache.
pub fn predict(spec: &ModelSpec, params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    spec.check_params(params)?;
    if inputs.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            layer: 1,
            expected: spec.input_dim(),
            found: inputs.cols(),
        });
    }
    let mut current = None::<Matrix>;
    for (layer, values) in spec.layers().iter().zip(&params.layers) {
        let next = layer_forward(layer, values, current.as_ref().unwrap_or(inputs));
        current = Some(next);
    }
    Ok(current.expect("at least one layer"))
}

/// Per-sample softmax cross-entropy, max-subtracted.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Penalty hook for [`loss_and_grad`]: returns the penalty value and its
/// gradient at the given parameters.
pub type PenaltyFn<'a> = dyn Fn(&ModelParams) -> Result<(f64, Gradient)> + 'a;

/// Mean softmax cross-entropy over the batch plus an optional penalty, with
/// the analytic gradient of the total.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
    penalty: Option<&PenaltyFn<'_>>,
) -> Result<(f64, Gradient)> {
    check_inputs(spec, params, batch)?;
    let (logits, cache) = forward(spec, params, batch)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut delta = Matrix::zeros(n, logits.cols());
    for b in 0..n {
        let z = logits.row(b);
        let y = batch.labels[b];
        let lse = log_sum_exp(z);
        loss += lse - z[y];
        for (d, &zj) in delta.row_mut(b).iter_mut().zip(z) {
            *d = (zj - lse).exp() * inv_n;
        }
        delta.row_mut(b)[y] -= inv_n;
    }
    loss *= inv_n;

    let mut grad = ModelParams::zeros(spec);
    for l in (0..spec.depth()).rev() {
        let layer = &spec.layers()[l];
        let input = &cache.activations[l];
        let (gw, gb) = grad.layers[l].split_at_mut(layer.weight_len());
        for b in 0..n {
            let x = input.row(b);
            for (j, &dj) in delta.row(b).iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                gb[j] += dj;
                for (g, &xi) in gw[j * layer.fan_in..(j + 1) * layer.fan_in].iter_mut().zip(x) {
                    *g += dj * xi;
                }
            }
        }
        if l == 0 {
            break;
        }
        // Push the error signal through this layer's weights and the
        // previous layer's activation.
        let weights = &params.layers[l][..layer.weight_len()];
        let prev = &spec.layers()[l - 1];
        let mut next_delta = Matrix::zeros(n, layer.fan_in);
        for b in 0..n {
            let out = next_delta.row_mut(b);
            for (j, &dj) in delta.row(b).iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                for (o, &w) in out.iter_mut().zip(&weights[j * layer.fan_in..(j + 1) * layer.fan_in]) {
                    *o += dj * w;
                }
            }
            if prev.activation == Activation::Relu {
                for (o, &a) in out.iter_mut().zip(input.row(b)) {
                    if a <= 0.0 {
                        *o = 0.0;
                    }
                }
            }
        }
        delta = next_delta;
    }

    if let Some(penalty) = penalty {
        let (value, pgrad) = penalty(params)?;
        if !grad.same_shape(&pgrad) {
            return Err(Error::InvalidSpec("penalty gradient shape differs from params".into()));
        }
        loss += value;
        for (g, p) in grad.layers.iter_mut().zip(&pgrad.layers) {
            for (gi, pi) in g.iter_mut().zip(p) {
                *gi += pi;
            }
        }
    }

    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { value: loss });
    }
    Ok((loss, grad))
}

/// `p ← p − eta·g` applied in place.
pub fn apply_sgd(params: &mut ModelParams, grad: &Gradient, eta: f64) {
    for (p, g) in params.layers.iter_mut().zip(&grad.layers) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= eta * gi;
        }
    }
}

/// Plain SGD update returning a new parameter set.
pub fn sgd_step(params: &ModelParams, grad: &Gradient, eta: f64) -> ModelParams {
    let mut next = params.clone();
    apply_sgd(&mut next, grad, eta);
    next
}

/// Squared Euclidean distance between two layer vectors.
pub fn layer_distance_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
