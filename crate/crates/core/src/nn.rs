//! Dense layers, MLP forward/backward with hand-derived gradients, and the
//! softmax cross-entropy loss.
//!
//! A layer computes `z = x · Wᵀ + b`, `y = act(z)` with `W` stored as
//! `(out_dim, in_dim)`. The batched forward keeps every layer input and
//! pre-activation in an [`MlpCache`], which is all the backward pass needs.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative at pre-activation `z`. The relu kink at 0 takes derivative 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `(out_dim, in_dim)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::config(format!(
                "bias has {} entries but weight has {} rows",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Weights uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be > 0"));
        }
        let limit = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::config(format!("bad init range: {e}")))?;
        let data = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Ok(Self {
            weight: Matrix::from_vec(out_dim, in_dim, data)?,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-activation `x · Wᵀ + b`.
    pub fn affine(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul_t(&self.weight);
        z.add_row_vector(&self.bias);
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialised MLP. `sizes` lists every width including input and
    /// output; hidden layers use `hidden`, the last layer `output`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config("MLP sizes need an input and an output width"));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::init(sizes[i], sizes[i + 1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Layer inputs and pre-activations recorded by [`mlp_forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the batch itself.
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl MlpCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// The cache restricted to a single sample.
    pub fn row(&self, i: usize) -> MlpCache {
        MlpCache {
            inputs: self.inputs.iter().map(|m| m.select_rows(&[i])).collect(),
            pre_activations: self
                .pre_activations
                .iter()
                .map(|m| m.select_rows(&[i]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients laid out exactly like the [`MlpParams`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }
}

/// Uniform access to the flat tensors of a parameter or gradient set.
///
/// Tensors are visited in a fixed order (weight then bias, layer by layer) so
/// that parameters, gradients, velocities and noise line up index by index.
pub trait Tensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn tensor_lens(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }
}

impl Tensors for DenseLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

impl Tensors for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

impl Tensors for LayerGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

impl Tensors for MlpGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Batched forward pass. Returns the network output and the cache for
/// [`mlp_backward`].
pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, MlpCache)> {
    if x.cols() != params.in_dim() {
        return Err(Error::config(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            params.in_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut a = x.clone();
    for layer in &params.layers {
        let z = layer.affine(&a);
        let act = layer.activation;
        let next = z.map(|v| act.apply(v));
        inputs.push(a);
        pre_activations.push(z);
        a = next;
    }
    Ok((
        a,
        MlpCache {
            inputs,
            pre_activations,
        },
    ))
}

/// Back-propagates `dout` (gradient of a scalar w.r.t. the network output)
/// through the cached forward pass. Returns parameter gradients and the
/// gradient w.r.t. the network input.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &MlpCache,
    dout: &Matrix,
) -> Result<(MlpGrads, Matrix)> {
    check_cache(params, cache)?;
    let batch = cache.batch_size();
    if dout.shape() != (batch, params.out_dim()) {
        return Err(Error::contract(format!(
            "output gradient is {:?}, forward produced {:?}",
            dout.shape(),
            (batch, params.out_dim())
        )));
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    let mut upstream = dout.clone();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let z = &cache.pre_activations[l];
        let mut delta = upstream;
        if layer.activation != Activation::Identity {
            for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= layer.activation.derivative(zv);
            }
        }
        let weight = delta.t_matmul(&cache.inputs[l]);
        let bias = delta.column_sums();
        upstream = delta.matmul(&layer.weight);
        layers.push(LayerGrads { weight, bias });
    }
    layers.reverse();
    Ok((MlpGrads { layers }, upstream))
}

fn check_cache(params: &MlpParams, cache: &MlpCache) -> Result<()> {
    if cache.inputs.len() != params.layers.len()
        || cache.pre_activations.len() != params.layers.len()
    {
        return Err(Error::contract(format!(
            "cache holds {} layers, network has {}",
            cache.inputs.len(),
            params.layers.len()
        )));
    }
    let batch = cache.batch_size();
    for (l, layer) in params.layers.iter().enumerate() {
        let (a, z) = (&cache.inputs[l], &cache.pre_activations[l]);
        if a.shape() != (batch, layer.in_dim()) || z.shape() != (batch, layer.out_dim()) {
            return Err(Error::contract(format!(
                "cache for layer {l} does not match the layer shape"
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax(logits_i) - onehot(y_i)) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::config(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::config("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let n = batch as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(batch, classes);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(i);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
