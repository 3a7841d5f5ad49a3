//! Small fully-connected networks with exact reverse-mode gradients.
//!
//! Hidden layers apply the configured activation; the final layer is linear
//! and its outputs are the logits. The scale probe `w` multiplies logits
//! downstream and is never a trainable parameter.

use crate::error::{Error, Result};
use crate::numerics::matrix::DenseMatrix;
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn forward(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer, weight shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Feed-forward predictor parameters plus the fixed scalar probe.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    layers: Vec<Layer>,
    activation: Activation,
    probe_w: f64,
}

/// Activation record from [`forward`], sufficient for exact backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input matrix seen by layer `l`; `inputs[0]` is the batch.
    inputs: Vec<DenseMatrix>,
    out_dim: usize,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<(DenseMatrix, Vec<f64>)>,
}

impl PredictorParams {
    /// Xavier-uniform initialization over the dimension chain
    /// `dims = [in, hidden..., out]`.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("invalid layer dims {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weight = DenseMatrix::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                *v = rng.uniform(-limit, limit);
            }
            layers.push(Layer {
                weight,
                bias: vec![0.0; fan_out],
            });
        }
        Ok(PredictorParams {
            layers,
            activation,
            probe_w: 1.0,
        })
    }

    /// Builds from explicit layers; consecutive dimensions must chain.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].weight.cols() != pair[0].weight.rows() {
                return Err(Error::shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    l,
                    pair[0].weight.rows(),
                    l + 1,
                    pair[1].weight.cols()
                )));
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::shape(format!("layer {l} bias length mismatch")));
            }
        }
        Ok(PredictorParams {
            layers,
            activation,
            probe_w: 1.0,
        })
    }

    /// All parameters zero; useful for symmetric starts of adversaries.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut net = Self::init(dims, activation, &mut rng)?;
        for layer in &mut net.layers {
            layer.weight.data_mut().fill(0.0);
            layer.bias.fill(0.0);
        }
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// The fixed scale probe; equals 1 for the lifetime of the value.
    pub fn probe_w(&self) -> f64 {
        self.probe_w
    }

    /// Mutable views of every trainable tensor, in a fixed order.
    /// The probe is deliberately not included.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            let Layer { weight, bias } = layer;
            out.push(weight.data_mut());
            out.push(&mut bias[..]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Flat parameter access for finite-difference harnesses.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            let wn = layer.weight.data().len();
            if idx < wn {
                return layer.weight.data()[idx];
            }
            idx -= wn;
            if idx < layer.bias.len() {
                return layer.bias[idx];
            }
            idx -= layer.bias.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        for layer in &mut self.layers {
            let wn = layer.weight.data().len();
            if idx < wn {
                layer.weight.data_mut()[idx] = v;
                return;
            }
            idx -= wn;
            if idx < layer.bias.len() {
                layer.bias[idx] = v;
                return;
            }
            idx -= layer.bias.len();
        }
        panic!("flat index out of range");
    }
}

impl NetGrads {
    pub fn zeros_like(params: &PredictorParams) -> Self {
        NetGrads {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (w, b) in &self.layers {
            out.push(w.data());
            out.push(&b[..]);
        }
        out
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for (w, b) in &self.layers {
            if idx < w.data().len() {
                return w.data()[idx];
            }
            idx -= w.data().len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn scale(&mut self, c: f64) {
        for (w, b) in &mut self.layers {
            for v in w.data_mut() {
                *v *= c;
            }
            for v in b {
                *v *= c;
            }
        }
    }

    pub fn add(&mut self, other: &NetGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (v, o) in w.data_mut().iter_mut().zip(ow.data()) {
                *v += o;
            }
            for (v, o) in b.iter_mut().zip(ob) {
                *v += o;
            }
        }
    }
}

/// Batch forward pass: rows of `x` are samples.
pub fn forward(params: &PredictorParams, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
    if x.cols() != params.in_dim() {
        return Err(Error::shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            params.in_dim()
        )));
    }
    let n = x.rows();
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let out_dim = layer.weight.rows();
        let mut z = DenseMatrix::zeros(n, out_dim);
        let last = l + 1 == n_layers;
        for i in 0..n {
            let hi = h.row(i);
            let zi = z.row_mut(i);
            for (o, zo) in zi.iter_mut().enumerate() {
                let wrow = layer.weight.row(o);
                let mut acc = layer.bias[o];
                for (w, xv) in wrow.iter().zip(hi) {
                    acc += w * xv;
                }
                *zo = if last { acc } else { params.activation.forward(acc) };
            }
        }
        inputs.push(h);
        h = z;
    }
    let cache = ForwardCache {
        inputs,
        out_dim: params.out_dim(),
    };
    Ok((h, cache))
}

/// Exact reverse-mode gradients of `sum_ik upstream[i][k] * logits[i][k]`
/// with respect to every layer parameter.
pub fn backprop(
    params: &PredictorParams,
    cache: &ForwardCache,
    upstream: &DenseMatrix,
) -> Result<NetGrads> {
    let n = cache.inputs[0].rows();
    if upstream.rows() != n || upstream.cols() != cache.out_dim {
        return Err(Error::shape(format!(
            "upstream is {}x{}, logits were {}x{}",
            upstream.rows(),
            upstream.cols(),
            n,
            cache.out_dim
        )));
    }
    let mut grads = NetGrads::zeros_like(params);
    let mut delta = upstream.clone();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &cache.inputs[l];
        let (dw, db) = &mut grads.layers[l];
        for i in 0..n {
            let di = delta.row(i);
            let xi = input.row(i);
            for (o, d) in di.iter().enumerate() {
                db[o] += d;
                let wrow = dw.row_mut(o);
                for (g, xv) in wrow.iter_mut().zip(xi) {
                    *g += d * xv;
                }
            }
        }
        if l > 0 {
            // Pull the delta through W and the previous activation.
            let in_dim = layer.weight.cols();
            let mut prev = DenseMatrix::zeros(n, in_dim);
            for i in 0..n {
                let di = delta.row(i);
                let acts = cache.inputs[l].row(i);
                let pi = prev.row_mut(i);
                for (o, d) in di.iter().enumerate() {
                    let wrow = layer.weight.row(o);
                    for (j, w) in wrow.iter().enumerate() {
                        pi[j] += d * w;
                    }
                }
                for (j, p) in pi.iter_mut().enumerate() {
                    *p *= params.activation.grad_from_output(acts[j]);
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}
