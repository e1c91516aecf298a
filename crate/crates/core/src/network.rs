//! Feed-forward classifier with exact backpropagation.
//!
//! Parameters live in [`Params`]: one weight tensor per fully connected or
//! convolutional layer, plus an optional bias. The weight tensors are the
//! variables the ADMM trainer constrains; biases always stay in full
//! precision.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    FullyConnected {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Relu,
    /// Non-overlapping max pooling with a square window.
    MaxPool2d {
        size: usize,
    },
    /// Softmax followed by mean cross-entropy against integer labels.
    SoftmaxCrossEntropy,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Self::FullyConnected { .. } | Self::Conv2d { .. })
    }

    pub fn has_bias(&self) -> bool {
        matches!(self, Self::FullyConnected { bias: true, .. } | Self::Conv2d { bias: true, .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            Self::FullyConnected { inputs, outputs, .. } => Some(vec![outputs, inputs]),
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            Self::FullyConnected { outputs, bias: true, .. } => Some(outputs),
            Self::Conv2d {
                out_channels, bias: true, ..
            } => Some(out_channels),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Error::InvalidArgument(format!("layer {self:?} cannot follow shape {input:?}: {why}"));
        match *self {
            Self::FullyConnected { inputs, outputs, .. } => {
                if input.iter().product::<usize>() != inputs {
                    return Err(bad("fan-in mismatch"));
                }
                Ok(vec![outputs])
            }
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad("expects [channels, h, w]"));
                }
                let geom = ConvGeometry::new(&[1, input[0], input[1], input[2]], &[out_channels, in_channels, kernel, kernel], stride, pad)
                    .map_err(|_| bad("kernel larger than padded input"))?;
                Ok(vec![out_channels, geom.out_h, geom.out_w])
            }
            Self::Relu => Ok(input.to_vec()),
            Self::MaxPool2d { size } => {
                if input.len() != 3 || size == 0 || input[1] < size || input[2] < size {
                    return Err(bad("pooling window does not fit"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            Self::SoftmaxCrossEntropy => {
                if input.len() != 1 || input[0] < 2 {
                    return Err(bad("expects a flat vector of at least two logits"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Validated layer stack with its per-sample input shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawArchitecture", into = "RawArchitecture")]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Per-sample activation shape entering each layer, plus the final output.
    shapes: Vec<Vec<usize>>,
    /// Index into the parameter lists for each parameterized layer.
    param_index: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArchitecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawArchitecture> for Architecture {
    type Error = Error;

    fn try_from(raw: RawArchitecture) -> Result<Self> {
        Self::new(raw.input_shape, raw.layers)
    }
}

impl From<Architecture> for RawArchitecture {
    fn from(a: Architecture) -> Self {
        Self {
            input_shape: a.input_shape,
            layers: a.layers,
        }
    }
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad input shape {input_shape:?}")));
        }
        match layers.last() {
            Some(LayerSpec::SoftmaxCrossEntropy) => {}
            _ => return Err(Error::InvalidArgument("last layer must be softmax_cross_entropy".into())),
        }
        if layers[..layers.len() - 1].contains(&LayerSpec::SoftmaxCrossEntropy) {
            return Err(Error::InvalidArgument("softmax_cross_entropy must be the last layer only".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut param_index = Vec::with_capacity(layers.len());
        let mut next_param = 0;
        for layer in &layers {
            let out = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(out);
            if layer.is_parameterized() {
                param_index.push(Some(next_param));
                next_param += 1;
            } else {
                param_index.push(None);
            }
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            param_index,
        })
    }

    /// Fully connected classifier, e.g. `&[784, 256, 10]`.
    pub fn mlp(input_shape: Vec<usize>, widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut fan_in: usize = input_shape.iter().product();
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::FullyConnected {
                inputs: fan_in,
                outputs: w,
                bias: true,
            });
            if i + 1 < widths.len() {
                layers.push(LayerSpec::Relu);
            }
            fan_in = w;
        }
        layers.push(LayerSpec::SoftmaxCrossEntropy);
        Self::new(input_shape, layers)
    }

    /// 784-256-10 perceptron on 28x28 digits.
    pub fn mnist_mlp() -> Self {
        Self::mlp(vec![1, 28, 28], &[256, 10]).expect("valid architecture")
    }

    /// conv 5x5x16, relu, pool, conv 5x5x32, relu, pool, fc 10 on 28x28 digits.
    pub fn mnist_cnn() -> Self {
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 16,
                kernel: 5,
                stride: 1,
                pad: 2,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d {
                in_channels: 16,
                out_channels: 32,
                kernel: 5,
                stride: 1,
                pad: 2,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::FullyConnected {
                inputs: 32 * 7 * 7,
                outputs: 10,
                bias: true,
            },
            LayerSpec::SoftmaxCrossEntropy,
        ];
        Self::new(vec![1, 28, 28], layers).expect("valid architecture")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// Parameterized layers, in order.
    pub fn param_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_parameterized())
    }

    pub fn num_param_layers(&self) -> usize {
        self.param_layers().count()
    }

    /// Names of the parameterized layers: `fc0`, `fc1`, `conv0`, ...
    pub fn layer_names(&self) -> Vec<String> {
        let (mut fc, mut conv) = (0, 0);
        self.param_layers()
            .map(|l| match l {
                LayerSpec::Conv2d { .. } => {
                    conv += 1;
                    format!("conv{}", conv - 1)
                }
                _ => {
                    fc += 1;
                    format!("fc{}", fc - 1)
                }
            })
            .collect()
    }

    /// Zero-initialized parameters of the right shapes.
    pub fn zero_params<T: Scalar>(&self) -> Params<T> {
        Params {
            weights: self.param_layers().map(|l| Tensor::zeros(&l.weight_shape().expect("parameterized"))).collect(),
            biases: self.param_layers().map(|l| l.bias_len().map(|n| Tensor::zeros(&[n]))).collect(),
        }
    }

    /// He-normal weights, zero biases.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<T> {
        let mut params = self.zero_params::<T>();
        for (w, layer) in params.weights.iter_mut().zip(self.param_layers()) {
            let shape = layer.weight_shape().expect("parameterized");
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for x in w.data_mut() {
                *x = T::of(normal.sample(rng));
            }
        }
        params
    }

    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        let n = self.num_param_layers();
        if params.weights.len() != n || params.biases.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {n} parameter tensors, got {} weights and {} biases",
                params.weights.len(),
                params.biases.len()
            )));
        }
        for ((layer, w), b) in self.param_layers().zip(&params.weights).zip(&params.biases) {
            let shape = layer.weight_shape().expect("parameterized");
            if w.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "weights",
                    left: shape,
                    right: w.shape().to_vec(),
                });
            }
            match (layer.bias_len(), b) {
                (None, None) => {}
                (Some(n), Some(b)) if b.shape() == [n] => {}
                _ => return Err(Error::InvalidArgument(format!("bias does not match layer {layer:?}"))),
            }
        }
        Ok(())
    }

    fn check_batch<T: Scalar>(&self, x: &Tensor<T>) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: self.input_shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    fn check_labels(&self, n: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "labels",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        let k = self.num_classes();
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        Ok(())
    }

    /// Pre-softmax outputs `[n, classes]`.
    pub fn logits<T: Scalar>(&self, params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_inner(params, x, None)
    }

    /// [`Architecture::logits`] with every weight product delegated to
    /// `kernel`.
    pub fn logits_with<T: Scalar>(&self, params: &Params<T>, x: &Tensor<T>, kernel: &mut dyn LinearKernel<T>) -> Result<Tensor<T>> {
        self.logits_inner(params, x, Some(kernel))
    }

    fn logits_inner<T: Scalar>(&self, params: &Params<T>, x: &Tensor<T>, mut kernel: Option<&mut dyn LinearKernel<T>>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        let n = self.check_batch(x)?;
        let mut act = x.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::SoftmaxCrossEntropy) {
                break;
            }
            let k: Option<&mut dyn LinearKernel<T>> = match kernel {
                Some(ref mut k) => Some(&mut **k),
                None => None,
            };
            act = self.layer_forward(i, params, n, &act, None, k);
        }
        Tensor::new(vec![n, self.num_classes()], act)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss<T: Scalar>(&self, params: &Params<T>, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.logits(params, x)?;
        self.check_labels(logits.shape()[0], labels)?;
        Ok(softmax_xent(logits.data(), self.num_classes(), labels, None))
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad<T: Scalar>(&self, params: &Params<T>, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Params<T>)> {
        let n = self.check_batch(x)?;
        self.check_labels(n, labels)?;
        let body = self.layers.len() - 1;

        // activations[i] is the input of layer i
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(body + 1);
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); body];
        activations.push(x.data().to_vec());
        for i in 0..body {
            let out = self.layer_forward(i, params, n, &activations[i], Some(&mut pools[i]), None);
            activations.push(out);
        }
        let k = self.num_classes();
        let mut grad = vec![T::zero(); n * k];
        let loss = softmax_xent(&activations[body], k, labels, Some(&mut grad));

        let mut grads = self.zero_params::<T>();
        for i in (0..body).rev() {
            let need_input_grad = i > 0;
            grad = self.layer_backward(i, params, n, &activations[i], &activations[i + 1], &pools[i], &grad, &mut grads, need_input_grad);
        }
        Ok((loss, grads))
    }

    fn layer_forward<T: Scalar>(
        &self,
        i: usize,
        params: &Params<T>,
        n: usize,
        input: &[T],
        pool_idx: Option<&mut Vec<usize>>,
        mut kernel: Option<&mut dyn LinearKernel<T>>,
    ) -> Vec<T> {
        let in_shape = &self.shapes[i];
        let out_shape = &self.shapes[i + 1];
        let out_len: usize = out_shape.iter().product();
        match self.layers[i] {
            LayerSpec::FullyConnected { inputs, outputs, .. } => {
                let p = self.param_index[i].expect("parameterized");
                let w = params.weights[p].data();
                let mut out = vec![T::zero(); n * outputs];
                if let Some(b) = &params.biases[p] {
                    for row in out.chunks_mut(outputs) {
                        row.copy_from_slice(b.data());
                    }
                }
                match kernel {
                    Some(k) => {
                        let view = LinearInput {
                            data: input,
                            vectors: n,
                            len: inputs,
                            in_stride: (inputs, 1),
                            out_stride: (outputs, 1),
                        };
                        k.accumulate(p, &params.weights[p], &view, &mut out);
                    }
                    // out[n, o] += x[n, i] * W[o, i]^T
                    None => T::gemm(n, inputs, outputs, T::one(), input, (inputs, 1), w, (1, inputs), T::one(), &mut out, (outputs, 1)),
                }
                out
            }
            LayerSpec::Conv2d { stride, pad, .. } => {
                let p = self.param_index[i].expect("parameterized");
                let w = &params.weights[p];
                let geom = ConvGeometry::new(&[n, in_shape[0], in_shape[1], in_shape[2]], w.shape(), stride, pad).expect("validated");
                let mut out = vec![T::zero(); n * out_len];
                let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                for s in 0..n {
                    geom.im2col(&input[s * geom.sample_len()..(s + 1) * geom.sample_len()], &mut cols);
                    let dst = &mut out[s * out_len..(s + 1) * out_len];
                    match kernel {
                        Some(ref mut k) => {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            let view = LinearInput {
                                data: &cols,
                                vectors: geom.col_cols(),
                                len: geom.col_rows(),
                                in_stride: (1, geom.col_cols()),
                                out_stride: (1, geom.col_cols()),
                            };
                            k.accumulate(p, w, &view, dst);
                        }
                        None => geom.apply_kernel(w.data(), &cols, dst),
                    }
                    if let Some(b) = &params.biases[p] {
                        for (ch, plane) in dst.chunks_mut(geom.col_cols()).enumerate() {
                            plane.iter_mut().for_each(|v| *v += b.data()[ch]);
                        }
                    }
                }
                out
            }
            LayerSpec::Relu => input.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            LayerSpec::MaxPool2d { size } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let in_len = c * h * w;
                let mut out = vec![T::zero(); n * out_len];
                let mut idx = vec![0usize; n * out_len];
                for s in 0..n {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = s * in_len + (ch * h + oy * size) * w + ox * size;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let j = s * in_len + (ch * h + oy * size + dy) * w + ox * size + dx;
                                        if input[j] > input[best] {
                                            best = j;
                                        }
                                    }
                                }
                                let o = s * out_len + (ch * oh + oy) * ow + ox;
                                out[o] = input[best];
                                idx[o] = best;
                            }
                        }
                    }
                }
                if let Some(slot) = pool_idx {
                    *slot = idx;
                }
                out
            }
            LayerSpec::SoftmaxCrossEntropy => unreachable!("loss head is evaluated separately"),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward<T: Scalar>(
        &self,
        i: usize,
        params: &Params<T>,
        n: usize,
        input: &[T],
        output: &[T],
        pool_idx: &[usize],
        grad_out: &[T],
        grads: &mut Params<T>,
        need_input_grad: bool,
    ) -> Vec<T> {
        let in_shape = &self.shapes[i];
        let in_len: usize = in_shape.iter().product();
        match self.layers[i] {
            LayerSpec::FullyConnected { inputs, outputs, .. } => {
                let p = self.param_index[i].expect("parameterized");
                // dW[o, i] = g[n, o]^T x[n, i]
                T::gemm(outputs, n, inputs, T::one(), grad_out, (1, outputs), input, (inputs, 1), T::zero(), grads.weights[p].data_mut(), (inputs, 1));
                if let Some(db) = &mut grads.biases[p] {
                    let db = db.data_mut();
                    for row in grad_out.chunks(outputs) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                if !need_input_grad {
                    return Vec::new();
                }
                let mut dx = vec![T::zero(); n * inputs];
                T::gemm(n, outputs, inputs, T::one(), grad_out, (outputs, 1), params.weights[p].data(), (inputs, 1), T::zero(), &mut dx, (inputs, 1));
                dx
            }
            LayerSpec::Conv2d { stride, pad, .. } => {
                let p = self.param_index[i].expect("parameterized");
                let w = &params.weights[p];
                let geom = ConvGeometry::new(&[n, in_shape[0], in_shape[1], in_shape[2]], w.shape(), stride, pad).expect("validated");
                let (rows, ncols, o) = (geom.col_rows(), geom.col_cols(), geom.out_channels);
                let out_len = geom.out_sample_len();
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dcols = vec![T::zero(); rows * ncols];
                let mut dx = if need_input_grad { vec![T::zero(); n * in_len] } else { Vec::new() };
                for s in 0..n {
                    let g = &grad_out[s * out_len..(s + 1) * out_len];
                    geom.im2col(&input[s * in_len..(s + 1) * in_len], &mut cols);
                    // dW[o, r] += g[o, p] cols[r, p]^T
                    T::gemm(o, ncols, rows, T::one(), g, (ncols, 1), &cols, (1, ncols), T::one(), grads.weights[p].data_mut(), (rows, 1));
                    if let Some(db) = &mut grads.biases[p] {
                        for (d, plane) in db.data_mut().iter_mut().zip(g.chunks(ncols)) {
                            *d += plane.iter().copied().sum::<T>();
                        }
                    }
                    if need_input_grad {
                        // dcols[r, p] = W[o, r]^T g[o, p]
                        T::gemm(rows, o, ncols, T::one(), w.data(), (1, rows), g, (ncols, 1), T::zero(), &mut dcols, (ncols, 1));
                        geom.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                dx
            }
            LayerSpec::Relu => grad_out.iter().zip(output).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect(),
            LayerSpec::MaxPool2d { .. } => {
                let mut dx = vec![T::zero(); n * in_len];
                for (&j, &g) in pool_idx.iter().zip(grad_out) {
                    dx[j] += g;
                }
                dx
            }
            LayerSpec::SoftmaxCrossEntropy => unreachable!("loss head is evaluated separately"),
        }
    }
}

/// Mean cross-entropy of row-wise softmax; optionally writes the gradient
/// with respect to the logits.
fn softmax_xent<T: Scalar>(logits: &[T], k: usize, labels: &[usize], mut grad: Option<&mut Vec<T>>) -> T {
    let n = labels.len();
    let inv_n = T::one() / T::of(n as f64);
    let mut total = T::zero();
    for (s, (row, &label)) in logits.chunks(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        if let Some(g) = grad.as_deref_mut() {
            for (c, &z) in row.iter().enumerate() {
                let p = (z - log_z).exp();
                let target = if c == label { T::one() } else { T::zero() };
                g[s * k + c] = (p - target) * inv_n;
            }
        }
    }
    total * inv_n
}

/// Input vectors of one weight product. Element `r` of vector `j` is
/// `data[j * in_stride.0 + r * in_stride.1]`; output `o` of vector `j` goes
/// to `out[j * out_stride.0 + o * out_stride.1]`.
pub struct LinearInput<'a, T> {
    pub data: &'a [T],
    pub vectors: usize,
    pub len: usize,
    pub in_stride: (usize, usize),
    pub out_stride: (usize, usize),
}

/// Replacement for the dense `out += W x` of weight layers.
pub trait LinearKernel<T> {
    /// Accumulate the product of weight layer `layer` (`weights` is
    /// `[outputs, ...]`, flattened row-major to `[outputs, len]`) into `out`.
    fn accumulate(&mut self, layer: usize, weights: &Tensor<T>, input: &LinearInput<'_, T>, out: &mut [T]);
}

/// Weights and biases of every parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Params<T> {
    /// `self += a * other`, parameter by parameter.
    pub fn axpy(&mut self, a: T, other: &Self) -> Result<()> {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            w.axpy(a, g)?;
        }
        for (b, g) in self.biases.iter_mut().zip(&other.biases) {
            if let (Some(b), Some(g)) = (b, g) {
                b.axpy(a, g)?;
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            biases: self.biases.iter().map(|b| b.as_ref().map(|b| Tensor::zeros(b.shape()))).collect(),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Tensor::is_finite) && self.biases.iter().flatten().all(Tensor::is_finite)
    }

    /// Flat view of every scalar: weights first, then biases.
    pub fn flatten(&self) -> Vec<T> {
        self.weights
            .iter()
            .chain(self.biases.iter().flatten())
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

/// Plain gradient step `w <- w - lr * g`.
pub fn sgd_step<T: Scalar>(params: &mut Params<T>, grads: &Params<T>, lr: T) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    params.axpy(-lr, grads)
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T> {
    pub momentum: T,
    velocity: Option<Params<T>>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(momentum: T) -> Self {
        Self { momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: T) -> Result<()> {
        let velocity = self.velocity.get_or_insert_with(|| grads.zeros_like());
        for w in velocity.weights.iter_mut() {
            w.data_mut().iter_mut().for_each(|x| *x *= self.momentum);
        }
        for b in velocity.biases.iter_mut().flatten() {
            b.data_mut().iter_mut().for_each(|x| *x *= self.momentum);
        }
        velocity.axpy(T::one(), grads)?;
        sgd_step(params, velocity, lr)
    }
}

/// An architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    pub params: Params<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(arch: Architecture, params: Params<T>) -> Result<Self> {
        arch.check_params(&params)?;
        Ok(Self { arch, params })
    }

    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let params = arch.init_params(rng);
        Self { arch, params }
    }

    pub fn forward(&self, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        self.arch.loss(&self.params, x, labels)
    }

    pub fn backward(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Params<T>)> {
        self.arch.loss_and_grad(&self.params, x, labels)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arch.logits(&self.params, x)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best }))
        .collect()
}
