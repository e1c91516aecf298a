//! Central finite differences and a scalar-loop reference network.

use lbadmm::network::{Architecture, LayerSpec, Params};
use lbadmm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter (weights and biases).
pub fn max_fd_error(arch: &Architecture, params: &Params<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, usize) {
    let (_, grads) = arch.loss_and_grad(params, x, labels).unwrap();
    let analytic = grads.flatten();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let mut k = 0;
    let n_weights = params.weights.len();
    for t in 0..n_weights + params.biases.len() {
        let len = if t < n_weights {
            params.weights[t].len()
        } else {
            params.biases[t - n_weights].as_ref().map_or(0, Tensor::len)
        };
        for j in 0..len {
            let orig = *param_mut(&mut probe, t, j);
            *param_mut(&mut probe, t, j) = orig + STEP;
            let up = arch.loss(&probe, x, labels).unwrap();
            *param_mut(&mut probe, t, j) = orig - STEP;
            let down = arch.loss(&probe, x, labels).unwrap();
            *param_mut(&mut probe, t, j) = orig;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k], fd));
            k += 1;
        }
    }
    (worst, k)
}

/// Tensor `t` counts weights first, then biases.
fn param_mut(p: &mut Params<f64>, t: usize, j: usize) -> &mut f64 {
    let n = p.weights.len();
    if t < n {
        &mut p.weights[t].data_mut()[j]
    } else {
        &mut p.biases[t - n].as_mut().expect("bias present").data_mut()[j]
    }
}

pub fn random_params(arch: &Architecture, seed: u64) -> Params<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = arch.init_params::<f64, _>(&mut rng);
    for b in p.biases.iter_mut().flatten() {
        b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    p
}

pub fn random_batch(arch: &Architecture, n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(arch.input_shape());
    let len = shape.iter().product();
    let x = Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..arch.num_classes())).collect();
    (x, labels)
}

/// Small instances, one per layer kind, each under 200 parameters.
pub fn layer_kind_cases() -> Vec<(&'static str, Architecture)> {
    let fc = |inputs, outputs, bias| LayerSpec::FullyConnected { inputs, outputs, bias };
    vec![
        ("fully_connected", Architecture::new(vec![6], vec![fc(6, 4, true), LayerSpec::SoftmaxCrossEntropy]).unwrap()),
        ("relu", Architecture::mlp(vec![5], &[8, 3]).unwrap()),
        (
            "conv2d",
            Architecture::new(
                vec![2, 5, 5],
                vec![
                    LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, pad: 1, bias: true },
                    fc(27, 3, true),
                    LayerSpec::SoftmaxCrossEntropy,
                ],
            )
            .unwrap(),
        ),
        (
            "max_pool2d",
            Architecture::new(
                vec![1, 6, 6],
                vec![
                    LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, pad: 1, bias: false },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { size: 2 },
                    fc(18, 4, true),
                    LayerSpec::SoftmaxCrossEntropy,
                ],
            )
            .unwrap(),
        ),
        ("softmax_cross_entropy", Architecture::new(vec![3], vec![fc(3, 5, false), LayerSpec::SoftmaxCrossEntropy]).unwrap()),
    ]
}

/// Scalar-loop forward pass for `fc -> relu -> fc -> softmax CE`, written
/// without tensors or matrix kernels.
pub fn reference_mlp_loss(w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], dims: (usize, usize, usize), x: &[f64], labels: &[usize]) -> f64 {
    let (din, dh, dout) = dims;
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let xs = &x[s * din..(s + 1) * din];
        let mut h = vec![0.0; dh];
        for j in 0..dh {
            let mut acc = b1[j];
            for i in 0..din {
                acc += w1[j * din + i] * xs[i];
            }
            h[j] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut z = vec![0.0; dout];
        for k in 0..dout {
            let mut acc = b2[k];
            for j in 0..dh {
                acc += w2[k * dh + j] * h[j];
            }
            z[k] = acc;
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / labels.len() as f64
}
