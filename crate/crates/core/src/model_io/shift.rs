//! Multiplication-free evaluation of quantized layers.
//!
//! A codebook layer computes `alpha * sum_r code[o, r] * x[r]`. Every code
//! is `0` or `±2^k`, so the inner sum needs only additions, subtractions and
//! exponent shifts; `alpha` is applied once per output. INT8 codes are split
//! into their binary digits and handled the same way.

use crate::error::Result;
use crate::network::{LinearInput, LinearKernel};
use crate::quantset::LayerTarget;
use crate::tensor::Tensor;

use super::QuantizedModel;

/// Arithmetic performed by [`ShiftAddKernel`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub adds: u64,
    pub subs: u64,
    pub shifts: u64,
    pub muls: u64,
}

/// `x * 2^k` by adjusting the exponent field; falls back to a (still exact)
/// scaling for zeros, subnormals and overflow.
fn shift(x: f64, k: u32) -> f64 {
    let bits = x.to_bits();
    let exponent = (bits >> 52) & 0x7ff;
    if exponent != 0 && exponent + (k as u64) < 0x7ff {
        f64::from_bits(bits + ((k as u64) << 52))
    } else {
        x * f64::from(1u32 << k)
    }
}

pub struct ShiftAddKernel<'a> {
    layers: &'a [LayerTarget<f64>],
    pub counts: OpCounts,
}

impl<'a> ShiftAddKernel<'a> {
    pub fn new(model: &'a QuantizedModel) -> Self {
        Self {
            layers: &model.layers,
            counts: OpCounts::default(),
        }
    }

    /// `sum_r code[r] * x[r]` with add/sub/shift only.
    fn accumulate_codes(&mut self, codes: &[i8], input: &LinearInput<'_, f64>, j: usize) -> f64 {
        let mut acc = 0.0;
        let (s0, s1) = input.in_stride;
        for (r, &c) in codes.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let x = input.data[j * s0 + r * s1];
            let mut m = c.unsigned_abs();
            while m != 0 {
                let k = m.trailing_zeros();
                m &= m - 1;
                let term = if k == 0 {
                    x
                } else {
                    self.counts.shifts += 1;
                    shift(x, k)
                };
                if c > 0 {
                    self.counts.adds += 1;
                    acc += term;
                } else {
                    self.counts.subs += 1;
                    acc -= term;
                }
            }
        }
        acc
    }
}

impl LinearKernel<f64> for ShiftAddKernel<'_> {
    fn accumulate(&mut self, layer: usize, weights: &Tensor<f64>, input: &LinearInput<'_, f64>, out: &mut [f64]) {
        let outputs = weights.shape()[0];
        let len = input.len;
        let (o0, o1) = input.out_stride;
        let (codes, scale) = match &self.layers[layer] {
            LayerTarget::Codebook(q) => (&q.codes, q.alpha),
            LayerTarget::Int8(q) => (&q.codes, q.scale),
            LayerTarget::FullPrecision(w) => {
                let (s0, s1) = input.in_stride;
                for j in 0..input.vectors {
                    for o in 0..outputs {
                        let row = &w.data()[o * len..(o + 1) * len];
                        let dot: f64 = row.iter().enumerate().map(|(r, &wv)| wv * input.data[j * s0 + r * s1]).sum();
                        out[j * o0 + o * o1] += dot;
                    }
                }
                self.counts.muls += (input.vectors * outputs * len) as u64;
                self.counts.adds += (input.vectors * outputs * len) as u64;
                return;
            }
        };
        for j in 0..input.vectors {
            for o in 0..outputs {
                let acc = self.accumulate_codes(&codes[o * len..(o + 1) * len], input, j);
                out[j * o0 + o * o1] += scale * acc;
                self.counts.muls += 1;
                self.counts.adds += 1;
            }
        }
    }
}

/// Logits computed with the shift/add kernel.
pub fn quantized_forward(model: &QuantizedModel, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(quantized_forward_counted(model, x)?.0)
}

/// [`quantized_forward`] plus the arithmetic it performed in weight layers.
pub fn quantized_forward_counted(model: &QuantizedModel, x: &Tensor<f64>) -> Result<(Tensor<f64>, OpCounts)> {
    let mut kernel = ShiftAddKernel::new(model);
    let logits = model.arch.logits_with(&model.params(), x, &mut kernel)?;
    Ok((logits, kernel.counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, LayerSpec, Network, Params};
    use crate::quantset::{apply_layer_policy, LayerPolicy, QuantizationSet, QuantizedLayer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..shape.iter().product()).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn quantize(net: &Network<f64>, policies: &[LayerPolicy]) -> QuantizedModel {
        let targets: Vec<_> = net.params.weights.iter().zip(policies).map(|(w, &p)| apply_layer_policy(w, p, None).unwrap()).collect();
        QuantizedModel::from_targets(net.arch.clone(), &targets, &net.params).unwrap()
    }

    fn max_gap(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn shift_is_exact_scaling() {
        for &x in &[1.5, -3.25e-300, 0.0, -0.0, 5e-324, 1e300, f64::MIN_POSITIVE] {
            for k in 0..7 {
                let expect = x * f64::from(1u32 << k);
                assert_eq!(shift(x, k).to_bits(), expect.to_bits(), "{x} << {k}");
            }
        }
    }

    #[test]
    fn matches_float_path_on_cnn() {
        let arch = Architecture::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::FullyConnected {
                    inputs: 27,
                    outputs: 10,
                    bias: true,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::init(arch, &mut rng);
        for policies in [
            [LayerPolicy::Codebook(QuantizationSet::Pow2Shift(2)), LayerPolicy::Int8],
            [LayerPolicy::Codebook(QuantizationSet::Binary), LayerPolicy::FullPrecision],
        ] {
            let model = quantize(&net, &policies);
            let x = random_batch(&mut rng, &[5, 1, 6, 6]);
            let float = model.network().logits(&x).unwrap();
            assert!(max_gap(&quantized_forward(&model, &x).unwrap(), &float) < 1e-9);
        }
    }

    #[test]
    fn ternary_uses_only_add_and_sub() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::<f64>::init(Architecture::mlp(vec![1, 4, 4], &[8, 10]).unwrap(), &mut rng);
        let ternary = LayerPolicy::Codebook(QuantizationSet::Ternary);
        let model = quantize(&net, &[ternary, ternary]);
        let x = random_batch(&mut rng, &[3, 1, 4, 4]);
        let (_, counts) = quantized_forward_counted(&model, &x).unwrap();
        assert_eq!(counts.shifts, 0);
        // one scale multiplication per output element of each layer
        assert_eq!(counts.muls, 3 * (8 + 10));
        let nonzero: u64 = model.layers.iter().map(|l| match l {
            LayerTarget::Codebook(q) => q.codes.iter().filter(|&&c| c != 0).count() as u64,
            _ => 0,
        }).sum();
        assert_eq!(counts.adds + counts.subs, 3 * nonzero + 3 * (8 + 10));
    }

    #[test]
    fn zero_codes_give_zero_preactivation() {
        let arch = Architecture::new(
            vec![4],
            vec![
                LayerSpec::FullyConnected {
                    inputs: 4,
                    outputs: 10,
                    bias: false,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
        )
        .unwrap();
        let layer = LayerTarget::Codebook(QuantizedLayer {
            set: QuantizationSet::Ternary,
            shape: vec![10, 4],
            codes: vec![0; 40],
            alpha: 0.7,
        });
        let params = Params {
            weights: vec![Tensor::zeros(&[10, 4])],
            biases: vec![None],
        };
        let model = QuantizedModel::from_targets(arch, &[layer], &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = quantized_forward(&model, &random_batch(&mut rng, &[2, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
