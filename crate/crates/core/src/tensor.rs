//! Dense row-major tensors.
//!
//! Every layer's weights are also viewed as one flat vector: the ADMM
//! arithmetic (residuals, dual sums, projections) never looks at the shape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::InvalidArgument(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: T, x: &Self) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (y, &xi) in self.data.iter_mut().zip(&x.data) {
            *y += a * xi;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Self::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            (k, 1),
            &other.data,
            (n, 1),
            T::zero(),
            &mut out.data,
            (n, 1),
        );
        Ok(out)
    }

    /// Cross-correlation of `input` `[n, c, h, w]` with `kernel`
    /// `[o, c, kh, kw]`, zero padding `pad` on every side.
    pub fn conv2d(input: &Self, kernel: &Self, stride: usize, pad: usize) -> Result<Self> {
        let geom = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
        let mut out = Self::zeros(&[geom.batch, geom.out_channels, geom.out_h, geom.out_w]);
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        for s in 0..geom.batch {
            geom.im2col(&input.data[s * geom.sample_len()..(s + 1) * geom.sample_len()], &mut cols);
            geom.apply_kernel(&kernel.data, &cols, &mut out.data[s * geom.out_sample_len()..(s + 1) * geom.out_sample_len()]);
        }
        Ok(out)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Index arithmetic for a strided, zero-padded 2-D convolution lowered to
/// matrix products via `im2col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch());
        }
        Ok(Self {
            batch: input[0],
            channels: input[1],
            h,
            w,
            out_channels: kernel[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    pub fn out_sample_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    /// Rows of the unfolded patch matrix: `c * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the unfolded patch matrix: one per output pixel.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input pixel feeding patch row `(c, ki, kj)` at output `(oy, ox)`.
    fn source(&self, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    pub fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        let ncols = self.col_cols();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(ki, kj, oy, ox) {
                                Some((y, x)) => sample[(c * self.h + y) * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the patch-matrix gradient back onto the input sample.
    pub fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let ncols = self.col_cols();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(ki, kj, oy, ox) {
                                sample[(c * self.h + y) * self.w + x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out[o, p] = sum_r kernel[o, r] * cols[r, p]` for one sample.
    pub fn apply_kernel<T: Scalar>(&self, kernel: &[T], cols: &[T], out: &mut [T]) {
        let (m, k, n) = (self.out_channels, self.col_rows(), self.col_cols());
        T::gemm(m, k, n, T::one(), kernel, (k, 1), cols, (n, 1), T::zero(), out, (n, 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn elementwise_add_examples() {
        assert_eq!(t(&[1.0, 2.0]).add(&t(&[3.0, 4.0])).unwrap(), t(&[4.0, 6.0]));
        let x = t(&[0.3, -2.0, 7.5]);
        assert_eq!(x.add(&Tensor::zeros(x.shape())).unwrap(), x);
        assert_eq!(t(&[0.5]).add(&t(&[-0.5])).unwrap(), t(&[0.0]));
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let err = t(&[1.0, 2.0]).add(&t(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dot_and_matmul_examples() {
        assert_eq!(t(&[1.0, 2.0, 3.0]).dot(&t(&[1.0, 2.0, 3.0])).unwrap(), 14.0);
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn conv2d_window_sum() {
        let input = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let kernel = Tensor::<f64>::filled(&[1, 1, 2, 2], 1.0);
        let out = Tensor::conv2d(&input, &kernel, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let input = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let kernel = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(Tensor::conv2d(&input, &kernel, 1, 0).is_err());
    }

    fn conv_reference(input: &Tensor<f64>, kernel: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, w] = input.shape().try_into().unwrap();
        let [o, _, kh, kw] = kernel.shape().try_into().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for s in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let yy = (y * stride + i) as isize - pad as isize;
                                    let xx = (x * stride + j) as isize - pad as isize;
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((s * c + ic) * h + yy as usize) * w + xx as usize]
                                        * kernel.data()[((oc * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((s * o + oc) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops_on_random_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 2, 5), (1, 0, 1), (3, 1, 2)] {
            let input = Tensor::new(vec![2, 3, 8, 8], (0..2 * 3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let kernel = Tensor::new(vec![4, 3, k, k], (0..4 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let fast = Tensor::conv2d(&input, &kernel, stride, pad).unwrap();
            let slow = conv_reference(&input, &kernel, stride, pad);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let geom = ConvGeometry::new(&[1, 2, 5, 5], &[1, 2, 3, 3], 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..geom.sample_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..geom.col_rows() * geom.col_cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; y.len()];
        geom.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        geom.col2im(&y, &mut back);
        assert!((dot(&cols, &y) - dot(&x, &back)).abs() < 1e-12);
    }

    #[test]
    fn f32_tensor_ops() {
        let a = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(a.dot(&a).unwrap(), 14.0);
        assert_eq!(a.scale(2.0).data(), &[2.0, 4.0, 6.0]);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, 1..32)
    }

    proptest! {
        #[test]
        fn dot_is_symmetric(a in vec_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1e3..1e3)).collect();
            let (ta, tb) = (t(&a), t(&b));
            prop_assert_eq!(ta.dot(&tb).unwrap(), tb.dot(&ta).unwrap());
        }

        #[test]
        fn self_dot_nonnegative(a in vec_strategy()) {
            let ta = t(&a);
            let d = ta.dot(&ta).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, a.iter().all(|&x| x == 0.0));
        }

        #[test]
        fn scale_round_trip(a in vec_strategy(), c in prop_oneof![-100.0..-0.01f64, 0.01..100.0f64]) {
            let ta = t(&a);
            prop_assert_eq!(ta.scale(1.0), ta.clone());
            let back = ta.scale(c).scale(1.0 / c);
            for (x, y) in back.data().iter().zip(ta.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
}
