//! Scalar abstraction shared by every numeric module.
//!
//! Training runs in `f64`; `f32` is supported for the tensor kernels, the
//! projection step and the network so the same code can be exercised at
//! lower precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable as a tensor element.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` with explicit
    /// row/column strides (in elements), as in BLAS `gemm`.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`. The slices must cover
    /// every element addressed by the strides; this is checked.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    /// Lossless-enough conversion from `f64` constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides), "gemm: A too short");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: B too short");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above guarantee every strided access of
                // A, B and C stays within the borrowed slices, and C is
                // uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);
