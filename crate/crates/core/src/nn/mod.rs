//! A small CPU neural-network engine with explicit backward passes.
//!
//! Layers cache what they need during `forward` and accumulate parameter
//! gradients during `backward`. Everything is generic over [`Scalar`] so the
//! same model code trains in `f32` and is gradient-checked in `f64`.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use layers::{Layer, Sequential};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// `c = alpha·a·b + beta·c` with explicit strides, as in `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn raw_gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover every
                // (row, col) offset implied by the dimensions and strides;
                // `gemm` below is the only caller and checks lengths.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major `c (m×n) = op(a) (m×k) · op(b) (k×n) + beta·c`, where `op`
/// transposes the stored matrix when the flag is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    beta: S,
    c: &mut [S],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    S::raw_gemm(m, k, n, S::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "bad reshape to {shape:?}");
        self.shape = shape;
        self
    }

    /// Per-sample slice along the leading dimension.
    pub fn sample(&self, i: usize) -> &[S] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn map(mut self, f: impl Fn(S) -> S) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: &'static str, shape: Vec<usize>, value: Vec<S>) -> Self {
        let len = value.len();
        assert_eq!(shape.iter().product::<usize>(), len);
        Param { name, shape, value, grad: vec![S::zero(); len] }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

/// Non-trainable state saved with a model (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<S> {
    pub name: &'static str,
    pub value: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass state: mode plus the RNG that drives dropout masks.
pub struct Ctx {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn new(mode: Mode, rng: ChaCha8Rng) -> Self {
        Ctx { mode, rng }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal {
        mean: f64,
        std: f64,
    },
    Uniform {
        bound: f64,
    },
    /// Glorot/Xavier uniform over `fan_in + fan_out`.
    Glorot,
    Zeros,
}

impl Init {
    pub fn sample<S: Scalar>(&self, len: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Vec<S> {
        match *self {
            Init::Normal { mean, std } => (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    S::lit(mean + std * z)
                })
                .collect(),
            Init::Uniform { bound } => (0..len).map(|_| S::lit(rng.gen_range(-bound..=bound))).collect(),
            Init::Glorot => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| S::lit(rng.gen_range(-bound..=bound))).collect()
            }
            Init::Zeros => vec![S::zero(); len],
        }
    }
}

pub fn to_f32<S: Scalar>(v: &[S]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

pub fn from_f32<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|&x| S::from_f32(x).expect("f32 converts")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
