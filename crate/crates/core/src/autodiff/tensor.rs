use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type usable by the graph. Carries its own GEMM.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `C = A * B + beta * C` for row-major `A: m x k`, `B: k x n`, `C: m x n`,
    /// with explicit row/column strides for `A` and `B`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn check_gemm_bounds<T>(m: usize, k: usize, n: usize, a: &[T], rsa: usize, csa: usize, b: &[T], rsb: usize, csb: usize, c: &[T]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    assert!(m * n <= c.len(), "gemm: C out of bounds");
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: usize, csa: usize, b: &[f32], rsb: usize, csb: usize, beta: f32, c: &mut [f32]) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: bounds checked above; C is row-major m x n and does not alias A or B.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), rsa as isize, csa as isize,
                b.as_ptr(), rsb as isize, csb as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, beta: f64, c: &mut [f64]) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), rsa as isize, csa as isize,
                b.as_ptr(), rsb as isize, csb as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense row-major array, channel innermost. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}
