//! Dense row-major tensors and the scalar trait shared by every kernel.
//!
//! Production code runs on `f32`. All kernels are generic over [`Scalar`] so
//! that gradient checks can replay the exact same code paths in `f64`.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating point element type usable by the kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Row-major `c = a · b (+ c if accumulate)` where `a` is `m×k` and `b` is
    /// `k×n`. `a_t`/`b_t` mean the stored buffer is the transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> (isize, isize, isize, isize) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    (rsa, csa, rsb, csb)
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[$t],
                a_t: bool,
                b: &[$t],
                b_t: bool,
                c: &mut [$t],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa, rsb, csb) = gemm_strides(m, k, n, a_t, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice lengths are checked above and the strides
                // describe dense row-major (or transposed) matrices inside them.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Continuous position in pixel units; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Point2D { x, y }
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!("dimension {d} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for internal call sites with shapes that
    /// were validated upstream.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().expect("finite conversion")))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    /// Slice `i` along the leading axis.
    pub fn select(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            t.expect_shape(first.shape())?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}
