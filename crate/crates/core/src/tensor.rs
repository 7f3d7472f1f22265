//! Dense row-major arrays used as the carrier for images, feature maps and
//! parameters. Feature maps are laid out `[H, W, C]` with channels fastest.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;

use crate::error::{dim_err, Result};

/// Floating-point element type. Training runs in `f32`; finite-difference
/// oracles run the same code in `f64`.
pub trait Real: Float + rustfft::FftNum + Default + Debug + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← beta·C + A·B` on strided row/column layouts.
    ///
    /// # Safety
    /// The strides must keep every addressed element inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Uniform samples in `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(H, W, C)` of a rank-3 feature map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(dim_err(format!("expected [H, W, C], got {:?}", s))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise `|a − b|`; NaN when either side holds a NaN.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, nan_max)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "{}: shapes {:?} and {:?} differ",
                what, self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Paired real/imaginary buffers sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T = f32> {
    shape: Vec<usize>,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
        }
    }

    pub fn from_parts(shape: &[usize], re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(dim_err(format!(
                "complex shape {:?} needs {} elements, got re={} im={}",
                shape,
                n,
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn random<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let re = Tensor::<T>::random(shape, rng).into_data();
        let im = Tensor::<T>::random(shape, rng).into_data();
        ComplexTensor {
            shape: shape.to_vec(),
            re,
            im,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.re, &mut self.im)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(dim_err(format!("expected [H, W, C], got {:?}", s))),
        }
    }

    pub fn real_part(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.re.clone(),
        }
    }

    pub fn imag_part(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.im.clone(),
        }
    }

    pub fn add_assign(&mut self, other: &ComplexTensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.re.iter_mut().zip(&other.re) {
            *a = *a + b;
        }
        for (a, &b) in self.im.iter_mut().zip(&other.im) {
            *a = *a + b;
        }
    }

    pub fn max_abs_diff(&self, other: &ComplexTensor<T>) -> f64 {
        let d = |a: &[T], b: &[T]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
                .fold(0.0, nan_max)
        };
        nan_max(d(&self.re, &other.re), d(&self.im, &other.im))
    }
}

fn nan_max(m: f64, v: f64) -> f64 {
    if m.is_nan() || v.is_nan() {
        f64::NAN
    } else {
        m.max(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn complex_parts_must_match_shape() {
        assert!(ComplexTensor::<f64>::from_parts(&[2, 2], vec![0.0; 4], vec![0.0; 3]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
