//! Complex-valued convolution built from four real convolutions:
//! `(x + iy) * (u + iv) = (x*u − y*v) + i(x*v + y*u)`.
//!
//! The kernel gradient is the flip-correlation of the output gradient with
//! the *conjugated* input: `∂L/∂u = G_re ⋆ x + G_im ⋆ y`,
//! `∂L/∂v = G_im ⋆ x − G_re ⋆ y`.

use crate::error::{dim_err, Result};
use crate::ops::conv::{conv2d, conv2d_backward};
use crate::tensor::{ComplexTensor, Real, Tensor};

fn check<T: Real>(u: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    if u.shape() != v.shape() {
        return Err(dim_err(format!(
            "complex kernel parts differ in shape: {:?} vs {:?}",
            u.shape(),
            v.shape()
        )));
    }
    Ok(())
}

pub fn complex_conv2d<T: Real>(f: &ComplexTensor<T>, u: &Tensor<T>, v: &Tensor<T>) -> Result<ComplexTensor<T>> {
    check(u, v)?;
    let x = f.real_part();
    let y = f.imag_part();
    let xu = conv2d(&x, u, None, 1)?;
    let yv = conv2d(&y, v, None, 1)?;
    let xv = conv2d(&x, v, None, 1)?;
    let yu = conv2d(&y, u, None, 1)?;
    let re = xu.data().iter().zip(yv.data()).map(|(&a, &b)| a - b).collect();
    let im = xv.data().iter().zip(yu.data()).map(|(&a, &b)| a + b).collect();
    ComplexTensor::from_parts(xu.shape(), re, im)
}

pub struct ComplexConvGrads<T> {
    pub input: ComplexTensor<T>,
    pub kernel_re: Tensor<T>,
    pub kernel_im: Tensor<T>,
}

pub fn complex_conv2d_backward<T: Real>(
    f: &ComplexTensor<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    grad: &ComplexTensor<T>,
) -> Result<ComplexConvGrads<T>> {
    check(u, v)?;
    let x = f.real_part();
    let y = f.imag_part();
    let g_re = grad.real_part();
    let g_im = grad.imag_part();
    let neg_g_re = g_re.map(|a| -a);

    // out_re = x*u − y*v
    let a = conv2d_backward(&x, u, false, 1, &g_re)?;
    let b = conv2d_backward(&y, v, false, 1, &neg_g_re)?;
    // out_im = x*v + y*u
    let c = conv2d_backward(&x, v, false, 1, &g_im)?;
    let d = conv2d_backward(&y, u, false, 1, &g_im)?;

    let mut dx = a.input;
    dx.add_assign(&c.input);
    let mut dy = b.input;
    dy.add_assign(&d.input);
    let mut du = a.kernel;
    du.add_assign(&d.kernel);
    let mut dv = b.kernel;
    dv.add_assign(&c.kernel);
    Ok(ComplexConvGrads {
        input: ComplexTensor::from_parts(f.shape(), dx.into_data(), dy.into_data())?,
        kernel_re: du,
        kernel_im: dv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centre_kernel(c: usize, value: f64) -> Tensor<f64> {
        let mut k = Tensor::zeros(&[3, 3, c, c]);
        for ch in 0..c {
            k.data_mut()[(4 * c + ch) * c + ch] = value;
        }
        k
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let f = ComplexTensor::<f64>::random(&[5, 4, 3], &mut rng);
        let y = complex_conv2d(&f, &centre_kernel(3, 1.0), &centre_kernel(3, 0.0)).unwrap();
        assert!(y.max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn imaginary_unit_rotates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let f = ComplexTensor::<f64>::random(&[4, 4, 2], &mut rng);
        let y = complex_conv2d(&f, &centre_kernel(2, 0.0), &centre_kernel(2, 1.0)).unwrap();
        for i in 0..f.len() {
            assert!((y.re()[i] + f.im()[i]).abs() < 1e-15);
            assert!((y.im()[i] - f.re()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_equals_four_real_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let f = ComplexTensor::<f64>::random(&[8, 5, 4], &mut rng);
        let u = Tensor::random(&[3, 3, 4, 4], &mut rng);
        let v = Tensor::random(&[3, 3, 4, 4], &mut rng);
        let y = complex_conv2d(&f, &u, &v).unwrap();
        let x = f.real_part();
        let im = f.imag_part();
        let xu = conv2d(&x, &u, None, 1).unwrap();
        let yv = conv2d(&im, &v, None, 1).unwrap();
        let xv = conv2d(&x, &v, None, 1).unwrap();
        let yu = conv2d(&im, &u, None, 1).unwrap();
        for i in 0..y.len() {
            assert!((y.re()[i] - (xu.data()[i] - yv.data()[i])).abs() < 1e-6);
            assert!((y.im()[i] - (xv.data()[i] + yu.data()[i])).abs() < 1e-6);
        }
    }
}
