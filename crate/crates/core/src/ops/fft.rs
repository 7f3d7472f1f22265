//! Per-channel 2-D real FFT over `(H, W)` with Hermitian half-width packing,
//! its inverse, and the adjoints of both.
//!
//! Forward is unnormalised; the inverse carries the full `1/(H·W)` factor.
//! The inverse reads only the real part of the DC column (and of the Nyquist
//! column when `W` is even), so it is a well-defined linear map on arbitrary
//! half spectra.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Real, Tensor};

fn check_width(w: usize) -> Result<()> {
    if w == 0 {
        return Err(Error::UnsupportedDimension("real FFT requires a non-zero width".into()));
    }
    Ok(())
}

/// Bins whose conjugate partner is themselves: DC, and Nyquist for even `w`.
fn self_conjugate(k: usize, w: usize) -> bool {
    k == 0 || (w % 2 == 0 && k == w / 2)
}

/// Transforms the H axis of a `[H, Wh, C]` complex array in place.
fn fft_columns<T: Real>(re: &mut [T], im: &mut [T], h: usize, wh: usize, c: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let lanes = wh * c;
    let mut buf = vec![Complex::new(T::zero(), T::zero()); lanes * h];
    for y in 0..h {
        for lane in 0..lanes {
            let i = y * lanes + lane;
            buf[lane * h + y] = Complex::new(re[i], im[i]);
        }
    }
    fft.process(&mut buf);
    for y in 0..h {
        for lane in 0..lanes {
            let v = buf[lane * h + y];
            let i = y * lanes + lane;
            re[i] = v.re;
            im[i] = v.im;
        }
    }
}

/// Forward FFT of every real row; returns bins `0..=W/2` as `[H, Wh, C]`.
fn r2c_rows<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let wh = w / 2 + 1;
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(w);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * c * w];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                buf[(y * c + ch) * w + xx] = Complex::new(x[(y * w + xx) * c + ch], T::zero());
            }
        }
    }
    fft.process(&mut buf);
    let mut re = vec![T::zero(); h * wh * c];
    let mut im = vec![T::zero(); h * wh * c];
    for y in 0..h {
        for k in 0..wh {
            for ch in 0..c {
                let v = buf[(y * c + ch) * w + k];
                let i = (y * wh + k) * c + ch;
                re[i] = v.re;
                im[i] = v.im;
            }
        }
    }
    (re, im)
}

/// Real rows from half spectra:
/// `x[n] = edge·(Re Z₀ + Re Z_{W/2}·(−1)ⁿ) + mid·2·Σ Re(Z_k e^{iθ})`, times `scale`.
fn c2r_rows<T: Real>(
    re: &[T],
    im: &[T],
    h: usize,
    w: usize,
    c: usize,
    edge: T,
    mid: T,
    scale: T,
) -> Vec<T> {
    let wh = w / 2 + 1;
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_inverse(w);
    let zero = Complex::new(T::zero(), T::zero());
    let mut buf = vec![zero; h * c * w];
    for y in 0..h {
        for ch in 0..c {
            let row = &mut buf[(y * c + ch) * w..][..w];
            for k in 0..wh {
                let i = (y * wh + k) * c + ch;
                if self_conjugate(k, w) {
                    row[k] = Complex::new(re[i] * edge, T::zero());
                } else {
                    let z = Complex::new(re[i] * mid, im[i] * mid);
                    row[k] = z;
                    row[w - k] = z.conj();
                }
            }
        }
    }
    fft.process(&mut buf);
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                out[(y * w + xx) * c + ch] = buf[(y * c + ch) * w + xx].re * scale;
            }
        }
    }
    out
}

/// `[H, W, C]` real → `[H, W/2 + 1, C]` complex.
pub fn rfft2<T: Real>(x: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let (h, w, c) = x.hwc()?;
    check_width(w)?;
    let wh = w / 2 + 1;
    let (mut re, mut im) = r2c_rows(x.data(), h, w, c);
    fft_columns(&mut re, &mut im, h, wh, c, false);
    ComplexTensor::from_parts(&[h, wh, c], re, im)
}

/// `[H, W/2 + 1, C]` complex → `[H, W, C]` real, `W` given explicitly.
pub fn irfft2<T: Real>(f: &ComplexTensor<T>, width: usize) -> Result<Tensor<T>> {
    let (h, wh, c) = f.hwc()?;
    check_width(width)?;
    if wh != width / 2 + 1 {
        return Err(Error::Dimension(format!(
            "half spectrum width {} does not match W = {}",
            wh, width
        )));
    }
    let mut re = f.re().to_vec();
    let mut im = f.im().to_vec();
    fft_columns(&mut re, &mut im, h, wh, c, true);
    let scale = T::one() / T::lit((h * width) as f64);
    let out = c2r_rows(&re, &im, h, width, c, T::one(), T::one(), scale);
    Tensor::from_vec(&[h, width, c], out)
}

/// VJP of [`rfft2`]: real gradient from a half-spectrum gradient.
pub fn rfft2_backward<T: Real>(grad: &ComplexTensor<T>, width: usize) -> Result<Tensor<T>> {
    let (h, wh, c) = grad.hwc()?;
    check_width(width)?;
    let mut re = grad.re().to_vec();
    let mut im = grad.im().to_vec();
    // adjoint of the unnormalised forward DFT is the unnormalised inverse
    fft_columns(&mut re, &mut im, h, wh, c, true);
    let half = T::lit(0.5);
    let out = c2r_rows(&re, &im, h, width, c, T::one(), half, T::one());
    Tensor::from_vec(&[h, width, c], out)
}

/// VJP of [`irfft2`]: half-spectrum gradient from a real gradient.
pub fn irfft2_backward<T: Real>(grad: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let (h, w, c) = grad.hwc()?;
    check_width(w)?;
    let wh = w / 2 + 1;
    let (mut re, mut im) = r2c_rows(grad.data(), h, w, c);
    let scale = T::one() / T::lit((h * w) as f64);
    let two = T::lit(2.0);
    for y in 0..h {
        for k in 0..wh {
            for ch in 0..c {
                let i = (y * wh + k) * c + ch;
                if self_conjugate(k, w) {
                    re[i] = re[i] * scale;
                    im[i] = T::zero();
                } else {
                    re[i] = re[i] * scale * two;
                    im[i] = im[i] * scale * two;
                }
            }
        }
    }
    fft_columns(&mut re, &mut im, h, wh, c, false);
    ComplexTensor::from_parts(&[h, wh, c], re, im)
}
