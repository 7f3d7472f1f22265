//! Channel layer normalisation and last-axis softmax.

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn check_affine<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<usize> {
    let c = *x.shape().last().ok_or_else(|| dim_err("layer_norm on rank-0 tensor"))?;
    if c == 0 {
        return Err(dim_err("layer_norm needs at least one channel"));
    }
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(dim_err(format!(
            "layer_norm affine shapes {:?}/{:?} do not match C = {}",
            gain.shape(),
            shift.shape(),
            c
        )));
    }
    Ok(c)
}

/// Per-position normalisation over the last (channel) axis.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let c = check_affine(x, gain, shift)?;
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        let mean = src.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..c {
            dst[i] = (src[i] - mean) * rstd * gain.data()[i] + shift.data()[i];
        }
    }
    Ok(out)
}

pub struct LayerNormGrads<T> {
    pub input: Tensor<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerNormGrads<T>> {
    let c = check_affine(x, gain, shift)?;
    x.same_shape(grad_out, "layer_norm backward")?;
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = Tensor::zeros(&[c]);
    let mut ds = Tensor::zeros(&[c]);
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for ((src, g), dst) in x
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(dx.data_mut().chunks_exact_mut(c))
    {
        let mean = src.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..c {
            xhat[i] = (src[i] - mean) * rstd;
            dxhat[i] = g[i] * gain.data()[i];
            mean_d = mean_d + dxhat[i];
            mean_dx = mean_dx + dxhat[i] * xhat[i];
            dg.data_mut()[i] = dg.data()[i] + g[i] * xhat[i];
            ds.data_mut()[i] = ds.data()[i] + g[i];
        }
        mean_d = mean_d * inv_c;
        mean_dx = mean_dx * inv_c;
        for i in 0..c {
            dst[i] = rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    Ok(LayerNormGrads {
        input: dx,
        gain: dg,
        shift: ds,
    })
}

/// Softmax over the last axis, stabilised by subtracting the slice maximum.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| dim_err("softmax on rank-0 tensor"))?;
    if n == 0 {
        return Err(dim_err("softmax needs a non-empty last axis"));
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks_exact(n).zip(out.data_mut().chunks_exact_mut(n)) {
        let m = src.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    Ok(out)
}

/// VJP of softmax given its output `y`.
pub fn softmax_lastdim_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    y.same_shape(grad_out, "softmax backward")?;
    let n = *y.shape().last().unwrap_or(&1);
    let mut dx = Tensor::zeros(y.shape());
    for ((ys, gs), ds) in y
        .data()
        .chunks_exact(n)
        .zip(grad_out.data().chunks_exact(n))
        .zip(dx.data_mut().chunks_exact_mut(n))
    {
        let dot = ys.iter().zip(gs).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
        for i in 0..n {
            ds[i] = ys[i] * (gs[i] - dot);
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::full(&[c], 1.0)
    }

    #[test]
    fn constant_channels_normalise_to_zero() {
        let x = Tensor::<f64>::full(&[2, 2, 4], 3.5);
        let y = layer_norm(&x, &ones(4), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_standardisation() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &ones(2), &Tensor::zeros(&[2])).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn normalised_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::random(&[5, 4, 16], &mut rng);
        let y = layer_norm(&x, &ones(16), &Tensor::zeros(&[16])).unwrap();
        for px in y.data().chunks_exact(16) {
            let m = px.iter().sum::<f64>() / 16.0;
            let v = px.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax_lastdim(&Tensor::<f64>::zeros(&[3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_lastdim(&Tensor::<f32>::from_vec(&[2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::random(&[6, 9], &mut rng).map(|v| v * 20.0);
        let y = softmax_lastdim(&x).unwrap();
        for row in y.data().chunks_exact(9) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
