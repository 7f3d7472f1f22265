//! Channel (cross-covariance) attention primitives on `[H, W, C]` maps split
//! into `heads` groups of `d = C / heads` channels. Attention matrices are
//! stored `[heads, d, d]`, never `HW × HW`.

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

fn head_dims<T: Real>(x: &Tensor<T>, heads: usize) -> Result<(usize, usize, usize)> {
    let (h, w, c) = x.hwc()?;
    if heads == 0 || c % heads != 0 {
        return Err(dim_err(format!("C = {} not divisible by {} heads", c, heads)));
    }
    Ok((h * w, c, c / heads))
}

/// `G[h][r][s] = Σ_p a[p, h·d + r] · b[p, h·d + s]`; with `a = Q`, `b = K`
/// this is the transposed cross-covariance `Q̂ᵀK̂`.
pub fn head_gram<T: Real>(a: &Tensor<T>, b: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    a.same_shape(b, "head_gram")?;
    let (n, c, d) = head_dims(a, heads)?;
    let mut g = Tensor::zeros(&[heads, d, d]);
    let gd = g.data_mut();
    for (pa, pb) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)).take(n) {
        for hd in 0..heads {
            let ar = &pa[hd * d..][..d];
            let br = &pb[hd * d..][..d];
            let blk = &mut gd[hd * d * d..][..d * d];
            for (r, &av) in ar.iter().enumerate() {
                for (gv, &bv) in blk[r * d..][..d].iter_mut().zip(br) {
                    *gv = *gv + av * bv;
                }
            }
        }
    }
    Ok(g)
}

pub fn head_gram_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    heads: usize,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, d) = head_dims(a, heads)?;
    if grad.shape() != [heads, d, d] {
        return Err(dim_err(format!("gram gradient shape {:?}", grad.shape())));
    }
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    let gd = grad.data();
    for (((pa, pb), pda), pdb) in a
        .data()
        .chunks_exact(c)
        .zip(b.data().chunks_exact(c))
        .zip(da.data_mut().chunks_exact_mut(c))
        .zip(db.data_mut().chunks_exact_mut(c))
    {
        for hd in 0..heads {
            let blk = &gd[hd * d * d..][..d * d];
            for r in 0..d {
                let row = &blk[r * d..][..d];
                let mut acc = T::zero();
                for s in 0..d {
                    acc = acc + row[s] * pb[hd * d + s];
                    pdb[hd * d + s] = pdb[hd * d + s] + row[s] * pa[hd * d + r];
                }
                pda[hd * d + r] = pda[hd * d + r] + acc;
            }
        }
    }
    Ok((da, db))
}

/// `out[p, h·d + j] = Σ_i x[p, h·d + i] · attn[h][j][i]`.
///
/// Each output channel is a convex combination of the head's input channels
/// when the rows of `attn` are softmax-normalised.
pub fn head_mix<T: Real>(x: &Tensor<T>, attn: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (_, c, d) = head_dims(x, heads)?;
    if attn.shape() != [heads, d, d] {
        return Err(dim_err(format!(
            "attention shape {:?} does not match [{}, {}, {}]",
            attn.shape(),
            heads,
            d,
            d
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let ad = attn.data();
    for (px, po) in x.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        for hd in 0..heads {
            let blk = &ad[hd * d * d..][..d * d];
            let xs = &px[hd * d..][..d];
            for j in 0..d {
                let row = &blk[j * d..][..d];
                let mut acc = T::zero();
                for (&xv, &av) in xs.iter().zip(row) {
                    acc = acc + xv * av;
                }
                po[hd * d + j] = acc;
            }
        }
    }
    Ok(out)
}

pub fn head_mix_backward<T: Real>(
    x: &Tensor<T>,
    attn: &Tensor<T>,
    heads: usize,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, d) = head_dims(x, heads)?;
    x.same_shape(grad, "head_mix backward")?;
    let mut dx = Tensor::zeros(x.shape());
    let mut da = Tensor::zeros(attn.shape());
    let ad = attn.data();
    let dad = da.data_mut();
    for ((px, pg), pdx) in x
        .data()
        .chunks_exact(c)
        .zip(grad.data().chunks_exact(c))
        .zip(dx.data_mut().chunks_exact_mut(c))
    {
        for hd in 0..heads {
            for j in 0..d {
                let gv = pg[hd * d + j];
                let off = hd * d * d + j * d;
                for i in 0..d {
                    pdx[hd * d + i] = pdx[hd * d + i] + gv * ad[off + i];
                    dad[off + i] = dad[off + i] + gv * px[hd * d + i];
                }
            }
        }
    }
    Ok((dx, da))
}

/// Divides head `h` of `[heads, d, d]` logits by `tau[h]`.
pub fn head_scale<T: Real>(s: &Tensor<T>, tau: &Tensor<T>) -> Result<Tensor<T>> {
    let heads = s.shape().first().copied().unwrap_or(0);
    if tau.shape() != [heads] {
        return Err(dim_err(format!(
            "temperature shape {:?} does not match {} heads",
            tau.shape(),
            heads
        )));
    }
    let per = s.len() / heads.max(1);
    let mut out = s.clone();
    for (hd, blk) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let t = tau.data()[hd];
        for v in blk {
            *v = *v / t;
        }
    }
    Ok(out)
}

pub fn head_scale_backward<T: Real>(
    s: &Tensor<T>,
    tau: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let heads = tau.len();
    let per = s.len() / heads.max(1);
    let mut ds = Tensor::zeros(s.shape());
    let mut dt = Tensor::zeros(tau.shape());
    for hd in 0..heads {
        let t = tau.data()[hd];
        let mut acc = T::zero();
        for i in hd * per..(hd + 1) * per {
            ds.data_mut()[i] = grad.data()[i] / t;
            acc = acc + grad.data()[i] * s.data()[i];
        }
        dt.data_mut()[hd] = -acc / (t * t);
    }
    Ok((ds, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gram_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Tensor::<f64>::random(&[3, 4, 6], &mut rng);
        let b = Tensor::<f64>::random(&[3, 4, 6], &mut rng);
        let g = head_gram(&a, &b, 2).unwrap();
        assert_eq!(g.shape(), &[2, 3, 3]);
        for hd in 0..2 {
            for r in 0..3 {
                for s in 0..3 {
                    let direct: f64 = (0..12)
                        .map(|p| a.data()[p * 6 + hd * 3 + r] * b.data()[p * 6 + hd * 3 + s])
                        .sum();
                    assert!((g.data()[hd * 9 + r * 3 + s] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_attention_averages_head_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::<f64>::random(&[2, 2, 4], &mut rng);
        let attn = Tensor::full(&[2, 2, 2], 0.5);
        let y = head_mix(&x, &attn, 2).unwrap();
        for (px, py) in x.data().chunks_exact(4).zip(y.data().chunks_exact(4)) {
            let m0 = (px[0] + px[1]) / 2.0;
            let m1 = (px[2] + px[3]) / 2.0;
            assert!((py[0] - m0).abs() < 1e-12 && (py[1] - m0).abs() < 1e-12);
            assert!((py[2] - m1).abs() < 1e-12 && (py[3] - m1).abs() < 1e-12);
        }
    }

    #[test]
    fn head_count_must_divide_channels() {
        let x = Tensor::<f32>::zeros(&[2, 2, 6]);
        assert!(head_gram(&x, &x, 4).is_err());
        assert!(head_mix(&x, &Tensor::zeros(&[4, 1, 1]), 4).is_err());
    }
}
