//! Space-to-depth (`Down`) and depth-to-space (`Up`) rearrangement.
//!
//! Channel layout follows the common convention: output channel
//! `c * r² + i * r + j` of a `Down` holds input pixel `(r·y + i, r·x + j)`
//! of channel `c`.

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

pub fn pixel_reshuffle<T: Real>(x: &Tensor<T>, factor: usize, direction: Direction) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    let r = factor;
    if r == 0 {
        return Err(dim_err("reshuffle factor must be positive"));
    }
    let rr = r * r;
    match direction {
        Direction::Down => {
            if h % r != 0 || w % r != 0 {
                return Err(dim_err(format!(
                    "pixel-unshuffle needs H ({}) and W ({}) divisible by {}",
                    h, w, r
                )));
            }
            let (oh, ow, oc) = (h / r, w / r, c * rr);
            let mut out = Tensor::zeros(&[oh, ow, oc]);
            let src = x.data();
            let dst = out.data_mut();
            for y in 0..oh {
                for xx in 0..ow {
                    let o = &mut dst[(y * ow + xx) * oc..][..oc];
                    for i in 0..r {
                        for j in 0..r {
                            let s = &src[((y * r + i) * w + xx * r + j) * c..][..c];
                            for ch in 0..c {
                                o[ch * rr + i * r + j] = s[ch];
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        Direction::Up => {
            if c % rr != 0 {
                return Err(dim_err(format!(
                    "pixel-shuffle needs C ({}) divisible by {}",
                    c, rr
                )));
            }
            let (oh, ow, oc) = (h * r, w * r, c / rr);
            let mut out = Tensor::zeros(&[oh, ow, oc]);
            let src = x.data();
            let dst = out.data_mut();
            for y in 0..h {
                for xx in 0..w {
                    let s = &src[(y * w + xx) * c..][..c];
                    for i in 0..r {
                        for j in 0..r {
                            let o = &mut dst[((y * r + i) * ow + xx * r + j) * oc..][..oc];
                            for ch in 0..oc {
                                o[ch] = s[ch * rr + i * r + j];
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// The rearrangement is a permutation, so its VJP is the inverse rearrangement.
pub fn pixel_reshuffle_backward<T: Real>(
    grad_out: &Tensor<T>,
    factor: usize,
    direction: Direction,
) -> Result<Tensor<T>> {
    let inverse = match direction {
        Direction::Down => Direction::Up,
        Direction::Up => Direction::Down,
    };
    pixel_reshuffle(grad_out, factor, inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn down_preserves_multiset() {
        let x = Tensor::<f32>::from_vec(&[4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let y = pixel_reshuffle(&x, 2, Direction::Down).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
        let mut v: Vec<f32> = y.data().to_vec();
        v.sort_by(f32::total_cmp);
        assert_eq!(v, x.data());
    }

    #[test]
    fn up_inverts_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::random(&[8, 8, 4], &mut rng);
        let d = pixel_reshuffle(&x, 2, Direction::Down).unwrap();
        assert_eq!(pixel_reshuffle(&d, 2, Direction::Up).unwrap(), x);
    }

    #[test]
    fn down_layout_matches_index_formula() {
        let (h, w, c) = (4, 6, 3);
        let x = Tensor::<f64>::from_vec(&[h, w, c], (0..h * w * c).map(|v| v as f64).collect()).unwrap();
        let y = pixel_reshuffle(&x, 2, Direction::Down).unwrap();
        for yy in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    for i in 0..2 {
                        for j in 0..2 {
                            let expect = (((2 * yy + i) * w + 2 * xx + j) * c + ch) as f64;
                            let got = y.data()[(yy * (w / 2) + xx) * 4 * c + ch * 4 + i * 2 + j];
                            assert_eq!(got, expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(pixel_reshuffle(&Tensor::<f32>::zeros(&[3, 4, 1]), 2, Direction::Down).is_err());
        assert!(pixel_reshuffle(&Tensor::<f32>::zeros(&[2, 2, 3]), 2, Direction::Up).is_err());
    }
}
