//! Grouped 2-D convolution with zero ("same") padding on `[H, W, C]` maps.
//! Kernels are `[k, k, Cin/groups, Cout]`.

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }
}

fn geometry<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Result<Geometry> {
    let (h, w, cin) = x.hwc()?;
    let (k, cin_g, cout) = match kernel.shape() {
        &[k1, k2, cin_g, cout] if k1 == k2 => (k1, cin_g, cout),
        s => return Err(dim_err(format!("kernel must be [k, k, Cin/g, Cout], got {:?}", s))),
    };
    if k % 2 == 0 {
        return Err(dim_err(format!("kernel size {} must be odd", k)));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(dim_err(format!(
            "channels (in {}, out {}) not divisible by groups {}",
            cin, cout, groups
        )));
    }
    if cin / groups != cin_g {
        return Err(dim_err(format!(
            "kernel input axis is {} but Cin/groups = {}/{}",
            cin_g, cin, groups
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(dim_err(format!(
                "bias shape {:?} does not match Cout {}",
                b.shape(),
                cout
            )));
        }
    }
    Ok(Geometry {
        h,
        w,
        cin,
        cout,
        k,
        groups,
        cin_g,
        cout_g: cout / groups,
    })
}

#[inline]
fn shifted(pos: usize, tap: usize, r: usize, len: usize) -> Option<usize> {
    let p = pos + tap;
    if p < r || p - r >= len {
        None
    } else {
        Some(p - r)
    }
}

/// `c ← [c +] op(a)·op(b)` with `op(a)` of shape `m × k` and `op(b)` of shape `k × n`;
/// `ta`/`tb` read the stored operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the assertion above bounds every index addressed by these strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
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
        )
    }
}

/// Valid output columns `[lo, hi)` for horizontal tap `dx` and the matching input offset.
#[inline]
fn col_span(w: usize, dx: usize, r: usize) -> (usize, usize) {
    let lo = r.saturating_sub(dx);
    let hi = (w + r).saturating_sub(dx).min(w);
    (lo, hi.max(lo))
}

/// Zero-pads `[H, W, C]` by `r` on every side into `[H + 2r + 1, W + 2r, C]`; the
/// spare bottom row keeps shifted reads of the last row in bounds.
fn pad<T: Real>(x: &[T], h: usize, w: usize, c: usize, r: usize) -> Vec<T> {
    let wp = w + 2 * r;
    let mut out = vec![T::zero(); (h + 2 * r + 1) * wp * c];
    for y in 0..h {
        out[((y + r) * wp + r) * c..][..w * c].copy_from_slice(&x[y * w * c..][..w * c]);
    }
    out
}

/// Dense (single-group) convolution as one GEMM per tap on the padded grid.
/// Output rows are computed at padded width `W + 2r`; the extra columns are junk.
fn dense_forward<T: Real>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let r = g.k / 2;
    let wp = g.w + 2 * r;
    let xp = pad(x, g.h, g.w, g.cin, r);
    let m = g.h * wp;
    let mut op = vec![T::zero(); m * g.cout];
    for dy in 0..g.k {
        for dx in 0..g.k {
            let off = (dy * wp + dx) * g.cin;
            let w_tap = &w[(dy * g.k + dx) * g.cin * g.cout..][..g.cin * g.cout];
            matmul(m, g.cin, g.cout, &xp[off..], false, w_tap, false, &mut op, true);
        }
    }
    for y in 0..g.h {
        for (o, &v) in out[y * g.w * g.cout..][..g.w * g.cout]
            .iter_mut()
            .zip(&op[y * wp * g.cout..][..g.w * g.cout])
        {
            *o = *o + v;
        }
    }
}

fn dense_backward<T: Real>(x: &[T], w: &[T], grad: &[T], g: &Geometry, dx_out: &mut [T], dw_out: &mut [T]) {
    let r = g.k / 2;
    let wp = g.w + 2 * r;
    let xp = pad(x, g.h, g.w, g.cin, r);
    let m = g.h * wp;
    // gradient on the padded-width output grid, zero in the junk columns
    let mut gp = vec![T::zero(); m * g.cout];
    for y in 0..g.h {
        gp[y * wp * g.cout..][..g.w * g.cout].copy_from_slice(&grad[y * g.w * g.cout..][..g.w * g.cout]);
    }
    let mut dxp = vec![T::zero(); xp.len()];
    for dy in 0..g.k {
        for dx in 0..g.k {
            let off = (dy * wp + dx) * g.cin;
            let tap = (dy * g.k + dx) * g.cin * g.cout;
            let w_tap = &w[tap..tap + g.cin * g.cout];
            matmul(g.cin, m, g.cout, &xp[off..], true, &gp, false, &mut dw_out[tap..], false);
            matmul(m, g.cout, g.cin, &gp, false, w_tap, true, &mut dxp[off..], true);
        }
    }
    for y in 0..g.h {
        dx_out[y * g.w * g.cin..][..g.w * g.cin].copy_from_slice(&dxp[((y + r) * wp + r) * g.cin..][..g.w * g.cin]);
    }
}

/// Weight row of one tap repeated across a full image row.
fn tile<T: Real>(w_tap: &[T], width: usize) -> Vec<T> {
    let mut t = Vec::with_capacity(width * w_tap.len());
    for _ in 0..width {
        t.extend_from_slice(w_tap);
    }
    t
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let (c, r) = (g.cin, g.k / 2);
    for dy in 0..g.k {
        for dx in 0..g.k {
            let tap = dy * g.k + dx;
            let wt = tile(&w[tap * c..][..c], g.w);
            let (lo, hi) = col_span(g.w, dx, r);
            let n = (hi - lo) * c;
            for y in 0..g.h {
                let Some(iy) = shifted(y, dy, r, g.h) else { continue };
                let o = &mut out[(y * g.w + lo) * c..][..n];
                let i = &x[(iy * g.w + lo + dx - r) * c..][..n];
                for ((o, &xv), &wv) in o.iter_mut().zip(i).zip(&wt[..n]) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(x: &[T], w: &[T], grad: &[T], g: &Geometry, dx_out: &mut [T], dw_out: &mut [T]) {
    let (c, r) = (g.cin, g.k / 2);
    let mut acc = vec![T::zero(); g.w * c];
    for dy in 0..g.k {
        for dx in 0..g.k {
            let tap = dy * g.k + dx;
            let wt = tile(&w[tap * c..][..c], g.w);
            let (lo, hi) = col_span(g.w, dx, r);
            let n = (hi - lo) * c;
            acc.iter_mut().for_each(|a| *a = T::zero());
            for y in 0..g.h {
                let Some(iy) = shifted(y, dy, r, g.h) else { continue };
                let gs = &grad[(y * g.w + lo) * c..][..n];
                let off = (iy * g.w + lo + dx - r) * c;
                let xs = &x[off..off + n];
                for ((d, &gv), &wv) in dx_out[off..off + n].iter_mut().zip(gs).zip(&wt[..n]) {
                    *d = *d + gv * wv;
                }
                for ((a, &gv), &xv) in acc[..n].iter_mut().zip(gs).zip(xs) {
                    *a = *a + gv * xv;
                }
            }
            let dw_tap = &mut dw_out[tap * c..][..c];
            for px in acc[..n].chunks_exact(c) {
                for (d, &a) in dw_tap.iter_mut().zip(px) {
                    *d = *d + a;
                }
            }
        }
    }
}

fn grouped_forward<T: Real>(xd: &[T], wd: &[T], g: &Geometry, od: &mut [T]) {
    let r = g.k / 2;
    let tap_len = g.cin_g * g.cout;
    for y in 0..g.h {
        for x0 in 0..g.w {
            let o_px = &mut od[(y * g.w + x0) * g.cout..][..g.cout];
            for dy in 0..g.k {
                let Some(iy) = shifted(y, dy, r, g.h) else { continue };
                for dx in 0..g.k {
                    let Some(ix) = shifted(x0, dx, r, g.w) else { continue };
                    let x_px = &xd[(iy * g.w + ix) * g.cin..][..g.cin];
                    let w_tap = &wd[(dy * g.k + dx) * tap_len..][..tap_len];
                    for grp in 0..g.groups {
                        let o_grp = &mut o_px[grp * g.cout_g..][..g.cout_g];
                        for ci in 0..g.cin_g {
                            let xv = x_px[grp * g.cin_g + ci];
                            let w_row = &w_tap[ci * g.cout + grp * g.cout_g..][..g.cout_g];
                            for (o, &wv) in o_grp.iter_mut().zip(w_row) {
                                *o = *o + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grouped_backward<T: Real>(xd: &[T], wd: &[T], gd: &[T], g: &Geometry, dxd: &mut [T], dwd: &mut [T]) {
    let r = g.k / 2;
    let tap_len = g.cin_g * g.cout;
    for y in 0..g.h {
        for x0 in 0..g.w {
            let g_px = &gd[(y * g.w + x0) * g.cout..][..g.cout];
            for dy in 0..g.k {
                let Some(iy) = shifted(y, dy, r, g.h) else { continue };
                for dxk in 0..g.k {
                    let Some(ix) = shifted(x0, dxk, r, g.w) else { continue };
                    let base = (iy * g.w + ix) * g.cin;
                    let tap = (dy * g.k + dxk) * tap_len;
                    for grp in 0..g.groups {
                        let g_grp = &g_px[grp * g.cout_g..][..g.cout_g];
                        for ci in 0..g.cin_g {
                            let row = tap + ci * g.cout + grp * g.cout_g;
                            let w_row = &wd[row..row + g.cout_g];
                            let mut acc = T::zero();
                            for (&gv, &wv) in g_grp.iter().zip(w_row) {
                                acc = acc + gv * wv;
                            }
                            let xi = base + grp * g.cin_g + ci;
                            dxd[xi] = dxd[xi] + acc;
                            let xv = xd[xi];
                            for (dwv, &gv) in dwd[row..row + g.cout_g].iter_mut().zip(g_grp) {
                                *dwv = *dwv + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x, kernel, bias, groups)?;
    let mut out = Tensor::zeros(&[g.h, g.w, g.cout]);
    let od = out.data_mut();
    if let Some(b) = bias {
        for px in od.chunks_exact_mut(g.cout) {
            px.copy_from_slice(b.data());
        }
    }
    let hw = g.h * g.w;
    if g.depthwise() {
        depthwise_forward(x.data(), kernel.data(), &g, od);
    } else if g.groups == 1 && g.k == 1 {
        matmul(hw, g.cin, g.cout, x.data(), false, kernel.data(), false, od, true);
    } else if g.groups == 1 {
        dense_forward(x.data(), kernel.data(), &g, od);
    } else {
        grouped_forward(x.data(), kernel.data(), &g, od);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and (optionally) bias.
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    with_bias: bool,
    groups: usize,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(x, kernel, None, groups)?;
    if grad_out.shape() != [g.h, g.w, g.cout] {
        return Err(dim_err(format!(
            "output gradient {:?} does not match [{}, {}, {}]",
            grad_out.shape(),
            g.h,
            g.w,
            g.cout
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(kernel.shape());
    let gd = grad_out.data();
    let hw = g.h * g.w;
    if g.depthwise() {
        depthwise_backward(x.data(), kernel.data(), gd, &g, dx.data_mut(), dw.data_mut());
    } else if g.groups == 1 && g.k == 1 {
        matmul(g.cin, hw, g.cout, x.data(), true, gd, false, dw.data_mut(), false);
        matmul(hw, g.cout, g.cin, gd, false, kernel.data(), true, dx.data_mut(), false);
    } else if g.groups == 1 {
        dense_backward(x.data(), kernel.data(), gd, &g, dx.data_mut(), dw.data_mut());
    } else {
        grouped_backward(x.data(), kernel.data(), gd, &g, dx.data_mut(), dw.data_mut());
    }
    let bias = with_bias.then(|| {
        let mut db = Tensor::zeros(&[g.cout]);
        let dbd = db.data_mut();
        for px in gd.chunks_exact(g.cout) {
            for (b, &v) in dbd.iter_mut().zip(px) {
                *b = *b + v;
            }
        }
        db
    });
    Ok(Conv2dGrads {
        input: dx,
        kernel: dw,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution written independently of the kernel above.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, groups: usize) -> Vec<f64> {
        let (h, wd, cin) = x.hwc().unwrap();
        let s = w.shape();
        let (k, cin_g, cout) = (s[0], s[2], s[3]);
        let cout_g = cout / groups;
        let r = k as isize / 2;
        let mut out = vec![0.0; h * wd * cout];
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                for o in 0..cout {
                    let grp = o / cout_g;
                    let mut acc = b.map(|b| b.data()[o]).unwrap_or(0.0);
                    for ky in 0..k as isize {
                        for kx in 0..k as isize {
                            let iy = y + ky - r;
                            let ix = xx + kx - r;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin_g {
                                let xv = x.data()[((iy as usize) * wd + ix as usize) * cin + grp * cin_g + ci];
                                let wv = w.data()[((ky as usize * k + kx as usize) * cin_g + ci) * cout + o];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((y as usize) * wd + xx as usize) * cout + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::zeros(&[5, 6, 3]);
        let w = Tensor::random(&[3, 3, 3, 4], &mut rng);
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::random(&[4, 4, 3], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random(&[8, 8, 3], &mut rng);
        let w = Tensor::random(&[3, 3, 3, 5], &mut rng);
        let b = Tensor::random(&[5], &mut rng);
        let y = conv2d(&x, &w, Some(&b), 1).unwrap();
        let expect = reference(&x, &w, Some(&b), 1);
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6, "{} vs {}", a, e);
        }
        // f32 path against the f64 reference
        let y32 = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), Some(&b.cast::<f32>()), 1).unwrap();
        for (a, e) in y32.data().iter().zip(&expect) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn grouped_and_depthwise_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::random(&[6, 7, 4], &mut rng);
        for (groups, cout) in [(2, 6), (4, 4)] {
            let w = Tensor::random(&[3, 3, 4 / groups, cout], &mut rng);
            let y = conv2d(&x, &w, None, groups).unwrap();
            let expect = reference(&x, &w, None, groups);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::random(&[6, 6, 3], &mut rng);
        let w = Tensor::random(&[3, 3, 1, 3], &mut rng);
        let base = conv2d(&x, &w, None, 3).unwrap();
        let mut x2 = x.clone();
        for px in x2.data_mut().chunks_exact_mut(3) {
            px[1] += 10.0;
        }
        let moved = conv2d(&x2, &w, None, 3).unwrap();
        for (a, b) in base.data().chunks_exact(3).zip(moved.data().chunks_exact(3)) {
            assert_eq!(a[0], b[0]);
            assert_eq!(a[2], b[2]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[4, 4, 3]);
        assert!(conv2d(&x, &Tensor::zeros(&[2, 2, 3, 3]), None, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 2, 3]), None, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 1, 4]), None, 2).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 3, 4]), Some(&Tensor::zeros(&[3])), 1).is_err());
    }
}
