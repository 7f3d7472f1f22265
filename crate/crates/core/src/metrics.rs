//! Image-quality and agreement metrics on `[0, 255]` data.
//!
//! Images are flat `f32` slices with an explicit row-major shape: `[H, W]` for
//! planes, `[D, H, W]` for volumes. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Dynamic range of stored intensities.
pub const DYNAMIC_RANGE: f64 = 255.0;

fn check_pair(a: &[f32], b: &[f32], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "metric inputs of {} and {} values do not match shape {shape:?}",
            a.len(),
            b.len()
        )));
    }
    if !(shape.len() == 2 || shape.len() == 3) {
        return Err(Error::UnsupportedDimension(format!(
            "metrics take 2-D or 3-D data, got shape {shape:?}"
        )));
    }
    Ok(())
}

/// Peak value used by [`psnr`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Peak {
    /// Maximum of the evaluated image.
    #[default]
    ImageMax,
    Fixed(f64),
}

/// `10·log₁₀(peak² / MSE)` in dB; identical inputs give `+∞`.
pub fn psnr(img: &[f32], reference: &[f32], peak: Peak) -> Result<f64> {
    if img.len() != reference.len() || img.is_empty() {
        return Err(Error::Dimension(format!(
            "psnr inputs have {} and {} values",
            img.len(),
            reference.len()
        )));
    }
    let mse = img
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / img.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = match peak {
        Peak::ImageMax => img.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64,
        Peak::Fixed(p) => p,
    };
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub l: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            l: DYNAMIC_RANGE,
        }
    }
}

impl SsimConfig {
    /// Unit-sum 1-D Gaussian taps.
    pub fn kernel(&self) -> Result<Vec<f64>> {
        if self.window % 2 == 0 || self.window == 0 || !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "ssim window must be odd and sigma positive, got {} / {}",
                self.window, self.sigma
            )));
        }
        let r = (self.window / 2) as f64;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = taps.iter().sum();
        Ok(taps.into_iter().map(|t| t / s).collect())
    }
}

/// Valid-region separable filtering of a 2-D or 3-D array.
fn filter_valid(x: &[f64], shape: &[usize], taps: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let k = taps.len();
    let mut data = x.to_vec();
    let mut dims = shape.to_vec();
    for axis in 0..dims.len() {
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let n = dims[axis];
        let m = n + 1 - k;
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for j in 0..m {
                let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
                for (t, &w) in taps.iter().enumerate() {
                    let src = &data[(o * n + j + t) * inner..(o * n + j + t + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        data = out;
        dims[axis] = m;
    }
    (data, dims)
}

/// Mean local SSIM over every fully covered window position.
pub fn ssim(img: &[f32], reference: &[f32], shape: &[usize], cfg: &SsimConfig) -> Result<f64> {
    check_pair(img, reference, shape)?;
    if let Some(&small) = shape.iter().find(|&&d| d < cfg.window) {
        return Err(Error::Dimension(format!(
            "ssim needs every axis ≥ {} samples, got {small} in {shape:?}",
            cfg.window
        )));
    }
    let taps = cfg.kernel()?;
    let x: Vec<f64> = img.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let (mx, _) = filter_valid(&x, shape, &taps);
    let (my, _) = filter_valid(&y, shape, &taps);
    let (mxx, _) = filter_valid(&xx, shape, &taps);
    let (myy, _) = filter_valid(&yy, shape, &taps);
    let (mxy, _) = filter_valid(&xy, shape, &taps);
    let c1 = (cfg.k1 * cfg.l).powi(2);
    let c2 = (cfg.k2 * cfg.l).powi(2);
    let mut sum = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(sum / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmsdConfig {
    /// Stabilising constant.
    pub t: f64,
}

impl Default for GmsdConfig {
    fn default() -> Self {
        GmsdConfig { t: 170.0 }
    }
}

/// Prewitt gradient magnitude on the valid interior. Each directional kernel
/// is a central difference along its axis and a 3-tap box along the others,
/// normalised by `3^(ndim−1)`.
pub fn prewitt_magnitude(x: &[f32], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    if shape.iter().any(|&d| d < 3) {
        return Err(Error::Dimension(format!("prewitt needs every axis ≥ 3, got {shape:?}")));
    }
    let nd = shape.len();
    let inner: Vec<usize> = shape.iter().map(|&d| d - 2).collect();
    let strides: Vec<usize> = (0..nd).map(|a| shape[a + 1..].iter().product()).collect();
    let norm = 3f64.powi(nd as i32 - 1);
    let count: usize = inner.iter().product();
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; nd];
    for _ in 0..count {
        let centre: usize = idx.iter().zip(&strides).map(|(&i, &s)| (i + 1) * s).sum();
        let mut mag2 = 0.0;
        for axis in 0..nd {
            let mut g = 0.0;
            // sum over the 3^(nd-1) offsets of the other axes
            let others: Vec<usize> = (0..nd).filter(|&a| a != axis).collect();
            for code in 0..3usize.pow(others.len() as u32) {
                let mut off = centre as isize;
                let mut c = code;
                for &a in &others {
                    off += (c % 3) as isize * strides[a] as isize - strides[a] as isize;
                    c /= 3;
                }
                let s = strides[axis] as isize;
                g += x[(off + s) as usize] as f64 - x[(off - s) as usize] as f64;
            }
            mag2 += (g / norm).powi(2);
        }
        out.push(mag2.sqrt());
        for a in (0..nd).rev() {
            idx[a] += 1;
            if idx[a] < inner[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok((out, inner))
}

/// Population standard deviation of the gradient-magnitude similarity map.
pub fn gmsd(img: &[f32], reference: &[f32], shape: &[usize], cfg: &GmsdConfig) -> Result<f64> {
    check_pair(img, reference, shape)?;
    if !(cfg.t > 0.0) {
        return Err(Error::Config(format!("gmsd constant must be positive, got {}", cfg.t)));
    }
    let (md, _) = prewitt_magnitude(img, shape)?;
    let (mr, _) = prewitt_magnitude(reference, shape)?;
    let gms: Vec<f64> = mr
        .iter()
        .zip(&md)
        .map(|(&r, &d)| (2.0 * r * d + cfg.t) / (r * r + d * d + cfg.t))
        .collect();
    let n = gms.len() as f64;
    let mean = gms.iter().sum::<f64>() / n;
    Ok((gms.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Mean over `vessel` divided by the population std over `noise`; `+∞` for a flat noise region.
pub fn snr_vascular(img: &[f32], vessel: &Mask, noise: &Mask) -> Result<f64> {
    if vessel.data().len() != img.len() || noise.data().len() != img.len() {
        return Err(Error::Dimension("snr masks must match the image".into()));
    }
    if vessel.data().iter().zip(noise.data()).any(|(&a, &b)| a && b) {
        return Err(Error::Domain("vessel and noise masks overlap".into()));
    }
    let pick = |m: &Mask| -> Vec<f64> {
        img.iter()
            .zip(m.data())
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v as f64)
            .collect()
    };
    let (v, n) = (pick(vessel), pick(noise));
    if v.is_empty() || n.is_empty() {
        return Err(Error::Domain("snr needs non-empty vessel and noise masks".into()));
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let nm = n.iter().sum::<f64>() / n.len() as f64;
    let sd = (n.iter().map(|x| (x - nm).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
    if sd == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(mean / sd)
}

/// `√mean((m − r)²) / mean(r)`.
pub fn nrmse(method: &[f64], reference: &[f64]) -> Result<f64> {
    if method.len() != reference.len() || method.is_empty() {
        return Err(Error::Dimension(format!(
            "nrmse needs equal non-empty lists, got {} and {}",
            method.len(),
            reference.len()
        )));
    }
    let n = method.len() as f64;
    let mean = reference.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Domain("nrmse reference mean is zero".into()));
    }
    let mse = method.iter().zip(reference).map(|(m, r)| (m - r).powi(2)).sum::<f64>() / n;
    Ok(mse.sqrt() / mean)
}

/// Metric report written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
    /// `true` when SSIM and GMSD were evaluated volumetrically.
    pub volumetric: bool,
}

impl MetricReport {
    /// Compares two volumes. Plane-wise (the default) averages PSNR, SSIM and
    /// GMSD over depth planes; `volumetric` computes PSNR over the whole
    /// volume and 3-D SSIM and GMSD.
    pub fn for_volumes(a: &Volume, b: &Volume, volumetric: bool) -> Result<Self> {
        a.same_dims(b)?;
        let [d, h, w] = a.dims();
        let (ssim_cfg, gmsd_cfg) = (SsimConfig::default(), GmsdConfig::default());
        if volumetric {
            let shape = [d, h, w];
            return Ok(MetricReport {
                psnr: psnr(a.data(), b.data(), Peak::ImageMax)?,
                ssim: ssim(a.data(), b.data(), &shape, &ssim_cfg)?,
                gmsd: gmsd(a.data(), b.data(), &shape, &gmsd_cfg)?,
                volumetric,
            });
        }
        let (mut p, mut s, mut g) = (0.0, 0.0, 0.0);
        for k in 0..d {
            let (x, y) = (a.plane(k), b.plane(k));
            p += psnr(x, y, Peak::ImageMax)?;
            s += ssim(x, y, &[h, w], &ssim_cfg)?;
            g += gmsd(x, y, &[h, w], &gmsd_cfg)?;
        }
        let n = d as f64;
        Ok(MetricReport {
            psnr: p / n,
            ssim: s / n,
            gmsd: g / n,
            volumetric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_constant_offset_is_20_db() {
        let reference = vec![229.5f32; 64];
        let img = vec![255.0f32; 64];
        let p = psnr(&img, &reference, Peak::ImageMax).unwrap();
        assert!((p - 20.0).abs() < 1e-12, "{p}");
        assert_eq!(psnr(&img, &img, Peak::ImageMax).unwrap(), f64::INFINITY);
        let fixed = psnr(&[10.0], &[0.0], Peak::Fixed(255.0)).unwrap();
        assert!((fixed - 20.0 * 25.5f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_identical_and_constant_images() {
        let a: Vec<f32> = (0..16 * 16).map(|i| (i * 37 % 251) as f32).collect();
        let cfg = SsimConfig::default();
        assert_eq!(ssim(&a, &a, &[16, 16], &cfg).unwrap(), 1.0);
        let z = vec![0.0f32; 12 * 12 * 12];
        assert_eq!(ssim(&z, &z, &[12, 12, 12], &cfg).unwrap(), 1.0);
        assert!(ssim(&a[..100], &a[..100], &[10, 10], &cfg).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let a: Vec<f32> = (0..20 * 20).map(|i| ((i * 91) % 256) as f32).collect();
        let b: Vec<f32> = (0..20 * 20).map(|i| ((i * 53 + 7) % 256) as f32).collect();
        let cfg = SsimConfig::default();
        let ab = ssim(&a, &b, &[20, 20], &cfg).unwrap();
        let ba = ssim(&b, &a, &[20, 20], &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
    }

    #[test]
    fn gmsd_identity_and_perturbation() {
        let a: Vec<f32> = (0..10 * 12).map(|i| ((i * 29) % 200) as f32).collect();
        let cfg = GmsdConfig::default();
        assert_eq!(gmsd(&a, &a, &[10, 12], &cfg).unwrap(), 0.0);
        let b: Vec<f32> = a.iter().map(|v| v * (1.0 + 1e-5)).collect();
        assert!(gmsd(&b, &a, &[10, 12], &cfg).unwrap() <= 1e-3);
        let v: Vec<f32> = (0..5 * 6 * 7).map(|i| ((i * 13) % 97) as f32).collect();
        assert_eq!(gmsd(&v, &v, &[5, 6, 7], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn prewitt_of_a_ramp() {
        // x-ramp with slope 2: central difference 4 on every row of the box
        let x: Vec<f32> = (0..5 * 5).map(|i| 2.0 * (i % 5) as f32).collect();
        let (m, dims) = prewitt_magnitude(&x, &[5, 5]).unwrap();
        assert_eq!(dims, vec![3, 3]);
        assert!(m.iter().all(|&g| (g - 4.0).abs() < 1e-12));
    }

    #[test]
    fn snr_cases() {
        let dims = [1, 1, 4];
        let vessel = Mask::new(dims, vec![true, true, false, false]).unwrap();
        let noise = Mask::new(dims, vec![false, false, true, true]).unwrap();
        let img = [100.0, 100.0, 10.0, 30.0];
        assert!((snr_vascular(&img, &vessel, &noise).unwrap() - 10.0).abs() < 1e-12);
        let flat = [100.0, 100.0, 5.0, 5.0];
        assert_eq!(snr_vascular(&flat, &vessel, &noise).unwrap(), f64::INFINITY);
        assert!(matches!(
            snr_vascular(&img, &Mask::empty(dims), &noise),
            Err(Error::Domain(_))
        ));
        assert!(snr_vascular(&img, &vessel, &vessel).is_err());
    }

    #[test]
    fn nrmse_cases() {
        assert_eq!(nrmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let r = [4.0, 4.0, 4.0];
        let m: Vec<f64> = r.iter().map(|v| v * 1.1).collect();
        assert!((nrmse(&m, &r).unwrap() - 0.1).abs() < 1e-12);
        let (m2, r2): (Vec<f64>, Vec<f64>) = (m.iter().map(|v| v * 3.0).collect(), r.iter().map(|v| v * 3.0).collect());
        assert!((nrmse(&m2, &r2).unwrap() - nrmse(&m, &r).unwrap()).abs() < 1e-12);
        assert!(nrmse(&[1.0], &[0.0]).is_err());
        assert!(nrmse(&[], &[]).is_err());
    }
}
