//! Moving average subtraction filter for axial tail artifacts.
//!
//! Each sample loses a fraction `gamma` of the mean energy of the `window`
//! samples above it: `out[k] = sqrt(max(a[k]² − γ·mean(a[k−w..k]²), 0))`.
//! Near the top of an A-line the mean runs over the available prefix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasfConfig {
    pub gamma: f64,
    pub window: usize,
    /// `true` when the depth index grows from anterior to posterior.
    pub depth_axis_ascending: bool,
}

impl Default for MasfConfig {
    fn default() -> Self {
        MasfConfig {
            gamma: 0.8,
            window: 11,
            depth_axis_ascending: true,
        }
    }
}

impl MasfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Filters one A-line ordered anterior to posterior.
pub fn masf_aline(a: &[f32], cfg: &MasfConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    if let Some(k) = a.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::Domain(format!("A-line sample {k} is {} (must be >= 0)", a[k])));
    }
    let mut out = vec![0.0f32; a.len()];
    filter_into(a.iter().map(|&v| v as f64), &mut out, cfg);
    Ok(out)
}

/// Double-precision variant of [`masf_aline`].
pub fn masf_aline_f64(a: &[f64], cfg: &MasfConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if let Some(k) = a.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::Domain(format!("A-line sample {k} is {} (must be >= 0)", a[k])));
    }
    let mut out = vec![0.0f64; a.len()];
    filter_into(a.iter().copied(), &mut out, cfg);
    Ok(out)
}

trait Sample: Copy {
    fn from_f64(v: f64) -> Self;
}

impl Sample for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Sample for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn filter_into<S: Sample>(a: impl Iterator<Item = f64>, out: &mut [S], cfg: &MasfConfig) {
    // Running sum over the window; squares are exact in f64, so adding and
    // removing the same term leaves no drift beyond round-off of the sum.
    let w = cfg.window;
    let mut sq = Vec::with_capacity(out.len());
    let mut sum = 0.0f64;
    for (k, v) in a.enumerate() {
        let e = v * v;
        out[k] = S::from_f64(if k == 0 {
            v
        } else {
            let n = k.min(w) as f64;
            (e - cfg.gamma * sum / n).max(0.0).sqrt()
        });
        sq.push(e);
        sum += e;
        if k + 1 > w {
            sum -= sq[k - w];
        }
    }
}

/// Applies [`masf_aline`] to every `(h, w)` A-line of the volume.
pub fn masf_volume(vol: &Volume, cfg: &MasfConfig) -> Result<Volume> {
    use rayon::prelude::*;

    cfg.validate()?;
    if let Some(i) = vol.data().iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::Domain(format!("voxel {i} is {} (must be >= 0)", vol.data()[i])));
    }
    let [d, h, w] = vol.dims();
    let plane = h * w;
    let src = vol.data();
    let lines: Vec<Vec<f32>> = (0..plane)
        .into_par_iter()
        .map(|p| {
            let mut out = vec![0.0f32; d];
            if cfg.depth_axis_ascending {
                filter_into((0..d).map(|k| src[k * plane + p] as f64), &mut out, cfg);
            } else {
                filter_into((0..d).rev().map(|k| src[k * plane + p] as f64), &mut out, cfg);
                out.reverse();
            }
            out
        })
        .collect();
    let mut data = vec![0.0f32; src.len()];
    for (p, line) in lines.iter().enumerate() {
        for (k, &v) in line.iter().enumerate() {
            data[k * plane + p] = v;
        }
    }
    Volume::new(vol.dims(), vol.voxel_size_mm(), data)
}
