//! Synthetic vascular phantoms with known ground truth.
//!
//! A truth volume holds branching tubes grown by curvature-limited random
//! walks. Simulated single scans add per-repeat vessel dropout, clipped
//! Gaussian noise and axial tails below every vessel; averaging the repeats
//! gives the merged reference.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{Dataset, PlanePair};
use crate::vasc3d::{Segment, SegmentSet, Voxel};
use crate::volume::{Mask, Volume};

pub const MIN_VESSEL_INTENSITY: f32 = 80.0;
pub const MAX_VESSEL_INTENSITY: f32 = 255.0;
/// Free voxels kept between the surfaces of unrelated tubes.
const CLEARANCE: f64 = 3.0;
/// Steps during which a child may touch its parent and sibling.
const JUNCTION_STEPS: usize = 10;
const MAX_AXIAL: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub n_trees: usize,
    /// Tube radius bounds in voxels.
    pub radius_range: [f64; 2],
    pub n_repeats: usize,
    /// Probability that a vessel voxel reads zero in one repeat.
    pub decorrelation_dropout: f64,
    pub noise_sigma: f64,
    /// Tail amplitude as a fraction of the vessel value right beneath it.
    pub tail_gain: f64,
    /// Exponential decay of the tail per voxel of depth.
    pub tail_decay: f64,
    /// Lateral radius of the avascular cylinder along D, in voxels.
    pub faz_radius: f64,
    /// Centerline steps per segment.
    pub segment_length: [usize; 2],
    /// Bifurcation generations below each root segment.
    pub generations: usize,
    pub branch_probability: f64,
    /// Largest heading change per centerline step, in radians.
    pub max_turn: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 64],
            voxel_size_mm: [0.01, 0.0075, 0.0075],
            n_trees: 12,
            radius_range: [1.0, 2.0],
            n_repeats: 8,
            decorrelation_dropout: 0.2,
            noise_sigma: 12.0,
            tail_gain: 0.4,
            tail_decay: 0.35,
            faz_radius: 6.0,
            segment_length: [12, 26],
            generations: 3,
            branch_probability: 0.8,
            max_turn: 0.15,
            seed: 42,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.dims;
        if d < 16 || h < 16 || w < 16 {
            return Err(Error::Config(format!("phantom dims must each be >= 16, got {:?}", self.dims)));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("phantom H and W must be divisible by 8, got {h}x{w}")));
        }
        if self.voxel_size_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("voxel sizes must be positive".into()));
        }
        let [r0, r1] = self.radius_range;
        if !(r0 >= 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::Config(format!("bad radius_range {:?}", self.radius_range)));
        }
        if self.n_repeats < 2 {
            return Err(Error::Config("n_repeats must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.decorrelation_dropout) {
            return Err(Error::Config("decorrelation_dropout must lie in [0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.tail_gain) {
            return Err(Error::Config(format!("tail_gain must lie in [0, 1), got {}", self.tail_gain)));
        }
        if !(self.tail_decay > 0.0 && self.tail_decay.is_finite()) {
            return Err(Error::Config("tail_decay must be positive".into()));
        }
        if self.faz_radius < 0.0 {
            return Err(Error::Config("faz_radius must be >= 0".into()));
        }
        let [l0, l1] = self.segment_length;
        if l0 <= crate::vasc3d::MAX_FRAGMENT_VOXELS + 4 || l0 > l1 {
            return Err(Error::Config(format!(
                "segment_length must be ordered with minimum > {}, got {:?}",
                crate::vasc3d::MAX_FRAGMENT_VOXELS + 4,
                self.segment_length
            )));
        }
        if !(0.0..=1.0).contains(&self.branch_probability) || !(self.max_turn >= 0.0) {
            return Err(Error::Config("branch_probability must lie in [0, 1] and max_turn be >= 0".into()));
        }
        Ok(())
    }

    /// Configuration of volume `index` in a dataset: same geometry, own seed.
    pub fn for_volume(&self, index: usize) -> PhantomConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        PhantomConfig {
            seed: rng.next_u64(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    /// Vessel intensities in `[80, 255]`, exactly 0 elsewhere.
    pub clean_volume: Volume,
    pub vessel_mask: Mask,
    /// Background voxels carrying a tail of at least one intensity unit.
    pub artifact_mask: Mask,
    /// Avascular cylinder, used as the noise region for SNR.
    pub noise_mask: Mask,
    /// Tail amplitude per voxel (0 inside vessels).
    pub tail: Vec<f32>,
    /// Centerline segments as constructed.
    pub segment_ground_truth: SegmentSet,
    /// Intensity of each tree, in growth order.
    pub tree_intensities: Vec<f32>,
    pub seed: u64,
}

struct Grown {
    tree: usize,
    points: Vec<[f64; 3]>,
    radius: f64,
    children: Vec<usize>,
}

struct Grower<'a> {
    cfg: &'a PhantomConfig,
    rng: ChaCha8Rng,
    /// Segment id + 1 of the tube covering each voxel, 0 when free.
    owner: Vec<u32>,
    segments: Vec<Grown>,
}

impl Grower<'_> {
    fn idx(&self, v: [usize; 3]) -> usize {
        let [_, h, w] = self.cfg.dims;
        (v[0] * h + v[1]) * w + v[2]
    }

    fn inside_margin(&self, p: [f64; 3], radius: f64) -> bool {
        let m = radius + 2.0;
        let ok = (0..3).all(|k| p[k] >= m && p[k] <= self.cfg.dims[k] as f64 - 1.0 - m);
        let [_, h, w] = self.cfg.dims;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let lateral = ((p[1] - cy).powi(2) + (p[2] - cx).powi(2)).sqrt();
        ok && lateral >= self.cfg.faz_radius + radius + 2.0
    }

    fn clear(&self, p: [f64; 3], radius: f64, allowed: &[usize]) -> bool {
        let reach = radius + CLEARANCE;
        let r = reach.ceil() as isize;
        let c = p.map(|v| v.round() as isize);
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let q = [c[0] + dz, c[1] + dy, c[2] + dx];
                    if (0..3).any(|k| q[k] < 0 || q[k] >= self.cfg.dims[k] as isize) {
                        continue;
                    }
                    let d2: f64 = (0..3).map(|k| (q[k] as f64 - p[k]).powi(2)).sum();
                    if d2 > reach * reach {
                        continue;
                    }
                    let o = self.owner[self.idx(q.map(|v| v as usize))];
                    if o != 0 && !allowed.contains(&(o as usize - 1)) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn turn(&mut self, d: [f64; 3]) -> [f64; 3] {
        let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut self.rng));
        let along: f64 = (0..3).map(|k| g[k] * d[k]).sum();
        let mut u: [f64; 3] = std::array::from_fn(|k| g[k] - along * d[k]);
        let n = norm(u);
        if n > 0.0 {
            u = u.map(|v| v / n);
        }
        let t = self.rng.random_range(0.0..=self.cfg.max_turn).tan();
        flatten(normalize(std::array::from_fn(|k| d[k] + t * u[k])))
    }

    /// Walks from `start`; `None` when fewer than the minimum number of steps fit.
    fn walk(&mut self, start: [f64; 3], dir: [f64; 3], radius: f64, near: &[usize]) -> Option<Vec<[f64; 3]>> {
        let [l0, l1] = self.cfg.segment_length;
        let target = self.rng.random_range(l0..=l1);
        let mut pts = vec![start];
        let (mut p, mut d) = (start, dir);
        for step in 0..target {
            d = self.turn(d);
            let q: [f64; 3] = std::array::from_fn(|k| p[k] + d[k]);
            let allowed: &[usize] = if step < JUNCTION_STEPS { near } else { &[] };
            if !self.inside_margin(q, radius) || !self.clear(q, radius, allowed) {
                break;
            }
            pts.push(q);
            p = q;
        }
        (pts.len() > l0).then_some(pts)
    }

    /// Marks the tube of segment `id`, or with `erase` releases the voxels it owns.
    fn stamp(&mut self, pts: &[[f64; 3]], radius: f64, id: usize, erase: bool) {
        let value = id as u32 + 1;
        let r = radius.ceil() as isize;
        for w in pts.windows(2) {
            for s in 0..=2 {
                let t = s as f64 / 2.0;
                let p: [f64; 3] = std::array::from_fn(|k| w[0][k] + t * (w[1][k] - w[0][k]));
                let c = p.map(|v| v.round() as isize);
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let q = [c[0] + dz, c[1] + dy, c[2] + dx];
                            let d2: f64 = (0..3).map(|k| (q[k] as f64 - p[k]).powi(2)).sum();
                            if d2 <= radius * radius {
                                let i = self.idx(q.map(|v| v as usize));
                                match (erase, self.owner[i]) {
                                    (false, 0) => self.owner[i] = value,
                                    (true, o) if o == value => self.owner[i] = 0,
                                    _ => {}
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn radius(&mut self) -> f64 {
        let [r0, r1] = self.cfg.radius_range;
        if r0 == r1 { r0 } else { self.rng.random_range(r0..=r1) }
    }

    fn grow_tree(&mut self, tree: usize) -> bool {
        let [d, h, w] = self.cfg.dims;
        for _ in 0..50 {
            let radius = self.radius();
            let start = [
                self.rng.random_range(0.0..d as f64),
                self.rng.random_range(0.0..h as f64),
                self.rng.random_range(0.0..w as f64),
            ];
            if !self.inside_margin(start, radius) || !self.clear(start, radius, &[]) {
                continue;
            }
            let az = self.rng.random_range(0.0..std::f64::consts::TAU);
            let el = self.rng.random_range(-MAX_AXIAL..MAX_AXIAL);
            let dir = normalize([el, az.sin(), az.cos()]);
            let Some(pts) = self.walk(start, dir, radius, &[]) else { continue };
            let root = self.segments.len();
            self.stamp(&pts, radius, root, false);
            self.segments.push(Grown { tree, points: pts, radius, children: vec![] });
            let mut frontier = vec![(root, 0usize)];
            while let Some((parent, gen)) = frontier.pop() {
                if gen >= self.cfg.generations || !self.rng.random_bool(self.cfg.branch_probability) {
                    continue;
                }
                if let Some(kids) = self.branch(parent) {
                    frontier.extend(kids.iter().map(|&k| (k, gen + 1)));
                }
            }
            return true;
        }
        false
    }

    fn branch(&mut self, parent: usize) -> Option<[usize; 2]> {
        let (tree, end, heading, pr) = {
            let p = &self.segments[parent];
            let n = p.points.len();
            let a = p.points[n - 2];
            let b = p.points[n - 1];
            (p.tree, b, normalize(std::array::from_fn(|k| b[k] - a[k])), p.radius)
        };
        let spread = self.rng.random_range(0.5..0.85);
        let tilt = self.rng.random_range(-0.15..0.15);
        let mut ids = [0usize; 2];
        let mut placed: Vec<(usize, Vec<[f64; 3]>, f64)> = Vec::new();
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let radius = self.radius().min(pr);
            let mut dir = rotate_lateral(heading, sign * spread);
            dir[0] += tilt * sign;
            let dir = flatten(normalize(dir));
            let id = self.segments.len() + k;
            let mut near = vec![parent];
            near.extend(placed.iter().map(|p| p.0));
            match self.walk(end, dir, radius, &near) {
                Some(pts) => {
                    self.stamp(&pts, radius, id, false);
                    placed.push((id, pts, radius));
                    ids[k] = id;
                }
                None => {
                    for (id, pts, r) in &placed {
                        self.stamp(pts, *r, *id, true);
                    }
                    return None;
                }
            }
        }
        for (_, pts, radius) in placed {
            self.segments.push(Grown { tree, points: pts, radius, children: vec![] });
        }
        self.segments[parent].children = ids.to_vec();
        Some(ids)
    }
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    v.map(|x| x / n)
}

/// Caps the axial (depth) component so vessels run mostly en face.
fn flatten(mut d: [f64; 3]) -> [f64; 3] {
    if d[0].abs() > MAX_AXIAL {
        let lat = (d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
        let s = (1.0 - MAX_AXIAL * MAX_AXIAL).sqrt() / lat;
        d = [MAX_AXIAL * d[0].signum(), d[1] * s, d[2] * s];
    }
    d
}

fn rotate_lateral(d: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [d[0], c * d[1] - s * d[2], s * d[1] + c * d[2]]
}

/// Rounded centerline with redundant corner voxels dropped, so that only
/// consecutive path voxels are 26-neighbours.
fn rasterize(points: &[[f64; 3]]) -> Vec<Voxel> {
    let mut path: Vec<Voxel> = Vec::new();
    for p in points {
        let v = p.map(|x| x.round() as usize);
        if path.last() != Some(&v) {
            path.push(v);
        }
    }
    let adjacent = |a: Voxel, b: Voxel| (0..3).all(|k| a[k].abs_diff(b[k]) <= 1);
    let mut i = 1;
    while i + 1 < path.len() {
        if adjacent(path[i - 1], path[i + 1]) {
            path.remove(i);
            i = i.saturating_sub(1).max(1);
        } else {
            i += 1;
        }
    }
    path
}

/// Grows the vessel trees and renders the truth volume.
pub fn generate_truth_volume(cfg: &PhantomConfig) -> Result<PhantomTruth> {
    cfg.validate()?;
    let dims = cfg.dims;
    let n = dims.iter().product();
    let mut g = Grower {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        owner: vec![0; n],
        segments: Vec::new(),
    };
    let mut intensities = Vec::new();
    for t in 0..cfg.n_trees {
        let value = g.rng.random_range(MIN_VESSEL_INTENSITY..=MAX_VESSEL_INTENSITY).round();
        if g.grow_tree(intensities.len()) {
            intensities.push(value);
        } else {
            log::warn!("tree {t} found no room; skipped");
        }
    }

    let mut clean = Volume::zeros(dims, cfg.voxel_size_mm)?;
    let mut vessel = Mask::empty(dims);
    for (i, &o) in g.owner.iter().enumerate() {
        if o != 0 {
            clean.data_mut()[i] = intensities[g.segments[o as usize - 1].tree];
            vessel.data_mut()[i] = true;
        }
    }

    let mut segments = Vec::new();
    let mut bifurcations = Vec::new();
    let mut ends = Vec::new();
    for (i, s) in g.segments.iter().enumerate() {
        let path = rasterize(&s.points);
        let is_root = !g.segments.iter().any(|p| p.children.contains(&i));
        if is_root {
            ends.push(path[0]);
        }
        if s.children.is_empty() {
            ends.push(*path.last().expect("segment has points"));
        } else {
            bifurcations.push(*path.last().expect("segment has points"));
        }
        segments.push(Segment {
            length_voxels: path.len(),
            path,
            flow_index: intensities[s.tree] as f64,
            cyclic: false,
        });
    }

    let [d, h, w] = dims;
    let mut noise = Mask::empty(dims);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= cfg.faz_radius {
                    noise.set(z, y, x, true);
                }
            }
        }
    }

    let tail = tail_field(&clean, &vessel, cfg);
    let artifact = Mask::new(dims, tail.iter().map(|&t| t > 0.0).collect())?;
    Ok(PhantomTruth {
        clean_volume: clean.clone(),
        vessel_mask: vessel,
        artifact_mask: artifact,
        noise_mask: noise,
        tail,
        segment_ground_truth: SegmentSet {
            segments,
            bifurcation_points: bifurcations,
            end_points: ends,
            analyzed_volume_mm3: clean.extent_mm3(),
        },
        tree_intensities: intensities,
        seed: cfg.seed,
    })
}

/// Tail amplitude below the vessels, combined by maximum over sources:
/// a vessel voxel of value `v` at depth `s` contributes
/// `gain · v · exp(−decay · (k − s − 1))` at every deeper `k`. Amplitudes
/// under one intensity unit and voxels inside vessels are zero.
pub fn tail_field(clean: &Volume, vessel: &Mask, cfg: &PhantomConfig) -> Vec<f32> {
    let [d, h, w] = clean.dims();
    let plane = h * w;
    let fall = (-cfg.tail_decay).exp();
    let mut out = vec![0.0f32; clean.len()];
    for p in 0..plane {
        let mut t = 0.0f64;
        for k in 0..d {
            let i = k * plane + p;
            if k > 0 {
                t *= fall;
                let above = i - plane;
                if vessel.data()[above] {
                    t = t.max(cfg.tail_gain * clean.data()[above] as f64);
                }
            }
            if !vessel.data()[i] && t >= 1.0 {
                out[i] = t as f32;
            }
        }
    }
    out
}

fn repeat_rng(truth: &PhantomTruth, repeat: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(truth.seed ^ 0x5ca1_ab1e);
    rng.set_stream(repeat as u64);
    rng
}

/// One simulated acquisition: `clip(keep · clean + tail + noise, 0, 255)`.
pub fn simulate_scan(truth: &PhantomTruth, cfg: &PhantomConfig, repeat_index: usize) -> Result<Volume> {
    if repeat_index >= cfg.n_repeats {
        return Err(Error::Config(format!(
            "repeat {repeat_index} out of range for {} repeats",
            cfg.n_repeats
        )));
    }
    let mut rng = repeat_rng(truth, repeat_index);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let clean = truth.clean_volume.data();
    let vessel = truth.vessel_mask.data();
    let data = (0..clean.len())
        .map(|i| {
            let mut v = truth.tail[i] as f64;
            if vessel[i] && !rng.random_bool(cfg.decorrelation_dropout) {
                v += clean[i] as f64;
            }
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            v.clamp(0.0, 255.0) as f32
        })
        .collect();
    Volume::new(truth.clean_volume.dims(), cfg.voxel_size_mm, data)
}

/// Voxelwise mean.
pub fn merge_repeats(scans: &[Volume]) -> Result<Volume> {
    if scans.len() < 2 {
        return Err(Error::Config(format!("merging needs at least 2 scans, got {}", scans.len())));
    }
    for s in &scans[1..] {
        scans[0].same_dims(s)?;
    }
    let n = scans.len() as f64;
    let data = (0..scans[0].len())
        .map(|i| (scans.iter().map(|s| s.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Volume::new(scans[0].dims(), scans[0].voxel_size_mm(), data)
}

/// Mean and variance of one simulated voxel under the scan model.
pub fn voxel_moments(clean: f64, vessel: bool, tail: f64, cfg: &PhantomConfig) -> (f64, f64) {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal as N};
    let clipped = |mu: f64| -> (f64, f64) {
        if cfg.noise_sigma == 0.0 {
            let v = mu.clamp(0.0, 255.0);
            return (v, v * v);
        }
        let s = cfg.noise_sigma;
        let z = N::new(0.0, 1.0).expect("unit normal");
        let (a, b) = ((0.0 - mu) / s, (255.0 - mu) / s);
        let (pa, pb) = (z.cdf(a), z.cdf(b));
        let (fa, fb) = (z.pdf(a), z.pdf(b));
        let mass = pb - pa;
        // Moments of mu + s·Z restricted to [a, b], plus the clipped mass at 255.
        let m1 = mu * mass + s * (fa - fb);
        let m2 = mu * mu * mass + 2.0 * mu * s * (fa - fb) + s * s * (mass + a * fa - b * fb);
        let top = 1.0 - pb;
        (m1 + 255.0 * top, m2 + 255.0 * 255.0 * top)
    };
    let (e1, e2) = if vessel {
        let q = cfg.decorrelation_dropout;
        let (k1, k2) = clipped(clean + tail);
        let (d1, d2) = clipped(tail);
        ((1.0 - q) * k1 + q * d1, (1.0 - q) * k2 + q * d2)
    } else {
        clipped(tail)
    };
    (e1, e2 - e1 * e1)
}

/// One phantom volume with its scans.
pub struct PhantomVolume {
    pub truth: PhantomTruth,
    pub scans: Vec<Volume>,
    pub merged: Volume,
}

pub fn generate_volume(cfg: &PhantomConfig) -> Result<PhantomVolume> {
    let truth = generate_truth_volume(cfg)?;
    let scans = (0..cfg.n_repeats)
        .map(|r| simulate_scan(&truth, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_repeats(&scans)?;
    Ok(PhantomVolume { truth, scans, merged })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub singles: Vec<String>,
    pub merged: String,
    pub clean: String,
    pub vessel_mask: String,
    pub artifact_mask: String,
    pub noise_mask: String,
    pub segment_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub volume: usize,
    pub depth: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PhantomConfig,
    pub volumes: Vec<VolumeEntry>,
    /// `(single repeat 0, merged)` plane pairs.
    pub pairs: Vec<PairEntry>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Number of validation volumes for a 90/10 split by volume.
pub fn val_volumes(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * 0.1).round() as usize).clamp(1, n - 1)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates `n_volumes` phantoms under `dir` and writes the manifest.
/// The last [`val_volumes`]`(n)` volumes are held out for validation.
pub fn build_dataset(cfg: &PhantomConfig, n_volumes: usize, dir: &Path) -> Result<Manifest> {
    use rayon::prelude::*;

    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let n_val = val_volumes(n_volumes);
    let built: Vec<Result<(VolumeEntry, Vec<PathBuf>)>> = (0..n_volumes)
        .into_par_iter()
        .map(|i| {
            let vcfg = cfg.for_volume(i);
            let pv = generate_volume(&vcfg)?;
            let sub = format!("vol_{i:03}");
            let mut written = Vec::new();
            let mut save = |name: &str, v: &Volume| -> Result<String> {
                let rel = format!("{sub}/{name}.f32");
                v.save(&dir.join(&rel))?;
                written.push(PathBuf::from(&rel));
                written.push(crate::volume::sidecar_path(Path::new(&rel)));
                Ok(rel)
            };
            let singles = pv
                .scans
                .iter()
                .enumerate()
                .map(|(r, s)| save(&format!("single_{r:02}"), s))
                .collect::<Result<Vec<_>>>()?;
            let vs = cfg.voxel_size_mm;
            let entry = VolumeEntry {
                index: i,
                split: if i >= n_volumes - n_val { Split::Val } else { Split::Train },
                seed: vcfg.seed,
                singles,
                merged: save("merged", &pv.merged)?,
                clean: save("clean", &pv.truth.clean_volume)?,
                vessel_mask: save("vessel_mask", &pv.truth.vessel_mask.to_volume(vs)?)?,
                artifact_mask: save("artifact_mask", &pv.truth.artifact_mask.to_volume(vs)?)?,
                noise_mask: save("noise_mask", &pv.truth.noise_mask.to_volume(vs)?)?,
                segment_count: pv.truth.segment_ground_truth.count(),
            };
            Ok((entry, written))
        })
        .collect();

    let mut volumes = Vec::new();
    let mut rels = Vec::new();
    for b in built {
        let (entry, written) = b?;
        volumes.push(entry);
        rels.extend(written);
    }
    let mut files = Vec::new();
    for rel in rels {
        let bytes = fs::read(dir.join(&rel))?;
        files.push(FileEntry {
            path: rel.to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let pairs = volumes
        .iter()
        .flat_map(|v| {
            (0..cfg.dims[0]).map(move |depth| PairEntry {
                volume: v.index,
                depth,
                split: v.split,
            })
        })
        .collect();
    let manifest = Manifest {
        config: cfg.clone(),
        volumes,
        pairs,
        files,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_NAME), json)?;
    log::info!("wrote {n_volumes} phantom volumes ({n_val} validation) to {}", dir.display());
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

/// Re-hashes every listed file; returns the manifest when all match.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    for f in &m.files {
        let bytes = fs::read(dir.join(&f.path))?;
        if bytes.len() as u64 != f.bytes || sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Format(format!("checksum mismatch for {}", f.path)));
        }
    }
    Ok(m)
}

/// Training pairs of a verified dataset, scaled to `[0, 1]`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = verify_manifest(dir)?;
    let mut data = Dataset::default();
    for v in &m.volumes {
        let single = Volume::load(&dir.join(&v.singles[0]))?;
        let merged = Volume::load(&dir.join(&v.merged))?;
        single.same_dims(&merged)?;
        for p in m.pairs.iter().filter(|p| p.volume == v.index) {
            let pair = plane_pair(&single, &merged, p.depth)?;
            match p.split {
                Split::Train => data.train.push(pair),
                Split::Val => data.val.push(pair),
            }
        }
    }
    Ok(data)
}

/// `(input, target)` depth plane `d`, scaled from `[0, 255]` to `[0, 1]`.
pub fn plane_pair(single: &Volume, merged: &Volume, d: usize) -> Result<PlanePair> {
    let [depth, h, w] = single.dims();
    if d >= depth {
        return Err(Error::Dimension(format!("depth {d} out of range for {depth} planes")));
    }
    let scale = |v: &Volume| Tensor::from_vec(&[h, w, 1], v.plane(d).iter().map(|x| x / 255.0).collect());
    Ok(PlanePair {
        input: scale(single)?,
        target: scale(merged)?,
    })
}

/// Truth volume with one straight tube along W, for fixtures.
pub fn straight_tube(dims: [usize; 3], radius: f64, intensity: f32, voxel_size_mm: [f64; 3]) -> Result<PhantomTruth> {
    let cfg = PhantomConfig {
        dims,
        voxel_size_mm,
        n_trees: 0,
        radius_range: [radius, radius],
        faz_radius: 0.0,
        ..Default::default()
    };
    cfg.validate()?;
    let [d, h, w] = dims;
    let (cz, cy) = (d / 2, h / 4);
    let margin = radius.ceil() as usize + 2;
    let path: Vec<Voxel> = (margin..w - margin).map(|x| [cz, cy, x]).collect();
    let mut clean = Volume::zeros(dims, voxel_size_mm)?;
    let mut vessel = Mask::empty(dims);
    for z in 0..d {
        for y in 0..h {
            for x in margin..w - margin {
                let r2 = (z as f64 - cz as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                if r2 <= radius * radius {
                    vessel.set(z, y, x, true);
                    let i = clean.index(z, y, x);
                    clean.data_mut()[i] = intensity;
                }
            }
        }
    }
    let tail = tail_field(&clean, &vessel, &cfg);
    let artifact = Mask::new(dims, tail.iter().map(|&t| t > 0.0).collect())?;
    let ends = vec![path[0], *path.last().expect("tube has voxels")];
    Ok(PhantomTruth {
        artifact_mask: artifact,
        noise_mask: Mask::empty(dims),
        tail,
        segment_ground_truth: SegmentSet {
            segments: vec![Segment {
                length_voxels: path.len(),
                path,
                flow_index: intensity as f64,
                cyclic: false,
            }],
            bifurcation_points: vec![],
            end_points: ends,
            analyzed_volume_mm3: clean.extent_mm3(),
        },
        clean_volume: clean,
        vessel_mask: vessel,
        tree_intensities: vec![intensity],
        seed: 0,
    })
}
