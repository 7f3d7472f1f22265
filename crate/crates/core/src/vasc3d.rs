//! Skeleton-based 3-D vessel quantification.
//!
//! Pipeline: [`binarize`] → [`skeletonize3d`] → [`classify_skeleton_voxels`] →
//! [`extract_segments`], wrapped by [`quantify_volume`].
//!
//! Skeleton neighbourhoods are 26-connected. Adjacent bifurcation voxels form
//! one junction; a segment runs from a junction or end point through body
//! voxels to the next junction or end point, and its path includes both
//! delimiter voxels. Terminal branches of at most [`MAX_FRAGMENT_VOXELS`] voxels
//! are pruned before counting, so a pruned spur does not split the vessel it
//! hangs off.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

pub const DEFAULT_THRESHOLD: f32 = 50.0;
/// Paths of this many voxels or fewer are treated as noise.
pub const MAX_FRAGMENT_VOXELS: usize = 6;

pub type Voxel = [usize; 3];

/// `mask = vol >= threshold`.
pub fn binarize(vol: &Volume, threshold: f32) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 255.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 255), got {threshold}")));
    }
    Mask::new(vol.dims(), vol.data().iter().map(|&v| v >= threshold).collect())
}

// 3×3×3 neighbourhoods are indexed (dz+1)·9 + (dy+1)·3 + (dx+1); 13 is the centre.
const CENTRE: usize = 13;

fn offset(i: usize) -> [isize; 3] {
    [(i / 9) as isize - 1, (i / 3 % 3) as isize - 1, (i % 3) as isize - 1]
}

struct Adjacency {
    n26: Vec<Vec<usize>>,
    n6: Vec<Vec<usize>>,
    in18: [bool; 27],
    face: [bool; 27],
}

fn adjacency() -> &'static Adjacency {
    static ADJ: std::sync::OnceLock<Adjacency> = std::sync::OnceLock::new();
    ADJ.get_or_init(|| {
        let mut n26 = vec![Vec::new(); 27];
        let mut n6 = vec![Vec::new(); 27];
        let mut in18 = [false; 27];
        let mut face = [false; 27];
        for i in 0..27 {
            let a = offset(i);
            let l1: isize = a.iter().map(|v| v.abs()).sum();
            in18[i] = i != CENTRE && l1 <= 2;
            face[i] = l1 == 1;
            for j in 0..27 {
                if i == j || j == CENTRE {
                    continue;
                }
                let b = offset(j);
                let d: Vec<isize> = (0..3).map(|k| (a[k] - b[k]).abs()).collect();
                if d.iter().all(|&v| v <= 1) {
                    n26[i].push(j);
                    if d.iter().sum::<isize>() == 1 {
                        n6[i].push(j);
                    }
                }
            }
        }
        Adjacency { n26, n6, in18, face }
    })
}

fn neighbourhood(mask: &Mask, v: Voxel) -> [bool; 27] {
    let dims = mask.dims();
    let mut nb = [false; 27];
    for (i, slot) in nb.iter_mut().enumerate() {
        if let Some(q) = step(dims, v, offset(i)) {
            *slot = mask.get(q[0], q[1], q[2]);
        }
    }
    nb
}

fn step(dims: [usize; 3], v: Voxel, o: [isize; 3]) -> Option<Voxel> {
    let mut q = [0usize; 3];
    for k in 0..3 {
        let c = v[k] as isize + o[k];
        if c < 0 || c >= dims[k] as isize {
            return None;
        }
        q[k] = c as usize;
    }
    Some(q)
}

fn components(members: &[usize], adj: &[Vec<usize>], seeds_only: Option<&[bool; 27]>) -> usize {
    let mut inside = [false; 27];
    for &m in members {
        inside[m] = true;
    }
    let mut seen = [false; 27];
    let mut count = 0;
    for &m in members {
        if seen[m] {
            continue;
        }
        seen[m] = true;
        let mut stack = vec![m];
        let mut touches = seeds_only.is_none();
        while let Some(c) = stack.pop() {
            if let Some(s) = seeds_only {
                touches |= s[c];
            }
            for &n in &adj[c] {
                if inside[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        if touches {
            count += 1;
        }
    }
    count
}

/// Simple-point test for 26-connected foreground and 6-connected background:
/// one foreground component in the punctured 26-neighbourhood and one
/// background component of the punctured 18-neighbourhood that touches a face.
pub fn is_simple(nb: &[bool; 27]) -> bool {
    let adj = adjacency();
    let fg: Vec<usize> = (0..27).filter(|&i| i != CENTRE && nb[i]).collect();
    if components(&fg, &adj.n26, None) != 1 {
        return false;
    }
    let bg: Vec<usize> = (0..27).filter(|&i| adj.in18[i] && !nb[i]).collect();
    components(&bg, &adj.n6, Some(&adj.face)) == 1
}

fn foreground_neighbours(nb: &[bool; 27]) -> usize {
    (0..27).filter(|&i| i != CENTRE && nb[i]).count()
}

/// Topology-preserving thinning to a one-voxel-wide curve skeleton.
///
/// Six directional sub-iterations per pass delete border voxels that are simple
/// and not curve end points, re-checking each candidate sequentially so that
/// parallel deletions can never merge or split components. Raster order makes
/// the result deterministic.
pub fn skeletonize3d(mask: &Mask) -> Mask {
    const DIRS: [[isize; 3]; 6] = [[0, -1, 0], [0, 1, 0], [0, 0, 1], [0, 0, -1], [-1, 0, 0], [1, 0, 0]];
    let dims = mask.dims();
    let mut skel = mask.clone();
    let mut fg: Vec<Voxel> = voxels(&skel);
    loop {
        let mut removed = 0;
        for dir in DIRS {
            let candidates: Vec<Voxel> = fg
                .iter()
                .copied()
                .filter(|&v| {
                    let border = step(dims, v, dir).is_none_or(|q| !skel.get(q[0], q[1], q[2]));
                    if !border {
                        return false;
                    }
                    let nb = neighbourhood(&skel, v);
                    foreground_neighbours(&nb) > 1 && is_simple(&nb)
                })
                .collect();
            for v in candidates {
                let nb = neighbourhood(&skel, v);
                if foreground_neighbours(&nb) > 1 && is_simple(&nb) {
                    skel.set(v[0], v[1], v[2], false);
                    removed += 1;
                }
            }
            fg.retain(|v| skel.get(v[0], v[1], v[2]));
        }
        if removed == 0 {
            return skel;
        }
    }
}

fn voxels(mask: &Mask) -> Vec<Voxel> {
    let [d, h, w] = mask.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn neighbours(mask: &Mask, v: Voxel) -> Vec<Voxel> {
    let dims = mask.dims();
    (0..27)
        .filter(|&i| i != CENTRE)
        .filter_map(|i| step(dims, v, offset(i)))
        .filter(|q| mask.get(q[0], q[1], q[2]))
        .collect()
}

/// Number of connected foreground components (26-connectivity).
pub fn count_components(mask: &Mask) -> usize {
    let mut seen = Mask::empty(mask.dims());
    let mut count = 0;
    for v in voxels(mask) {
        if seen.get(v[0], v[1], v[2]) {
            continue;
        }
        count += 1;
        seen.set(v[0], v[1], v[2], true);
        let mut stack = vec![v];
        while let Some(c) = stack.pop() {
            for q in neighbours(mask, c) {
                if !seen.get(q[0], q[1], q[2]) {
                    seen.set(q[0], q[1], q[2], true);
                    stack.push(q);
                }
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelClass {
    Background,
    /// No skeleton neighbours; dropped from analysis.
    Isolated,
    End,
    Body,
    Bifurcation,
}

/// Labels every voxel by its number of 26-neighbours in the skeleton.
pub fn classify_skeleton_voxels(skel: &Mask) -> Vec<VoxelClass> {
    let [d, h, w] = skel.dims();
    let mut labels = vec![VoxelClass::Background; d * h * w];
    for v in voxels(skel) {
        labels[skel.index(v[0], v[1], v[2])] = match neighbours(skel, v).len() {
            0 => VoxelClass::Isolated,
            1 => VoxelClass::End,
            2 => VoxelClass::Body,
            _ => VoxelClass::Bifurcation,
        };
    }
    labels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub path: Vec<Voxel>,
    pub length_voxels: usize,
    /// Mean original intensity over the path voxels.
    pub flow_index: f64,
    /// A closed loop without delimiters.
    pub cyclic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    pub bifurcation_points: Vec<Voxel>,
    pub end_points: Vec<Voxel>,
    pub analyzed_volume_mm3: f64,
}

impl SegmentSet {
    pub fn count(&self) -> usize {
        self.segments.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Path {
    voxels: Vec<Voxel>,
    cyclic: bool,
    /// Whether the first / last voxel is an end point.
    open_ends: usize,
}

/// Every maximal path of the skeleton, found without pruning.
fn trace(skel: &Mask, labels: &[VoxelClass]) -> Vec<Path> {
    use VoxelClass::*;
    let idx = |v: Voxel| skel.index(v[0], v[1], v[2]);
    let is_delim = |v: Voxel| matches!(labels[idx(v)], End | Bifurcation);
    let mut visited = vec![false; labels.len()];
    let mut paths = Vec::new();
    let all = voxels(skel);
    for &q in all.iter().filter(|&&v| is_delim(v)) {
        for r in neighbours(skel, q) {
            if is_delim(r) {
                // Two delimiters touching directly: only end points start such a
                // path, and an end-to-end pair is recorded once.
                let qe = labels[idx(q)] == End;
                let re = labels[idx(r)] == End;
                if qe && (!re || idx(q) < idx(r)) {
                    paths.push(Path {
                        voxels: vec![q, r],
                        cyclic: false,
                        open_ends: 1 + re as usize,
                    });
                }
                continue;
            }
            if visited[idx(r)] {
                continue;
            }
            let mut path = vec![q, r];
            visited[idx(r)] = true;
            let (mut prev, mut cur) = (q, r);
            loop {
                let next = neighbours(skel, cur).into_iter().find(|&n| n != prev);
                let Some(next) = next else { break };
                path.push(next);
                if is_delim(next) || visited[idx(next)] {
                    break;
                }
                visited[idx(next)] = true;
                (prev, cur) = (cur, next);
            }
            let last = *path.last().expect("non-empty");
            let open_ends = (labels[idx(q)] == End) as usize + (labels[idx(last)] == End) as usize;
            paths.push(Path { voxels: path, cyclic: false, open_ends });
        }
    }
    for &s in &all {
        if labels[idx(s)] != Body || visited[idx(s)] {
            continue;
        }
        let mut path = vec![s];
        visited[idx(s)] = true;
        let (mut prev, mut cur) = (s, s);
        loop {
            let next = neighbours(skel, cur).into_iter().find(|&n| n != prev && !visited[idx(n)]);
            let Some(next) = next else { break };
            visited[idx(next)] = true;
            path.push(next);
            (prev, cur) = (cur, next);
        }
        paths.push(Path { voxels: path, cyclic: true, open_ends: 0 });
    }
    paths
}

/// Prunes isolated voxels and short terminal branches until none remain.
fn prune(skel: &Mask) -> (Mask, Vec<VoxelClass>, Vec<Path>) {
    use VoxelClass::*;
    let mut skel = skel.clone();
    loop {
        let mut labels = classify_skeleton_voxels(&skel);
        for (i, l) in labels.iter_mut().enumerate() {
            if *l == Isolated {
                skel.data_mut()[i] = false;
                *l = Background;
            }
        }
        let paths = trace(&skel, &labels);
        let mut changed = false;
        for p in &paths {
            let short = p.voxels.len() <= MAX_FRAGMENT_VOXELS;
            if !short || (!p.cyclic && p.open_ends == 0) {
                continue;
            }
            for &v in &p.voxels {
                if labels[skel.index(v[0], v[1], v[2])] != Bifurcation {
                    skel.set(v[0], v[1], v[2], false);
                    changed = true;
                }
            }
        }
        if !changed {
            return (skel, labels, paths);
        }
    }
}

/// Segments of a skeleton, after removing fragments of at most
/// [`MAX_FRAGMENT_VOXELS`] voxels. `labels` must come from
/// [`classify_skeleton_voxels`] on the same skeleton; it is recomputed after
/// each pruning round.
pub fn extract_segments(skel: &Mask, labels: &[VoxelClass], original: &Volume) -> Result<SegmentSet> {
    if skel.dims() != original.dims() || labels.len() != original.len() {
        return Err(Error::Dimension(format!(
            "skeleton {:?} with {} labels does not match volume {:?}",
            skel.dims(),
            labels.len(),
            original.dims()
        )));
    }
    let (pruned, labels, paths) = prune(skel);
    let segments = paths
        .into_iter()
        .filter(|p| p.voxels.len() > MAX_FRAGMENT_VOXELS)
        .map(|p| {
            let flow = p.voxels.iter().map(|v| original.get(v[0], v[1], v[2]) as f64).sum::<f64>()
                / p.voxels.len() as f64;
            Segment {
                length_voxels: p.voxels.len(),
                path: p.voxels,
                flow_index: flow,
                cyclic: p.cyclic,
            }
        })
        .collect();
    let pick = |class: VoxelClass| -> Vec<Voxel> {
        voxels(&pruned)
            .into_iter()
            .filter(|v| labels[pruned.index(v[0], v[1], v[2])] == class)
            .collect()
    };
    Ok(SegmentSet {
        segments,
        bifurcation_points: pick(VoxelClass::Bifurcation),
        end_points: pick(VoxelClass::End),
        analyzed_volume_mm3: original.extent_mm3(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub segment_count: usize,
    pub segment_density_per_mm3: f64,
    /// `[length_voxels, count]` rows in ascending length.
    pub length_histogram: Vec<[usize; 2]>,
    /// Mean over segments of the per-segment flow index; 0 without segments.
    pub mean_flow_index_skeleton: f64,
    /// Mean intensity over all binarized vessel voxels; 0 when there are none.
    pub mean_flow_index_mask: f64,
}

impl QuantReport {
    /// Mean segment length in voxels; 0 without segments.
    pub fn mean_length(&self) -> f64 {
        let n: usize = self.length_histogram.iter().map(|r| r[1]).sum();
        if n == 0 {
            return 0.0;
        }
        self.length_histogram.iter().map(|r| (r[0] * r[1]) as f64).sum::<f64>() / n as f64
    }
}

/// Segments of `vol` and the report built from them. With `region`, only
/// voxels inside it are analysed and the density denominator is its volume.
pub fn quantify_segments(vol: &Volume, threshold: f32, region: Option<&Mask>) -> Result<(SegmentSet, QuantReport)> {
    let mut mask = binarize(vol, threshold)?;
    let mut analyzed = vol.extent_mm3();
    if let Some(r) = region {
        if r.dims() != vol.dims() {
            return Err(Error::Dimension(format!(
                "analysis mask {:?} does not match volume {:?}",
                r.dims(),
                vol.dims()
            )));
        }
        for (m, &keep) in mask.data_mut().iter_mut().zip(r.data()) {
            *m &= keep;
        }
        analyzed = r.count() as f64 * vol.voxel_volume_mm3();
    }
    let skel = skeletonize3d(&mask);
    let labels = classify_skeleton_voxels(&skel);
    let mut set = extract_segments(&skel, &labels, vol)?;
    set.analyzed_volume_mm3 = analyzed;

    let n = set.count();
    let mut hist = BTreeMap::new();
    for s in &set.segments {
        *hist.entry(s.length_voxels).or_insert(0usize) += 1;
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if c == 0 { 0.0 } else { s / c as f64 }
    };
    let report = QuantReport {
        segment_count: n,
        segment_density_per_mm3: if analyzed > 0.0 { n as f64 / analyzed } else { 0.0 },
        length_histogram: hist.into_iter().map(|(l, c)| [l, c]).collect(),
        mean_flow_index_skeleton: mean(&mut set.segments.iter().map(|s| s.flow_index)),
        mean_flow_index_mask: mean(
            &mut vol.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&v, _)| v as f64),
        ),
    };
    Ok((set, report))
}

pub fn quantify_volume(vol: &Volume, threshold: f32, region: Option<&Mask>) -> Result<QuantReport> {
    Ok(quantify_segments(vol, threshold, region)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_of(dims: [usize; 3], vs: &[Voxel]) -> Mask {
        let mut m = Mask::empty(dims);
        for v in vs {
            m.set(v[0], v[1], v[2], true);
        }
        m
    }

    fn line(n: usize) -> Vec<Voxel> {
        (0..n).map(|i| [2, 2, 2 + i]).collect()
    }

    /// Y in the z = 2 plane: two diagonal arms and a straight stem from (2, 12, 12).
    fn y_fixture(arms: [usize; 3]) -> Vec<Voxel> {
        let c = [2usize, 12, 12];
        let mut v = vec![c];
        for k in 1..=arms[0] {
            v.push([2, c[1] + k, c[2] + k]);
        }
        for k in 1..=arms[1] {
            v.push([2, c[1] + k, c[2] - k]);
        }
        for k in 1..=arms[2] {
            v.push([2, c[1] - k, c[2]]);
        }
        v
    }

    /// Perimeter of an n×n square with the corners cut off.
    fn ring(n: usize) -> Vec<Voxel> {
        let mut v = Vec::new();
        for i in 1..n - 1 {
            v.extend([[2, 2, 2 + i], [2, 2 + n - 1, 2 + i], [2, 2 + i, 2], [2, 2 + i, 2 + n - 1]]);
        }
        v
    }

    fn count(labels: &[VoxelClass], c: VoxelClass) -> usize {
        labels.iter().filter(|&&l| l == c).count()
    }

    fn vol_for(m: &Mask) -> Volume {
        m.to_volume([0.01; 3]).unwrap()
    }

    #[test]
    fn binarize_is_inclusive() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![50.0, 49.9, 0.0]).unwrap();
        assert_eq!(binarize(&v, 50.0).unwrap().data(), &[true, false, false]);
        assert!(binarize(&v, 0.0).is_err());
        assert!(binarize(&v, 255.0).is_err());
        let z = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        assert_eq!(binarize(&z, 50.0).unwrap().count(), 0);
    }

    #[test]
    fn simple_point_cases() {
        let mut nb = [false; 27];
        nb[CENTRE] = true;
        assert!(!is_simple(&nb), "isolated voxel");
        nb[12] = true;
        assert!(is_simple(&nb), "line end");
        nb[14] = true;
        assert!(!is_simple(&nb), "line interior");
        let full = [true; 27];
        assert!(!is_simple(&full), "interior of a solid");
    }

    #[test]
    fn thin_shapes_survive() {
        let dims = [5, 5, 16];
        let single = mask_of(dims, &[[2, 2, 2]]);
        assert_eq!(skeletonize3d(&single), single);
        let l = mask_of(dims, &line(10));
        assert_eq!(skeletonize3d(&l), l);
    }

    #[test]
    fn solid_bar_thins_to_a_curve() {
        let dims = [7, 7, 15];
        let mut bar = Vec::new();
        for z in 2..5 {
            for y in 2..5 {
                for x in 3..12 {
                    bar.push([z, y, x]);
                }
            }
        }
        let m = mask_of(dims, &bar);
        let s = skeletonize3d(&m);
        assert!(s.data().iter().zip(m.data()).all(|(&a, &b)| !a || b));
        assert_eq!(count_components(&s), 1);
        let labels = classify_skeleton_voxels(&s);
        assert_eq!(count(&labels, VoxelClass::End), 2);
        assert_eq!(count(&labels, VoxelClass::Bifurcation), 0);
        assert!(s.count() >= 7, "{}", s.count());
        let xs: Vec<usize> = voxels(&s).iter().map(|v| v[2]).collect();
        assert!(xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1 >= 7);
    }

    #[test]
    fn line_fixture() {
        let dims = [5, 5, 16];
        let m = mask_of(dims, &line(10));
        let labels = classify_skeleton_voxels(&m);
        assert_eq!(count(&labels, VoxelClass::End), 2);
        assert_eq!(count(&labels, VoxelClass::Body), 8);
        assert_eq!(count(&labels, VoxelClass::Bifurcation), 0);
        let set = extract_segments(&m, &labels, &vol_for(&m)).unwrap();
        assert_eq!(set.count(), 1);
        assert_eq!(set.segments[0].length_voxels, 10);
        assert_eq!(set.end_points.len(), 2);
    }

    #[test]
    fn isolated_voxel_dropped() {
        let m = mask_of([3, 3, 3], &[[1, 1, 1]]);
        let labels = classify_skeleton_voxels(&m);
        assert_eq!(labels[13], VoxelClass::Isolated);
        let set = extract_segments(&m, &labels, &vol_for(&m)).unwrap();
        assert_eq!(set.count(), 0);
        assert!(set.end_points.is_empty());
    }

    #[test]
    fn y_fixture_counts() {
        let dims = [5, 24, 24];
        let m = mask_of(dims, &y_fixture([8, 8, 8]));
        let labels = classify_skeleton_voxels(&m);
        assert_eq!(count(&labels, VoxelClass::End), 3);
        assert_eq!(count(&labels, VoxelClass::Bifurcation), 1);
        assert_eq!(count(&labels, VoxelClass::Body), 21);
        assert_eq!(skeletonize3d(&m), m);
        let set = extract_segments(&m, &labels, &vol_for(&m)).unwrap();
        assert_eq!(set.count(), 3);
        assert!(set.segments.iter().all(|s| s.length_voxels == 9));
        assert_eq!(set.bifurcation_points, vec![[2, 12, 12]]);
        assert_eq!(set.end_points.len(), 3);
    }

    #[test]
    fn fragment_boundary_six_removed_seven_kept() {
        let dims = [5, 24, 24];
        // Arm path lengths count the shared junction voxel.
        for (path_len, kept) in [(6usize, false), (7, true)] {
            let m = mask_of(dims, &y_fixture([8, 8, path_len - 1]));
            let labels = classify_skeleton_voxels(&m);
            let set = extract_segments(&m, &labels, &vol_for(&m)).unwrap();
            if kept {
                assert_eq!(set.count(), 3);
                assert!(set.segments.iter().any(|s| s.length_voxels == 7));
                assert_eq!(set.bifurcation_points.len(), 1);
            } else {
                // The stem goes and the two arms join into one segment.
                assert_eq!(set.count(), 1);
                assert_eq!(set.segments[0].length_voxels, 17);
                assert!(set.bifurcation_points.is_empty());
                assert_eq!(set.end_points.len(), 2);
            }
        }
        for (n, kept) in [(6usize, false), (7, true)] {
            let m = mask_of([5, 5, 16], &line(n));
            let set = extract_segments(&m, &classify_skeleton_voxels(&m), &vol_for(&m)).unwrap();
            assert_eq!(set.count(), kept as usize, "line of {n}");
        }
    }

    #[test]
    fn loop_fixtures() {
        let dims = [5, 20, 20];
        let r = ring(6);
        let m = mask_of(dims, &r);
        let labels = classify_skeleton_voxels(&m);
        assert_eq!(count(&labels, VoxelClass::Body), 16);
        assert_eq!(count(&labels, VoxelClass::End), 0);
        assert_eq!(skeletonize3d(&m), m, "a loop has a tunnel and cannot thin");
        let set = extract_segments(&m, &labels, &vol_for(&m)).unwrap();
        assert_eq!(set.count(), 1);
        assert!(set.segments[0].cyclic);
        assert_eq!(set.segments[0].length_voxels, 16);

        // Ring with a tail leaving from the middle of one side.
        let mut rt = r.clone();
        for k in 1..=8 {
            rt.push([2, 2 + 6 - 1 + k, 2 + 3]);
        }
        let m = mask_of(dims, &rt);
        let labels = classify_skeleton_voxels(&m);
        assert_eq!(count(&labels, VoxelClass::End), 1);
        let set = extract_segments(&m, &labels, &vol_for(&m)).unwrap();
        assert_eq!(set.count(), 2);
        let bif = |v: &Voxel| set.bifurcation_points.contains(v);
        let closes = |s: &Segment| bif(&s.path[0]) && bif(s.path.last().unwrap());
        assert_eq!(set.segments.iter().filter(|s| closes(s)).count(), 1);
        assert_eq!(set.end_points, vec![[2, 15, 5]]);

        // Short loops are fragments.
        let small = mask_of(dims, &ring(3));
        let set = extract_segments(&small, &classify_skeleton_voxels(&small), &vol_for(&small)).unwrap();
        assert_eq!(set.count(), 0);
    }

    #[test]
    fn flow_index_is_path_mean() {
        let dims = [3, 3, 10];
        let mut vol = Volume::zeros(dims, [1.0; 3]).unwrap();
        let vals = [10.0f32, 20.0, 30.0, 40.0, 10.0, 20.0, 30.0, 40.0];
        for (i, &v) in vals.iter().enumerate() {
            let j = vol.index(1, 1, i + 1);
            vol.data_mut()[j] = v;
        }
        let m = Mask::from_volume(&vol);
        let set = extract_segments(&m, &classify_skeleton_voxels(&m), &vol).unwrap();
        assert_eq!(set.count(), 1);
        assert_eq!(set.segments[0].flow_index, 25.0);
    }

    #[test]
    fn empty_volume_report() {
        let v = Volume::zeros([8, 8, 8], [0.1; 3]).unwrap();
        let r = quantify_volume(&v, DEFAULT_THRESHOLD, None).unwrap();
        assert_eq!(r.segment_count, 0);
        assert_eq!(r.segment_density_per_mm3, 0.0);
        assert!(r.length_histogram.is_empty());
        let json = serde_json::to_value(&r).unwrap();
        for key in [
            "segment_count",
            "segment_density_per_mm3",
            "length_histogram",
            "mean_flow_index_skeleton",
            "mean_flow_index_mask",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    fn random_blobs(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Mask {
        let mut m = Mask::empty(dims);
        for _ in 0..rng.random_range(1..6) {
            let c: Vec<f64> = dims.iter().map(|&d| rng.random_range(0.0..d as f64)).collect();
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.8..4.0)).collect();
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let p = [z as f64, y as f64, x as f64];
                        let q: f64 = (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum();
                        if q <= 1.0 {
                            m.set(z, y, x, true);
                        }
                    }
                }
            }
        }
        // Speckle so some blobs have holes and bridges.
        for v in m.data_mut().iter_mut() {
            if rng.random_bool(0.03) {
                *v = !*v;
            }
        }
        m
    }

    #[test]
    fn skeleton_is_subset_and_preserves_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = random_blobs(&mut rng, [14, 14, 14]);
            let s = skeletonize3d(&m);
            assert!(s.data().iter().zip(m.data()).all(|(&a, &b)| !a || b));
            assert_eq!(count_components(&s), count_components(&m));
            // No simple voxel other than curve ends survives.
            for v in voxels(&s) {
                let nb = neighbourhood(&s, v);
                assert!(foreground_neighbours(&nb) <= 1 || !is_simple(&nb), "{v:?}");
            }
        }
    }

    #[test]
    fn conservation_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let m = random_blobs(&mut rng, [14, 14, 14]);
            let s = skeletonize3d(&m);
            let (pruned, labels, paths) = prune(&s);
            let delims = labels
                .iter()
                .filter(|&&l| matches!(l, VoxelClass::End | VoxelClass::Bifurcation))
                .count();
            let interior: usize = paths
                .iter()
                .map(|p| if p.cyclic { p.voxels.len() } else { p.voxels.len() - 2 })
                .sum();
            assert_eq!(interior + delims, pruned.count());
        }
    }

    #[test]
    fn scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_blobs(&mut rng, [14, 14, 14]);
        let vol = m.to_volume([0.05; 3]).unwrap().map(|v| v * 0.6);
        let c = 0.5f32;
        let (a, ra) = quantify_segments(&vol, 50.0, None).unwrap();
        let (b, rb) = quantify_segments(&vol.map(|v| v * c), 50.0 * c, None).unwrap();
        assert_eq!(ra.segment_count, rb.segment_count);
        assert_eq!(ra.length_histogram, rb.length_histogram);
        for (x, y) in a.segments.iter().zip(&b.segments) {
            assert_eq!(x.path, y.path);
            assert!((y.flow_index - c as f64 * x.flow_index).abs() < 1e-4);
        }
    }

    #[test]
    fn region_restricts_analysis() {
        let dims = [5, 5, 30];
        let mut vol = Volume::zeros(dims, [0.1; 3]).unwrap();
        for x in 1..29 {
            let i = vol.index(2, 2, x);
            vol.data_mut()[i] = 200.0;
        }
        let mut region = Mask::empty(dims);
        for x in 0..12 {
            for z in 0..5 {
                for y in 0..5 {
                    region.set(z, y, x, true);
                }
            }
        }
        let r = quantify_volume(&vol, 50.0, Some(&region)).unwrap();
        assert_eq!(r.segment_count, 1);
        assert_eq!(r.length_histogram, vec![[11, 1]]);
        assert!((r.segment_density_per_mm3 - 1.0 / (300.0 * 1e-3)).abs() < 1e-9);
        assert_eq!(r.mean_flow_index_mask, 200.0);
        assert!(quantify_volume(&vol, 50.0, Some(&Mask::empty([1, 1, 1]))).is_err());
    }

    #[test]
    fn classification_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut stamp = [false; 27];
            for s in stamp.iter_mut() {
                *s = rng.random_bool(0.3);
            }
            stamp[CENTRE] = true;
            let mut m = Mask::empty([7, 7, 7]);
            for i in 0..27 {
                let o = offset(i);
                m.set((3 + o[0]) as usize, (3 + o[1]) as usize, (3 + o[2]) as usize, stamp[i]);
            }
            // Clutter outside the stamp must not matter.
            for z in 0..7 {
                for y in 0..7 {
                    for x in 0..7 {
                        let inner = (2..=4).contains(&z) && (2..=4).contains(&y) && (2..=4).contains(&x);
                        let far = [z, y, x].iter().any(|&c| c == 0 || c == 6);
                        if !inner && far {
                            m.set(z, y, x, rng.random_bool(0.5));
                        }
                    }
                }
            }
            let n = stamp.iter().filter(|&&b| b).count() - 1;
            let label = classify_skeleton_voxels(&m)[m.index(3, 3, 3)];
            let want = match n {
                0 => VoxelClass::Isolated,
                1 => VoxelClass::End,
                2 => VoxelClass::Body,
                _ => VoxelClass::Bifurcation,
            };
            assert_eq!(label, want);
        }
    }
}
