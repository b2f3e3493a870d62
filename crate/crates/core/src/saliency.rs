//! Voxel-space explanations of representation dimensions.
//!
//! Integrated gradients per dimension, post-processing, voxel-wise group
//! statistics, thresholded connected clusters, atlas overlap and cross-modal
//! link graphs between representation dimensions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, numeric_err, shape_err, Result};
use crate::linalg::Mat;
use crate::model::Model;
use crate::stats::MannWhitneyTester;
use crate::synth::AtlasVolume;
use crate::volume::{minmax_rescale, Volume};

pub const DEFAULT_STEPS: usize = 64;
pub const MIN_STEPS: usize = 8;
pub const DEFAULT_SIGMA: f64 = 1.5;

/// Integrated gradients of `z[dim]` for every requested dimension, along the
/// straight path from `baseline` (zero volume when `None`) to `x`, with the
/// right Riemann sum over `steps` points.
pub fn integrated_gradients(
    model: &Model,
    x: &Volume,
    baseline: Option<&Volume>,
    dims: &[usize],
    steps: usize,
) -> Result<Vec<Volume>> {
    let d = model.spec.encoder.repr_dim;
    if steps < MIN_STEPS {
        return Err(config_err!("integrated gradients need at least {MIN_STEPS} steps, got {steps}"));
    }
    if let Some(&bad) = dims.iter().find(|&&k| k >= d) {
        return Err(config_err!("dimension {bad} outside 0..{d}"));
    }
    let zero;
    let base = match baseline {
        Some(b) => {
            if b.dims != x.dims {
                return Err(shape_err!("baseline shape {:?} differs from input {:?}", b.dims, x.dims));
            }
            b
        }
        None => {
            zero = Volume::zeros(x.dims);
            &zero
        }
    };
    let diff: Vec<f64> = x.data.iter().zip(&base.data).map(|(a, b)| a - b).collect();
    let mut sums = vec![vec![0.0; x.data.len()]; dims.len()];
    let mut onehot = vec![0.0; d];
    for t in 1..=steps {
        let alpha = t as f64 / steps as f64;
        let point = Volume::from_vec(x.dims, base.data.iter().zip(&diff).map(|(b, dv)| b + alpha * dv).collect())?;
        let trace = model.encode_trace(&point)?;
        for (slot, &k) in dims.iter().enumerate() {
            onehot[k] = 1.0;
            let g = model.encoder_backward(&trace, &onehot, None, None, true)?.expect("input gradient requested");
            onehot[k] = 0.0;
            for (s, v) in sums[slot].iter_mut().zip(&g) {
                *s += v;
            }
        }
    }
    sums.into_iter()
        .map(|s| {
            let data: Vec<f64> = s.iter().zip(&diff).map(|(g, dv)| g / steps as f64 * dv).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(numeric_err!("non-finite integrated gradient"));
            }
            Volume::from_vec(x.dims, data)
        })
        .collect()
}

/// Single-dimension form of [`integrated_gradients`].
pub fn integrated_gradients_dim(model: &Model, x: &Volume, dim: usize, baseline: Option<&Volume>, steps: usize) -> Result<Volume> {
    Ok(integrated_gradients(model, x, baseline, &[dim], steps)?.remove(0))
}

/// Normalized 1-D Gaussian taps on `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(4.0 * sigma) as i64;
    let w: Vec<f64> = (-r..=r).map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing; near the border each axis pass divides by
/// the sum of taps that fall inside the volume.
pub fn gaussian_smooth(v: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma > 0.0) {
        return Err(config_err!("smoothing sigma must be positive"));
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let mut cur = v.data.clone();
    let dims = v.dims;
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let mut out = vec![0.0; cur.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let pos = ((idx / strides[axis]) % dims[axis]) as i64;
            let (mut acc, mut norm) = (0.0, 0.0);
            for (ti, w) in taps.iter().enumerate() {
                let q = pos + ti as i64 - r;
                if (0..n).contains(&q) {
                    let j = (idx as i64 + (q - pos) * strides[axis] as i64) as usize;
                    acc += w * cur[j];
                    norm += w;
                }
            }
            *o = acc / norm;
        }
        cur = out;
    }
    Volume::from_vec(dims, cur)
}

/// Post-processed saliency of one subject and dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVolume {
    pub values: Volume,
    pub subject_id: String,
    pub modality: usize,
    pub dim: usize,
}

/// Clamps negatives, masks, rescales to `[0, 1]`, smooths, and masks again.
pub fn postprocess(raw: &Volume, mask: &[bool], sigma: f64) -> Result<Volume> {
    if mask.len() != raw.data.len() {
        return Err(shape_err!("mask has {} voxels, volume {}", mask.len(), raw.data.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(data_err!("brain mask is empty"));
    }
    let clamped: Vec<f64> = raw.data.iter().zip(mask).map(|(&v, &m)| if m { v.max(0.0) } else { 0.0 }).collect();
    let scaled = minmax_rescale(&Volume::from_vec(raw.dims, clamped)?)?;
    let mut smooth = gaussian_smooth(&scaled, sigma)?;
    for (v, &m) in smooth.data.iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    Ok(smooth)
}

/// Voxel-wise Mann–Whitney comparison of two groups of volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStatMap {
    pub dims: [usize; 3],
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub rbc: Vec<f64>,
    pub n: [usize; 2],
}

pub fn group_stats(a: &[Volume], b: &[Volume]) -> Result<GroupStatMap> {
    if a.len() < 2 || b.len() < 2 {
        return Err(data_err!("group statistics need at least 2 volumes per group, got {} and {}", a.len(), b.len()));
    }
    let dims = a[0].dims;
    if a.iter().chain(b).any(|v| v.dims != dims) {
        return Err(shape_err!("all volumes must share one shape"));
    }
    let tester = MannWhitneyTester::new(a.len(), b.len())?;
    let nvox = a[0].data.len();
    let (mut u, mut p, mut rbc) = (vec![0.0; nvox], vec![1.0; nvox], vec![0.0; nvox]);
    let mut xa = vec![0.0; a.len()];
    let mut xb = vec![0.0; b.len()];
    for i in 0..nvox {
        for (s, v) in xa.iter_mut().zip(a) {
            *s = v.data[i];
        }
        for (s, v) in xb.iter_mut().zip(b) {
            *s = v.data[i];
        }
        let r = tester.test(&xa, &xb)?;
        u[i] = r.u;
        p[i] = r.p_value;
        rbc[i] = r.rbc;
    }
    Ok(GroupStatMap { dims, u, p, rbc, n: [a.len(), b.len()] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Connected components of `selected` (C-order voxel flags), each as a
/// sorted voxel index list, in order of their smallest voxel.
pub fn connected_components(selected: &[bool], dims: [usize; 3], conn: Connectivity) -> Vec<Vec<usize>> {
    let offsets = conn.offsets();
    let mut seen = vec![false; selected.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..selected.len() {
        if !selected[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let c = [(i / (dims[1] * dims[2])) as i64, ((i / dims[2]) % dims[1]) as i64, (i % dims[2]) as i64];
            for o in &offsets {
                let q = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                    continue;
                }
                let j = (q[0] as usize * dims[1] + q[1] as usize) * dims[2] + q[2] as usize;
                if selected[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub voxels: Vec<usize>,
    pub size: usize,
    /// +1 when group A ranks below group B (positive rbc), −1 otherwise.
    pub sign: i8,
    /// rbc of largest magnitude inside the cluster.
    pub peak_rbc: f64,
    pub centroid: [f64; 3],
    #[serde(default)]
    pub best_roi: Option<u32>,
    #[serde(default)]
    pub best_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub dims: [usize; 3],
    pub clusters: Vec<Cluster>,
    /// Voxels passing the threshold.
    pub selected: usize,
    /// Selected voxels in components below the size limit.
    pub discarded: usize,
}

/// Selects voxels with two-sided `p ≤ 2·p_low`, split by the sign of rbc,
/// and keeps connected components of at least `min_size` voxels.
pub fn threshold_and_clusterize(stat: &GroupStatMap, p_low: f64, min_size: usize, conn: Connectivity) -> Result<ClusterReport> {
    if !(p_low > 0.0 && p_low <= 0.5) {
        return Err(config_err!("p_low must lie in (0, 0.5]"));
    }
    let dims = stat.dims;
    let mut clusters = Vec::new();
    let (mut selected, mut discarded) = (0, 0);
    for sign in [1i8, -1] {
        let sel: Vec<bool> = stat
            .p
            .iter()
            .zip(&stat.rbc)
            .map(|(&p, &r)| p <= 2.0 * p_low && r != 0.0 && (r > 0.0) == (sign > 0))
            .collect();
        selected += sel.iter().filter(|&&s| s).count();
        for comp in connected_components(&sel, dims, conn) {
            if comp.len() < min_size {
                discarded += comp.len();
                continue;
            }
            let mut centroid = [0.0; 3];
            for &i in &comp {
                centroid[0] += (i / (dims[1] * dims[2])) as f64;
                centroid[1] += ((i / dims[2]) % dims[1]) as f64;
                centroid[2] += (i % dims[2]) as f64;
            }
            centroid.iter_mut().for_each(|c| *c /= comp.len() as f64);
            let peak_rbc = comp.iter().map(|&i| stat.rbc[i]).fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
            clusters.push(Cluster { size: comp.len(), voxels: comp, sign, peak_rbc, centroid, best_roi: None, best_dice: None });
        }
    }
    Ok(ClusterReport { dims, clusters, selected, discarded })
}

/// `2|A∩B| / (|A|+|B|)`, zero when both masks are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("masks have {} and {} voxels", a.len(), b.len()));
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&y| y).count();
    Ok(if total == 0 { 0.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Annotates every cluster with the ROI of highest DICE and returns the
/// per-ROI maximum DICE over clusters.
pub fn atlas_overlap(report: &mut ClusterReport, atlas: &AtlasVolume) -> Result<BTreeMap<u32, f64>> {
    if atlas.dims != report.dims {
        return Err(shape_err!("atlas {:?} does not match report {:?}", atlas.dims, report.dims));
    }
    let n_rois = atlas.n_rois() as u32;
    let roi_sizes: Vec<usize> = (0..=n_rois).map(|r| atlas.labels.iter().filter(|&&l| l == r).count()).collect();
    let mut table = BTreeMap::new();
    for cl in report.clusters.iter_mut() {
        let mut inter = vec![0usize; n_rois as usize + 1];
        for &i in &cl.voxels {
            inter[atlas.labels[i] as usize] += 1;
        }
        let mut best: Option<(u32, f64)> = None;
        for roi in 1..=n_rois {
            let d = 2.0 * inter[roi as usize] as f64 / (cl.size + roi_sizes[roi as usize]) as f64;
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((roi, d));
            }
        }
        if let Some((roi, d)) = best {
            cl.best_roi = Some(roi);
            cl.best_dice = Some(d);
            let e = table.entry(roi).or_insert(0.0f64);
            *e = e.max(d);
        }
    }
    Ok(table)
}

/// Best-ROI DICE per representation dimension of one modality:
/// `dims[k]` maps ROI id → max DICE of dimension `k`'s clusters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiceTable {
    pub dims: BTreeMap<usize, BTreeMap<u32, f64>>,
}

impl DiceTable {
    /// Dimension with the highest DICE for `roi` (ties to the lower index).
    pub fn best_dim_for(&self, roi: u32) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (&k, rois) in &self.dims {
            if let Some(&d) = rois.get(&roi) {
                if d > 0.0 && best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((k, d));
                }
            }
        }
        best
    }

    pub fn rois_of(&self, dim: usize) -> Vec<u32> {
        self.dims.get(&dim).map(|m| m.iter().filter(|(_, &d)| d > 0.0).map(|(&r, _)| r).collect()).unwrap_or_default()
    }

    /// Keeps `(dimension, ROI)` entries present in at least `min_folds` of
    /// the per-fold tables, with the maximum DICE across folds.
    pub fn across_folds(tables: &[DiceTable], min_folds: usize) -> DiceTable {
        let mut count: BTreeMap<(usize, u32), (usize, f64)> = BTreeMap::new();
        for t in tables {
            for (&k, rois) in &t.dims {
                for (&r, &d) in rois {
                    let e = count.entry((k, r)).or_insert((0, 0.0));
                    e.0 += 1;
                    e.1 = e.1.max(d);
                }
            }
        }
        let mut out = DiceTable::default();
        for ((k, r), (n, d)) in count {
            if n >= min_folds {
                out.dims.entry(k).or_default().insert(r, d);
            }
        }
        out
    }
}

/// Pearson correlations between the columns of `a` and `b`; constant
/// columns yield NaN rows/columns and a warning.
pub fn pearson_matrix(a: &Mat, b: &Mat) -> Result<(Mat, Vec<String>)> {
    if a.rows != b.rows || a.rows < 2 {
        return Err(data_err!("correlation needs equal row counts of at least 2, got {} and {}", a.rows, b.rows));
    }
    let mut warnings = Vec::new();
    let standardize = |m: &Mat, tag: &str, warnings: &mut Vec<String>| -> Mat {
        let mut c = m.center_columns();
        for j in 0..c.cols {
            let norm = libm::sqrt((0..c.rows).map(|i| c.get(i, j) * c.get(i, j)).sum::<f64>());
            let constant = norm <= 1e-12 * (1.0 + (0..m.rows).map(|i| m.get(i, j).abs()).fold(0.0, f64::max));
            if constant {
                warnings.push(format!("{tag} dimension {j} is constant; its correlations are undefined and skipped"));
            }
            for i in 0..c.rows {
                let v = if constant { f64::NAN } else { c.get(i, j) / norm };
                c.set(i, j, v);
            }
        }
        c
    };
    let sa = standardize(a, "modality 1", &mut warnings);
    let sb = standardize(b, "modality 2", &mut warnings);
    let mut r = sa.t_matmul(&sb)?;
    r.data.iter_mut().for_each(|v| {
        if v.is_finite() {
            *v = v.clamp(-1.0, 1.0)
        }
    });
    Ok((r, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkEdge {
    pub roi_m1: u32,
    pub roi_m2: u32,
    pub weight: f64,
    pub dim_m1: usize,
    pub dim_m2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGraph {
    pub edges: Vec<LinkEdge>,
    pub top_k: usize,
    pub warnings: Vec<String>,
}

/// Links ROIs across modalities through correlated representation
/// dimensions.
///
/// For every ROI and modality the best-DICE dimension is the seed; its most
/// positively and most negatively correlated partner dimensions in the other
/// modality connect the ROI to every ROI attributed to the partner. Duplicate
/// ROI pairs keep the weight of largest magnitude; the `top_k` heaviest edges
/// are returned.
pub fn crossmodal_links(z1: &Mat, z2: &Mat, tables: [&DiceTable; 2], n_rois: u32, top_k: usize) -> Result<LinkGraph> {
    let (corr, warnings) = pearson_matrix(z1, z2)?;
    let mut best: BTreeMap<(u32, u32), LinkEdge> = BTreeMap::new();
    for m in 0..2 {
        let other = 1 - m;
        let partners_len = if m == 0 { corr.cols } else { corr.rows };
        for roi in 1..=n_rois {
            let Some((seed, _)) = tables[m].best_dim_for(roi) else { continue };
            let c = |j: usize| if m == 0 { corr.get(seed, j) } else { corr.get(j, seed) };
            let (mut pos, mut neg): (Option<(usize, f64)>, Option<(usize, f64)>) = (None, None);
            for j in 0..partners_len {
                let v = c(j);
                if !v.is_finite() {
                    continue;
                }
                if v > 0.0 && pos.is_none_or(|(_, p)| v > p) {
                    pos = Some((j, v));
                }
                if v < 0.0 && neg.is_none_or(|(_, n)| v < n) {
                    neg = Some((j, v));
                }
            }
            for (partner, w) in pos.into_iter().chain(neg) {
                for r2 in tables[other].rois_of(partner) {
                    let edge = if m == 0 {
                        LinkEdge { roi_m1: roi, roi_m2: r2, weight: w, dim_m1: seed, dim_m2: partner }
                    } else {
                        LinkEdge { roi_m1: r2, roi_m2: roi, weight: w, dim_m1: partner, dim_m2: seed }
                    };
                    let key = (edge.roi_m1, edge.roi_m2);
                    match best.get(&key) {
                        Some(e) if e.weight.abs() >= w.abs() => {}
                        _ => {
                            best.insert(key, edge);
                        }
                    }
                }
            }
        }
    }
    let mut edges: Vec<LinkEdge> = best.into_values().collect();
    edges.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()).then((a.roi_m1, a.roi_m2).cmp(&(b.roi_m1, b.roi_m2))));
    edges.truncate(top_k);
    Ok(LinkGraph { edges, top_k, warnings })
}
