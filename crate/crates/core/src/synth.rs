//! Synthetic paired volumes with a known shared latent subspace, stratified
//! fold assignment and a labelled synthetic atlas.
//!
//! Each subject draws shared factors `s` and private factors `u¹`, `u²`.
//! Every factor owns one smooth Gaussian blob centred in an atlas ROI; the
//! ROI chosen for a factor differs between modalities, so the same shared
//! factor shows up at different places in the two volumes. The class label
//! is carried by the sign pattern of the designated shared factors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::volume::{minmax_rescale, Volume};

/// Generative configuration of the synthetic pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub shared_dim: usize,
    pub unique_dim: [usize; 2],
    pub n_classes: usize,
    pub class_signal_dims: Vec<usize>,
    pub noise_sigma: f64,
    pub volume_side: usize,
    pub seed: u64,
    /// Fraction of subjects emitted without a label.
    #[serde(default)]
    pub unlabeled_fraction: f64,
    /// Number of atlas ROIs.
    #[serde(default = "default_rois")]
    pub n_rois: usize,
    /// Blob amplitude of shared factors.
    #[serde(default = "default_shared_amp")]
    pub shared_amplitude: f64,
    /// Blob amplitude of modality-private factors.
    #[serde(default = "default_unique_amp")]
    pub unique_amplitude: f64,
}

fn default_rois() -> usize {
    8
}
fn default_shared_amp() -> f64 {
    1.0
}
fn default_unique_amp() -> f64 {
    1.5
}

impl Default for LatentSpec {
    fn default() -> Self {
        Self {
            shared_dim: 4,
            unique_dim: [2, 2],
            n_classes: 2,
            class_signal_dims: vec![0],
            noise_sigma: 0.1,
            volume_side: 16,
            seed: 0,
            unlabeled_fraction: 0.0,
            n_rois: default_rois(),
            shared_amplitude: default_shared_amp(),
            unique_amplitude: default_unique_amp(),
        }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shared_dim == 0 {
            return Err(config_err!("shared_dim must be at least 1"));
        }
        if !(2..=3).contains(&self.n_classes) {
            return Err(config_err!("n_classes must be 2 or 3"));
        }
        if self.class_signal_dims.is_empty() || self.class_signal_dims.iter().any(|&d| d >= self.shared_dim) {
            return Err(config_err!("class_signal_dims must be non-empty indices into the shared factors"));
        }
        if (1usize << self.class_signal_dims.len().min(16)) < self.n_classes {
            return Err(config_err!(
                "{} signal dims cannot encode {} classes by sign pattern",
                self.class_signal_dims.len(),
                self.n_classes
            ));
        }
        if self.volume_side < 16 || !self.volume_side.is_power_of_two() {
            return Err(config_err!("volume_side must be a power of two >= 16"));
        }
        for m in 0..2 {
            if self.shared_dim + self.unique_dim[m] > self.n_rois {
                return Err(config_err!(
                    "modality {} has {} factors but only {} ROIs",
                    m + 1,
                    self.shared_dim + self.unique_dim[m],
                    self.n_rois
                ));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return Err(config_err!("noise_sigma must be >= 0 and unlabeled_fraction in [0, 1)"));
        }
        Ok(())
    }
}

/// Subject label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Class(u8),
    Unlabeled,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c as usize),
            Label::Unlabeled => None,
        }
    }
}

/// One subject's paired volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumePair {
    pub subject_id: String,
    pub volumes: [Volume; 2],
    pub label: Label,
}

/// Generating factors of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectLatents {
    pub shared: Vec<f64>,
    pub unique: [Vec<f64>; 2],
}

/// Integer ROI map, 0 = background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
    pub roi_names: Vec<String>,
}

impl AtlasVolume {
    pub fn n_rois(&self) -> usize {
        self.roi_names.len()
    }

    pub fn brain_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }

    pub fn roi_mask(&self, roi: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == roi).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_rois() as u32;
        if self.labels.len() != self.dims.iter().product::<usize>() {
            return Err(config_err!("atlas label count does not match dims"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > k) {
            return Err(config_err!("atlas label {bad} exceeds ROI count {k}"));
        }
        for r in 1..=k {
            if !self.labels.contains(&r) {
                return Err(config_err!("ROI {r} is empty; ids must be contiguous"));
            }
        }
        Ok(())
    }
}

/// Fold membership of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Cv(usize),
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub folds: usize,
    pub assignment: Vec<Fold>,
}

impl SplitSpec {
    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        self.members(|f| f == Fold::Cv(fold))
    }

    pub fn holdout(&self) -> Vec<usize> {
        self.members(|f| f == Fold::Holdout)
    }

    /// Subjects of every CV fold except `fold`.
    pub fn train_members(&self, fold: usize) -> Vec<usize> {
        self.members(|f| matches!(f, Fold::Cv(k) if k != fold))
    }

    fn members(&self, pred: impl Fn(Fold) -> bool) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, &f)| pred(f)).map(|(i, _)| i).collect()
    }
}

/// Label-stratified assignment: a stratified hold-out set is drawn first,
/// the rest is spread over `folds` folds with per-stratum counts differing by
/// at most one. Unlabeled subjects form their own stratum.
pub fn stratified_split(labels: &[Label], folds: usize, holdout_frac: f64, seed: u64) -> Result<SplitSpec> {
    if folds == 0 {
        return Err(config_err!("need at least one fold"));
    }
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(config_err!("holdout fraction must lie in [0, 1)"));
    }
    let mut strata: Vec<(Label, Vec<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match strata.iter_mut().find(|(k, _)| *k == l) {
            Some((_, v)) => v.push(i),
            None => strata.push((l, vec![i])),
        }
    }
    strata.sort_by_key(|(l, _)| *l);
    let mut rng = crate::rng_from_seed(seed);
    let mut assignment = vec![Fold::Holdout; labels.len()];
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(strata.len());
    for (label, members) in strata.iter_mut() {
        members.shuffle(&mut rng);
        let n_hold = libm::round(members.len() as f64 * holdout_frac) as usize;
        if matches!(label, Label::Class(_)) && members.len() - n_hold < folds {
            return Err(config_err!(
                "class {:?} has {} members after hold-out, fewer than {folds} folds",
                label,
                members.len() - n_hold
            ));
        }
        pools.push(members[n_hold..].to_vec());
    }
    let n: usize = pools.iter().map(Vec::len).sum();
    let sizes: Vec<usize> = (0..folds).map(|f| n / folds + usize::from(f < n % folds)).collect();
    let counts = round_table(&pools.iter().map(Vec::len).collect::<Vec<_>>(), &sizes);
    for (pool, row) in pools.iter().zip(&counts) {
        let mut it = pool.iter();
        for (f, &c) in row.iter().enumerate() {
            for &i in it.by_ref().take(c) {
                assignment[i] = Fold::Cv(f);
            }
        }
    }
    Ok(SplitSpec { folds, assignment })
}

/// Integer table with row sums `rows` and column sums `cols` whose entries
/// are the floor or ceiling of `cols[f] * rows[k] / total`.
fn round_table(rows: &[usize], cols: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = rows.iter().sum();
    let (nr, nc) = (rows.len(), cols.len());
    let mut table = vec![vec![0usize; nc]; nr];
    // Cells whose target is fractional may take one extra unit.
    let mut open = vec![vec![false; nc]; nr];
    let mut row_need: Vec<usize> = rows.to_vec();
    let mut col_need: Vec<usize> = cols.to_vec();
    for k in 0..nr {
        for f in 0..nc {
            let num = cols[f] * rows[k];
            table[k][f] = num / total.max(1);
            open[k][f] = !num.is_multiple_of(total.max(1));
            row_need[k] -= table[k][f];
            col_need[f] -= table[k][f];
        }
    }
    // Bipartite b-matching of rows to columns by augmenting paths; the
    // fractional targets are a feasible flow, so an integral one exists.
    let mut used = vec![vec![false; nc]; nr];
    for k in 0..nr {
        while row_need[k] > 0 {
            let mut seen_r = vec![false; nr];
            let mut seen_c = vec![false; nc];
            let path = augment(k, &open, &used, &col_need, &mut seen_r, &mut seen_c);
            let Some(path) = path else { break };
            // path alternates: (row, col) add, (row, col) remove, ..., ends at a column with spare need.
            for (idx, &(r, c)) in path.iter().enumerate() {
                used[r][c] = idx % 2 == 0;
            }
            col_need[path.last().unwrap().1] -= 1;
            row_need[k] -= 1;
        }
    }
    debug_assert!(row_need.iter().all(|&r| r == 0), "rounding left rows unfilled");
    for k in 0..nr {
        for f in 0..nc {
            table[k][f] += usize::from(used[k][f]);
        }
    }
    table
}

fn augment(
    r: usize,
    open: &[Vec<bool>],
    used: &[Vec<bool>],
    col_need: &[usize],
    seen_r: &mut [bool],
    seen_c: &mut [bool],
) -> Option<Vec<(usize, usize)>> {
    seen_r[r] = true;
    for c in 0..col_need.len() {
        if !open[r][c] || used[r][c] || seen_c[c] {
            continue;
        }
        seen_c[c] = true;
        if col_need[c] > 0 {
            return Some(vec![(r, c)]);
        }
        for r2 in 0..open.len() {
            if used[r2][c] && !seen_r[r2] {
                if let Some(rest) = augment(r2, open, used, col_need, seen_r, seen_c) {
                    let mut path = vec![(r, c), (r2, c)];
                    path.extend(rest);
                    return Some(path);
                }
            }
        }
    }
    None
}

/// One subject row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub label: Label,
    pub fold: Fold,
    /// Volume file per modality, relative to the manifest directory.
    #[serde(default)]
    pub paths: Option<[String; 2]>,
}

/// Dataset description persisted next to the volume files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
    pub folds: usize,
    #[serde(default)]
    pub atlas_ref: Option<String>,
    #[serde(default)]
    pub roi_names: Vec<String>,
    #[serde(default)]
    pub generator_spec: Option<LatentSpec>,
}

impl DatasetManifest {
    pub fn split(&self) -> SplitSpec {
        SplitSpec { folds: self.folds, assignment: self.subjects.iter().map(|s| s.fold).collect() }
    }
}

/// Split configuration used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub folds: usize,
    pub holdout_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { folds: 5, holdout_frac: 0.0 }
    }
}

/// In-memory synthetic dataset with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: LatentSpec,
    pub pairs: Vec<VolumePair>,
    pub latents: Vec<SubjectLatents>,
    pub atlas: AtlasVolume,
    pub split: SplitSpec,
    /// ROI id hosting each factor, per modality: shared factors first, then
    /// the modality's private factors.
    pub factor_rois: [Vec<u32>; 2],
}

impl SyntheticDataset {
    pub fn labels(&self) -> Vec<Label> {
        self.pairs.iter().map(|p| p.label).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            subjects: self
                .pairs
                .iter()
                .zip(&self.split.assignment)
                .map(|(p, &fold)| SubjectEntry { subject_id: p.subject_id.clone(), label: p.label, fold, paths: None })
                .collect(),
            folds: self.split.folds,
            atlas_ref: None,
            roi_names: self.atlas.roi_names.clone(),
            generator_spec: Some(self.spec.clone()),
        }
    }
}

fn normal(rng: &mut crate::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Builds the synthetic atlas: ROIs are the Voronoi cells of `n_rois`
/// jittered seed points restricted to an ellipsoidal brain mask.
fn build_atlas(side: usize, n_rois: usize, rng: &mut crate::Rng) -> (AtlasVolume, Vec<[f64; 3]>) {
    let c = (side as f64 - 1.0) / 2.0;
    let radii = [0.42 * side as f64, 0.46 * side as f64, 0.46 * side as f64];
    let inside = |p: [f64; 3]| -> bool {
        (0..3).map(|a| ((p[a] - c) / radii[a]) * ((p[a] - c) / radii[a])).sum::<f64>() <= 1.0
    };
    // Seeds spread on a ring-and-poles pattern, then jittered.
    let mut seeds = Vec::with_capacity(n_rois);
    let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
    for i in 0..n_rois {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_rois as f64;
        let r = libm::sqrt(1.0 - y * y);
        let th = golden * i as f64;
        let scale = 0.55;
        let mut p = [
            c + scale * radii[0] * y,
            c + scale * radii[1] * r * libm::cos(th),
            c + scale * radii[2] * r * libm::sin(th),
        ];
        for v in p.iter_mut() {
            *v += rng.random_range(-0.05..0.05) * side as f64;
        }
        seeds.push(p);
    }
    let mut labels = vec![0u32; side * side * side];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let p = [z as f64, y as f64, x as f64];
                if !inside(p) {
                    continue;
                }
                let best = seeds
                    .iter()
                    .enumerate()
                    .map(|(k, s)| (k, (0..3).map(|a| (p[a] - s[a]) * (p[a] - s[a])).sum::<f64>()))
                    .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc })
                    .0;
                labels[(z * side + y) * side + x] = best as u32 + 1;
            }
        }
    }
    // Centroids of the realised cells host the factor blobs.
    let mut sums = vec![[0.0f64; 4]; n_rois];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            let s = &mut sums[l as usize - 1];
            s[0] += (i / (side * side)) as f64;
            s[1] += ((i / side) % side) as f64;
            s[2] += (i % side) as f64;
            s[3] += 1.0;
        }
    }
    let centers = sums
        .iter()
        .zip(&seeds)
        .map(|(s, seed)| if s[3] > 0.0 { [s[0] / s[3], s[1] / s[3], s[2] / s[3]] } else { *seed })
        .collect();
    let roi_names = (1..=n_rois).map(|k| format!("ROI{k:02}")).collect();
    (AtlasVolume { dims: [side; 3], labels, roi_names }, centers)
}

fn blob(side: usize, center: [f64; 3], sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; side * side * side];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = 0;
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let d2 = (z as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2) + (x as f64 - center[2]).powi(2);
                out[k] = libm::exp(-d2 * inv);
                k += 1;
            }
        }
    }
    out
}

/// Generates `n_subjects` pairs with a 5-fold split and no hold-out.
pub fn generate_dataset(spec: &LatentSpec, n_subjects: usize) -> Result<SyntheticDataset> {
    generate_dataset_with(spec, n_subjects, SplitConfig::default())
}

/// Fixed spatial layout of a dataset: atlas and per-factor blob bases.
struct Layout {
    atlas: AtlasVolume,
    brain: Vec<bool>,
    bases: [Vec<Vec<f64>>; 2],
    factor_rois: [Vec<u32>; 2],
}

/// Consumes `rng` for the layout before any subject is drawn.
fn build_layout(spec: &LatentSpec, rng: &mut crate::Rng) -> Layout {
    let side = spec.volume_side;
    let (atlas, centers) = build_atlas(side, spec.n_rois, rng);
    let brain = atlas.brain_mask();
    let mut factor_rois: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
    let mut bases: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let sigma = 0.12 * side as f64;
    for m in 0..2 {
        let mut rois: Vec<u32> = (1..=spec.n_rois as u32).collect();
        rois.shuffle(rng);
        rois.truncate(spec.shared_dim + spec.unique_dim[m]);
        for &r in &rois {
            bases[m].push(blob(side, centers[r as usize - 1], sigma));
        }
        factor_rois[m] = rois;
    }
    Layout { atlas, brain, bases, factor_rois }
}

fn balanced_labels(spec: &LatentSpec, n_subjects: usize, n_unlabeled: usize, rng: &mut crate::Rng) -> Vec<Label> {
    let mut labels: Vec<Label> = (0..n_subjects - n_unlabeled).map(|i| Label::Class((i % spec.n_classes) as u8)).collect();
    labels.extend(core::iter::repeat_n(Label::Unlabeled, n_unlabeled));
    labels.shuffle(rng);
    labels
}

fn draw_subject(
    spec: &LatentSpec,
    layout: &Layout,
    subject_id: String,
    label: Label,
    rng: &mut crate::Rng,
) -> Result<(VolumePair, SubjectLatents)> {
    let side = spec.volume_side;
    let pattern = match label {
        Label::Class(c) => c as usize,
        Label::Unlabeled => rng.random_range(0..spec.n_classes),
    };
    let mut shared: Vec<f64> = (0..spec.shared_dim).map(|_| normal(rng)).collect();
    for (bit, &d) in spec.class_signal_dims.iter().enumerate() {
        let magnitude = 0.5 + libm::fabs(normal(rng));
        shared[d] = if pattern >> bit & 1 == 1 { magnitude } else { -magnitude };
    }
    let unique = [
        (0..spec.unique_dim[0]).map(|_| normal(rng)).collect::<Vec<f64>>(),
        (0..spec.unique_dim[1]).map(|_| normal(rng)).collect::<Vec<f64>>(),
    ];
    let mut vols = Vec::with_capacity(2);
    for m in 0..2 {
        let mut data = vec![0.0; side * side * side];
        for (v, &b) in data.iter_mut().zip(&layout.brain) {
            if b {
                *v = 1.0;
            }
        }
        let weights = shared
            .iter()
            .map(|w| w * spec.shared_amplitude)
            .chain(unique[m].iter().map(|w| w * spec.unique_amplitude));
        for (w, basis) in weights.zip(&layout.bases[m]) {
            for (v, b) in data.iter_mut().zip(basis) {
                *v += w * b;
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in data.iter_mut() {
                *v += spec.noise_sigma * normal(rng);
            }
        }
        vols.push(minmax_rescale(&Volume::from_vec([side; 3], data)?)?);
    }
    let v2 = vols.pop().unwrap();
    let v1 = vols.pop().unwrap();
    Ok((VolumePair { subject_id, volumes: [v1, v2], label }, SubjectLatents { shared, unique }))
}

pub fn generate_dataset_with(spec: &LatentSpec, n_subjects: usize, split_cfg: SplitConfig) -> Result<SyntheticDataset> {
    spec.validate()?;
    let min = spec.n_classes * split_cfg.folds;
    if n_subjects < min {
        return Err(config_err!("need at least {min} subjects ({} classes x {} folds), got {n_subjects}", spec.n_classes, split_cfg.folds));
    }
    let mut rng = crate::rng_from_seed(spec.seed);
    let layout = build_layout(spec, &mut rng);

    let n_unlabeled = libm::round(spec.unlabeled_fraction * n_subjects as f64) as usize;
    if n_subjects - n_unlabeled < min {
        return Err(config_err!("only {} labeled subjects, need at least {min}", n_subjects - n_unlabeled));
    }
    let labels = balanced_labels(spec, n_subjects, n_unlabeled, &mut rng);

    let mut pairs = Vec::with_capacity(n_subjects);
    let mut latents = Vec::with_capacity(n_subjects);
    for (i, &label) in labels.iter().enumerate() {
        let (pair, lat) = draw_subject(spec, &layout, format!("sub-{i:04}"), label, &mut rng)?;
        pairs.push(pair);
        latents.push(lat);
    }
    let split = stratified_split(&labels, split_cfg.folds, split_cfg.holdout_frac, spec.seed ^ 0x5EED_5EED)?;
    let Layout { atlas, factor_rois, .. } = layout;
    Ok(SyntheticDataset { spec: spec.clone(), pairs, latents, atlas, split, factor_rois })
}

/// Draws `n_subjects` further labeled subjects with the spatial layout of the
/// dataset generated from `spec`, from an independent stream keyed by `seed`.
pub fn draw_cohort(spec: &LatentSpec, n_subjects: usize, seed: u64) -> Result<Vec<VolumePair>> {
    spec.validate()?;
    let layout = build_layout(spec, &mut crate::rng_from_seed(spec.seed));
    let mut rng = crate::rng_from_seed(seed ^ 0xC0_4027);
    let labels = balanced_labels(spec, n_subjects, 0, &mut rng);
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| draw_subject(spec, &layout, format!("ext-{i:04}"), l, &mut rng).map(|p| p.0))
        .collect()
}
