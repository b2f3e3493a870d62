//! Frozen-encoder probing: feature extraction, elastic-net multinomial
//! logistic regression under random hyperparameter search, ROC-AUC metrics,
//! checkpoint selection and CKA alignment.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, numeric_err, Result};
use crate::linalg::{spectral_norm_sym, Mat};
use crate::model::Model;
use crate::stats::u_statistic;
use crate::synth::{Label, VolumePair};

/// Classification task derived from subject labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Classes 0 and 1; other subjects are excluded.
    #[serde(rename = "2way")]
    TwoWay,
    /// Classes 0 and 1 plus unlabeled subjects as class 2.
    #[serde(rename = "3way")]
    ThreeWay,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::TwoWay => 2,
            Task::ThreeWay => 3,
        }
    }

    pub fn map(self, label: Label) -> Option<usize> {
        match (self, label) {
            (_, Label::Class(c)) if c < 2 => Some(c as usize),
            (Task::ThreeWay, Label::Unlabeled) => Some(2),
            (Task::ThreeWay, Label::Class(2)) => Some(2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::TwoWay => "2way",
            Task::ThreeWay => "3way",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "2way" => Some(Task::TwoWay),
            "3way" => Some(Task::ThreeWay),
            _ => None,
        }
    }
}

/// Global representations of evaluation subjects, one row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub z: Mat,
    pub subject_ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn n(&self) -> usize {
        self.z.rows
    }

    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            z: self.z.select_rows(idx),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Encoder `z` (before any projection head) of modality `modality` for the
/// subjects that belong to `task`.
pub fn extract_features(model: &Model, pairs: &[&VolumePair], modality: usize, task: Task) -> Result<FeatureMatrix> {
    if modality > 1 {
        return Err(config_err!("modality index {modality} out of range"));
    }
    let kept: Vec<(&VolumePair, usize)> = pairs.iter().filter_map(|p| task.map(p.label).map(|c| (*p, c))).collect();
    let d = model.spec.encoder.repr_dim;
    let mut z = Mat::zeros(kept.len(), d);
    for (i, (p, _)) in kept.iter().enumerate() {
        let row = model.encode(&p.volumes[modality])?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(numeric_err!("non-finite representation for subject {}", p.subject_id));
        }
        z.row_mut(i).copy_from_slice(&row);
    }
    Ok(FeatureMatrix {
        z,
        subject_ids: kept.iter().map(|(p, _)| p.subject_id.clone()).collect(),
        labels: kept.iter().map(|&(_, c)| c).collect(),
    })
}

/// Random-search configuration of the probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub trials: usize,
    pub c_min: f64,
    pub c_max: f64,
    pub l1_min: f64,
    pub l1_max: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { trials: 500, c_min: 1e-6, c_max: 1e3, l1_min: 0.0, l1_max: 1.0, seed: 0, max_iter: 2000, tol: 1e-6 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0
            || !(self.c_min > 0.0 && self.c_min <= self.c_max)
            || !(0.0 <= self.l1_min && self.l1_min <= self.l1_max && self.l1_max <= 1.0)
            || self.max_iter == 0
        {
            return Err(config_err!("probe needs trials >= 1, 0 < c_min <= c_max, 0 <= l1_min <= l1_max <= 1"));
        }
        Ok(())
    }

    /// The `(C, l1_ratio)` sequence; a longer search extends a shorter one.
    pub fn sample_trials(&self) -> Vec<(f64, f64)> {
        let mut rng = crate::rng_from_seed(self.seed);
        let (lo, hi) = (libm::log(self.c_min), libm::log(self.c_max));
        (0..self.trials)
            .map(|_| {
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                (libm::exp(lo + u * (hi - lo)), self.l1_min + v * (self.l1_max - self.l1_min))
            })
            .collect()
    }
}

/// Fitted multinomial logistic model on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `K × d` coefficients on standardized features.
    pub coef: Mat,
    pub intercept: Vec<f64>,
    pub iterations: usize,
}

impl LogisticModel {
    fn standardize(&self, x: &Mat) -> Mat {
        let mut out = x.clone();
        for r in 0..out.rows {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.scale[c];
            }
        }
        out
    }

    /// Class probabilities, `n × K`.
    pub fn predict_proba(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.mean.len() {
            return Err(config_err!("probe expects {} features, got {}", self.mean.len(), x.cols));
        }
        let xs = self.standardize(x);
        Ok(softmax_rows(&logits(&xs, &self.coef, &self.intercept)))
    }
}

fn logits(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        for k in 0..w.rows {
            out.data[i * w.rows + k] = b[k] + w.row(k).iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

fn softmax_rows(s: &Mat) -> Mat {
    let mut p = s.clone();
    for r in 0..p.rows {
        let row = p.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// Standardization statistics; constant columns get unit scale.
fn column_stats(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows as f64;
    let mut mean = vec![0.0; x.cols];
    let mut scale = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (c, v) in x.row(r).iter().enumerate() {
            mean[c] += v / n;
        }
    }
    for r in 0..x.rows {
        for (c, v) in x.row(r).iter().enumerate() {
            scale[c] += (v - mean[c]) * (v - mean[c]) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { libm::sqrt(*s) } else { 1.0 };
    }
    (mean, scale)
}

/// Data shared by every trial of one search.
struct Prepared {
    x: Mat,
    y: Vec<usize>,
    k: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Largest eigenvalue of `X̃ᵀX̃ / n` with the intercept column appended.
    gram_norm: f64,
}

fn prepare(x: &Mat, y: &[usize], k: usize) -> Result<Prepared> {
    if x.rows != y.len() || x.rows == 0 {
        return Err(data_err!("feature rows {} and labels {} must match and be non-empty", x.rows, y.len()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(data_err!("label {bad} outside {k} classes"));
    }
    let (mean, scale) = column_stats(x);
    let mut xs = x.clone();
    for r in 0..xs.rows {
        for (c, v) in xs.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[c]) / scale[c];
        }
    }
    let n = xs.rows;
    let mut aug = Mat::zeros(n, xs.cols + 1);
    for r in 0..n {
        aug.row_mut(r)[..xs.cols].copy_from_slice(xs.row(r));
        aug.row_mut(r)[xs.cols] = 1.0;
    }
    let mut gram = aug.t_matmul(&aug)?;
    gram.scale(1.0 / n as f64);
    let gram_norm = spectral_norm_sym(&gram, 200) * 1.01;
    Ok(Prepared { x: xs, y: y.to_vec(), k, mean, scale, gram_norm })
}

/// Elastic-net multinomial logistic regression minimizing
/// `(1/n)·Σ CE + (1/(C·n))·[ρ‖W‖₁ + (1−ρ)/2·‖W‖²]` (intercept unpenalized)
/// by FISTA with adaptive restart on standardized features.
pub fn fit_logistic(x: &Mat, y: &[usize], k: usize, c: f64, l1_ratio: f64, max_iter: usize, tol: f64) -> Result<LogisticModel> {
    let p = prepare(x, y, k)?;
    Ok(fit_prepared(&p, c, l1_ratio, max_iter, tol))
}

fn fit_prepared(p: &Prepared, c: f64, rho: f64, max_iter: usize, tol: f64) -> LogisticModel {
    let (n, d, k) = (p.x.rows, p.x.cols, p.k);
    let alpha = (1.0 - rho) / (c * n as f64);
    let beta = rho / (c * n as f64);
    let lip = 0.5 * p.gram_norm + alpha;
    let step = 1.0 / lip;
    // Parameters packed as [W (k×d), b (k)].
    let len = k * d + k;
    let mut theta = vec![0.0; len];
    let mut yk = theta.clone();
    let mut t = 1.0f64;
    let mut prev_obj = f64::INFINITY;
    let mut iterations = 0;
    let objective = |th: &[f64]| -> f64 {
        let w = Mat { rows: k, cols: d, data: th[..k * d].to_vec() };
        let s = logits(&p.x, &w, &th[k * d..]);
        let mut f = 0.0;
        for i in 0..n {
            let row = s.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            f += (lse - row[p.y[i]]) / n as f64;
        }
        let sq: f64 = th[..k * d].iter().map(|v| v * v).sum();
        let ab: f64 = th[..k * d].iter().map(|v| v.abs()).sum();
        f + 0.5 * alpha * sq + beta * ab
    };
    for it in 0..max_iter {
        iterations = it + 1;
        // Gradient of the smooth part at yk.
        let w = Mat { rows: k, cols: d, data: yk[..k * d].to_vec() };
        let prob = softmax_rows(&logits(&p.x, &w, &yk[k * d..]));
        let mut grad = vec![0.0; len];
        for i in 0..n {
            let xi = p.x.row(i);
            for cl in 0..k {
                let r = (prob.data[i * k + cl] - if p.y[i] == cl { 1.0 } else { 0.0 }) / n as f64;
                for (g, xv) in grad[cl * d..(cl + 1) * d].iter_mut().zip(xi) {
                    *g += r * xv;
                }
                grad[k * d + cl] += r;
            }
        }
        let mut next = vec![0.0; len];
        for j in 0..len {
            let v = yk[j] - step * (grad[j] + if j < k * d { alpha * yk[j] } else { 0.0 });
            next[j] = if j < k * d {
                let thr = step * beta;
                if v > thr {
                    v - thr
                } else if v < -thr {
                    v + thr
                } else {
                    0.0
                }
            } else {
                v
            };
        }
        let obj = objective(&next);
        let delta = next.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let size = next.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if obj > prev_obj {
            // Restart momentum from the last accepted point.
            t = 1.0;
            yk.copy_from_slice(&theta);
            continue;
        }
        let t_next = (1.0 + libm::sqrt(1.0 + 4.0 * t * t)) / 2.0;
        for j in 0..len {
            yk[j] = next[j] + (t - 1.0) / t_next * (next[j] - theta[j]);
        }
        theta = next;
        t = t_next;
        prev_obj = obj;
        if delta <= tol * size {
            break;
        }
    }
    LogisticModel {
        mean: p.mean.clone(),
        scale: p.scale.clone(),
        coef: Mat { rows: k, cols: d, data: theta[..k * d].to_vec() },
        intercept: theta[k * d..].to_vec(),
        iterations,
    }
}

/// Binary ROC-AUC: normalized Mann–Whitney `U` of positive against negative
/// scores.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(data_err!("{} scores for {} labels", scores.len(), positive.len()));
    }
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(data_err!("ROC-AUC needs both classes, got {} positive and {} negative", pos.len(), neg.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(data_err!("NaN score"));
    }
    Ok(u_statistic(&pos, &neg) / (pos.len() * neg.len()) as f64)
}

/// One-vs-one macro AUC: for every unordered class pair, the mean of the two
/// directed AUCs on the pair's samples; then the unweighted mean over pairs.
pub fn ovo_macro_auc(prob: &Mat, labels: &[usize]) -> Result<f64> {
    if prob.rows != labels.len() {
        return Err(data_err!("{} probability rows for {} labels", prob.rows, labels.len()));
    }
    let k = prob.cols;
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..k {
        for b in a + 1..k {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == a || labels[i] == b).collect();
            let pa: Vec<f64> = idx.iter().map(|&i| prob.get(i, a)).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| prob.get(i, b)).collect();
            let is_a: Vec<bool> = idx.iter().map(|&i| labels[i] == a).collect();
            let is_b: Vec<bool> = is_a.iter().map(|v| !v).collect();
            total += 0.5 * (roc_auc(&pa, &is_a)? + roc_auc(&pb, &is_b)?);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(data_err!("OVO AUC needs at least two classes"));
    }
    Ok(total / pairs as f64)
}

/// ROC-AUC for two classes, OVO-macro AUC otherwise.
pub fn task_metric(prob: &Mat, labels: &[usize]) -> Result<f64> {
    if prob.cols == 2 {
        let scores = prob.column(1);
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        roc_auc(&scores, &pos)
    } else {
        ovo_macro_auc(prob, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub c: f64,
    pub l1_ratio: f64,
    pub trial: usize,
    pub val_metric: f64,
    pub test_metric: Option<f64>,
    pub model: LogisticModel,
}

impl ProbeResult {
    /// Per-dimension coefficients of the class-1 logit relative to class 0.
    pub fn binary_betas(&self) -> Vec<f64> {
        let c = &self.model.coef;
        (0..c.cols).map(|j| c.get(1, j) - c.get(0, j)).collect()
    }
}

fn check_classes(f: &FeatureMatrix, k: usize, what: &str) -> Result<()> {
    for c in 0..k {
        if !f.labels.contains(&c) {
            return Err(data_err!("{what} split lacks class {c}; probing needs every class present"));
        }
    }
    Ok(())
}

/// Random search over `(C, l1_ratio)`; each trial is fitted on `train` and
/// scored on `val`; the first trial with the best validation metric wins and
/// is scored on `test` when given.
pub fn fit_probe(
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    test: Option<&FeatureMatrix>,
    k: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if k < 2 {
        return Err(config_err!("probe needs at least two classes"));
    }
    check_classes(train, k, "training")?;
    check_classes(val, k, "validation")?;
    let prepared = prepare(&train.z, &train.labels, k)?;
    let mut best: Option<ProbeResult> = None;
    for (trial, (c, l1)) in cfg.sample_trials().into_iter().enumerate() {
        let model = fit_prepared(&prepared, c, l1, cfg.max_iter, cfg.tol);
        let metric = task_metric(&model.predict_proba(&val.z)?, &val.labels)?;
        if best.as_ref().is_none_or(|b| metric > b.val_metric) {
            best = Some(ProbeResult { c, l1_ratio: l1, trial, val_metric: metric, test_metric: None, model });
        }
    }
    let mut best = best.expect("at least one trial");
    if let Some(t) = test {
        check_classes(t, k, "test")?;
        best.test_metric = Some(task_metric(&best.model.predict_proba(&t.z)?, &t.labels)?);
    }
    Ok(best)
}

/// Validation metrics of one checkpoint, one entry per modality considered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub epoch: usize,
    pub metrics: Vec<f64>,
}

/// Means closer than this are ties.
pub const SELECTION_TIE_TOL: f64 = 1e-12;

/// Epoch of the checkpoint with the largest mean metric; ties go to the
/// earliest epoch.
pub fn select_checkpoint(scores: &[CheckpointScore]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for s in scores {
        if s.metrics.is_empty() {
            return Err(data_err!("checkpoint {} has no metrics", s.epoch));
        }
        let mean = s.metrics.iter().sum::<f64>() / s.metrics.len() as f64;
        best = match best {
            None => Some((mean, s.epoch)),
            Some((m, _)) if mean > m + SELECTION_TIE_TOL => Some((mean, s.epoch)),
            Some((m, e)) if (mean - m).abs() <= SELECTION_TIE_TOL && s.epoch < e => Some((m.max(mean), s.epoch)),
            keep => keep,
        };
    }
    best.map(|(_, e)| e).ok_or_else(|| data_err!("no checkpoints to select from"))
}

/// `‖BᵀA‖²_F / (‖AᵀA‖_F · ‖BᵀB‖_F)`, optionally on column-centred inputs.
pub fn cka(a: &Mat, b: &Mat, centered: bool) -> Result<f64> {
    if a.rows != b.rows {
        return Err(data_err!("CKA needs equal row counts, got {} and {}", a.rows, b.rows));
    }
    let (a, b) = if centered { (a.center_columns(), b.center_columns()) } else { (a.clone(), b.clone()) };
    let num = b.t_matmul(&a)?.frobenius_sq();
    let den = a.t_matmul(&a)?.frobenius() * b.t_matmul(&b)?.frobenius();
    if !(den > 0.0) {
        return Err(numeric_err!("CKA undefined for a zero representation matrix"));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = crate::Rng::seed_from_u64(seed);
        Mat { rows: n, cols: d, data: (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect() }
    }

    fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_extremes_and_oracle() {
        let pos = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        let mut rng = crate::Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<f64> = (0..50).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
            let mut p: Vec<bool> = (0..50).map(|_| rng.random()).collect();
            p[0] = true;
            p[1] = false;
            assert!((roc_auc(&s, &p).unwrap() - brute_auc(&s, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn ovo_matches_pairwise_definition() {
        let prob = Mat::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.3, 0.3, 0.4],
            vec![0.5, 0.1, 0.4],
            vec![0.1, 0.6, 0.3],
            vec![0.2, 0.2, 0.6],
        ])
        .unwrap();
        let labels = [0, 1, 2, 2, 1, 0];
        let mut expect = 0.0;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let idx: Vec<usize> = (0..6).filter(|&i| labels[i] == a || labels[i] == b).collect();
            let sa: Vec<f64> = idx.iter().map(|&i| prob.get(i, a)).collect();
            let sb: Vec<f64> = idx.iter().map(|&i| prob.get(i, b)).collect();
            let pa: Vec<bool> = idx.iter().map(|&i| labels[i] == a).collect();
            let pb: Vec<bool> = pa.iter().map(|v| !v).collect();
            expect += (brute_auc(&sa, &pa) + brute_auc(&sb, &pb)) / 2.0 / 3.0;
        }
        assert!((ovo_macro_auc(&prob, &labels).unwrap() - expect).abs() < 1e-12);
    }

    fn clusters(k: usize, per: usize, seed: u64) -> FeatureMatrix {
        let mut z = gaussian(k * per, 8, seed);
        z.scale(0.3);
        let mut labels = Vec::new();
        for i in 0..k * per {
            let c = i % k;
            z.data[i * 8 + c] += 4.0;
            labels.push(c);
        }
        FeatureMatrix { z, subject_ids: (0..k * per).map(|i| alloc::format!("s{i}")).collect(), labels }
    }

    fn quick(seed: u64) -> ProbeConfig {
        ProbeConfig { trials: 20, seed, ..ProbeConfig::default() }
    }

    #[test]
    fn separable_probe_is_perfect() {
        let (tr, va, te) = (clusters(2, 20, 1), clusters(2, 10, 2), clusters(2, 10, 3));
        let r = fit_probe(&tr, &va, Some(&te), 2, &quick(0)).unwrap();
        assert_eq!(r.test_metric, Some(1.0));
        let (tr, va, te) = (clusters(3, 20, 4), clusters(3, 10, 5), clusters(3, 10, 6));
        let r = fit_probe(&tr, &va, Some(&te), 3, &quick(0)).unwrap();
        assert_eq!(r.test_metric, Some(1.0));
        assert!(r.model.coef.is_finite());
    }

    #[test]
    fn single_class_is_rejected() {
        let mut tr = clusters(2, 10, 1);
        tr.labels.iter_mut().for_each(|l| *l = 0);
        assert!(fit_probe(&tr, &clusters(2, 5, 2), None, 2, &quick(0)).is_err());
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        use rand::seq::SliceRandom;
        let mut aucs = Vec::new();
        for seed in 0..20 {
            let mut rng = crate::Rng::seed_from_u64(100 + seed);
            let mut sets = [clusters(2, 20, 3 * seed), clusters(2, 10, 3 * seed + 1), clusters(2, 20, 3 * seed + 2)];
            for s in sets.iter_mut() {
                s.labels.shuffle(&mut rng);
            }
            let r = fit_probe(&sets[0], &sets[1], Some(&sets[2]), 2, &quick(seed)).unwrap();
            aucs.push(r.test_metric.unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "mean shuffled AUC {mean}");
    }

    /// On a strictly convex problem FISTA reaches the stationarity condition
    /// of the penalized objective.
    #[test]
    fn solver_reaches_optimality_conditions() {
        let f = clusters(3, 15, 8);
        let mut y = f.labels.clone();
        y.swap(0, 1);
        let (c, rho) = (0.5, 0.3);
        let m = fit_logistic(&f.z, &y, 3, c, rho, 20000, 1e-12).unwrap();
        let p = prepare(&f.z, &y, 3).unwrap();
        let prob = softmax_rows(&logits(&p.x, &m.coef, &m.intercept));
        let n = p.x.rows as f64;
        let (alpha, beta) = ((1.0 - rho) / (c * n), rho / (c * n));
        for cl in 0..3 {
            let gb: f64 = (0..p.x.rows).map(|i| prob.get(i, cl) - f64::from(u8::from(y[i] == cl))).sum::<f64>() / n;
            assert!(gb.abs() < 1e-7);
            for j in 0..p.x.cols {
                let g: f64 = (0..p.x.rows)
                    .map(|i| (prob.get(i, cl) - f64::from(u8::from(y[i] == cl))) * p.x.get(i, j))
                    .sum::<f64>()
                    / n
                    + alpha * m.coef.get(cl, j);
                let w = m.coef.get(cl, j);
                if w != 0.0 {
                    assert!((g + beta * w.signum()).abs() < 1e-6, "{g} {w}");
                } else {
                    assert!(g.abs() <= beta + 1e-6);
                }
            }
        }
    }

    #[test]
    fn probe_is_deterministic_and_prefix_monotone() {
        let (tr, va) = (clusters(2, 15, 11), clusters(2, 8, 12));
        let mut noisy_tr = tr.clone();
        noisy_tr.z.scale(0.02);
        let a = fit_probe(&noisy_tr, &va, None, 2, &quick(4)).unwrap();
        let b = fit_probe(&noisy_tr, &va, None, 2, &quick(4)).unwrap();
        assert_eq!(a, b);
        let mut last = 0.0;
        for t in [1, 3, 7, 20] {
            let r = fit_probe(&noisy_tr, &va, None, 2, &ProbeConfig { trials: t, ..quick(4) }).unwrap();
            assert!(r.val_metric >= last);
            last = r.val_metric;
        }
    }

    #[test]
    fn selection_rules() {
        let one = [CheckpointScore { epoch: 7, metrics: vec![0.6] }];
        assert_eq!(select_checkpoint(&one).unwrap(), 7);
        let tie = [
            CheckpointScore { epoch: 9, metrics: vec![0.8, 0.8] },
            CheckpointScore { epoch: 4, metrics: vec![0.7, 0.9] },
        ];
        assert_eq!(select_checkpoint(&tie).unwrap(), 4);
        assert!(select_checkpoint(&[]).is_err());
        let mut rng = crate::Rng::seed_from_u64(2);
        for _ in 0..50 {
            let scores: Vec<CheckpointScore> = (0..10)
                .map(|e| CheckpointScore { epoch: 10 * e + 1, metrics: vec![rng.random_range(0..5) as f64 / 4.0, rng.random_range(0..5) as f64 / 4.0] })
                .collect();
            let means: Vec<f64> = scores.iter().map(|s| (s.metrics[0] + s.metrics[1]) / 2.0).collect();
            let top = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let oracle = scores.iter().zip(&means).filter(|(_, &m)| m == top).map(|(s, _)| s.epoch).min().unwrap();
            assert_eq!(select_checkpoint(&scores).unwrap(), oracle);
        }
    }

    #[test]
    fn cka_identities_and_oracle() {
        let z = gaussian(30, 6, 1);
        assert!((cka(&z, &z, false).unwrap() - 1.0).abs() < 1e-12);
        let mut scaled = z.clone();
        scaled.scale(3.5);
        assert!((cka(&z, &scaled, false).unwrap() - 1.0).abs() < 1e-12);
        // Orthogonal Q from a Householder reflection.
        let v: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let mut q = Mat::identity(6);
        for i in 0..6 {
            for j in 0..6 {
                q.data[i * 6 + j] -= 2.0 * v[i] * v[j] / vv;
            }
        }
        assert!((cka(&z, &z.matmul(&q).unwrap(), false).unwrap() - 1.0).abs() < 1e-12);
        assert!(cka(&z, &Mat::zeros(30, 6), false).is_err());
        // Independent Gaussians against the formula written with explicit sums.
        let (a, b) = (gaussian(200, 64, 2), gaussian(200, 64, 3));
        let gram = |x: &Mat, y: &Mat| -> f64 {
            let mut s = 0.0;
            for i in 0..x.cols {
                for j in 0..y.cols {
                    let mut dot = 0.0;
                    for r in 0..x.rows {
                        dot += x.get(r, i) * y.get(r, j);
                    }
                    s += dot * dot;
                }
            }
            s
        };
        let oracle = gram(&b, &a) / (gram(&a, &a).sqrt() * gram(&b, &b).sqrt());
        let v = cka(&a, &b, false).unwrap();
        assert!((v - oracle).abs() < 1e-10);
        assert!(v < 0.5);
    }

    proptest! {
        #[test]
        fn cka_symmetric_and_bounded(seed in 0u64..500, centered: bool) {
            let (a, b) = (gaussian(12, 4, seed), gaussian(12, 5, seed + 1000));
            let ab = cka(&a, &b, centered).unwrap();
            let ba = cka(&b, &a, centered).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }

        #[test]
        fn auc_invariant_under_monotone_maps(scores in proptest::collection::vec(-3.0f64..3.0, 4..40)) {
            let pos: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| libm::exp(2.0 * s) + 1.0).collect();
            prop_assert!((roc_auc(&scores, &pos).unwrap() - roc_auc(&mapped, &pos).unwrap()).abs() < 1e-12);
        }
    }
}
