//! Critic, InfoNCE estimator and the composable multi-scale objectives.
//!
//! Every mutual-information term is an InfoNCE bound over in-batch
//! negatives, scored by a scaled dot-product critic whose raw scores are
//! soft-clipped with `c·tanh(s/c)` and penalised by `λ·mean(s²)`. The
//! composed scalar that training minimises is
//!
//! `total = −Σ MI terms + Σ (reconstruction, cross-entropy, CCA) + penalty`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, numeric_err, shape_err, Error, Result};
use crate::linalg::{spd_inverse, Mat};
use crate::volume::Volume;

/// Critic constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Dimension of the critic space; scores are divided by `√d`.
    pub d: usize,
    pub clip_c: f64,
    pub penalty_lambda: f64,
    /// Whether the squared-score penalty also covers positive pairs.
    #[serde(default = "default_true")]
    pub penalize_positives: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { d: 64, clip_c: 20.0, penalty_lambda: 4e-2, penalize_positives: true }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !(self.clip_c > 0.0) || !(self.penalty_lambda >= 0.0) {
            return Err(config_err!("critic requires d > 0, clip_c > 0, penalty_lambda >= 0"));
        }
        Ok(())
    }
}

/// Scaled dot-product critic `xᵀy/√d`.
pub fn critic_score(x: &[f64], y: &[f64], cfg: &CriticConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape_err!("critic inputs of length {} and {}", x.len(), y.len()));
    }
    Ok(dot(x, y) / libm::sqrt(cfg.d as f64))
}

/// Soft clip `c·tanh(s/c)`.
pub fn clip_score(s: f64, cfg: &CriticConfig) -> f64 {
    cfg.clip_c * libm::tanh(s / cfg.clip_c)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE on an `N × N` matrix of (clipped) scores whose diagonal holds the
/// positive pairs:
/// `(1/N)·Σᵢ [sᵢᵢ − log((1/N)·Σ_{j≠i} exp sᵢⱼ)]`.
pub fn infonce(scores: &Mat) -> Result<f64> {
    Ok(infonce_with_grad(scores)?.0)
}

/// InfoNCE value and its gradient w.r.t. the score matrix.
pub fn infonce_with_grad(scores: &Mat) -> Result<(f64, Mat)> {
    let n = scores.rows;
    if scores.cols != n {
        return Err(shape_err!("score matrix must be square, got {}x{}", scores.rows, scores.cols));
    }
    if n < 2 {
        return Err(config_err!("InfoNCE needs at least 2 samples for a non-empty negative set"));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Mat::zeros(n, n);
    for i in 0..n {
        let row = scores.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &s)| libm::exp(s - max)).sum();
        let lse = max + libm::log(sum);
        value += row[i] - (lse - libm::log(n as f64));
        let g = grad.row_mut(i);
        for j in 0..n {
            g[j] = if j == i { inv_n } else { -inv_n * libm::exp(row[j] - lse) };
        }
    }
    Ok((value * inv_n, grad))
}

/// Objective terms of the taxonomy plus the baseline losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    /// Local ↔ global, same modality.
    CR,
    /// Global ↔ global across modalities.
    RR,
    /// Local ↔ global across modalities.
    XX,
    /// Local ↔ local across modalities.
    CC,
    /// Canonical-correlation alignment of the global representations.
    CCA,
    /// Autoencoding reconstruction error.
    AE,
    /// Supervised cross-entropy.
    CE,
}

impl Term {
    pub const ALL: [Term; 7] = [Term::CR, Term::RR, Term::XX, Term::CC, Term::CCA, Term::AE, Term::CE];

    pub fn is_mutual_information(self) -> bool {
        matches!(self, Term::CR | Term::RR | Term::XX | Term::CC)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Term::CR => "CR",
            Term::RR => "RR",
            Term::XX => "XX",
            Term::CC => "CC",
            Term::CCA => "CCA",
            Term::AE => "AE",
            Term::CE => "CE",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.iter().copied().find(|t| t.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One node of the objective taxonomy (or a baseline scheme).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub terms: Vec<Term>,
    #[serde(default = "default_true")]
    pub symmetrize: bool,
    #[serde(default = "default_modalities")]
    pub modalities: [String; 2],
    #[serde(default)]
    pub critic: CriticConfig,
}

fn default_modalities() -> [String; 2] {
    ["m1".to_string(), "m2".to_string()]
}

const NAMED_BASELINES: [(&str, &[Term]); 5] = [
    ("Supervised", &[Term::CE]),
    ("AE", &[Term::AE]),
    ("DCCAE", &[Term::CCA, Term::AE]),
    ("CR-CCA", &[Term::CR, Term::CCA]),
    ("RR-AE", &[Term::RR, Term::AE]),
];

impl ObjectiveSpec {
    pub fn new(terms: &[Term]) -> Result<Self> {
        let mut t = terms.to_vec();
        t.sort();
        t.dedup();
        let spec = Self { terms: t, symmetrize: true, modalities: default_modalities(), critic: CriticConfig::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_critic(mut self, critic: CriticConfig) -> Self {
        self.critic = critic;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(config_err!("objective must contain at least one term"));
        }
        self.critic.validate()
    }

    pub fn has(&self, t: Term) -> bool {
        self.terms.contains(&t)
    }

    pub fn has_contrastive(&self) -> bool {
        self.terms.iter().any(|t| t.is_mutual_information())
    }

    /// Unimodal objectives train each modality's encoder independently.
    pub fn is_unimodal(&self) -> bool {
        !self.terms.iter().any(|t| matches!(t, Term::RR | Term::XX | Term::CC | Term::CCA))
    }

    pub fn needs_local_head(&self) -> bool {
        self.has(Term::CR) || self.has(Term::XX) || self.has(Term::CC)
    }

    pub fn needs_global_head(&self) -> bool {
        self.has(Term::CR) || self.has(Term::XX) || self.has(Term::RR)
    }

    /// Canonical model name, e.g. `RR-XX`, `DCCAE`, `Supervised`.
    pub fn name(&self) -> String {
        let mut sorted = self.terms.clone();
        sorted.sort();
        for (name, terms) in NAMED_BASELINES {
            let mut t = terms.to_vec();
            t.sort();
            if t == sorted {
                return name.to_string();
            }
        }
        sorted.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("-")
    }

    /// Parses a model name (`RR-XX`, `XX-RR`, `DCCAE`, `Supervised`, ...).
    pub fn parse(name: &str) -> Result<Self> {
        if let Some((_, terms)) = NAMED_BASELINES.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)) {
            return Self::new(terms);
        }
        let mut terms = Vec::new();
        for tok in name.split(['-', ',', '+', ' ']).filter(|t| !t.is_empty()) {
            match Term::parse(tok) {
                Some(t) => terms.push(t),
                None => return Err(unknown_term(tok)),
            }
        }
        Self::new(&terms)
    }

    /// Advisory messages about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.terms == [Term::CC] {
            w.push(String::from(
                "CC alone never trains the layers after the local layer: the global representation behaves as a random projection",
            ));
        }
        if !self.symmetrize {
            w.push(String::from("asymmetric fusion: only the (1,2) direction of cross-modal terms is used"));
        }
        w
    }
}

fn unknown_term(tok: &str) -> Error {
    let nodes: Vec<String> = taxonomy().iter().chain(baselines().iter()).map(ObjectiveSpec::name).collect();
    config_err!("unknown objective term `{tok}`; valid models: {}", nodes.join(", "))
}

/// The 15 non-empty combinations of CR, XX, RR, CC.
pub fn taxonomy() -> Vec<ObjectiveSpec> {
    let base = [Term::CR, Term::RR, Term::XX, Term::CC];
    let mut out: Vec<Vec<Term>> = (1u32..16)
        .map(|mask| base.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &t)| t).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    out.into_iter().map(|t| ObjectiveSpec::new(&t).expect("non-empty")).collect()
}

/// The five baseline schemes: Supervised, AE, DCCAE, CR-CCA, RR-AE.
pub fn baselines() -> Vec<ObjectiveSpec> {
    NAMED_BASELINES.iter().map(|(_, t)| ObjectiveSpec::new(t).expect("non-empty")).collect()
}

/// Values entering the composed objective for one modality and one batch.
#[derive(Debug, Clone, Default)]
pub struct ModalityOutputs {
    /// Encoder output `z`, `B × d`.
    pub z: Option<Mat>,
    /// Projected globals `g(z)`, `B × d`.
    pub global: Option<Mat>,
    /// Projected locals `ℓ(c)`, one `S × d` matrix per sample.
    pub locals: Option<Vec<Mat>>,
    /// Decoder reconstructions.
    pub recon: Option<Vec<Volume>>,
    /// Decoder targets (the encoder inputs).
    pub input: Option<Vec<Volume>>,
    /// Classifier logits `B × K`.
    pub logits: Option<Mat>,
}

/// Gradients of the composed total w.r.t. each provided output.
#[derive(Debug, Clone, Default)]
pub struct ModalityGrads {
    pub z: Option<Mat>,
    pub global: Option<Mat>,
    pub locals: Option<Vec<Mat>>,
    pub recon: Option<Vec<Vec<f64>>>,
    pub logits: Option<Mat>,
}

/// One reported term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    /// Direction-qualified label such as `XX(1,2)` or `AE(2)`.
    pub label: String,
    pub term: Term,
    pub value: f64,
}

/// Per-term values of a composed objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<TermValue>,
    pub penalty: f64,
    pub total: f64,
    /// Anchor location per sample drawn for the CC terms.
    pub cc_anchors: Option<Vec<usize>>,
}

impl LossBreakdown {
    /// Recomputes the total from the parts.
    pub fn recomputed_total(&self) -> f64 {
        let parts: f64 = self
            .terms
            .iter()
            .map(|t| if t.term.is_mutual_information() { -t.value } else { t.value })
            .sum();
        parts + self.penalty
    }

    pub fn term(&self, label: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.label == label).map(|t| t.value)
    }

    /// Sum of every term of one kind, e.g. both XX directions.
    pub fn term_sum(&self, term: Term) -> f64 {
        self.terms.iter().filter(|t| t.term == term).map(|t| t.value).sum()
    }
}

/// Result of one InfoNCE block family with gradients of the MI value and of
/// the sum of squared raw scores.
struct NceOut {
    value: f64,
    d_queries: Vec<Mat>,
    d_keys: Mat,
    dsq_queries: Vec<Mat>,
    dsq_keys: Mat,
    sum_sq: f64,
    count: usize,
}

/// Averages InfoNCE over query locations: for each location `s`, the
/// `N × N` matrix `f(queries[i][s], keys[j])`.
fn nce_over_locations(queries: &[Mat], keys: &Mat, cfg: &CriticConfig) -> Result<NceOut> {
    let n = queries.len();
    if n < 2 {
        return Err(config_err!("contrastive terms need a batch of at least 2"));
    }
    if keys.rows != n {
        return Err(shape_err!("{} query samples but {} keys", n, keys.rows));
    }
    let s_count = queries[0].rows;
    let dim = keys.cols;
    for q in queries {
        if q.rows != s_count || q.cols != dim {
            return Err(shape_err!("query map {}x{} does not match {}x{}", q.rows, q.cols, s_count, dim));
        }
    }
    if s_count == 0 {
        return Err(shape_err!("query maps have no locations"));
    }
    let inv_sqrt_d = 1.0 / libm::sqrt(cfg.d as f64);
    let c = cfg.clip_c;
    let mut out = NceOut {
        value: 0.0,
        d_queries: queries.iter().map(|q| Mat::zeros(q.rows, q.cols)).collect(),
        d_keys: Mat::zeros(keys.rows, keys.cols),
        dsq_queries: queries.iter().map(|q| Mat::zeros(q.rows, q.cols)).collect(),
        dsq_keys: Mat::zeros(keys.rows, keys.cols),
        sum_sq: 0.0,
        count: 0,
    };
    let w = 1.0 / s_count as f64;
    let mut raw = Mat::zeros(n, n);
    let mut clipped = Mat::zeros(n, n);
    for s in 0..s_count {
        for i in 0..n {
            let q = queries[i].row(s);
            for j in 0..n {
                let r = dot(q, keys.row(j)) * inv_sqrt_d;
                raw.set(i, j, r);
                clipped.set(i, j, c * libm::tanh(r / c));
            }
        }
        let (v, g) = infonce_with_grad(&clipped)?;
        out.value += w * v;
        for i in 0..n {
            for j in 0..n {
                let r = raw.get(i, j);
                let sc = clipped.get(i, j) / c;
                // d(value)/d(raw) through the clip; d(r²)/d(raw) = 2r.
                let g_mi = w * g.get(i, j) * (1.0 - sc * sc);
                let penalized = cfg.penalize_positives || i != j;
                let g_sq = if penalized { 2.0 * r } else { 0.0 };
                if penalized {
                    out.sum_sq += r * r;
                    out.count += 1;
                }
                if g_mi == 0.0 && g_sq == 0.0 {
                    continue;
                }
                let q = queries[i].row(s);
                let k = keys.row(j);
                {
                    let dq = out.d_queries[i].row_mut(s);
                    for t in 0..dim {
                        dq[t] += g_mi * k[t] * inv_sqrt_d;
                    }
                }
                {
                    let dk = out.d_keys.row_mut(j);
                    for t in 0..dim {
                        dk[t] += g_mi * q[t] * inv_sqrt_d;
                    }
                }
                if g_sq != 0.0 {
                    let dq = out.dsq_queries[i].row_mut(s);
                    for t in 0..dim {
                        dq[t] += g_sq * k[t] * inv_sqrt_d;
                    }
                    let dk = out.dsq_keys.row_mut(j);
                    for t in 0..dim {
                        dk[t] += g_sq * q[t] * inv_sqrt_d;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn rows_as_maps(m: &Mat) -> Vec<Mat> {
    (0..m.rows).map(|i| Mat { rows: 1, cols: m.cols, data: m.row(i).to_vec() }).collect()
}

/// Intra-modal local ↔ global InfoNCE, averaged over locations.
pub fn loss_cr(locals_m: &[Mat], global_m: &Mat, cfg: &CriticConfig) -> Result<f64> {
    Ok(nce_over_locations(locals_m, global_m, cfg)?.value)
}

/// Cross-modal local (modality m) ↔ global (modality k) InfoNCE.
pub fn loss_xx(locals_m: &[Mat], global_k: &Mat, cfg: &CriticConfig) -> Result<f64> {
    Ok(nce_over_locations(locals_m, global_k, cfg)?.value)
}

/// Cross-modal global ↔ global InfoNCE on the `B × B` score matrix.
pub fn loss_rr(global_m: &Mat, global_k: &Mat, cfg: &CriticConfig) -> Result<f64> {
    Ok(nce_over_locations(&rows_as_maps(global_m), global_k, cfg)?.value)
}

/// Draws one anchor location per sample uniformly from `0..locations`.
pub fn sample_cc_anchors(batch: usize, locations: usize, rng: &mut crate::Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..locations)).collect()
}

fn cc_keys(locals_k: &[Mat], anchors: &[usize]) -> Result<Mat> {
    if anchors.len() != locals_k.len() {
        return Err(shape_err!("{} anchors for {} samples", anchors.len(), locals_k.len()));
    }
    let cols = locals_k.first().map_or(0, |m| m.cols);
    let mut keys = Mat::zeros(locals_k.len(), cols);
    for (j, (m, &a)) in locals_k.iter().zip(anchors).enumerate() {
        if a >= m.rows {
            return Err(shape_err!("anchor {a} outside {} locations", m.rows));
        }
        keys.row_mut(j).copy_from_slice(m.row(a));
    }
    Ok(keys)
}

/// Cross-modal local ↔ local InfoNCE with one sampled anchor location of
/// modality k per sample standing in for the global representation.
pub fn loss_cc(locals_m: &[Mat], locals_k: &[Mat], cfg: &CriticConfig, rng: &mut crate::Rng) -> Result<f64> {
    let t = locals_k.first().map_or(0, |m| m.rows);
    let anchors = sample_cc_anchors(locals_k.len(), t, rng);
    loss_cc_with_anchors(locals_m, locals_k, &anchors, cfg)
}

pub fn loss_cc_with_anchors(locals_m: &[Mat], locals_k: &[Mat], anchors: &[usize], cfg: &CriticConfig) -> Result<f64> {
    Ok(nce_over_locations(locals_m, &cc_keys(locals_k, anchors)?, cfg)?.value)
}

/// Ridge added to each side's covariance in the CCA surrogate.
pub const CCA_RIDGE: f64 = 1e-3;

struct CcaOut {
    value: f64,
    d_zm: Mat,
    d_zk: Mat,
}

fn cca_with_grad(zm: &Mat, zk: &Mat) -> Result<CcaOut> {
    if zm.rows != zk.rows {
        return Err(shape_err!("CCA batches of {} and {} rows", zm.rows, zk.rows));
    }
    let n = zm.rows;
    if n < 2 {
        return Err(config_err!("CCA needs a batch of at least 2"));
    }
    let norm = 1.0 / (n - 1) as f64;
    let xc = zm.center_columns();
    let yc = zk.center_columns();
    let mut a = xc.t_matmul(&xc)?;
    a.scale(norm);
    let mut b = yc.t_matmul(&yc)?;
    b.scale(norm);
    for i in 0..a.rows {
        a.data[i * a.cols + i] += CCA_RIDGE;
    }
    for i in 0..b.rows {
        b.data[i * b.cols + i] += CCA_RIDGE;
    }
    let mut m = xc.t_matmul(&yc)?;
    m.scale(norm);
    if !(a.is_finite() && b.is_finite() && m.is_finite()) {
        return Err(numeric_err!("non-finite covariance in CCA"));
    }
    let ai = spd_inverse(&a)?;
    let bi = spd_inverse(&b)?;
    // f = tr(A⁻¹ M B⁻¹ Mᵀ) = Σ squared canonical correlations.
    let p = ai.matmul(&m)?.matmul(&bi)?;
    let f: f64 = p.data.iter().zip(&m.data).map(|(x, y)| x * y).sum();
    let scale = 1.0 / zm.cols.min(zk.cols) as f64;
    let value = -f * scale;
    // ∂f/∂M = 2P, ∂f/∂A = −P B Pᵀ, ∂f/∂B = −Pᵀ A P.
    let ga = p.matmul(&b)?.matmul(&p.transpose())?;
    let gb = p.t_matmul(&a)?.matmul(&p)?;
    // Xc gradient: from A (2·Xc·G_A·norm, with G_A = −ga) and M (Yc·(2P)ᵀ·norm).
    let mut gx = xc.matmul(&ga)?;
    gx.scale(-2.0 * norm);
    let mut t = yc.matmul(&p.transpose())?;
    t.scale(2.0 * norm);
    gx.data.iter_mut().zip(&t.data).for_each(|(u, v)| *u += v);
    let mut gy = yc.matmul(&gb)?;
    gy.scale(-2.0 * norm);
    let mut t = xc.matmul(&p)?;
    t.scale(2.0 * norm);
    gy.data.iter_mut().zip(&t.data).for_each(|(u, v)| *u += v);
    // Centering backward and the −1/d scale.
    let uncenter = |g: &mut Mat| {
        let c = g.center_columns();
        *g = c;
        g.scale(-scale);
    };
    uncenter(&mut gx);
    uncenter(&mut gy);
    Ok(CcaOut { value, d_zm: gx, d_zk: gy })
}

/// Soft-CCA surrogate: minus the mean squared canonical correlation between
/// the two batches, `−tr(Σₘₘ⁻¹ Σₘₖ Σₖₖ⁻¹ Σₖₘ)/d` with ridge-regularised
/// covariances. Lies in `[−1, 0]`; invariant to orthogonal transforms of
/// either side.
pub fn loss_cca(zm: &Mat, zk: &Mat) -> Result<f64> {
    Ok(cca_with_grad(zm, zk)?.value)
}

/// Mean over the batch of the summed squared reconstruction error.
pub fn loss_ae(x: &[Volume], x_hat: &[Volume]) -> Result<f64> {
    Ok(ae_with_grad(x, x_hat)?.0)
}

fn ae_with_grad(x: &[Volume], x_hat: &[Volume]) -> Result<(f64, Vec<Vec<f64>>)> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(shape_err!("{} inputs vs {} reconstructions", x.len(), x_hat.len()));
    }
    let n = x.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(x.len());
    for (a, b) in x.iter().zip(x_hat) {
        if !a.same_shape(b) {
            return Err(shape_err!("input {:?} vs reconstruction {:?}", a.dims, b.dims));
        }
        let mut g = Vec::with_capacity(a.len());
        for (u, v) in a.data.iter().zip(&b.data) {
            let d = v - u;
            value += d * d;
            g.push(2.0 * d / n);
        }
        grads.push(g);
    }
    Ok((value / n, grads))
}

/// Mean negative log-softmax of the true class.
pub fn loss_supervised(logits: &Mat, labels: &[usize]) -> Result<f64> {
    Ok(ce_with_grad(logits, labels)?.0)
}

fn ce_with_grad(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    if logits.rows != labels.len() || labels.is_empty() {
        return Err(shape_err!("{} logit rows for {} labels", logits.rows, labels.len()));
    }
    let k = logits.cols;
    let n = labels.len() as f64;
    let mut value = 0.0;
    let mut grad = Mat::zeros(logits.rows, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(crate::error::data_err!("label {y} outside 0..{k} (unlabeled samples must be filtered)"));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        value += lse - row[y];
        let g = grad.row_mut(i);
        for c in 0..k {
            g[c] = (libm::exp(row[c] - lse) - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((value / n, grad))
}

fn need<'a, T>(v: &'a Option<T>, term: Term, what: &str, m: usize) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| config_err!("term {term} needs {what} for modality {}", m + 1))
}

fn add_into(dst: &mut Option<Mat>, src: &Mat, scale: f64) {
    let d = dst.get_or_insert_with(|| Mat::zeros(src.rows, src.cols));
    for (a, b) in d.data.iter_mut().zip(&src.data) {
        *a += scale * b;
    }
}

fn add_maps(dst: &mut Option<Vec<Mat>>, src: &[Mat], scale: f64) {
    let d = dst.get_or_insert_with(|| src.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect());
    for (dm, sm) in d.iter_mut().zip(src) {
        for (a, b) in dm.data.iter_mut().zip(&sm.data) {
            *a += scale * b;
        }
    }
}

struct PendingNce {
    out: NceOut,
    queries: (usize, Slot),
    keys: (usize, Slot),
}

#[derive(Clone, Copy)]
enum Slot {
    Global,
    Locals,
    /// Keys gathered from sampled local anchors.
    Anchors,
    /// Queries formed from the rows of the projected globals.
    GlobalRows,
}

/// Evaluates the composed objective.
pub fn compose(
    spec: &ObjectiveSpec,
    outputs: [&ModalityOutputs; 2],
    labels: Option<[&[usize]; 2]>,
    rng: &mut crate::Rng,
) -> Result<LossBreakdown> {
    Ok(compose_with_grads(spec, outputs, labels, rng)?.0)
}

/// Evaluates the composed objective and its gradient w.r.t. every output
/// that entered it.
pub fn compose_with_grads(
    spec: &ObjectiveSpec,
    outputs: [&ModalityOutputs; 2],
    labels: Option<[&[usize]; 2]>,
    rng: &mut crate::Rng,
) -> Result<(LossBreakdown, [ModalityGrads; 2])> {
    spec.validate()?;
    let cfg = &spec.critic;
    let mut terms = Vec::new();
    let mut grads = [ModalityGrads::default(), ModalityGrads::default()];
    let mut pending: Vec<PendingNce> = Vec::new();
    let mut total = 0.0;
    let directions: &[(usize, usize)] = if spec.symmetrize { &[(0, 1), (1, 0)] } else { &[(0, 1)] };

    if spec.has(Term::CR) {
        for m in 0..2 {
            let locals = need(&outputs[m].locals, Term::CR, "projected locals", m)?;
            let global = need(&outputs[m].global, Term::CR, "projected globals", m)?;
            let out = nce_over_locations(locals, global, cfg)?;
            terms.push(TermValue { label: format!("CR({})", m + 1), term: Term::CR, value: out.value });
            pending.push(PendingNce { out, queries: (m, Slot::Locals), keys: (m, Slot::Global) });
        }
    }
    if spec.has(Term::RR) {
        for &(m, k) in directions {
            let gm = need(&outputs[m].global, Term::RR, "projected globals", m)?;
            let gk = need(&outputs[k].global, Term::RR, "projected globals", k)?;
            let out = nce_over_locations(&rows_as_maps(gm), gk, cfg)?;
            terms.push(TermValue { label: format!("RR({},{})", m + 1, k + 1), term: Term::RR, value: out.value });
            pending.push(PendingNce { out, queries: (m, Slot::GlobalRows), keys: (k, Slot::Global) });
        }
    }
    if spec.has(Term::XX) {
        for &(m, k) in directions {
            let lm = need(&outputs[m].locals, Term::XX, "projected locals", m)?;
            let gk = need(&outputs[k].global, Term::XX, "projected globals", k)?;
            let out = nce_over_locations(lm, gk, cfg)?;
            terms.push(TermValue { label: format!("XX({},{})", m + 1, k + 1), term: Term::XX, value: out.value });
            pending.push(PendingNce { out, queries: (m, Slot::Locals), keys: (k, Slot::Global) });
        }
    }
    let mut cc_anchors = None;
    if spec.has(Term::CC) {
        let l0 = need(&outputs[0].locals, Term::CC, "projected locals", 0)?;
        let l1 = need(&outputs[1].locals, Term::CC, "projected locals", 1)?;
        let t0 = l0.first().map_or(0, |m| m.rows);
        let t1 = l1.first().map_or(0, |m| m.rows);
        if t0 != t1 || t0 == 0 {
            return Err(config_err!("CC needs equally sized local maps, got {t0} and {t1} locations"));
        }
        // One anchor index per sample, shared by both directions, so the
        // composed value does not depend on modality order.
        let anchors = sample_cc_anchors(l0.len(), t0, rng);
        for &(m, k) in directions {
            let lm = if m == 0 { l0 } else { l1 };
            let lk = if k == 0 { l0 } else { l1 };
            let keys = cc_keys(lk, &anchors)?;
            let out = nce_over_locations(lm, &keys, cfg)?;
            terms.push(TermValue { label: format!("CC({},{})", m + 1, k + 1), term: Term::CC, value: out.value });
            pending.push(PendingNce { out, queries: (m, Slot::Locals), keys: (k, Slot::Anchors) });
        }
        cc_anchors = Some(anchors);
    }

    // Penalty over every raw score used above.
    let (sum_sq, count) = pending.iter().fold((0.0, 0usize), |(s, c), p| (s + p.out.sum_sq, c + p.out.count));
    let penalty = if count > 0 { cfg.penalty_lambda * sum_sq / count as f64 } else { 0.0 };
    let pen_scale = if count > 0 { cfg.penalty_lambda / count as f64 } else { 0.0 };
    for (m, out) in outputs.iter().enumerate() {
        if let (true, Some(l)) = (spec.needs_local_head(), &out.locals) {
            grads[m].locals = Some(l.iter().map(|x| Mat::zeros(x.rows, x.cols)).collect());
        }
    }
    for p in &pending {
        total -= p.out.value;
        // d(total) = −d(MI) + pen_scale·d(Σ r²)
        scatter(&mut grads, p.queries, &p.out.d_queries, None, -1.0, cc_anchors.as_deref());
        scatter(&mut grads, p.queries, &p.out.dsq_queries, None, pen_scale, cc_anchors.as_deref());
        scatter(&mut grads, p.keys, &[], Some(&p.out.d_keys), -1.0, cc_anchors.as_deref());
        scatter(&mut grads, p.keys, &[], Some(&p.out.dsq_keys), pen_scale, cc_anchors.as_deref());
    }

    if spec.has(Term::CCA) {
        for &(m, k) in directions {
            let zm = need(&outputs[m].z, Term::CCA, "representations", m)?;
            let zk = need(&outputs[k].z, Term::CCA, "representations", k)?;
            let out = cca_with_grad(zm, zk)?;
            terms.push(TermValue { label: format!("CCA({},{})", m + 1, k + 1), term: Term::CCA, value: out.value });
            total += out.value;
            add_into(&mut grads[m].z, &out.d_zm, 1.0);
            add_into(&mut grads[k].z, &out.d_zk, 1.0);
        }
    }
    if spec.has(Term::AE) {
        for m in 0..2 {
            let x = need(&outputs[m].input, Term::AE, "decoder targets", m)?;
            let xh = need(&outputs[m].recon, Term::AE, "reconstructions", m)?;
            let (v, g) = ae_with_grad(x, xh)?;
            terms.push(TermValue { label: format!("AE({})", m + 1), term: Term::AE, value: v });
            total += v;
            grads[m].recon = Some(g);
        }
    }
    if spec.has(Term::CE) {
        let labels = labels.ok_or_else(|| config_err!("term CE needs labels"))?;
        for m in 0..2 {
            let logits = need(&outputs[m].logits, Term::CE, "classifier logits", m)?;
            let (v, g) = ce_with_grad(logits, labels[m])?;
            terms.push(TermValue { label: format!("CE({})", m + 1), term: Term::CE, value: v });
            total += v;
            grads[m].logits = Some(g);
        }
    }
    total += penalty;
    if !total.is_finite() {
        return Err(numeric_err!("composed loss is not finite"));
    }
    Ok((LossBreakdown { terms, penalty, total, cc_anchors }, grads))
}

fn scatter(
    grads: &mut [ModalityGrads; 2],
    slot: (usize, Slot),
    maps: &[Mat],
    rows: Option<&Mat>,
    scale: f64,
    anchors: Option<&[usize]>,
) {
    let (m, kind) = slot;
    match kind {
        Slot::Locals => add_maps(&mut grads[m].locals, maps, scale),
        Slot::GlobalRows => {
            let b = maps.len();
            let cols = maps.first().map_or(0, |x| x.cols);
            let mut flat = Mat::zeros(b, cols);
            for (i, mp) in maps.iter().enumerate() {
                flat.row_mut(i).copy_from_slice(mp.row(0));
            }
            add_into(&mut grads[m].global, &flat, scale);
        }
        Slot::Global => {
            if let Some(r) = rows {
                add_into(&mut grads[m].global, r, scale);
            }
        }
        Slot::Anchors => {
            if let (Some(r), Some(anchors)) = (rows, anchors) {
                let Some(g) = grads[m].locals.as_mut() else { return };
                for (j, &a) in anchors.iter().enumerate() {
                    let dst = g[j].row_mut(a);
                    for (x, y) in dst.iter_mut().zip(r.row(j)) {
                        *x += scale * y;
                    }
                }
            }
        }
    }
}
