//! Pretraining loop: batched forward of both modality networks, composed
//! objective, backprop, RAdam updates, validation loss and top-k checkpoints.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::linalg::Mat;
use crate::model::{EncoderSpec, GlobalHeadSpec, LocalHeadSpec, Model, ModelSpec};
use crate::nn::{Grads, ParameterSet};
use crate::objectives::{compose_with_grads, LossBreakdown, ModalityOutputs, ObjectiveSpec, Term, TermValue};
use crate::optim::{RAdam, RAdamConfig};
use crate::synth::{SplitSpec, VolumePair};
use crate::volume::{reflect_pad_crop_at, Volume};

const VALIDATION_SALT: u64 = 0x7A11_DA7E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub objective: ObjectiveSpec,
    pub seed: u64,
    pub checkpoint_k: usize,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderSpec,
    #[serde(default = "default_global_head")]
    pub global_head: GlobalHeadSpec,
    /// Hidden width of the local head's residual path.
    #[serde(default = "default_local_hidden")]
    pub local_hidden: usize,
    /// Random reflect-pad-and-crop augmentation during training.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Reflect padding per side; `None` uses `input_side / 8`.
    #[serde(default)]
    pub pad: Option<usize>,
    /// Classifier width for objectives with a cross-entropy term; `None`
    /// infers it from the labels.
    #[serde(default)]
    pub classes: Option<usize>,
}

fn default_encoder() -> EncoderSpec {
    EncoderSpec::desk_16()
}
fn default_global_head() -> GlobalHeadSpec {
    GlobalHeadSpec::Linear
}
fn default_local_hidden() -> usize {
    64
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Desk-scale defaults around `objective`.
    pub fn desk(objective: ObjectiveSpec) -> Self {
        Self {
            learning_rate: 4e-4,
            epochs: 20,
            batch_size: 8,
            objective,
            seed: 0,
            checkpoint_k: 10,
            encoder: default_encoder(),
            global_head: default_global_head(),
            local_hidden: default_local_hidden(),
            augment: true,
            pad: None,
            classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.encoder.validate()?;
        if self.objective.has_contrastive() && self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2 with contrastive terms, got {}", self.batch_size));
        }
        if self.batch_size == 0 || self.checkpoint_k == 0 || self.epochs == 0 {
            return Err(config_err!("batch_size, checkpoint_k and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err!("learning rate must be positive"));
        }
        if self.objective.critic.d != self.encoder.repr_dim {
            return Err(config_err!(
                "critic dimension {} differs from representation dimension {}",
                self.objective.critic.d,
                self.encoder.repr_dim
            ));
        }
        if self.pad() >= self.encoder.input_side {
            return Err(config_err!("pad must be smaller than the input side"));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.pad.unwrap_or(self.encoder.input_side / 8)
    }

    /// Per-modality architecture implied by the objective.
    pub fn model_spec(&self, classes: Option<usize>) -> ModelSpec {
        ModelSpec::for_objective(&self.encoder, &self.objective, self.global_head, self.local_hidden, classes)
    }
}

impl ModelSpec {
    /// Attaches exactly the heads the objective consumes: the local head for
    /// local critic terms, the global head for terms scoring globals, the
    /// decoder for reconstruction and the classifier for cross-entropy.
    pub fn for_objective(
        encoder: &EncoderSpec,
        objective: &ObjectiveSpec,
        global_head: GlobalHeadSpec,
        local_hidden: usize,
        classes: Option<usize>,
    ) -> Self {
        ModelSpec {
            encoder: encoder.clone(),
            local_head: objective
                .needs_local_head()
                .then_some(LocalHeadSpec { hidden: local_hidden, out_dim: encoder.repr_dim }),
            global_head: if objective.needs_global_head() { global_head } else { GlobalHeadSpec::Absent },
            decoder: objective.has(Term::AE),
            classes: if objective.has(Term::CE) { Some(classes.unwrap_or(2)) } else { None },
        }
    }
}

/// One retained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub validation_loss: f64,
    pub train_loss: f64,
    pub params: [ParameterSet; 2],
    pub model_spec: ModelSpec,
    pub objective: ObjectiveSpec,
}

impl CheckpointRecord {
    pub fn models(&self) -> Result<[Model; 2]> {
        Ok([
            Model::from_parts(&self.model_spec, self.params[0].clone())?,
            Model::from_parts(&self.model_spec, self.params[1].clone())?,
        ])
    }
}

/// Receives every record that enters the top-k set.
pub trait CheckpointSink {
    fn offer(&mut self, record: &CheckpointRecord) -> Result<()>;
}

/// Sink that keeps nothing.
pub struct NullSink;

impl CheckpointSink for NullSink {
    fn offer(&mut self, _record: &CheckpointRecord) -> Result<()> {
        Ok(())
    }
}

/// Keys of the best `k` entries, ascending by loss; ties keep the earlier
/// epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub entries: Vec<(f64, usize)>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self { k, entries: Vec::new() }
    }

    pub fn would_accept(&self, loss: f64) -> bool {
        self.entries.len() < self.k || self.entries.last().is_some_and(|&(worst, _)| loss < worst)
    }

    /// Inserts `(loss, id)`; returns `(accepted, evicted id)`.
    pub fn insert(&mut self, loss: f64, id: usize) -> (bool, Option<usize>) {
        if !self.would_accept(loss) {
            return (false, None);
        }
        let pos = self.entries.partition_point(|&(l, i)| l < loss || (l == loss && i < id));
        self.entries.insert(pos, (loss, id));
        let evicted = (self.entries.len() > self.k).then(|| self.entries.pop().unwrap().1);
        (true, evicted)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|&(_, i)| i).collect()
    }
}

/// Per-epoch bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation value of every reported term.
    pub terms: Vec<TermValue>,
}

/// One modality's retained forward state for a batch.
struct SampleTrace {
    enc: crate::model::EncoderTrace,
    local: Option<crate::model::LocalHeadTrace>,
    global: crate::model::GlobalHeadTrace,
    dec: Option<crate::model::DecoderTrace>,
}

fn forward_modality(model: &Model, batch: &[&Volume], spec: &ObjectiveSpec) -> Result<(ModalityOutputs, Vec<SampleTrace>)> {
    let d = model.spec.encoder.repr_dim;
    let b = batch.len();
    let mut z = Mat::zeros(b, d);
    let mut global = Mat::zeros(b, d);
    let mut locals = Vec::new();
    let mut recon = Vec::new();
    let mut logits: Option<Mat> = None;
    let mut traces = Vec::with_capacity(b);
    for (i, x) in batch.iter().enumerate() {
        let enc = model.encode_trace(x)?;
        z.row_mut(i).copy_from_slice(&enc.z);
        let (g, gt) = model.project_global(&enc.z)?;
        global.row_mut(i).copy_from_slice(&g);
        let local = if spec.needs_local_head() {
            let (l, lt) = model.project_local(&enc.locals(&model.spec.encoder))?;
            locals.push(l);
            Some(lt)
        } else {
            None
        };
        let dec = if model.has_decoder() {
            let (v, dt) = model.decode_trace(&enc.z)?;
            recon.push(v);
            Some(dt)
        } else {
            None
        };
        if model.has_classifier() {
            let l = model.classify(&enc.z)?;
            let m = logits.get_or_insert_with(|| Mat::zeros(b, l.len()));
            m.row_mut(i).copy_from_slice(&l);
        }
        traces.push(SampleTrace { enc, local, global: gt, dec });
    }
    let outputs = ModalityOutputs {
        z: Some(z),
        global: Some(global),
        locals: spec.needs_local_head().then_some(locals),
        recon: model.has_decoder().then_some(recon),
        input: model.has_decoder().then(|| batch.iter().map(|v| (*v).clone()).collect()),
        logits,
    };
    Ok((outputs, traces))
}

/// Composed loss on one batch and, if requested, parameter gradients of both
/// networks.
pub fn loss_and_grads(
    models: &[Model; 2],
    batch: [&[&Volume]; 2],
    labels: Option<&[usize]>,
    spec: &ObjectiveSpec,
    rng: &mut crate::Rng,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<[Grads; 2]>)> {
    if batch[0].len() != batch[1].len() || batch[0].is_empty() {
        return Err(data_err!("paired batch sizes {} and {} must match and be non-empty", batch[0].len(), batch[1].len()));
    }
    let (o0, t0) = forward_modality(&models[0], batch[0], spec)?;
    let (o1, t1) = forward_modality(&models[1], batch[1], spec)?;
    let lab = labels.map(|l| [l, l]);
    let (breakdown, mgrads) = compose_with_grads(spec, [&o0, &o1], lab, rng)?;
    if !want_grads {
        return Ok((breakdown, None));
    }
    let mut out = [models[0].params.zeros_like(), models[1].params.zeros_like()];
    for (m, traces) in [t0, t1].iter().enumerate() {
        let model = &models[m];
        let g = &mgrads[m];
        let grads = &mut out[m];
        for (i, tr) in traces.iter().enumerate() {
            let mut dz = match &g.z {
                Some(gz) => gz.row(i).to_vec(),
                None => vec![0.0; model.spec.encoder.repr_dim],
            };
            if let Some(gg) = &g.global {
                let back = model.project_global_backward(&tr.global, gg.row(i), grads);
                dz.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            if let (Some(gr), Some(dt)) = (&g.recon, &tr.dec) {
                let back = model.decode_backward(dt, &gr[i], grads)?;
                dz.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            if let Some(gl) = &g.logits {
                let back = model.classify_backward(&tr.enc.z, gl.row(i), grads)?;
                dz.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            let d_locals = match (&g.locals, &tr.local) {
                (Some(gl), Some(lt)) => Some(model.project_local_backward(lt, &gl[i], grads)?),
                _ => None,
            };
            model.encoder_backward(&tr.enc, &dz, d_locals.as_ref(), Some(grads), false)?;
        }
    }
    Ok((breakdown, Some(out)))
}

/// Splits `n` items into consecutive batches of `size`; a trailing batch of
/// one is merged into its predecessor so every batch has negatives.
pub fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = out.pop().unwrap();
        out.last_mut().unwrap().1 = e;
    }
    out
}

fn class_labels(pairs: &[&VolumePair]) -> Result<Vec<usize>> {
    pairs
        .iter()
        .map(|p| p.label.class().ok_or_else(|| data_err!("subject {} has no label", p.subject_id)))
        .collect()
}

/// Batch-size-weighted mean of the composed objective over `pairs`, in
/// index order, without augmentation and with a fixed anchor stream.
pub fn validation_loss(
    models: &[Model; 2],
    pairs: &[&VolumePair],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<TermValue>)> {
    if pairs.is_empty() {
        return Err(data_err!("validation set is empty"));
    }
    let mut rng = crate::rng_from_seed(cfg.seed ^ VALIDATION_SALT);
    let needs_labels = cfg.objective.has(Term::CE);
    let mut total = 0.0;
    let mut terms: Vec<TermValue> = Vec::new();
    for (s, e) in batch_bounds(pairs.len(), cfg.batch_size) {
        let chunk = &pairs[s..e];
        let v0: Vec<&Volume> = chunk.iter().map(|p| &p.volumes[0]).collect();
        let v1: Vec<&Volume> = chunk.iter().map(|p| &p.volumes[1]).collect();
        let labels = if needs_labels { Some(class_labels(chunk)?) } else { None };
        let (b, _) = loss_and_grads(models, [&v0, &v1], labels.as_deref(), &cfg.objective, &mut rng, false)?;
        let w = (e - s) as f64 / pairs.len() as f64;
        total += w * b.total;
        if terms.is_empty() {
            terms = b.terms.iter().map(|t| TermValue { value: 0.0, ..t.clone() }).collect();
        }
        for (acc, t) in terms.iter_mut().zip(&b.terms) {
            acc.value += w * t.value;
        }
    }
    Ok((total, terms))
}

fn infer_classes(pairs: &[&VolumePair]) -> usize {
    pairs.iter().filter_map(|p| p.label.class()).max().map_or(2, |c| (c + 1).max(2))
}

/// Subjects used for training and validation of `fold`; cross-entropy
/// objectives drop unlabeled subjects.
pub fn fold_subjects<'a>(
    pairs: &'a [VolumePair],
    split: &SplitSpec,
    fold: usize,
    objective: &ObjectiveSpec,
) -> Result<(Vec<&'a VolumePair>, Vec<&'a VolumePair>)> {
    if fold >= split.folds || split.assignment.len() != pairs.len() {
        return Err(config_err!("fold {fold} is not valid for a {}-fold split of {} subjects", split.folds, pairs.len()));
    }
    let keep = |p: &&VolumePair| !objective.has(Term::CE) || p.label.class().is_some();
    let train: Vec<&VolumePair> = split.train_members(fold).into_iter().map(|i| &pairs[i]).filter(keep).collect();
    let val: Vec<&VolumePair> = split.fold_members(fold).into_iter().map(|i| &pairs[i]).filter(keep).collect();
    Ok((train, val))
}

/// Trains both modality networks on every fold but `fold` and validates on
/// `fold`. Records entering the top-k set are passed to `sink`; the retained
/// records are returned sorted by validation loss.
pub fn pretrain(
    pairs: &[VolumePair],
    split: &SplitSpec,
    fold: usize,
    cfg: &TrainConfig,
    sink: &mut dyn CheckpointSink,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<CheckpointRecord>> {
    cfg.validate()?;
    let (train, val) = fold_subjects(pairs, split, fold, &cfg.objective)?;
    let min = if cfg.objective.has_contrastive() { 2 } else { 1 };
    if train.len() < min || val.is_empty() {
        return Err(data_err!("fold {fold} leaves {} training and {} validation subjects", train.len(), val.len()));
    }
    let side = cfg.encoder.input_side;
    if let Some(p) = pairs.iter().find(|p| p.volumes.iter().any(|v| v.dims != [side; 3])) {
        return Err(data_err!("subject {} does not match the encoder input side {side}", p.subject_id));
    }
    let classes = cfg.classes.unwrap_or_else(|| infer_classes(&train));
    let model_spec = cfg.model_spec(Some(classes));
    let mut models = [
        Model::build(&model_spec, cfg.seed.wrapping_mul(2).wrapping_add(1))?,
        Model::build(&model_spec, cfg.seed.wrapping_mul(2).wrapping_add(2))?,
    ];
    let opt_cfg = RAdamConfig { lr: cfg.learning_rate, ..RAdamConfig::default() };
    let mut opts = [RAdam::new(opt_cfg, &models[0].params), RAdam::new(opt_cfg, &models[1].params)];
    let mut rng = crate::rng_from_seed(cfg.seed);
    let pad = cfg.pad();
    let needs_labels = cfg.objective.has(Term::CE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut top = TopK::new(cfg.checkpoint_k);
    let mut kept: Vec<CheckpointRecord> = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for (s, e) in batch_bounds(order.len(), cfg.batch_size) {
            let chunk: Vec<&VolumePair> = order[s..e].iter().map(|&i| train[i]).collect();
            let mut views: [Vec<Volume>; 2] = [Vec::new(), Vec::new()];
            for p in &chunk {
                if cfg.augment && pad > 0 {
                    // One offset per subject keeps the modalities registered.
                    let span = 2 * pad;
                    let off = [0; 3].map(|_| rand::Rng::random_range(&mut rng, 0..=span));
                    for m in 0..2 {
                        views[m].push(reflect_pad_crop_at(&p.volumes[m], pad, side, off)?);
                    }
                } else {
                    for m in 0..2 {
                        views[m].push(p.volumes[m].clone());
                    }
                }
            }
            let r0: Vec<&Volume> = views[0].iter().collect();
            let r1: Vec<&Volume> = views[1].iter().collect();
            let labels = if needs_labels { Some(class_labels(&chunk)?) } else { None };
            let (b, grads) = loss_and_grads(&models, [&r0, &r1], labels.as_deref(), &cfg.objective, &mut rng, true)?;
            let grads = grads.expect("gradients requested");
            if !b.total.is_finite() || grads.iter().any(|g| g.tensors.iter().flatten().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, detail: alloc::format!("training loss {}", b.total) });
            }
            for m in 0..2 {
                opts[m].step(&mut models[m].params, &grads[m]);
            }
            train_loss += b.total * (e - s) as f64 / order.len() as f64;
        }
        let (val_loss, terms) = validation_loss(&models, &val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, detail: alloc::format!("validation loss {val_loss}") });
        }
        on_epoch(&EpochMetrics { epoch, train_loss, val_loss, terms });
        if top.would_accept(val_loss) {
            let record = CheckpointRecord {
                epoch,
                validation_loss: val_loss,
                train_loss,
                params: [models[0].params.clone(), models[1].params.clone()],
                model_spec: model_spec.clone(),
                objective: cfg.objective.clone(),
            };
            sink.offer(&record)?;
            let (_, evicted) = top.insert(val_loss, epoch);
            if let Some(ev) = evicted {
                kept.retain(|r| r.epoch != ev);
            }
            kept.push(record);
        }
    }
    let ranked = top.ids();
    kept.sort_by_key(|r| ranked.iter().position(|&e| e == r.epoch));
    Ok(kept)
}

/// Display name of the objective, for logs.
pub fn objective_label(cfg: &TrainConfig) -> String {
    cfg.objective.name()
}
