//! Pipeline commands. Each writes its artifacts into an experiment directory
//! and is byte-for-byte reproducible for identical inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use msc_core::eval::{cka, extract_features, fit_probe, select_checkpoint, CheckpointScore, FeatureMatrix, ProbeResult, Task};
use msc_core::model::Model;
use msc_core::objectives::{baselines, taxonomy};
use msc_core::saliency::{
    atlas_overlap, crossmodal_links, group_stats, integrated_gradients, postprocess, threshold_and_clusterize, ClusterReport,
    DiceTable, LinkGraph,
};
use msc_core::synth::{generate_dataset_with, Label, VolumePair};
use msc_core::trainer::{pretrain, CheckpointRecord, EpochMetrics};
use msc_core::Volume;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStore;
use crate::config::{DimSelection, ExperimentConfig};
use crate::dataset::{load_dataset, read_json, write_dataset, write_json, LoadedDataset};
use crate::error::{Error, Result};
use crate::format::write_volume;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CKA_FILE: &str = "cka.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn results_file(task: Task) -> String {
    format!("results_{}.csv", task.as_str())
}

fn selection_file(task: Task) -> String {
    format!("selection_{}.json", task.as_str())
}

/// Contents of an experiment's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub model: String,
    pub fold: usize,
    pub config: ExperimentConfig,
}

/// Probe outcome of the selected checkpoint, persisted for later commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub checkpoint_id: usize,
    pub task: Task,
    pub probes: Vec<ProbeResult>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))
}

fn csv_row(w: &mut csv::Writer<fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| Error::format(path, e.to_string()))
}

fn csv_flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    io(path, w.flush())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Loads the configured manifest, or synthesizes the dataset in memory.
pub fn resolve_dataset(cfg: &ExperimentConfig) -> Result<LoadedDataset> {
    match &cfg.data.manifest {
        Some(path) => load_dataset(path),
        None => Ok(LoadedDataset::from_synthetic(generate_dataset_with(&cfg.data.latent, cfg.data.n_subjects, cfg.data.split)?)),
    }
}

/// Writes a synthetic dataset under `out`; returns the manifest path.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let ds = generate_dataset_with(&cfg.data.latent, cfg.data.n_subjects, cfg.data.split)?;
    let path = write_dataset(&ds, out)?;
    log::info!("wrote {} subjects to {}", ds.pairs.len(), out.display());
    Ok(path)
}

/// Pretrains the configured objective on every fold but `fold`; `out`
/// becomes the experiment directory.
pub fn cmd_pretrain(cfg: &ExperimentConfig, fold: usize, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let train_cfg = cfg.train_config()?;
    for w in train_cfg.objective.warnings() {
        log::warn!("{w}");
    }
    let data = resolve_dataset(cfg)?;
    let split = data.split();
    if fold >= split.folds {
        return Err(Error::Config(format!("fold {fold} out of range: the dataset has {} folds", split.folds)));
    }
    io(out, fs::create_dir_all(out))?;
    let mut stored = cfg.clone();
    if let Some(m) = &stored.data.manifest {
        stored.data.manifest = Some(io(m, fs::canonicalize(m))?);
    }
    let model = train_cfg.objective.name();
    write_json(&out.join(CONFIG_FILE), &ExperimentRecord { model: model.clone(), fold, config: stored })?;

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    if ckpt_dir.exists() {
        io(&ckpt_dir, fs::remove_dir_all(&ckpt_dir))?;
    }
    let mut store = CheckpointStore::open(&ckpt_dir, train_cfg.checkpoint_k)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut writer = csv_writer(&metrics_path)?;
    let mut write_err: Option<Error> = None;
    let mut on_epoch = |m: &EpochMetrics| {
        log::info!("{model} fold {fold} epoch {}: train {:.6} val {:.6}", m.epoch, m.train_loss, m.val_loss);
        if write_err.is_some() {
            return;
        }
        let mut rows = Vec::new();
        if m.epoch == 1 {
            let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into()];
            header.extend(m.terms.iter().map(|t| t.label.clone()));
            rows.push(header);
        }
        let mut row = vec![m.epoch.to_string(), m.train_loss.to_string(), m.val_loss.to_string()];
        row.extend(m.terms.iter().map(|t| t.value.to_string()));
        rows.push(row);
        for r in rows {
            if let Err(e) = csv_row(&mut writer, &metrics_path, &r) {
                write_err = Some(e);
            }
        }
    };
    pretrain(&data.pairs, &split, fold, &train_cfg, &mut store, &mut on_epoch)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    csv_flush(writer, &metrics_path)?;
    Ok(out.to_path_buf())
}

/// An experiment directory with its dataset loaded.
pub struct Experiment {
    pub dir: PathBuf,
    pub record: ExperimentRecord,
    pub data: LoadedDataset,
    pub store: CheckpointStore,
}

impl Experiment {
    pub fn open(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::Missing { what: "experiment config", path: cfg_path, producer: "pretrain" });
        }
        let record: ExperimentRecord = read_json(&cfg_path)?;
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        if !ckpt_dir.exists() {
            return Err(Error::Missing { what: "checkpoint directory", path: ckpt_dir, producer: "pretrain" });
        }
        let store = CheckpointStore::open(&ckpt_dir, record.config.train.checkpoint_k)?;
        if store.is_empty() {
            return Err(Error::Missing { what: "checkpoints", path: ckpt_dir, producer: "pretrain" });
        }
        let data = resolve_dataset(&record.config)?;
        Ok(Self { dir: dir.to_path_buf(), record, data, store })
    }

    fn pick(&self, idx: &[usize]) -> Vec<&VolumePair> {
        idx.iter().map(|&i| &self.data.pairs[i]).collect()
    }

    pub fn train_pairs(&self) -> Vec<&VolumePair> {
        self.pick(&self.data.split().train_members(self.record.fold))
    }

    pub fn val_pairs(&self) -> Vec<&VolumePair> {
        self.pick(&self.data.split().fold_members(self.record.fold))
    }

    pub fn holdout_pairs(&self) -> Vec<&VolumePair> {
        self.pick(&self.data.split().holdout())
    }

    /// Hold-out subjects, or the validation fold when there is no hold-out.
    pub fn eval_pairs(&self) -> Vec<&VolumePair> {
        let h = self.holdout_pairs();
        if h.is_empty() {
            self.val_pairs()
        } else {
            h
        }
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.record.config.objective_spec().map(|o| o.modalities.to_vec()).unwrap_or_else(|_| vec!["m1".into(), "m2".into()])
    }

    pub fn selection(&self, task: Task) -> Result<Option<Selection>> {
        let p = self.dir.join(selection_file(task));
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Probe-selected checkpoint for `task`, else the lowest validation loss.
    pub fn selected_record(&self, task: Task) -> Result<CheckpointRecord> {
        let id = match self.selection(task)? {
            Some(s) => s.checkpoint_id,
            None => {
                log::warn!("no probe selection for {}; using the lowest validation loss checkpoint", task.as_str());
                self.store.ids()[0]
            }
        };
        self.store.load(id)
    }
}

/// Probes every stored checkpoint, selects one by validation metric and
/// writes the results table; returns the selected checkpoint id.
pub fn cmd_probe(dir: &Path, task: Task) -> Result<usize> {
    let exp = Experiment::open(dir)?;
    let probe_cfg = exp.record.config.eval.probe;
    let sets = [exp.train_pairs(), exp.val_pairs(), exp.holdout_pairs()];
    let ids = exp.store.ids();
    let records: Vec<CheckpointRecord> = ids.iter().map(|&id| exp.store.load(id)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..records.len()).flat_map(|r| [(r, 0), (r, 1)]).collect();
    let results: Vec<ProbeResult> = jobs
        .par_iter()
        .map(|&(r, m)| -> Result<ProbeResult> {
            let model = Model::from_parts(&records[r].model_spec, records[r].params[m].clone())?;
            let f: Vec<FeatureMatrix> =
                sets.iter().map(|s| extract_features(&model, s, m, task)).collect::<msc_core::Result<_>>()?;
            let test = (f[2].n() > 0).then_some(&f[2]);
            Ok(fit_probe(&f[0], &f[1], test, task.classes(), &probe_cfg)?)
        })
        .collect::<Result<_>>()?;

    let names = exp.modality_names();
    let scores_path = dir.join(format!("probe_scores_{}.csv", task.as_str()));
    let mut w = csv_writer(&scores_path)?;
    csv_row(&mut w, &scores_path, &["checkpoint_id", "modality", "c", "l1_ratio", "metric_val", "metric_test"].map(String::from))?;
    for (&(r, m), res) in jobs.iter().zip(&results) {
        let row = [
            records[r].epoch.to_string(),
            names[m].clone(),
            res.c.to_string(),
            res.l1_ratio.to_string(),
            res.val_metric.to_string(),
            opt(res.test_metric),
        ];
        csv_row(&mut w, &scores_path, &row)?;
    }
    csv_flush(w, &scores_path)?;

    let scores: Vec<CheckpointScore> = records
        .iter()
        .enumerate()
        .map(|(r, rec)| CheckpointScore { epoch: rec.epoch, metrics: vec![results[2 * r].val_metric, results[2 * r + 1].val_metric] })
        .collect();
    let chosen = select_checkpoint(&scores)?;
    let r = records.iter().position(|rec| rec.epoch == chosen).expect("selected id is stored");

    let path = dir.join(results_file(task));
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, &["model", "fold", "modality", "task", "metric_val", "metric_test", "checkpoint_id"].map(String::from))?;
    for m in 0..2 {
        let res = &results[2 * r + m];
        let row = [
            exp.record.model.clone(),
            exp.record.fold.to_string(),
            names[m].clone(),
            task.as_str().to_string(),
            res.val_metric.to_string(),
            opt(res.test_metric),
            chosen.to_string(),
        ];
        csv_row(&mut w, &path, &row)?;
    }
    csv_flush(w, &path)?;
    let selection = Selection { checkpoint_id: chosen, task, probes: vec![results[2 * r].clone(), results[2 * r + 1].clone()] };
    write_json(&dir.join(selection_file(task)), &selection)?;
    Ok(chosen)
}

fn features(models: &[Model; 2], pairs: &[&VolumePair]) -> Result<[FeatureMatrix; 2]> {
    Ok([extract_features(&models[0], pairs, 0, Task::ThreeWay)?, extract_features(&models[1], pairs, 1, Task::ThreeWay)?])
}

/// Cross-modal CKA of the selected checkpoint on the evaluation subjects.
pub fn cmd_align(dir: &Path) -> Result<f64> {
    let exp = Experiment::open(dir)?;
    let models = exp.selected_record(exp.record.config.eval.task)?.models()?;
    let [a, b] = features(&models, &exp.eval_pairs())?;
    let value = cka(&a.z, &b.z, false)?;
    let path = dir.join(CKA_FILE);
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, &["model", "fold", "cka"].map(String::from))?;
    csv_row(&mut w, &path, &[exp.record.model.clone(), exp.record.fold.to_string(), value.to_string()])?;
    csv_flush(w, &path)?;
    Ok(value)
}

/// Saliency artifacts of one modality and dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimensionClusters {
    pub modality: usize,
    pub dim: usize,
    pub report: ClusterReport,
    pub dice: BTreeMap<u32, f64>,
}

/// Summary returned by [`cmd_saliency`].
#[derive(Debug, Clone)]
pub struct SaliencySummary {
    pub dims: Vec<usize>,
    pub clusters: usize,
    pub links: LinkGraph,
}

/// Dimensions with the `n` largest and `n` smallest binary probe betas,
/// per modality, ascending.
fn top_beta_dims(sel: &Selection, n: usize) -> [Vec<usize>; 2] {
    [0, 1].map(|m| {
        let betas = sel.probes[m].binary_betas();
        let mut order: Vec<usize> = (0..betas.len()).collect();
        order.sort_by(|&i, &j| betas[j].total_cmp(&betas[i]).then(i.cmp(&j)));
        let mut pick: Vec<usize> = order.iter().take(n).chain(order.iter().rev().take(n)).copied().collect();
        pick.sort_unstable();
        pick.dedup();
        pick
    })
}

/// Per-dimension integrated gradients on the evaluation subjects, class-0
/// versus class-1 voxel statistics, clusters with atlas overlap, and the
/// cross-modal link graph.
pub fn cmd_saliency(dir: &Path, dims: Option<DimSelection>) -> Result<SaliencySummary> {
    let exp = Experiment::open(dir)?;
    let cfg = &exp.record.config.saliency;
    let task = exp.record.config.eval.task;
    let atlas = exp.data.require_atlas()?;
    let record = exp.selected_record(task)?;
    let models = record.models()?;
    let d = record.model_spec.encoder.repr_dim;
    let per_modality: [Vec<usize>; 2] = match dims.unwrap_or(cfg.dims) {
        DimSelection::All => [(0..d).collect(), (0..d).collect()],
        DimSelection::TopBeta => {
            let sel = exp.selection(Task::TwoWay)?.ok_or_else(|| Error::Missing {
                what: "2-way probe selection",
                path: dir.join(selection_file(Task::TwoWay)),
                producer: "probe --task 2way",
            })?;
            top_beta_dims(&sel, cfg.top_beta)
        }
    };
    let subjects: Vec<&VolumePair> =
        exp.eval_pairs().into_iter().filter(|p| matches!(p.label, Label::Class(0) | Label::Class(1))).collect();
    let group_of: Vec<u8> = subjects.iter().map(|p| if p.label == Label::Class(0) { 0 } else { 1 }).collect();
    if !group_of.contains(&0) || !group_of.contains(&1) {
        return Err(Error::Core(msc_core::Error::Data("saliency needs subjects of class 0 and class 1 in the evaluation set".into())));
    }
    let mask = atlas.brain_mask();

    // maps[m][s][j] is subject s's processed map for per_modality[m][j].
    let jobs: Vec<(usize, usize)> = (0..2).flat_map(|m| (0..subjects.len()).map(move |s| (m, s))).collect();
    let processed: Vec<Vec<Volume>> = jobs
        .par_iter()
        .map(|&(m, s)| -> Result<Vec<Volume>> {
            let raw = integrated_gradients(&models[m], &subjects[s].volumes[m], None, &per_modality[m], cfg.steps)?;
            raw.iter().map(|v| postprocess(v, &mask, cfg.sigma).map_err(Error::from)).collect()
        })
        .collect::<Result<_>>()?;

    let sal_dir = dir.join("saliency");
    io(&sal_dir, fs::create_dir_all(&sal_dir))?;
    let dim_jobs: Vec<(usize, usize)> = (0..2).flat_map(|m| (0..per_modality[m].len()).map(move |j| (m, j))).collect();
    let outcomes: Vec<(DimensionClusters, Volume)> = dim_jobs
        .par_iter()
        .map(|&(m, j)| -> Result<(DimensionClusters, Volume)> {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (s, &g) in group_of.iter().enumerate() {
                let v = processed[m * subjects.len() + s][j].clone();
                if g == 0 {
                    a.push(v)
                } else {
                    b.push(v)
                }
            }
            let stat = group_stats(&a, &b)?;
            let mut report = threshold_and_clusterize(&stat, cfg.p_tail, cfg.min_cluster_size, cfg.connectivity)?;
            let dice = atlas_overlap(&mut report, atlas)?;
            let rbc = Volume { dims: stat.dims, data: stat.rbc.clone() };
            Ok((DimensionClusters { modality: m, dim: per_modality[m][j], report, dice }, rbc))
        })
        .collect::<Result<_>>()?;

    let mut tables = [DiceTable::default(), DiceTable::default()];
    let mut n_clusters = 0;
    let mut all = Vec::with_capacity(outcomes.len());
    for (dc, rbc) in outcomes {
        write_volume(&sal_dir.join(format!("m{}_dim{:02}_rbc.mscv", dc.modality + 1, dc.dim)), &rbc)?;
        n_clusters += dc.report.clusters.len();
        if !dc.dice.is_empty() {
            tables[dc.modality].dims.insert(dc.dim, dc.dice.clone());
        }
        all.push(dc);
    }
    write_json(&dir.join("clusters.json"), &all)?;
    write_json(&dir.join("dice.json"), &tables)?;

    let [z1, z2] = features(&models, &subjects)?;
    let graph = crossmodal_links(&z1.z, &z2.z, [&tables[0], &tables[1]], atlas.n_rois() as u32, cfg.top_k)?;
    for w in &graph.warnings {
        log::warn!("{w}");
    }
    write_json(&dir.join("links.json"), &graph)?;
    let path = dir.join("links.csv");
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, &["roi_m1", "roi_m2", "weight", "rank"].map(String::from))?;
    for (rank, e) in graph.edges.iter().enumerate() {
        csv_row(&mut w, &path, &[e.roi_m1.to_string(), e.roi_m2.to_string(), e.weight.to_string(), (rank + 1).to_string()])?;
    }
    csv_flush(w, &path)?;
    let mut used: Vec<usize> = per_modality.concat();
    used.sort_unstable();
    used.dedup();
    Ok(SaliencySummary { dims: used, clusters: n_clusters, links: graph })
}

/// Every model name reachable by a term list: the 15 taxonomy combinations
/// and the 5 baselines, tagged by kind.
pub fn cmd_list() -> Vec<(&'static str, String)> {
    taxonomy()
        .iter()
        .map(|o| ("taxonomy", o.name()))
        .chain(baselines().iter().map(|o| ("baseline", o.name())))
        .collect()
}
