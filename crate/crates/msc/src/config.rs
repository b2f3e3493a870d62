//! Experiment configuration document.

use std::path::{Path, PathBuf};

use msc_core::eval::{ProbeConfig, Task};
use msc_core::model::{EncoderSpec, GlobalHeadSpec};
use msc_core::objectives::{CriticConfig, ObjectiveSpec};
use msc_core::saliency::{Connectivity, DEFAULT_SIGMA, DEFAULT_STEPS};
use msc_core::synth::{LatentSpec, SplitConfig};
use msc_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::read_json;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub saliency: SaliencySection,
}


/// A manifest on disk, or a generator spec synthesized in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub latent: LatentSpec,
    pub n_subjects: usize,
    pub split: SplitConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: None, latent: LatentSpec::default(), n_subjects: 40, split: SplitConfig { folds: 5, holdout_frac: 0.2 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderSpec,
    pub global_head: GlobalHeadSpec,
    pub local_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { encoder: EncoderSpec::desk_16(), global_head: GlobalHeadSpec::Linear, local_hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    /// Term names (`["RR", "XX"]`) or a single model name (`["DCCAE"]`).
    pub terms: Vec<String>,
    pub critic: CriticConfig,
    pub symmetrize: bool,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { terms: vec!["RR".into(), "XX".into()], critic: CriticConfig::default(), symmetrize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_k: usize,
    pub augment: bool,
    pub pad: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { learning_rate: 4e-4, epochs: 20, batch_size: 8, seed: 0, checkpoint_k: 10, augment: true, pad: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe: ProbeConfig,
    pub task: Task,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), task: Task::TwoWay }
    }
}

/// Which representation dimensions receive saliency maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimSelection {
    #[serde(rename = "all")]
    All,
    /// The `top_beta` most positive and most negative probe coefficients.
    #[serde(rename = "top-beta")]
    TopBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySection {
    pub steps: usize,
    pub sigma: f64,
    pub min_cluster_size: usize,
    /// One-sided tail probability; voxels with two-sided `p ≤ 2·p_tail` pass.
    pub p_tail: f64,
    pub connectivity: Connectivity,
    pub top_k: usize,
    pub dims: DimSelection,
    pub top_beta: usize,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            sigma: DEFAULT_SIGMA,
            min_cluster_size: 200,
            p_tail: 0.025,
            connectivity: Connectivity::TwentySix,
            top_k: 64,
            dims: DimSelection::All,
            top_beta: 5,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config and resolves a relative manifest path against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let mut cfg: ExperimentConfig = read_json(path)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides every seed (data, training, probe).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.latent.seed = seed;
        self.train.seed = seed;
        self.eval.probe.seed = seed;
        self
    }

    pub fn objective_spec(&self) -> Result<ObjectiveSpec> {
        if self.objective.terms.is_empty() {
            return Err(Error::Config("objective.terms is empty".into()));
        }
        let mut spec = ObjectiveSpec::parse(&self.objective.terms.join("-"))?;
        spec.critic = self.objective.critic;
        spec.symmetrize = self.objective.symmetrize;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            objective: self.objective_spec()?,
            seed: t.seed,
            checkpoint_k: t.checkpoint_k,
            encoder: self.model.encoder.clone(),
            global_head: self.model.global_head,
            local_hidden: self.model.local_hidden,
            augment: t.augment,
            pad: t.pad,
            classes: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.data.manifest {
            if !m.exists() {
                return Err(Error::Missing { what: "dataset manifest", path: m.clone(), producer: "synth" });
            }
        } else {
            self.data.latent.validate()?;
        }
        self.train_config()?;
        self.eval.probe.validate()?;
        let s = &self.saliency;
        if s.steps == 0 || !(s.sigma >= 0.0) || !(s.p_tail > 0.0 && s.p_tail <= 0.5) || s.top_k == 0 || s.min_cluster_size == 0 {
            return Err(Error::Config("saliency needs steps ≥ 1, sigma ≥ 0, p_tail in (0, 0.5], top_k ≥ 1, min_cluster_size ≥ 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.objective_spec().unwrap().name(), "RR-XX");
    }

    #[test]
    fn unknown_term_lists_models() {
        let mut cfg = ExperimentConfig::default();
        cfg.objective.terms = vec!["RR".into(), "ZZ".into()];
        let msg = cfg.objective_spec().unwrap_err().to_string();
        assert!(msg.contains("ZZ") && msg.contains("RR-XX") && msg.contains("DCCAE"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"eval": {"task": "3way"}, "saliency": {"dims": "top-beta", "connectivity": "six"}}"#).unwrap();
        assert_eq!(cfg.eval.task, Task::ThreeWay);
        assert_eq!(cfg.saliency.dims, DimSelection::TopBeta);
    }
}
