//! Datasets on disk: `manifest.json`, `atlas.mscv` and one volume file per
//! subject and modality under `volumes/`.

use std::fs;
use std::path::{Path, PathBuf};

use msc_core::synth::{AtlasVolume, DatasetManifest, SplitSpec, SyntheticDataset, VolumePair};
use msc_core::Volume;

use crate::error::{Error, Result};
use crate::format::{read_volume, write_volume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ATLAS_FILE: &str = "atlas.mscv";

/// Dataset with volumes in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<VolumePair>,
    pub atlas: Option<AtlasVolume>,
}

impl LoadedDataset {
    pub fn split(&self) -> SplitSpec {
        self.manifest.split()
    }

    pub fn from_synthetic(ds: SyntheticDataset) -> Self {
        let manifest = ds.manifest();
        Self { manifest, pairs: ds.pairs, atlas: Some(ds.atlas) }
    }

    pub fn require_atlas(&self) -> Result<&AtlasVolume> {
        self.atlas.as_ref().ok_or_else(|| Error::Config("the dataset has no atlas; saliency overlap needs one".into()))
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn atlas_to_volume(atlas: &AtlasVolume) -> Volume {
    Volume { dims: atlas.dims, data: atlas.labels.iter().map(|&l| l as f64).collect() }
}

fn volume_to_atlas(v: &Volume, roi_names: Vec<String>, path: &Path) -> Result<AtlasVolume> {
    let labels = v
        .data
        .iter()
        .map(|&x| if x >= 0.0 && x.fract() == 0.0 { Ok(x as u32) } else { Err(Error::format(path, format!("atlas value {x} is not a label"))) })
        .collect::<Result<Vec<u32>>>()?;
    let atlas = AtlasVolume { dims: v.dims, labels, roi_names };
    atlas.validate()?;
    Ok(atlas)
}

/// Writes the dataset under `dir`; returns the manifest path.
pub fn write_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut manifest = ds.manifest();
    for (entry, pair) in manifest.subjects.iter_mut().zip(&ds.pairs) {
        let names = [1, 2].map(|m| format!("volumes/{}_m{m}.mscv", pair.subject_id));
        for m in 0..2 {
            write_volume(&dir.join(&names[m]), &pair.volumes[m])?;
        }
        entry.paths = Some(names);
    }
    write_volume(&dir.join(ATLAS_FILE), &atlas_to_volume(&ds.atlas))?;
    manifest.atlas_ref = Some(ATLAS_FILE.to_string());
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a manifest and every volume it references, relative to the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    if !manifest_path.exists() {
        return Err(Error::Missing { what: "dataset manifest", path: manifest_path.to_path_buf(), producer: "synth" });
    }
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        let Some(paths) = &s.paths else {
            missing.push(s.subject_id.clone());
            continue;
        };
        let files = [root.join(&paths[0]), root.join(&paths[1])];
        if files.iter().any(|f| !f.exists()) {
            missing.push(s.subject_id.clone());
            continue;
        }
        let volumes = [read_volume(&files[0])?, read_volume(&files[1])?];
        if !volumes[0].same_shape(&volumes[1]) {
            return Err(Error::format(&files[1], "modalities differ in shape"));
        }
        pairs.push(VolumePair { subject_id: s.subject_id.clone(), volumes, label: s.label });
    }
    if !missing.is_empty() {
        return Err(Error::Core(msc_core::Error::Data(format!("missing volumes for subjects: {}", missing.join(", ")))));
    }
    let atlas = match &manifest.atlas_ref {
        Some(r) => {
            let p = root.join(r);
            Some(volume_to_atlas(&read_volume(&p)?, manifest.roi_names.clone(), &p)?)
        }
        None => None,
    };
    Ok(LoadedDataset { manifest, pairs, atlas })
}
