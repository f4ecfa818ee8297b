//! Checkpoint directories: one `.cadt` file per parameter and running
//! statistic, plus `manifest.json` naming them alongside the model config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CadUnet, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: PathBuf,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub name: String,
    pub mean: PathBuf,
    pub var: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: usize,
    pub parameters: Vec<TensorEntry>,
    pub running_stats: Vec<StatsEntry>,
    /// Free-form run information (seed, loss weights, validation score...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: CadUnet,
    pub store: ParamStore<f32>,
}

fn file_name(index: usize, name: &str, suffix: &str) -> PathBuf {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    PathBuf::from(format!("{index:04}_{clean}{suffix}.cadt"))
}

/// Write into a sibling staging directory first, then swap it in, so an
/// interrupted save never leaves a half-written checkpoint behind.
pub fn save_checkpoint(
    dir: &Path,
    config: &ModelConfig,
    store: &ParamStore<f32>,
    step: u64,
    epoch: usize,
    metadata: serde_json::Value,
) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut parameters = Vec::new();
    for (i, p) in store.params().iter().enumerate() {
        let file = file_name(i, &p.name, "");
        p.value.save(&staging.join(&file))?;
        parameters.push(TensorEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let mut running_stats = Vec::new();
    for (i, s) in store.stats().iter().enumerate() {
        let (mean, var) = (file_name(i, &s.name, ".mean"), file_name(i, &s.name, ".var"));
        s.mean.save(&staging.join(&mean))?;
        s.var.save(&staging.join(&var))?;
        running_stats.push(StatsEntry {
            name: s.name.clone(),
            mean,
            var,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        config: config.clone(),
        step,
        epoch,
        parameters,
        running_stats,
        metadata,
    };
    let path = staging.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format
        )));
    }
    Ok(manifest)
}

fn load_tensor(dir: &Path, file: &Path, shape: &[usize], what: &str) -> Result<Tensor<f32>> {
    let t = Tensor::load(&dir.join(file))?;
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "{what}: stored shape {:?}, model expects {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Rebuild the model from the stored config and fill in every tensor.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let (model, mut store) = CadUnet::init::<f32>(manifest.config.clone(), 0)?;
    if manifest.parameters.len() != store.params().len() || manifest.running_stats.len() != store.stats().len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters and {} statistics, model has {} and {}",
            manifest.parameters.len(),
            manifest.running_stats.len(),
            store.params().len(),
            store.stats().len()
        )));
    }
    for (entry, p) in manifest.parameters.iter().zip(store.params_mut()) {
        if entry.name != p.name {
            return Err(Error::Format(format!("expected parameter {}, found {}", p.name, entry.name)));
        }
        p.value = load_tensor(dir, &entry.file, p.value.shape(), &p.name)?;
    }
    for (entry, s) in manifest.running_stats.iter().zip(store.stats_mut()) {
        if entry.name != s.name {
            return Err(Error::Format(format!("expected statistics {}, found {}", s.name, entry.name)));
        }
        s.mean = load_tensor(dir, &entry.mean, s.mean.shape(), &s.name)?;
        s.var = load_tensor(dir, &entry.var, s.var.shape(), &s.name)?;
    }
    Ok(Checkpoint { manifest, model, store })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = ModelConfig::micro();
        let (model, mut store) = CadUnet::init::<f32>(config.clone(), 3).unwrap();
        for s in store.stats_mut() {
            s.mean = s.mean.map(|v| v + 0.25);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &config, &store, 17, 2, serde_json::json!({"seed": 5})).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.store, store);
        assert_eq!((loaded.manifest.step, loaded.manifest.epoch), (17, 2));
        assert_eq!(loaded.manifest.metadata["seed"], 5);
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let a = model.predict(&mut store, &x).unwrap();
        let b = loaded.model.predict(&mut loaded.store, &x).unwrap();
        assert_eq!(a, b);
        // saving again over the same directory replaces it cleanly
        save_checkpoint(&path, &config, &store, 18, 2, serde_json::Value::Null).unwrap();
        assert_eq!(read_manifest(&path).unwrap().step, 18);
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let config = ModelConfig::micro();
        let (_, store) = CadUnet::init::<f32>(config.clone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &config, &store, 0, 0, serde_json::Value::Null).unwrap();
        let mut manifest = read_manifest(&path).unwrap();
        manifest.config.base_channels = 8;
        fs::write(path.join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
