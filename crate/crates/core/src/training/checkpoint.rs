use std::fs;
use std::path::Path;

use super::TrainConfig;
use crate::models::{Model, ModelConfig, ModelKind};
use crate::nn::Manifest;
use crate::tensor::Rng;
use crate::{Error, Result};

pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const TRAIN_CONFIG_FILE: &str = "training_config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A trained model together with the configuration it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(dir: &Path, model: &Model, train_config: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = model.config.clone();
    // the estimator's dataset size is part of the objective, so pin it
    if config.kind == ModelKind::BetaTCVAE {
        config.dataset_size = model.dataset_size();
    }
    write_atomic(&dir.join(MODEL_CONFIG_FILE), config.to_canonical_json().as_bytes())?;
    write_atomic(&dir.join(TRAIN_CONFIG_FILE), &serde_json::to_vec_pretty(train_config)?)?;
    write_atomic(&dir.join(PARAMS_FILE), &model.store.to_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&model.store.manifest())?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model from its config and loads the stored parameters.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg_text = String::from_utf8(read(&dir.join(MODEL_CONFIG_FILE))?)
        .map_err(|_| Error::Checkpoint(format!("{MODEL_CONFIG_FILE} is not UTF-8")))?;
    let config = ModelConfig::from_json_str(&cfg_text)?;
    let train_config: TrainConfig = serde_json::from_slice(&read(&dir.join(TRAIN_CONFIG_FILE))?)?;
    let manifest: Manifest = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)?;
    let mut model = Model::new(config, &mut Rng::new(0))?;
    model.store.load_bytes(&manifest, &read(&dir.join(PARAMS_FILE))?)?;
    Ok(Checkpoint { model, train_config })
}
