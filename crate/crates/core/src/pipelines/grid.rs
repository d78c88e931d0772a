use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::models::{ModelConfig, ModelKind};
use crate::{Error, Result};

/// One named hyper-parameter setting; every key other than `id` is a
/// model-config field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub id: String,
    #[serde(flatten)]
    pub overrides: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigGrid {
    pub model: ModelKind,
    pub configs: Vec<GridEntry>,
}

macro_rules! builtin_grids {
    ($($kind:ident => $file:literal),* $(,)?) => {
        fn builtin_text(kind: ModelKind) -> &'static str {
            match kind {
                $(ModelKind::$kind => include_str!(concat!("../../../../grids/", $file)),)*
            }
        }
    };
}

builtin_grids! {
    AE => "ae.json",
    VAE => "vae.json",
    BetaVAE => "betavae.json",
    VaeLinNf => "vae_linnf.json",
    VaeIaf => "vae_iaf.json",
    IWAE => "iwae.json",
    VAMP => "vamp.json",
    BetaTCVAE => "betatcvae.json",
    FactorVAE => "factorvae.json",
    InfoVaeRbf => "infovae_rbf.json",
    InfoVaeImq => "infovae_imq.json",
    WaeRbf => "wae_rbf.json",
    WaeImq => "wae_imq.json",
    AAE => "aae.json",
    VAEGAN => "vaegan.json",
    MsssimVae => "msssim_vae.json",
    VQVAE => "vqvae.json",
    RaeL2 => "rae_l2.json",
    RaeGp => "rae_gp.json",
}

impl ConfigGrid {
    /// The ten-setting grid shipped in `grids/` for `kind`.
    pub fn builtin(kind: ModelKind) -> ConfigGrid {
        Self::from_json_str(builtin_text(kind)).expect("shipped grids parse")
    }

    pub fn from_json_str(s: &str) -> Result<ConfigGrid> {
        let grid: ConfigGrid = serde_json::from_str(s).map_err(|e| Error::Parse {
            offset: e.column(),
            message: e.to_string(),
        })?;
        let mut ids: Vec<&str> = grid.configs.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config {
                pointer: "/configs".into(),
                message: format!("duplicate config ids in the {} grid", grid.model),
            });
        }
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<ConfigGrid> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn entry(&self, id: &str) -> Result<&GridEntry> {
        self.configs.iter().find(|c| c.id == id).ok_or_else(|| Error::Config {
            pointer: "/configs".into(),
            message: format!("the {} grid has no config '{id}'", self.model),
        })
    }

    /// Builds the full model config: `base` keys first, then the entry's
    /// overrides, then the kind, input shape and latent size.
    pub fn resolve(&self, id: &str, base: &Map<String, Value>, input_dim: &[usize], latent_dim: usize) -> Result<ModelConfig> {
        let entry = self.entry(id)?;
        let mut obj = base.clone();
        for (k, v) in &entry.overrides {
            obj.insert(k.clone(), v.clone());
        }
        obj.insert("kind".into(), serde_json::to_value(self.model)?);
        obj.insert("input_dim".into(), serde_json::to_value(input_dim)?);
        obj.insert("latent_dim".into(), Value::from(latent_dim));
        // base keys meant for other kinds are dropped rather than rejected
        let allowed = self.model.allowed_keys();
        obj.retain(|k, _| {
            entry.overrides.contains_key(k) || allowed.contains(&k.as_str()) || crate::models::COMMON_KEYS.contains(&k.as_str())
        });
        ModelConfig::from_value(Value::Object(obj)).map_err(|e| match e {
            Error::Config { pointer, message } => Error::Config {
                pointer,
                message: format!("{} grid config '{id}': {message}", self.model),
            },
            other => other,
        })
    }
}
