use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::flows::{parse_flow_sequence, FlowKind};
use crate::stats::KernelKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    AE,
    VAE,
    BetaVAE,
    #[serde(rename = "VAE_LinNF")]
    VaeLinNf,
    #[serde(rename = "VAE_IAF")]
    VaeIaf,
    IWAE,
    VAMP,
    BetaTCVAE,
    FactorVAE,
    #[serde(rename = "InfoVAE_RBF")]
    InfoVaeRbf,
    #[serde(rename = "InfoVAE_IMQ")]
    InfoVaeImq,
    #[serde(rename = "WAE_RBF")]
    WaeRbf,
    #[serde(rename = "WAE_IMQ")]
    WaeImq,
    AAE,
    VAEGAN,
    #[serde(rename = "MSSSIM_VAE")]
    MsssimVae,
    VQVAE,
    #[serde(rename = "RAE_L2")]
    RaeL2,
    #[serde(rename = "RAE_GP")]
    RaeGp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 19] = [
        ModelKind::AE,
        ModelKind::VAE,
        ModelKind::BetaVAE,
        ModelKind::VaeLinNf,
        ModelKind::VaeIaf,
        ModelKind::IWAE,
        ModelKind::VAMP,
        ModelKind::BetaTCVAE,
        ModelKind::FactorVAE,
        ModelKind::InfoVaeRbf,
        ModelKind::InfoVaeImq,
        ModelKind::WaeRbf,
        ModelKind::WaeImq,
        ModelKind::AAE,
        ModelKind::VAEGAN,
        ModelKind::MsssimVae,
        ModelKind::VQVAE,
        ModelKind::RaeL2,
        ModelKind::RaeGp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AE => "AE",
            ModelKind::VAE => "VAE",
            ModelKind::BetaVAE => "BetaVAE",
            ModelKind::VaeLinNf => "VAE_LinNF",
            ModelKind::VaeIaf => "VAE_IAF",
            ModelKind::IWAE => "IWAE",
            ModelKind::VAMP => "VAMP",
            ModelKind::BetaTCVAE => "BetaTCVAE",
            ModelKind::FactorVAE => "FactorVAE",
            ModelKind::InfoVaeRbf => "InfoVAE_RBF",
            ModelKind::InfoVaeImq => "InfoVAE_IMQ",
            ModelKind::WaeRbf => "WAE_RBF",
            ModelKind::WaeImq => "WAE_IMQ",
            ModelKind::AAE => "AAE",
            ModelKind::VAEGAN => "VAEGAN",
            ModelKind::MsssimVae => "MSSSIM_VAE",
            ModelKind::VQVAE => "VQVAE",
            ModelKind::RaeL2 => "RAE_L2",
            ModelKind::RaeGp => "RAE_GP",
        }
    }

    /// Encoders that emit only a mean.
    pub fn deterministic_encoder(self) -> bool {
        matches!(
            self,
            ModelKind::AE | ModelKind::WaeRbf | ModelKind::WaeImq | ModelKind::VQVAE | ModelKind::RaeL2 | ModelKind::RaeGp
        )
    }

    pub fn adversarial(self) -> bool {
        matches!(self, ModelKind::FactorVAE | ModelKind::AAE | ModelKind::VAEGAN)
    }

    pub fn kernel(self) -> Option<KernelKind> {
        match self {
            ModelKind::InfoVaeRbf | ModelKind::WaeRbf => Some(KernelKind::Rbf),
            ModelKind::InfoVaeImq | ModelKind::WaeImq => Some(KernelKind::Imq),
            _ => None,
        }
    }

    pub fn default_reconstruction(self) -> ReconstructionLoss {
        match self {
            ModelKind::AE | ModelKind::WaeRbf | ModelKind::WaeImq | ModelKind::VQVAE | ModelKind::RaeL2 | ModelKind::RaeGp => {
                ReconstructionLoss::Mse
            }
            _ => ReconstructionLoss::Bce,
        }
    }

    /// Kind-specific keys accepted in `model_config.json`.
    pub fn allowed_keys(self) -> &'static [&'static str] {
        match self {
            ModelKind::AE | ModelKind::VAE => &[],
            ModelKind::BetaVAE => &["beta"],
            ModelKind::VaeLinNf => &["flow_sequence"],
            ModelKind::VaeIaf => &["made_hidden_size", "made_hidden_layers", "n_made_blocks"],
            ModelKind::IWAE => &["n_samples"],
            ModelKind::VAMP => &["n_pseudo_inputs"],
            ModelKind::BetaTCVAE => &["alpha", "beta", "gamma", "dataset_size"],
            ModelKind::FactorVAE => &["gamma", "disc_hidden_dims"],
            ModelKind::InfoVaeRbf | ModelKind::InfoVaeImq => &["lambda", "kernel_bandwidth", "alpha"],
            ModelKind::WaeRbf | ModelKind::WaeImq => &["lambda", "kernel_bandwidth"],
            ModelKind::AAE => &["alpha", "disc_hidden_dims"],
            ModelKind::VAEGAN => &["alpha", "reconstruction_layer", "disc_hidden_dims"],
            ModelKind::MsssimVae => &["beta", "window_size", "msssim_scales"],
            ModelKind::VQVAE => &["beta", "codebook_size", "ema_decay", "ema_epsilon", "embedding_dim"],
            ModelKind::RaeL2 => &["beta", "lambda"],
            ModelKind::RaeGp => &["beta", "lambda", "gp_step"],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReconstructionLoss {
    Mse,
    Bce,
}

/// Keys accepted for every model kind.
pub const COMMON_KEYS: [&str; 6] = [
    "kind",
    "input_dim",
    "latent_dim",
    "encoder_hidden_dims",
    "decoder_hidden_dims",
    "reconstruction_loss",
];
const REQUIRED_KEYS: [&str; 3] = ["kind", "input_dim", "latent_dim"];

/// Every hyper-parameter of one model. Kind-specific fields left unset take
/// the defaults exposed by the accessor methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_hidden_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_hidden_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_loss: Option<ReconstructionLoss>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_pseudo_inputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_sequence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub made_hidden_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub made_hidden_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_made_blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_hidden_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msssim_scales: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_step: Option<f64>,
}

fn config_err(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

impl ModelConfig {
    /// A config with only the required fields set.
    pub fn new(kind: ModelKind, input_dim: Vec<usize>, latent_dim: usize) -> ModelConfig {
        ModelConfig {
            kind,
            input_dim,
            latent_dim,
            encoder_hidden_dims: None,
            decoder_hidden_dims: None,
            reconstruction_loss: None,
            beta: None,
            alpha: None,
            gamma: None,
            lambda: None,
            kernel_bandwidth: None,
            n_samples: None,
            n_pseudo_inputs: None,
            flow_sequence: None,
            made_hidden_size: None,
            made_hidden_layers: None,
            n_made_blocks: None,
            dataset_size: None,
            disc_hidden_dims: None,
            reconstruction_layer: None,
            window_size: None,
            msssim_scales: None,
            codebook_size: None,
            ema_decay: None,
            ema_epsilon: None,
            embedding_dim: None,
            gp_step: None,
        }
    }

    /// Parses and validates JSON, reporting problems with a JSON pointer.
    pub fn from_json_str(s: &str) -> Result<ModelConfig> {
        let value: Value = serde_json::from_str(s).map_err(|e| Error::Parse {
            offset: e.column(),
            message: e.to_string(),
        })?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<ModelConfig> {
        let obj = value
            .as_object()
            .ok_or_else(|| config_err("", "model config must be a JSON object"))?;
        for key in REQUIRED_KEYS {
            if !obj.contains_key(key) {
                return Err(config_err(format!("/{key}"), format!("missing required key '{key}'")));
            }
        }
        let cfg: ModelConfig = serde_path_to_error::deserialize(&value).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." {
                String::new()
            } else {
                format!("/{}", path.replace('.', "/"))
            };
            config_err(pointer, e.into_inner().to_string())
        })?;
        let allowed = cfg.kind.allowed_keys();
        for key in obj.keys() {
            if !COMMON_KEYS.contains(&key.as_str()) && !allowed.contains(&key.as_str()) {
                return Err(config_err(format!("/{key}"), format!("'{key}' does not apply to {}", cfg.kind)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sorted-key JSON of the explicitly set fields.
    pub fn to_canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("model config is serializable");
        serde_json::to_string(&v).expect("value is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim.is_empty() || self.input_dim.contains(&0) {
            return Err(config_err("/input_dim", "input_dim must be a non-empty list of positive extents"));
        }
        if self.latent_dim == 0 {
            return Err(config_err("/latent_dim", "latent_dim must be ≥ 1"));
        }
        let non_negative = |name: &str, v: Option<f64>| -> Result<()> {
            match v {
                Some(x) if !(x >= 0.0) || !x.is_finite() => Err(config_err(format!("/{name}"), format!("{name} must be finite and ≥ 0"))),
                _ => Ok(()),
            }
        };
        non_negative("beta", self.beta)?;
        non_negative("gamma", self.gamma)?;
        non_negative("lambda", self.lambda)?;
        if let Some(s) = self.kernel_bandwidth {
            if !(s > 0.0) {
                return Err(config_err("/kernel_bandwidth", "kernel_bandwidth must be > 0"));
            }
        }
        match self.kind {
            ModelKind::AAE | ModelKind::VAEGAN => {
                if let Some(a) = self.alpha {
                    if !(0.0..=1.0).contains(&a) {
                        return Err(config_err("/alpha", "alpha must lie in [0, 1]"));
                    }
                }
            }
            ModelKind::InfoVaeRbf | ModelKind::InfoVaeImq => {
                if self.alpha.is_some_and(|a| a != 0.0) {
                    return Err(config_err("/alpha", "only the alpha = 0 InfoVAE objective is implemented"));
                }
            }
            ModelKind::BetaTCVAE => non_negative("alpha", self.alpha)?,
            _ => {}
        }
        if let Some(seq) = &self.flow_sequence {
            parse_flow_sequence(seq).map_err(|e| config_err("/flow_sequence", e.to_string()))?;
        }
        let positive = |name: &str, v: Option<usize>| -> Result<()> {
            match v {
                Some(0) => Err(config_err(format!("/{name}"), format!("{name} must be ≥ 1"))),
                _ => Ok(()),
            }
        };
        positive("n_samples", self.n_samples)?;
        positive("n_pseudo_inputs", self.n_pseudo_inputs)?;
        positive("made_hidden_size", self.made_hidden_size)?;
        positive("n_made_blocks", self.n_made_blocks)?;
        positive("codebook_size", self.codebook_size)?;
        positive("window_size", self.window_size)?;
        positive("msssim_scales", self.msssim_scales)?;
        positive("reconstruction_layer", self.reconstruction_layer)?;
        if let Some(l) = self.reconstruction_layer {
            let n = self.disc_hidden_dims().len();
            if l > n {
                return Err(config_err(
                    "/reconstruction_layer",
                    format!("reconstruction_layer {l} out of range: discriminator has {n} hidden layers"),
                ));
            }
        }
        if let Some(decay) = self.ema_decay {
            if !(0.0..1.0).contains(&decay) {
                return Err(config_err("/ema_decay", "ema_decay must lie in [0, 1)"));
            }
        }
        if let Some(e) = self.embedding_dim {
            if e == 0 || self.latent_dim % e != 0 {
                return Err(config_err("/embedding_dim", "embedding_dim must divide latent_dim"));
            }
        }
        if let Some(h) = self.gp_step {
            if !(h > 0.0) {
                return Err(config_err("/gp_step", "gp_step must be > 0"));
            }
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.input_dim.iter().product()
    }

    /// `(H, W)` from the last two extents, for image-only objectives.
    pub fn image_hw(&self) -> Result<(usize, usize)> {
        match self.input_dim.as_slice() {
            [h, w] | [1, h, w] => Ok((*h, *w)),
            other => Err(config_err("/input_dim", format!("{other:?} is not a single-channel image shape"))),
        }
    }

    pub fn encoder_hidden_dims(&self) -> Vec<usize> {
        self.encoder_hidden_dims.clone().unwrap_or_else(|| vec![256, 128])
    }

    pub fn decoder_hidden_dims(&self) -> Vec<usize> {
        self.decoder_hidden_dims
            .clone()
            .unwrap_or_else(|| self.encoder_hidden_dims().into_iter().rev().collect())
    }

    pub fn reconstruction(&self) -> ReconstructionLoss {
        self.reconstruction_loss.unwrap_or(self.kind.default_reconstruction())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.kind {
            ModelKind::MsssimVae => 0.1,
            ModelKind::VQVAE => 0.25,
            ModelKind::RaeL2 | ModelKind::RaeGp => 1e-3,
            _ => 1.0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.kind {
            ModelKind::BetaTCVAE => 1.0,
            ModelKind::AAE => 0.5,
            ModelKind::VAEGAN => 0.8,
            _ => 0.0,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(match self.kind {
            ModelKind::FactorVAE => 10.0,
            _ => 1.0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.kind {
            ModelKind::InfoVaeRbf | ModelKind::InfoVaeImq => 10.0,
            ModelKind::RaeL2 | ModelKind::RaeGp => 1e-3,
            _ => 1.0,
        })
    }

    pub fn kernel_bandwidth(&self) -> f64 {
        self.kernel_bandwidth.unwrap_or(1.0)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples.unwrap_or(5)
    }

    pub fn n_pseudo_inputs(&self) -> usize {
        self.n_pseudo_inputs.unwrap_or(10)
    }

    pub fn flow_sequence(&self) -> Result<Vec<FlowKind>> {
        parse_flow_sequence(self.flow_sequence.as_deref().unwrap_or("PRPRP"))
    }

    pub fn made_hidden_size(&self) -> usize {
        self.made_hidden_size.unwrap_or(32)
    }

    pub fn made_hidden_layers(&self) -> usize {
        self.made_hidden_layers.unwrap_or(2)
    }

    pub fn n_made_blocks(&self) -> usize {
        self.n_made_blocks.unwrap_or(2)
    }

    pub fn disc_hidden_dims(&self) -> Vec<usize> {
        self.disc_hidden_dims.clone().unwrap_or_else(|| match self.kind {
            ModelKind::FactorVAE => vec![1000; 6],
            ModelKind::AAE => vec![256],
            _ => vec![256, 256, 128, 128],
        })
    }

    pub fn reconstruction_layer(&self) -> usize {
        self.reconstruction_layer.unwrap_or(3)
    }

    pub fn window_size(&self) -> usize {
        self.window_size.unwrap_or(3)
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size.unwrap_or(128)
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay.unwrap_or(0.99)
    }

    pub fn ema_epsilon(&self) -> f64 {
        self.ema_epsilon.unwrap_or(1e-5)
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim.unwrap_or(self.latent_dim)
    }

    pub fn gp_step(&self) -> f64 {
        self.gp_step.unwrap_or(1e-4)
    }
}
