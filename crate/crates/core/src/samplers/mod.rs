//! Ex-post latent samplers: densities fitted on a trained model's latent
//! codes, decoded through the model for generation.

mod two_stage;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use two_stage::{TwoStageConfig, TwoStageVae};

use crate::flows::{MafConfig, MafModel};
use crate::models::{log_normal_pairwise, Model, ModelKind};
use crate::stats::{fit_gmm_em, gmm_log_density, gmm_sample, CovarianceKind, GmmOptions, GmmParams, LN_2PI};
use crate::tensor::{Graph, Rng, Tensor};
use crate::training::RunLog;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplerKind {
    Normal,
    GMM,
    MAF,
    TwoStageVAE,
    VAMP,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::Normal,
        SamplerKind::GMM,
        SamplerKind::MAF,
        SamplerKind::TwoStageVAE,
        SamplerKind::VAMP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Normal => "Normal",
            SamplerKind::GMM => "GMM",
            SamplerKind::MAF => "MAF",
            SamplerKind::TwoStageVAE => "TwoStageVAE",
            SamplerKind::VAMP => "VAMP",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown sampler kind '{s}'")))
    }
}

/// Contents of `sampler_config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_components: usize,
    pub covariance: CovarianceKind,
    pub maf: MafConfig,
    pub two_stage: TwoStageConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Normal,
            n_components: 10,
            covariance: CovarianceKind::Full,
            maf: MafConfig::default(),
            two_stage: TwoStageConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind) -> Self {
        SamplerConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::Config {
                pointer: "/n_components".into(),
                message: "n_components must be ≥ 1".into(),
            });
        }
        self.maf.train.validate()?;
        self.two_stage.train.validate()
    }
}

/// Fitted sampler payload, tagged by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum SamplerPayload {
    Normal,
    GMM(GmmParams),
    MAF(MafModel),
    TwoStageVAE(TwoStageVae),
    /// Posterior parameters of the pseudo-inputs, `[K×d]` each.
    VAMP { means: Tensor, log_vars: Tensor },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub latent_dim: usize,
    pub payload: SamplerPayload,
    /// Training log of fitted neural samplers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<RunLog>,
}

impl SamplerState {
    pub fn kind(&self) -> SamplerKind {
        match self.payload {
            SamplerPayload::Normal => SamplerKind::Normal,
            SamplerPayload::GMM(_) => SamplerKind::GMM,
            SamplerPayload::MAF(_) => SamplerKind::MAF,
            SamplerPayload::TwoStageVAE(_) => SamplerKind::TwoStageVAE,
            SamplerPayload::VAMP { .. } => SamplerKind::VAMP,
        }
    }
}

fn check_latents(z: &Tensor, d: usize, what: &str) -> Result<()> {
    if z.rank() != 2 || z.shape()[1] != d || z.shape()[0] == 0 {
        return Err(Error::invalid(format!("{what} must be non-empty [N×{d}], got {:?}", z.shape())));
    }
    Ok(())
}

/// Fits a sampler on latent codes (use [`Model::embed`] to produce them).
pub fn fit_sampler(
    config: &SamplerConfig,
    model: &Model,
    train_latents: &Tensor,
    val_latents: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<SamplerState> {
    config.validate()?;
    let d = model.latent_dim();
    check_latents(train_latents, d, "training latents")?;
    if let Some(v) = val_latents {
        check_latents(v, d, "validation latents")?;
    }
    let mut log = None;
    let payload = match config.kind {
        SamplerKind::Normal => SamplerPayload::Normal,
        SamplerKind::GMM => {
            let opts = GmmOptions {
                components: config.n_components,
                covariance: config.covariance,
                ..GmmOptions::default()
            };
            SamplerPayload::GMM(fit_gmm_em(train_latents, &opts, rng)?.params)
        }
        SamplerKind::MAF => {
            let mut cfg = config.maf.clone();
            cfg.train.seed = rng.next_u64();
            let (maf, l) = MafModel::fit(train_latents, val_latents, &cfg)?;
            log = Some(l);
            SamplerPayload::MAF(maf)
        }
        SamplerKind::TwoStageVAE => {
            let mut cfg = config.two_stage.clone();
            cfg.train.seed = rng.next_u64();
            let (vae, l) = TwoStageVae::fit(train_latents, val_latents, &cfg)?;
            log = Some(l);
            SamplerPayload::TwoStageVAE(vae)
        }
        SamplerKind::VAMP => {
            if model.kind() != ModelKind::VAMP {
                return Err(Error::invalid(format!("the VAMP sampler needs a VAMP model, got {}", model.kind())));
            }
            let (means, log_vars) = model.vamp_components()?;
            SamplerPayload::VAMP { means, log_vars }
        }
    };
    Ok(SamplerState {
        latent_dim: d,
        payload,
        log,
    })
}

/// Draws `n` latent codes.
pub fn sample_latents(state: &SamplerState, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("number of samples must be ≥ 1"));
    }
    let d = state.latent_dim;
    match &state.payload {
        SamplerPayload::Normal => Ok(Tensor::randn(&[n, d], rng)),
        SamplerPayload::GMM(p) => gmm_sample(p, n, rng),
        SamplerPayload::MAF(m) => m.sample(n, rng),
        SamplerPayload::TwoStageVAE(v) => v.sample(n, rng),
        SamplerPayload::VAMP { means, log_vars } => {
            let k = means.shape()[0];
            let mut out = Vec::with_capacity(n * d);
            for _ in 0..n {
                let c = rng.below(k);
                for j in 0..d {
                    let sd = (0.5 * log_vars.data()[c * d + j]).exp();
                    out.push(means.data()[c * d + j] + sd * rng.normal());
                }
            }
            Tensor::new(vec![n, d], out)
        }
    }
}

/// Draws `n` latents and decodes them to data space.
pub fn sample(state: &SamplerState, model: &Model, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if state.latent_dim != model.latent_dim() {
        return Err(Error::invalid(format!(
            "sampler latent dim {} does not match model latent dim {}",
            state.latent_dim,
            model.latent_dim()
        )));
    }
    model.decode_latent(&sample_latents(state, n, rng)?)
}

/// Per-row latent log-density where the sampler has a tractable one.
pub fn latent_log_density(state: &SamplerState, z: &Tensor) -> Result<Vec<f64>> {
    check_latents(z, state.latent_dim, "latents")?;
    match &state.payload {
        SamplerPayload::Normal => Ok(z
            .rows()
            .map(|r| -0.5 * (r.len() as f64 * LN_2PI + r.iter().map(|v| v * v).sum::<f64>()))
            .collect()),
        SamplerPayload::GMM(p) => gmm_log_density(p, z),
        SamplerPayload::MAF(m) => m.log_prob(z),
        SamplerPayload::VAMP { means, log_vars } => {
            let g = Graph::new();
            let k = means.shape()[0] as f64;
            let m = log_normal_pairwise(g.constant(z.clone()), g.constant(means.clone()), g.constant(log_vars.clone()))?;
            Ok(m.logsumexp_axis(1)?.add_scalar(-k.ln()).value().into_data())
        }
        SamplerPayload::TwoStageVAE(_) => Err(Error::invalid("the two-stage sampler has no closed-form density")),
    }
}
