use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::nn::{Activation, Bound, Encoder, Mlp, ParamGroup, ParamStore};
use crate::stats::{kl_diag_std_normal, reparameterize};
use crate::tensor::{Graph, Rng, Tensor};
use crate::training::{train, GroupLoss, RunLog, TrainConfig, Trainable};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub hidden_dims: Vec<usize>,
    /// Second-stage latent size; defaults to the first-stage latent size.
    pub latent_dim: Option<usize>,
    pub train: TrainConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            hidden_dims: vec![1024, 1024],
            latent_dim: None,
            train: TrainConfig {
                num_epochs: 200,
                learning_rate: 1e-4,
                batch_size: 100,
                ..TrainConfig::default()
            },
        }
    }
}

/// Second-stage VAE over latent codes, with a unit-variance Gaussian decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageVae {
    pub config: TwoStageConfig,
    pub dim: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Mlp,
}

#[derive(Serialize, Deserialize)]
struct TwoStageState {
    config: TwoStageConfig,
    dim: usize,
    params: Vec<Tensor>,
}

impl Serialize for TwoStageVae {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TwoStageState {
            config: self.config.clone(),
            dim: self.dim,
            params: self.store.entries().iter().map(|e| e.tensor.clone()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TwoStageVae {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let state = TwoStageState::deserialize(d)?;
        let mut vae = TwoStageVae::new(state.dim, &state.config, &mut Rng::new(0)).map_err(D::Error::custom)?;
        if state.params.len() != vae.store.len() {
            return Err(D::Error::custom("two-stage state does not match its architecture"));
        }
        for (i, t) in state.params.into_iter().enumerate() {
            let e = vae.store.entry_mut(i);
            if e.tensor.shape() != t.shape() {
                return Err(D::Error::custom(format!("two-stage tensor '{}' has shape {:?}", e.name, t.shape())));
            }
            e.tensor = t;
        }
        Ok(vae)
    }
}

impl TwoStageVae {
    pub fn new(dim: usize, config: &TwoStageConfig, rng: &mut Rng) -> Result<TwoStageVae> {
        let k = config.latent_dim.unwrap_or(dim);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&mut store, dim, &config.hidden_dims, k, true, rng)?;
        let decoder = Mlp::build(&mut store, "decoder", k, &config.hidden_dims, dim, Activation::Relu, ParamGroup::Decoder, rng)?;
        Ok(TwoStageVae {
            config: config.clone(),
            dim,
            store,
            encoder,
            decoder,
        })
    }

    pub fn fit(train_latents: &Tensor, val_latents: Option<&Tensor>, config: &TwoStageConfig) -> Result<(TwoStageVae, RunLog)> {
        if train_latents.rank() != 2 {
            return Err(Error::invalid(format!("two-stage VAE expects [N×d] latents, got {:?}", train_latents.shape())));
        }
        let d = train_latents.shape()[1];
        let out = train(|rng: &mut Rng| TwoStageVae::new(d, config, rng), train_latents, val_latents, &config.train)?;
        Ok((out.best_model, out.log))
    }

    /// Second-stage prior draws mapped through the decoder mean.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let k = self.encoder.latent_dim;
        self.decoder.apply(&self.store, &Tensor::randn(&[n, k], rng))
    }
}

impl Trainable for TwoStageVae {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn losses<'g>(
        &mut self,
        g: &'g Graph,
        p: &Bound<'g>,
        batch: &Tensor,
        rng: &mut Rng,
        _train: bool,
    ) -> Result<Vec<GroupLoss<'g>>> {
        let x = g.constant(batch.clone());
        let enc = self.encoder.encode(p, x)?;
        let lv = enc.log_var()?;
        let u = reparameterize(enc.mu, lv, rng)?;
        let x_hat = self.decoder.forward(p, u)?;
        let recon = x.sub(x_hat)?.square().sum_axis(1)?.mean().mul_scalar(0.5);
        let loss = recon.add(kl_diag_std_normal(enc.mu, lv)?.mean())?;
        Ok(vec![GroupLoss::new("nll", loss, &[ParamGroup::Encoder, ParamGroup::Decoder])])
    }
}
