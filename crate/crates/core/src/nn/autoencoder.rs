use super::{Activation, Bound, Mlp, ParamGroup, ParamStore};
use crate::tensor::{Rng, Var};
use crate::{Error, Result};

/// Bounds applied to every log-variance before it is exponentiated.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Posterior parameters for a batch. `log_var` is `None` for deterministic encoders.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'g> {
    pub mu: Var<'g>,
    pub log_var: Option<Var<'g>>,
}

impl<'g> EncoderOutput<'g> {
    pub fn log_var(&self) -> Result<Var<'g>> {
        self.log_var
            .ok_or_else(|| Error::invalid("deterministic encoder has no log-variance"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub net: Mlp,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub variational: bool,
}

impl Encoder {
    pub fn build(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        variational: bool,
        rng: &mut Rng,
    ) -> Result<Encoder> {
        let out = if variational { 2 * latent_dim } else { latent_dim };
        let net = Mlp::build(store, "encoder", input_dim, hidden, out, Activation::Relu, ParamGroup::Encoder, rng)?;
        Ok(Encoder {
            net,
            input_dim,
            latent_dim,
            variational,
        })
    }

    pub fn encode<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<EncoderOutput<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![self.input_dim],
            });
        }
        let h = self.net.forward(p, x)?;
        let d = self.latent_dim;
        if self.variational {
            let mu = h.slice(1, 0, d)?;
            let log_var = h.slice(1, d, 2 * d)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
            Ok(EncoderOutput {
                mu,
                log_var: Some(log_var),
            })
        } else {
            Ok(EncoderOutput { mu: h, log_var: None })
        }
    }
}

/// Maps latents to Bernoulli logits; [`Decoder::decode`] applies the sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub net: Mlp,
    pub latent_dim: usize,
    pub output_dim: usize,
}

impl Decoder {
    pub fn build(
        store: &mut ParamStore,
        latent_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut Rng,
    ) -> Result<Decoder> {
        let net = Mlp::build(store, "decoder", latent_dim, hidden, output_dim, Activation::Relu, ParamGroup::Decoder, rng)?;
        Ok(Decoder {
            net,
            latent_dim,
            output_dim,
        })
    }

    pub fn logits<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: shape,
                rhs: vec![self.latent_dim],
            });
        }
        self.net.forward(p, z)
    }

    /// Reconstruction in `(0, 1)`.
    pub fn decode<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        Ok(self.logits(p, z)?.sigmoid())
    }
}
