use std::collections::BTreeMap;

use serde_json::Value;

use super::losses::{
    fd_jacobian_penalty, iwae_log_bound, log_normal_pairwise, msssim, nearest_codes, permute_dims, reconstruction_per_row,
    tc_decomposition, AuxVar, Codebook, LossBreakdown, LossTerms,
};
use super::{max_msssim_scales, ModelConfig, ModelKind};
use crate::flows::{FlowChain, IafChain};
use crate::nn::{Activation, Bound, Decoder, Dense, Encoder, EncoderOutput, Mlp, ParamGroup, ParamId, ParamStore};
use crate::stats::{kl_diag_std_normal, log_normal_diag, log_standard_normal, mmd, reparameterize, MmdKernelSpec};
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::training::{GroupLoss, Trainable};
use crate::{Error, Result};

/// Rows per graph when running inference over a whole dataset.
const INFERENCE_CHUNK: usize = 512;

/// Kind-specific networks and state beyond the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub enum Extra {
    None,
    LinearFlows(FlowChain),
    Iaf(IafChain),
    /// Pseudo-inputs are `tanh(map(seeds))`.
    Vamp { seeds: ParamId, map: Dense },
    Discriminator(Mlp),
    Msssim { height: usize, width: usize, window: usize, scales: usize },
    Vq { codebook: ParamId, cluster_size: ParamId, embed_sum: ParamId },
}

/// One generative autoencoder of any supported kind.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub extra: Extra,
    dataset_size: Option<usize>,
    pending_vq: Option<(Tensor, Vec<usize>)>,
}

/// Differentiable outputs of one forward pass.
pub struct ModelOutput<'g> {
    pub terms: LossTerms<'g>,
    /// Losses for the other optimizer groups (decoder split, discriminator).
    pub adversaries: Vec<GroupLoss<'g>>,
    /// VQ slots and their code indices, consumed by the EMA update.
    pub assignments: Option<(Tensor, Vec<usize>)>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let kind = config.kind;
        let (dd, d) = (config.data_dim(), config.latent_dim);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&mut store, dd, &config.encoder_hidden_dims(), d, !kind.deterministic_encoder(), rng)?;
        let decoder = Decoder::build(&mut store, d, &config.decoder_hidden_dims(), dd, rng)?;
        let extra = match kind {
            ModelKind::VaeLinNf => Extra::LinearFlows(FlowChain::build(&mut store, &config.flow_sequence()?, d, rng)?),
            ModelKind::VaeIaf => Extra::Iaf(IafChain::build(
                &mut store,
                d,
                config.made_hidden_size(),
                config.made_hidden_layers(),
                config.n_made_blocks(),
                rng,
            )?),
            ModelKind::VAMP => {
                let k = config.n_pseudo_inputs();
                let seeds = store.add("vamp.seeds", ParamGroup::Prior, Tensor::eye(k));
                let map = Dense::build(&mut store, "vamp.pseudo_inputs", k, dd, Activation::Tanh, ParamGroup::Prior, rng);
                Extra::Vamp { seeds, map }
            }
            ModelKind::FactorVAE => {
                let hidden = config.disc_hidden_dims();
                Extra::Discriminator(Mlp::build(
                    &mut store,
                    "discriminator",
                    d,
                    &hidden,
                    1,
                    Activation::LeakyRelu,
                    ParamGroup::Discriminator,
                    rng,
                )?)
            }
            ModelKind::AAE => Extra::Discriminator(Mlp::build(
                &mut store,
                "discriminator",
                d,
                &config.disc_hidden_dims(),
                1,
                Activation::Relu,
                ParamGroup::Discriminator,
                rng,
            )?),
            ModelKind::VAEGAN => {
                let hidden = config.disc_hidden_dims();
                let l = config.reconstruction_layer();
                if l == 0 || l > hidden.len() {
                    return Err(Error::Config {
                        pointer: "/reconstruction_layer".into(),
                        message: format!("layer {l} out of range 1..={}", hidden.len()),
                    });
                }
                // second hidden layer is tanh, the rest ReLU
                let mut acts: Vec<Activation> = (0..hidden.len())
                    .map(|i| if i == 1 { Activation::Tanh } else { Activation::Relu })
                    .collect();
                acts.push(Activation::Identity);
                Extra::Discriminator(Mlp::build_with(
                    &mut store,
                    "discriminator",
                    dd,
                    &hidden,
                    1,
                    &acts,
                    ParamGroup::Discriminator,
                    rng,
                )?)
            }
            ModelKind::MsssimVae => {
                let (height, width) = config.image_hw()?;
                let window = config.window_size();
                let max = max_msssim_scales(height, width, window);
                let scales = config.msssim_scales.unwrap_or(max);
                if scales == 0 || scales > max {
                    return Err(Error::Config {
                        pointer: "/msssim_scales".into(),
                        message: format!("a {height}×{width} image supports at most {max} scale(s) with window {window}"),
                    });
                }
                Extra::Msssim {
                    height,
                    width,
                    window,
                    scales,
                }
            }
            ModelKind::VQVAE => {
                let cb = Codebook::new(config.codebook_size(), config.embedding_dim(), config.ema_decay(), config.ema_epsilon(), rng)?;
                Extra::Vq {
                    codebook: store.add("vq.codebook", ParamGroup::Buffer, cb.embeddings),
                    cluster_size: store.add("vq.ema_cluster_size", ParamGroup::Buffer, cb.ema_cluster_size),
                    embed_sum: store.add("vq.ema_embed_sum", ParamGroup::Buffer, cb.ema_embed_sum),
                }
            }
            _ => Extra::None,
        };
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
            extra,
            dataset_size: None,
            pending_vq: None,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim()
    }

    /// Dataset size used by the minibatch-weighted estimator.
    pub fn set_dataset_size(&mut self, n: usize) {
        self.dataset_size = Some(n);
    }

    pub fn dataset_size(&self) -> Option<usize> {
        self.config.dataset_size.or(self.dataset_size)
    }

    /// Free-form run metadata describing implementation strategies.
    pub fn metadata(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        if self.kind() == ModelKind::RaeGp {
            m.insert("gradient_penalty".into(), Value::from("forward_finite_difference"));
            m.insert("gradient_penalty_step".into(), Value::from(self.config.gp_step()));
        }
        m
    }

    fn discriminator(&self) -> Result<&Mlp> {
        match &self.extra {
            Extra::Discriminator(d) => Ok(d),
            _ => Err(Error::invalid(format!("{} has no discriminator", self.kind()))),
        }
    }

    pub fn codebook(&self) -> Result<Codebook> {
        match &self.extra {
            Extra::Vq {
                codebook,
                cluster_size,
                embed_sum,
            } => Ok(Codebook {
                embeddings: self.store.get(*codebook).clone(),
                ema_cluster_size: self.store.get(*cluster_size).clone(),
                ema_embed_sum: self.store.get(*embed_sum).clone(),
                decay: self.config.ema_decay(),
                epsilon: self.config.ema_epsilon(),
            }),
            _ => Err(Error::invalid(format!("{} has no codebook", self.kind()))),
        }
    }

    fn set_codebook(&mut self, cb: Codebook) -> Result<()> {
        let Extra::Vq {
            codebook,
            cluster_size,
            embed_sum,
        } = self.extra
        else {
            return Err(Error::invalid(format!("{} has no codebook", self.kind())));
        };
        *self.store.get_mut(codebook) = cb.embeddings;
        *self.store.get_mut(cluster_size) = cb.ema_cluster_size;
        *self.store.get_mut(embed_sum) = cb.ema_embed_sum;
        Ok(())
    }

    /// Applies one EMA codebook step from explicit assignments.
    pub fn apply_vq_ema(&mut self, slots: &Tensor, indices: &[usize]) -> Result<()> {
        let mut cb = self.codebook()?;
        cb.ema_update(slots, indices);
        self.set_codebook(cb)
    }

    fn check_batch(&self, x: &[usize]) -> Result<()> {
        if x.len() != 2 || x[1] != self.data_dim() || x[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: x.to_vec(),
                rhs: vec![self.data_dim()],
            });
        }
        Ok(())
    }

    fn recon_mean<'g>(&self, logits: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(reconstruction_per_row(self.config.reconstruction(), logits, x)?.mean())
    }

    fn pseudo_inputs<'g>(&self, p: &Bound<'g>) -> Result<Var<'g>> {
        match &self.extra {
            Extra::Vamp { seeds, map } => map.forward(p, p.get(*seeds)),
            _ => Err(Error::invalid(format!("{} has no pseudo-inputs", self.kind()))),
        }
    }

    /// Quantizes `z_e: [B×d]` slot by slot; returns the straight-through
    /// decoder input, the stopped quantized latent and the assignments.
    fn quantize<'g>(&self, p: &Bound<'g>, z_e: Var<'g>) -> Result<(Var<'g>, Var<'g>, Var<'g>, Tensor, Vec<usize>)> {
        let Extra::Vq { codebook, .. } = self.extra else {
            return Err(Error::invalid(format!("{} has no codebook", self.kind())));
        };
        let g = z_e.graph();
        let (b, d) = (z_e.shape()[0], z_e.shape()[1]);
        let de = self.config.embedding_dim();
        let slots = z_e.reshape(&[b * d / de, de])?;
        let cb = p.get(codebook);
        let slot_values = slots.value();
        let idx = nearest_codes(&slot_values, &cb.value());
        let k = cb.shape()[0];
        let mut onehot = Tensor::zeros(&[idx.len(), k]);
        for (r, &i) in idx.iter().enumerate() {
            onehot.data_mut()[r * k + i] = 1.0;
        }
        let z_q = g.constant(onehot).matmul(cb)?.stop_gradient();
        let st = slots.add(z_q.sub(slots)?.stop_gradient())?;
        Ok((st.reshape(&[b, d])?, z_q, slots, slot_values, idx))
    }

    /// Loss terms and adversary losses for one batch.
    pub fn forward_terms<'g>(&self, p: &Bound<'g>, x: Var<'g>, rng: &mut Rng) -> Result<ModelOutput<'g>> {
        self.check_batch(&x.shape())?;
        let g = x.graph();
        let cfg = &self.config;
        let kind = cfg.kind;
        let b = x.shape()[0];
        let d = cfg.latent_dim;
        let enc = self.encoder.encode(p, x)?;
        let zero = g.scalar(0.0);
        let mut adversaries = Vec::new();
        let mut assignments = None;
        let post = |rng: &mut Rng| -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
            let lv = enc.log_var()?;
            Ok((enc.mu, lv, reparameterize(enc.mu, lv, rng)?))
        };
        let kl = |enc: &EncoderOutput<'g>| -> Result<Var<'g>> { Ok(kl_diag_std_normal(enc.mu, enc.log_var()?)?.mean()) };

        let terms = match kind {
            ModelKind::AE => {
                let recon = self.recon_mean(self.decoder.logits(p, enc.mu)?, x)?;
                LossTerms::assemble(recon, zero, 0.0, vec![])?
            }
            ModelKind::VAE | ModelKind::BetaVAE => {
                let (_, _, z) = post(rng)?;
                let recon = self.recon_mean(self.decoder.logits(p, z)?, x)?;
                LossTerms::assemble(recon, kl(&enc)?, cfg.beta(), vec![])?
            }
            ModelKind::VaeLinNf | ModelKind::VaeIaf => {
                let (mu, lv, z0) = post(rng)?;
                let (zk, log_det) = match &self.extra {
                    Extra::LinearFlows(chain) => chain.forward(p, z0)?,
                    Extra::Iaf(chain) => chain.forward(p, z0)?,
                    _ => unreachable!("flow models carry a flow"),
                };
                let recon = self.recon_mean(self.decoder.logits(p, zk)?, x)?;
                let log_q = log_normal_diag(z0, mu, lv)?.sub(log_det)?;
                let reg = log_q.sub(log_standard_normal(zk)?)?.mean();
                LossTerms::assemble(recon, reg, 1.0, vec![])?
            }
            ModelKind::IWAE => {
                let (mu, lv) = (enc.mu, enc.log_var()?);
                let l = cfg.n_samples();
                let mut log_w = Vec::with_capacity(l);
                let mut recon_rows = Vec::with_capacity(l);
                let mut kl_rows = Vec::with_capacity(l);
                for _ in 0..l {
                    let z = reparameterize(mu, lv, rng)?;
                    let rec = reconstruction_per_row(cfg.reconstruction(), self.decoder.logits(p, z)?, x)?;
                    let log_ratio = log_normal_diag(z, mu, lv)?.sub(log_standard_normal(z)?)?;
                    log_w.push(rec.add(log_ratio)?.neg().reshape(&[1, b])?);
                    recon_rows.push(rec.reshape(&[1, b])?);
                    kl_rows.push(log_ratio.reshape(&[1, b])?);
                }
                let bound = iwae_log_bound(Var::concat(&log_w, 0)?)?.mean();
                let recon = Var::concat(&recon_rows, 0)?.mean();
                let reg = Var::concat(&kl_rows, 0)?.mean();
                // bound − single-sample ELBO, ≥ 0 by Jensen
                let gain = bound.add(recon)?.add(reg)?;
                LossTerms::assemble(
                    recon,
                    reg,
                    1.0,
                    vec![AuxVar {
                        name: "importance_gain",
                        value: gain,
                        weight: -1.0,
                    }],
                )?
            }
            ModelKind::VAMP => {
                let (mu, lv, z) = post(rng)?;
                let recon = self.recon_mean(self.decoder.logits(p, z)?, x)?;
                let u = self.pseudo_inputs(p)?;
                let comp = self.encoder.encode(p, u)?;
                let k = u.shape()[0] as f64;
                let log_prior = log_normal_pairwise(z, comp.mu, comp.log_var()?)?
                    .logsumexp_axis(1)?
                    .add_scalar(-k.ln());
                let reg = log_normal_diag(z, mu, lv)?.sub(log_prior)?.mean();
                LossTerms::assemble(recon, reg, 1.0, vec![])?
            }
            ModelKind::BetaTCVAE => {
                let (mu, lv, z) = post(rng)?;
                let recon = self.recon_mean(self.decoder.logits(p, z)?, x)?;
                let n = cfg.dataset_size.or(self.dataset_size).unwrap_or(b);
                let tc = tc_decomposition(z, mu, lv, n)?;
                LossTerms::assemble(
                    recon,
                    tc.dimensionwise_kl,
                    cfg.gamma(),
                    vec![
                        AuxVar {
                            name: "mutual_information",
                            value: tc.mutual_information,
                            weight: cfg.alpha(),
                        },
                        AuxVar {
                            name: "total_correlation",
                            value: tc.total_correlation,
                            weight: cfg.beta(),
                        },
                    ],
                )?
            }
            ModelKind::FactorVAE => {
                if b < 4 {
                    return Err(Error::invalid("FactorVAE needs a batch of at least 4 (two halves of ≥ 2)"));
                }
                let (_, _, z) = post(rng)?;
                let recon = self.recon_mean(self.decoder.logits(p, z)?, x)?;
                let disc = self.discriminator()?;
                let half = b / 2;
                let z1 = z.slice(0, 0, half)?;
                let z2 = z.slice(0, half, b)?;
                let tc = disc.forward(p, z1)?.mean();
                let perm = g.constant(permute_dims(&z2.value(), rng));
                let real = disc.forward(p, z1.stop_gradient())?.neg().softplus().mean();
                let fake = disc.forward(p, perm)?.softplus().mean();
                adversaries.push(GroupLoss::new(
                    "discriminator",
                    real.add(fake)?.mul_scalar(0.5),
                    &[ParamGroup::Discriminator],
                ));
                LossTerms::assemble(
                    recon,
                    kl(&enc)?,
                    1.0,
                    vec![AuxVar {
                        name: "total_correlation",
                        value: tc,
                        weight: cfg.gamma(),
                    }],
                )?
            }
            ModelKind::InfoVaeRbf | ModelKind::InfoVaeImq | ModelKind::WaeRbf | ModelKind::WaeImq => {
                let z = if kind.deterministic_encoder() { enc.mu } else { post(rng)?.2 };
                let recon = self.recon_mean(self.decoder.logits(p, z)?, x)?;
                let prior = g.constant(Tensor::randn(&[b, d], rng));
                let spec = MmdKernelSpec::new(kind.kernel().expect("MMD kinds carry a kernel"), cfg.kernel_bandwidth(), d)?;
                LossTerms::assemble(recon, mmd(z, prior, &spec)?, cfg.lambda(), vec![])?
            }
            ModelKind::AAE => {
                let (_, _, z) = post(rng)?;
                let recon = self.recon_mean(self.decoder.logits(p, z)?, x)?;
                let disc = self.discriminator()?;
                // non-saturating: the encoder wants D(z) → prior label
                let gen = disc.forward(p, z)?.neg().softplus().mean();
                let prior = g.constant(Tensor::randn(&[b, d], rng));
                let real = disc.forward(p, prior)?.neg().softplus().mean();
                let fake = disc.forward(p, z.stop_gradient())?.softplus().mean();
                adversaries.push(GroupLoss::new(
                    "discriminator",
                    real.add(fake)?.mul_scalar(0.5),
                    &[ParamGroup::Discriminator],
                ));
                LossTerms::assemble(recon, gen, cfg.alpha(), vec![])?
            }
            ModelKind::VAEGAN => {
                let (_, _, z) = post(rng)?;
                let x_hat = self.decoder.decode(p, z)?;
                let x_gen = self.decoder.decode(p, g.constant(Tensor::randn(&[b, d], rng)))?;
                let disc = self.discriminator()?;
                let l = cfg.reconstruction_layer() - 1;
                let f_real = disc.forward_all(p, x)?;
                let f_hat = disc.forward_all(p, x_hat)?;
                let feat = f_real[l].sub(f_hat[l])?.square().sum_axis(1)?.mean().mul_scalar(0.5);
                let logit_hat = *f_hat.last().expect("discriminator has layers");
                let logit_gen = disc.forward(p, x_gen)?;
                let gen = logit_hat
                    .neg()
                    .softplus()
                    .mean()
                    .add(logit_gen.neg().softplus().mean())?;
                let alpha = cfg.alpha();
                adversaries.push(GroupLoss::new(
                    "decoder",
                    feat.mul_scalar(alpha).add(gen.mul_scalar(1.0 - alpha))?,
                    &[ParamGroup::Decoder],
                ));
                let d_real = f_real.last().expect("discriminator has layers").neg().softplus().mean();
                let d_hat = disc.forward(p, x_hat.stop_gradient())?.softplus().mean();
                let d_gen = disc.forward(p, x_gen.stop_gradient())?.softplus().mean();
                adversaries.push(GroupLoss::new(
                    "discriminator",
                    d_real.add(d_hat)?.add(d_gen)?.mul_scalar(1.0 / 3.0),
                    &[ParamGroup::Discriminator],
                ));
                LossTerms::assemble(
                    feat,
                    kl(&enc)?,
                    1.0,
                    vec![AuxVar {
                        name: "gan_generator",
                        value: gen,
                        weight: 0.0,
                    }],
                )?
            }
            ModelKind::MsssimVae => {
                let Extra::Msssim {
                    height,
                    width,
                    window,
                    scales,
                } = self.extra
                else {
                    unreachable!("MS-SSIM models carry their geometry")
                };
                let (_, _, z) = post(rng)?;
                let x_hat = self.decoder.decode(p, z)?;
                let sim = msssim(x, x_hat, height, width, window, scales)?;
                let recon = sim.neg().add_scalar(1.0).mean();
                LossTerms::assemble(recon, kl(&enc)?, cfg.beta(), vec![])?
            }
            ModelKind::VQVAE => {
                let (st, z_q, slots, slot_values, idx) = self.quantize(p, enc.mu)?;
                let recon = self.recon_mean(self.decoder.logits(p, st)?, x)?;
                let inv_b = 1.0 / b as f64;
                let commitment = slots.sub(z_q)?.square().sum().mul_scalar(inv_b);
                let codebook_term = slots.stop_gradient().sub(z_q)?.square().sum().mul_scalar(inv_b);
                assignments = Some((slot_values, idx));
                LossTerms::assemble(
                    recon,
                    commitment,
                    cfg.beta(),
                    vec![AuxVar {
                        name: "codebook",
                        value: codebook_term,
                        weight: 0.0,
                    }],
                )?
            }
            ModelKind::RaeL2 | ModelKind::RaeGp => {
                let z = enc.mu;
                let recon = self.recon_mean(self.decoder.logits(p, z)?, x)?;
                let reg = z.square().sum_axis(1)?.mean().mul_scalar(0.5);
                let aux = if kind == ModelKind::RaeL2 {
                    let mut sq = zero;
                    for id in self.decoder.net.weight_ids() {
                        sq = sq.add(p.get(id).square().sum())?;
                    }
                    AuxVar {
                        name: "decoder_l2",
                        value: sq,
                        weight: cfg.lambda(),
                    }
                } else {
                    let pen = fd_jacobian_penalty(|z| self.decoder.decode(p, z), z, cfg.gp_step())?.mean();
                    AuxVar {
                        name: "gradient_penalty",
                        value: pen,
                        weight: cfg.lambda(),
                    }
                };
                LossTerms::assemble(recon, reg, cfg.beta(), vec![aux])?
            }
        };
        Ok(ModelOutput {
            terms,
            adversaries,
            assignments,
        })
    }

    /// Loss parts for `batch` with parameters frozen.
    pub fn loss_breakdown(&self, batch: &Tensor, rng: &mut Rng) -> Result<LossBreakdown> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = self.forward_terms(&p, g.constant(batch.clone()), rng)?;
        Ok(out.terms.breakdown())
    }

    fn chunked(&self, x: &Tensor, f: impl Fn(&Bound<'_>, Var<'_>) -> Result<Tensor>) -> Result<Tensor> {
        self.check_batch(x.shape())?;
        let n = x.shape()[0];
        let mut parts = Vec::with_capacity(n.div_ceil(INFERENCE_CHUNK));
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let g = Graph::new();
            let p = self.store.bind_frozen(&g);
            parts.push(f(&p, g.constant(x.select_rows(&idx)))?);
        }
        Tensor::vstack(&parts)
    }

    /// Posterior means `μ_φ(x)`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.chunked(x, |p, xv| Ok(self.encoder.encode(p, xv)?.mu.value()))
    }

    /// Deterministic latent fed to the decoder: `μ`, flowed `μ` for flow
    /// posteriors, the quantized code for VQ-VAE. Samplers fit on these.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.chunked(x, |p, xv| {
            let mu = self.encoder.encode(p, xv)?.mu;
            Ok(match &self.extra {
                Extra::LinearFlows(chain) => chain.forward(p, mu)?.0.value(),
                Extra::Iaf(chain) => chain.forward(p, mu)?.0.value(),
                Extra::Vq { .. } => {
                    let shape = mu.shape().to_vec();
                    self.quantize(p, mu)?.1.reshape(&shape)?.value()
                }
                _ => mu.value(),
            })
        })
    }

    /// Decoder means in `(0, 1)` for latents `z: [N×d]`.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.shape()[1] != self.latent_dim() {
            return Err(Error::ShapeMismatch {
                op: "decode_latent",
                lhs: z.shape().to_vec(),
                rhs: vec![self.latent_dim()],
            });
        }
        let mut parts = Vec::new();
        let n = z.shape()[0];
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let g = Graph::new();
            let p = self.store.bind_frozen(&g);
            parts.push(self.decoder.decode(&p, g.constant(z.select_rows(&idx)))?.value());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.data_dim()]));
        }
        Tensor::vstack(&parts)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode_latent(&self.embed(x)?)
    }

    /// Means and log-variances of the VampPrior mixture components, `[K×d]` each.
    pub fn vamp_components(&self) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let u = self.pseudo_inputs(&p)?;
        let enc = self.encoder.encode(&p, u)?;
        Ok((enc.mu.value(), enc.log_var()?.value()))
    }
}

impl Trainable for Model {
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
        train: bool,
    ) -> Result<Vec<GroupLoss<'g>>> {
        let out = self.forward_terms(p, g.constant(batch.clone()), rng)?;
        if train {
            self.pending_vq = out.assignments;
        }
        let groups: &[ParamGroup] = if self.kind() == ModelKind::VAEGAN {
            &[ParamGroup::Encoder]
        } else {
            &[ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Prior, ParamGroup::Flow]
        };
        let mut losses = vec![GroupLoss::new("total", out.terms.total, groups)];
        losses.extend(out.adversaries);
        Ok(losses)
    }

    fn post_step(&mut self) -> Result<()> {
        if let Some((slots, idx)) = self.pending_vq.take() {
            self.apply_vq_ema(&slots, &idx)?;
        }
        Ok(())
    }

    fn min_batch(&self) -> usize {
        match self.kind() {
            ModelKind::FactorVAE => 4,
            ModelKind::BetaTCVAE | ModelKind::InfoVaeRbf | ModelKind::InfoVaeImq | ModelKind::WaeRbf | ModelKind::WaeImq => 2,
            _ => 1,
        }
    }

    fn prepare(&mut self, n_train: usize) {
        self.dataset_size = Some(n_train);
    }
}
