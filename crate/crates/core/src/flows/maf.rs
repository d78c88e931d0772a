use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::nn::{Bound, Made, MaskOrdering, ParamGroup, ParamStore};
use crate::stats::log_standard_normal;
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::training::{train, GroupLoss, RunLog, TrainConfig, Trainable};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MafConfig {
    pub hidden_size: usize,
    pub hidden_layers: usize,
    pub n_blocks: usize,
    pub train: TrainConfig,
}

impl Default for MafConfig {
    fn default() -> Self {
        MafConfig {
            hidden_size: 128,
            hidden_layers: 3,
            n_blocks: 2,
            train: TrainConfig {
                num_epochs: 200,
                learning_rate: 1e-4,
                batch_size: 100,
                ..TrainConfig::default()
            },
        }
    }
}

/// Masked autoregressive flow over `N(0, I)`. The density direction maps
/// `x ↦ u = (x − μ(x))·exp(−s(x))` block by block; blocks alternate orderings.
#[derive(Clone, Debug, PartialEq)]
pub struct MafModel {
    pub config: MafConfig,
    pub dim: usize,
    pub store: ParamStore,
    pub blocks: Vec<Made>,
}

#[derive(Serialize, Deserialize)]
struct MafState {
    config: MafConfig,
    dim: usize,
    params: Vec<Tensor>,
}

impl Serialize for MafModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MafState {
            config: self.config.clone(),
            dim: self.dim,
            params: self.store.entries().iter().map(|e| e.tensor.clone()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MafModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let state = MafState::deserialize(d)?;
        let mut model = MafModel::new(state.dim, &state.config, &mut Rng::new(0)).map_err(D::Error::custom)?;
        if state.params.len() != model.store.len() {
            return Err(D::Error::custom(format!(
                "MAF state has {} tensors, architecture needs {}",
                state.params.len(),
                model.store.len()
            )));
        }
        for (i, t) in state.params.into_iter().enumerate() {
            let e = model.store.entry_mut(i);
            if e.tensor.shape() != t.shape() {
                return Err(D::Error::custom(format!("MAF tensor '{}' has shape {:?}", e.name, t.shape())));
            }
            e.tensor = t;
        }
        Ok(model)
    }
}

impl MafModel {
    pub fn new(d: usize, config: &MafConfig, rng: &mut Rng) -> Result<MafModel> {
        if config.n_blocks == 0 {
            return Err(Error::invalid("MAF needs at least one block"));
        }
        let mut store = ParamStore::new();
        let hidden = vec![config.hidden_size; config.hidden_layers];
        let blocks = (0..config.n_blocks)
            .map(|k| {
                let ordering = match k % 2 {
                    0 => MaskOrdering::Natural,
                    _ => MaskOrdering::Reversed,
                };
                Made::build(&mut store, &format!("maf.{k}"), d, &hidden, ordering, ParamGroup::Flow, rng)
            })
            .collect::<Result<_>>()?;
        Ok(MafModel {
            config: config.clone(),
            dim: d,
            store,
            blocks,
        })
    }

    /// Base noise and accumulated `log|det ∂u/∂x|` for a batch.
    pub fn to_noise_var<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let mut h = x;
        let mut total: Option<Var<'g>> = None;
        for block in &self.blocks {
            let (mu, s) = block.forward(p, h)?;
            h = h.sub(mu)?.mul(s.neg().exp())?;
            let ld = s.sum_axis(1)?.neg();
            total = Some(match total {
                Some(t) => t.add(ld)?,
                None => ld,
            });
        }
        Ok((h, total.expect("at least one block")))
    }

    pub fn log_prob_var<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let (u, ld) = self.to_noise_var(p, x)?;
        log_standard_normal(u)?.add(ld)
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.rank() != 2 || z.shape()[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "maf",
                lhs: z.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        Ok(())
    }

    pub fn log_prob(&self, z: &Tensor) -> Result<Vec<f64>> {
        self.check(z)?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        Ok(self.log_prob_var(&p, g.constant(z.clone()))?.value().into_data())
    }

    pub fn to_noise(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        Ok(self.to_noise_var(&p, g.constant(x.clone()))?.0.value())
    }

    /// Inverts the density transform. Each block needs `d` sequential passes,
    /// one per coordinate in its ordering.
    pub fn from_noise(&self, u: &Tensor) -> Result<Tensor> {
        self.check(u)?;
        let mut target = u.clone();
        for block in self.blocks.iter().rev() {
            let mut x = Tensor::zeros(u.shape());
            for _ in 0..self.dim {
                let g = Graph::new();
                let p = self.store.bind_frozen(&g);
                let (mu, s) = block.forward(&p, g.constant(x.clone()))?;
                let (mu, s) = (mu.value(), s.value());
                x = Tensor::new(
                    u.shape().to_vec(),
                    target
                        .data()
                        .iter()
                        .zip(mu.data().iter().zip(s.data()))
                        .map(|(t, (m, s))| t * s.exp() + m)
                        .collect(),
                )?;
            }
            target = x;
        }
        Ok(target)
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        self.from_noise(&Tensor::randn(&[n, self.dim], rng))
    }

    /// Maximum-likelihood fit with the shared trainer.
    pub fn fit(train_latents: &Tensor, val_latents: Option<&Tensor>, config: &MafConfig) -> Result<(MafModel, RunLog)> {
        if train_latents.rank() != 2 {
            return Err(Error::invalid(format!("MAF expects [N×d] latents, got {:?}", train_latents.shape())));
        }
        let d = train_latents.shape()[1];
        let outcome = train(
            |rng: &mut Rng| MafModel::new(d, config, rng),
            train_latents,
            val_latents,
            &config.train,
        )?;
        Ok((outcome.best_model, outcome.log))
    }
}

impl Trainable for MafModel {
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
        _rng: &mut Rng,
        _train: bool,
    ) -> Result<Vec<GroupLoss<'g>>> {
        let lp = self.log_prob_var(p, g.constant(batch.clone()))?;
        Ok(vec![GroupLoss::new("nll", lp.mean().neg(), &[ParamGroup::Flow])])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::DiagGaussian;

    fn small() -> MafConfig {
        MafConfig {
            hidden_size: 16,
            hidden_layers: 2,
            ..MafConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_standard_normal() {
        let mut m = MafModel::new(3, &small(), &mut Rng::new(0)).unwrap();
        for i in 0..m.store.len() {
            let e = m.store.entry_mut(i);
            e.tensor = e.tensor.map(|_| 0.0);
        }
        let z = Tensor::randn(&[5, 3], &mut Rng::new(1));
        let a = m.log_prob(&z).unwrap();
        let b = DiagGaussian::standard(3).log_density(&z).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_inverts_density_map() {
        let m = MafModel::new(4, &small(), &mut Rng::new(2)).unwrap();
        let u = Tensor::randn(&[6, 4], &mut Rng::new(3));
        let x = m.from_noise(&u).unwrap();
        let back = m.to_noise(&x).unwrap();
        for (a, b) in u.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn serde_round_trip() {
        let m = MafModel::new(2, &small(), &mut Rng::new(4)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: MafModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
