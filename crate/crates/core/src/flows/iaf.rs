use crate::nn::{Bound, Made, MaskOrdering, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Rng, Var};
use crate::{Error, Result};

/// Inverse autoregressive flow: per block `z_k = μ_k + sigmoid(s_k) ⊙ z_{k−1}`
/// with `(μ_k, s_k) = MADE_k(z_{k−1})`. Orderings alternate between blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct IafChain {
    pub blocks: Vec<Made>,
    pub dim: usize,
}

impl IafChain {
    pub fn build(
        store: &mut ParamStore,
        d: usize,
        hidden_size: usize,
        hidden_layers: usize,
        n_blocks: usize,
        rng: &mut Rng,
    ) -> Result<IafChain> {
        if n_blocks == 0 {
            return Err(Error::invalid("IAF needs at least one block"));
        }
        let hidden = vec![hidden_size; hidden_layers];
        let blocks = (0..n_blocks)
            .map(|k| {
                Made::build(
                    store,
                    &format!("iaf.{k}"),
                    d,
                    &hidden,
                    MaskOrdering::for_block(k),
                    ParamGroup::Flow,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(IafChain { blocks, dim: d })
    }

    /// Returns `(z_K, Σ_k Σ_i log sigmoid(s_k)_i)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, z0: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let mut z = z0;
        let mut total: Option<Var<'g>> = None;
        for block in &self.blocks {
            let (mu, s) = block.forward(p, z)?;
            z = mu.add(s.sigmoid().mul(z)?)?;
            let ld = s.log_sigmoid().sum_axis(1)?;
            total = Some(match total {
                Some(t) => t.add(ld)?,
                None => ld,
            });
        }
        Ok((z, total.expect("at least one block")))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.param_ids()).collect()
    }
}
