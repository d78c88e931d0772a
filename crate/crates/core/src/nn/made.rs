use serde::{Deserialize, Serialize};

use super::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Rng, Tensor, Var};
use crate::{Error, Result};

/// Order in which coordinates are autoregressively conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOrdering {
    Natural,
    Reversed,
}

impl MaskOrdering {
    pub fn flipped(self) -> Self {
        match self {
            MaskOrdering::Natural => MaskOrdering::Reversed,
            MaskOrdering::Reversed => MaskOrdering::Natural,
        }
    }

    /// Alternates starting from natural: block `k` uses natural when `k` is even.
    pub fn for_block(k: usize) -> Self {
        if k % 2 == 0 {
            MaskOrdering::Natural
        } else {
            MaskOrdering::Reversed
        }
    }
}

/// Binary masks (same layout as the weights, `[out×in]`) for a MADE network.
#[derive(Clone, Debug)]
pub struct MadeMasks {
    pub hidden: Vec<Tensor>,
    /// `[2d × last]`: rows `0..d` for shifts, `d..2d` for log-scales.
    pub output: Tensor,
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<Vec<usize>>,
    /// Some hidden layer is narrower than `d − 1`, so some conditionals lose inputs.
    pub degenerate: bool,
}

/// Sequential degree assignment: hidden unit `k` gets degree `k mod (d − 1)`.
pub fn build_made_masks(d: usize, hidden_sizes: &[usize], ordering: MaskOrdering) -> Result<MadeMasks> {
    if d == 0 {
        return Err(Error::invalid("MADE input dimension must be ≥ 1"));
    }
    let input_degrees: Vec<usize> = match ordering {
        MaskOrdering::Natural => (0..d).collect(),
        MaskOrdering::Reversed => (0..d).rev().collect(),
    };
    let span = (d - 1).max(1);
    let hidden_degrees: Vec<Vec<usize>> = hidden_sizes
        .iter()
        .map(|&h| (0..h).map(|k| if d == 1 { 0 } else { k % span }).collect())
        .collect();
    let degenerate = d > 1 && hidden_sizes.iter().any(|&h| h < d - 1);
    if degenerate {
        log::warn!("MADE hidden sizes {hidden_sizes:?} narrower than d-1 = {}; connectivity is degenerate", d - 1);
    }

    let mut hidden = Vec::with_capacity(hidden_sizes.len());
    let mut prev = &input_degrees;
    for degs in &hidden_degrees {
        let mut m = Tensor::zeros(&[degs.len(), prev.len()]);
        let cols = prev.len();
        for (k, &dk) in degs.iter().enumerate() {
            for (j, &dj) in prev.iter().enumerate() {
                if dk >= dj {
                    m.data_mut()[k * cols + j] = 1.0;
                }
            }
        }
        hidden.push(m);
        prev = degs;
    }
    let cols = prev.len();
    let mut output = Tensor::zeros(&[2 * d, cols]);
    for half in 0..2 {
        for (i, &di) in input_degrees.iter().enumerate() {
            for (k, &dk) in prev.iter().enumerate() {
                if di > dk {
                    output.data_mut()[(half * d + i) * cols + k] = 1.0;
                }
            }
        }
    }
    Ok(MadeMasks {
        hidden,
        output,
        input_degrees,
        hidden_degrees,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mask: Tensor,
}

impl MaskedLinear {
    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let w = p.get(self.weight).mul(g.constant(self.mask.clone()))?;
        x.matmul(w.transpose()?)?.add(p.get(self.bias))
    }
}

/// Masked autoencoder emitting a shift and a log-scale (or gate) per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Made {
    pub layers: Vec<MaskedLinear>,
    pub dim: usize,
    pub ordering: MaskOrdering,
}

impl Made {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden_sizes: &[usize],
        ordering: MaskOrdering,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Made> {
        let masks = build_made_masks(d, hidden_sizes, ordering)?;
        let all_masks = masks.hidden.into_iter().chain(std::iter::once(masks.output));
        let mut layers = Vec::new();
        for (i, mask) in all_masks.enumerate() {
            let (out, inp) = (mask.shape()[0], mask.shape()[1]);
            let bound = 1.0 / (inp as f64).sqrt();
            let weight = store.add(
                format!("{name}.{i}.weight"),
                group,
                Tensor::rand_uniform(&[out, inp], -bound, bound, rng),
            );
            let bias = store.add(format!("{name}.{i}.bias"), group, Tensor::zeros(&[out]));
            layers.push(MaskedLinear { weight, bias, mask });
        }
        Ok(Made {
            layers,
            dim: d,
            ordering,
        })
    }

    /// Returns `(shift, scale_logit)`, each `[B×d]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i < last {
                h = h.relu();
            }
        }
        let d = self.dim;
        Ok((h.slice(1, 0, d)?, h.slice(1, d, 2 * d)?))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}
