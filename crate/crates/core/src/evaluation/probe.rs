use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Bound, Dense, ParamGroup, ParamStore};
use crate::tensor::{Graph, Rng, Tensor};
use crate::training::{train, GroupLoss, TrainConfig, Trainable};
use crate::{Error, Result};

/// Single linear layer with softmax cross-entropy. Batches carry the class
/// index as their last column.
#[derive(Clone, Debug)]
pub(crate) struct LinearProbe {
    store: ParamStore,
    layer: Dense,
    n_classes: usize,
}

impl LinearProbe {
    fn new(dim: usize, n_classes: usize, rng: &mut Rng) -> LinearProbe {
        let mut store = ParamStore::new();
        let layer = Dense::build(&mut store, "probe", dim, n_classes, Activation::Identity, ParamGroup::Decoder, rng);
        LinearProbe { store, layer, n_classes }
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        Ok(self.layer.forward(&p, g.constant(x.clone()))?.value())
    }

    pub(crate) fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

impl Trainable for LinearProbe {
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
        let (b, cols) = (batch.shape()[0], batch.shape()[1]);
        let d = cols - 1;
        let mut x = Vec::with_capacity(b * d);
        let mut onehot = vec![0.0; b * self.n_classes];
        for (i, row) in batch.rows().enumerate() {
            x.extend_from_slice(&row[..d]);
            onehot[i * self.n_classes + row[d] as usize] = 1.0;
        }
        let logits = self.layer.forward(p, g.constant(Tensor::new(vec![b, d], x)?))?;
        let picked = logits.mul(g.constant(Tensor::new(vec![b, self.n_classes], onehot)?))?.sum_axis(1)?;
        let loss = logits.logsumexp_axis(1)?.sub(picked)?.mean();
        Ok(vec![GroupLoss::new("cross_entropy", loss, &[ParamGroup::Decoder])])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_runs: usize,
    pub train: TrainConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_runs: 20,
            train: TrainConfig {
                num_epochs: 100,
                learning_rate: 1e-2,
                batch_size: 100,
                ..TrainConfig::default()
            },
        }
    }
}

/// Per-feature standardisation fitted on the training features.
pub(crate) fn standardize(train: &Tensor, other: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (train.shape()[0], train.shape()[1]);
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in train.rows() {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    for r in train.rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let apply = |t: &Tensor| {
        let cols = t.shape()[1];
        let data = t.data().iter().enumerate().map(|(i, v)| (v - mean[i % cols]) / sd[i % cols]).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };
    (apply(train), apply(other))
}

/// Trains one probe on `(x, labels)` and returns it.
pub(crate) fn fit_probe(x: &Tensor, labels: &[usize], n_classes: usize, cfg: &TrainConfig) -> Result<LinearProbe> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} rows", labels.len())));
    }
    let mut data = Vec::with_capacity(n * (d + 1));
    for (r, &l) in x.rows().zip(labels) {
        data.extend_from_slice(r);
        data.push(l as f64);
    }
    let batch = Tensor::new(vec![n, d + 1], data)?;
    let out = train(|rng: &mut Rng| Ok(LinearProbe::new(d, n_classes, rng)), &batch, None, cfg)?;
    Ok(out.model)
}
