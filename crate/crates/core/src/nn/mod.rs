//! Neural building blocks: a named parameter store, dense MLPs, MADE
//! masked networks and the encoder/decoder pair shared by every model.

mod autoencoder;
mod made;

use std::io::Read;

use serde::{Deserialize, Serialize};

pub use autoencoder::{Decoder, Encoder, EncoderOutput, LOG_VAR_MAX, LOG_VAR_MIN};
pub use made::{build_made_masks, Made, MadeMasks, MaskOrdering};

use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Prior,
    Flow,
    Discriminator,
    Sampler,
    /// State updated outside the optimizer (codebooks, running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub group: ParamGroup,
}

/// JSON sidecar describing the tensors of a `params.bin` payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry {
        &mut self.entries[i]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| groups.contains(&e.group))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// Binds every parameter as a gradient-tracked leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.entries.iter().map(|e| g.param(e.tensor.clone())).collect(),
        }
    }

    /// Binds every parameter as a constant (inference only).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            tensors: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    dtype: "f64".into(),
                    group: e.group,
                })
                .collect(),
        }
    }

    /// Concatenated checkpoint encodings of every tensor, in store order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for e in &self.entries {
            e.tensor.write_le(&mut buf).expect("writing to a Vec cannot fail");
        }
        buf
    }

    /// Replaces every tensor from a payload, checking it against both the
    /// manifest and this store's architecture.
    pub fn load_bytes(&mut self, manifest: &Manifest, mut bytes: &[u8]) -> Result<()> {
        if manifest.tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, model expects {}",
                manifest.tensors.len(),
                self.entries.len()
            )));
        }
        let mut loaded = Vec::with_capacity(self.entries.len());
        for (entry, m) in self.entries.iter().zip(&manifest.tensors) {
            if entry.name != m.name || entry.tensor.shape() != m.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' {:?} does not match model tensor '{}' {:?}",
                    m.name,
                    m.shape,
                    entry.name,
                    entry.tensor.shape()
                )));
            }
            let t = Tensor::read_le(&mut bytes)
                .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", m.name)))?;
            if t.shape() != m.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' payload shape {:?} differs from manifest {:?}",
                    m.name,
                    t.shape(),
                    m.shape
                )));
            }
            loaded.push(t);
        }
        let mut rest = Vec::new();
        bytes.read_to_end(&mut rest).ok();
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes in params payload", rest.len())));
        }
        for (entry, t) in self.entries.iter_mut().zip(loaded) {
            entry.tensor = t;
        }
        Ok(())
    }
}

/// Parameters of a [`ParamStore`] bound to one graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Gradients for `ids`, zero where backward never reached a parameter.
    pub fn grads(&self, g: &Graph, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| g.grad_or_zeros(self.vars[id.0])).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    /// Negative slope 0.2.
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(0.2),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

/// One affine layer `y = act(x·Wᵀ + b)` with `W: [out×in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Dense {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::rand_uniform(&[out_dim, in_dim], -bound, bound, rng);
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Dense {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let pre = x.matmul(p.get(self.weight).transpose()?)?.add(p.get(self.bias))?;
        Ok(self.activation.apply(pre))
    }
}

/// Multi-layer perceptron; layer `i` output feeds layer `i+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Hidden layers use `activation`, the output layer is linear.
    /// Weights are `U(±1/√fan_in)`, biases zero.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        activation: Activation,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Mlp> {
        let mut acts = vec![activation; hidden_dims.len()];
        acts.push(Activation::Identity);
        Self::build_with(store, name, input_dim, hidden_dims, output_dim, &acts, group, rng)
    }

    /// As [`Mlp::build`] with one activation per layer (hidden layers then output).
    #[allow(clippy::too_many_arguments)]
    pub fn build_with(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        activations: &[Activation],
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Mlp> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "mlp '{name}' has an empty dimension: {input_dim} -> {hidden_dims:?} -> {output_dim}"
            )));
        }
        if activations.len() != hidden_dims.len() + 1 {
            return Err(Error::invalid(format!(
                "mlp '{name}' needs {} activations, got {}",
                hidden_dims.len() + 1,
                activations.len()
            )));
        }
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden_dims.iter().copied())
            .chain(std::iter::once(output_dim))
            .collect();
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &act))| Dense::build(store, &format!("{name}.{i}"), w[0], w[1], act, group, rng))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(p, h))
    }

    /// Output of every layer, in order.
    pub fn forward_all<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Vec<Var<'g>>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(p, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Inference on plain tensors.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        Ok(self.forward(&p, g.constant(x.clone()))?.value())
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.weight).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linear_layer_shapes() {
        let mut store = ParamStore::new();
        let mlp = Mlp::build(&mut store, "f", 4, &[], 2, Activation::Relu, ParamGroup::Encoder, &mut Rng::new(0)).unwrap();
        assert_eq!(mlp.layers.len(), 1);
        assert_eq!(store.get(mlp.layers[0].weight).shape(), &[2, 4]);
        assert_eq!(store.get(mlp.layers[0].bias).shape(), &[2]);
        assert!(store.get(mlp.layers[0].bias).data().iter().all(|&b| b == 0.0));
        let bound = 0.5;
        assert!(store.get(mlp.layers[0].weight).data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let build = || {
            let mut s = ParamStore::new();
            Mlp::build(&mut s, "f", 3, &[5, 4], 2, Activation::Tanh, ParamGroup::Decoder, &mut Rng::new(42)).unwrap();
            s
        };
        let (a, b) = (build(), build());
        for (x, y) in a.entries().iter().zip(b.entries()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.tensor), bits(&y.tensor));
        }
    }

    #[test]
    fn zero_dims_rejected() {
        let mut s = ParamStore::new();
        assert!(Mlp::build(&mut s, "f", 0, &[], 2, Activation::Relu, ParamGroup::Encoder, &mut Rng::new(0)).is_err());
        assert!(Mlp::build(&mut s, "f", 2, &[0], 2, Activation::Relu, ParamGroup::Encoder, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn layer_dims_chain() {
        let mut s = ParamStore::new();
        let mlp = Mlp::build(&mut s, "f", 6, &[5, 4, 3], 2, Activation::Relu, ParamGroup::Encoder, &mut Rng::new(1)).unwrap();
        for w in mlp.layers.windows(2) {
            assert_eq!(w[0].out_dim, w[1].in_dim);
        }
    }

    #[test]
    fn two_stage_sampler_width() {
        let mut s = ParamStore::new();
        let mlp = Mlp::build(&mut s, "f", 16, &[1024, 1024], 32, Activation::Relu, ParamGroup::Sampler, &mut Rng::new(1)).unwrap();
        assert_eq!(mlp.layers[0].out_dim, 1024);
        assert_eq!(mlp.layers[1].out_dim, 1024);
    }

    #[test]
    fn checkpoint_payload_round_trip_and_mismatch() {
        let mut s = ParamStore::new();
        Mlp::build(&mut s, "f", 3, &[4], 2, Activation::Relu, ParamGroup::Encoder, &mut Rng::new(3)).unwrap();
        let bytes = s.to_bytes();
        let manifest = s.manifest();
        let mut t = ParamStore::new();
        Mlp::build(&mut t, "f", 3, &[4], 2, Activation::Relu, ParamGroup::Encoder, &mut Rng::new(9)).unwrap();
        t.load_bytes(&manifest, &bytes).unwrap();
        assert_eq!(t.to_bytes(), bytes);

        let mut wrong = ParamStore::new();
        Mlp::build(&mut wrong, "f", 3, &[5], 2, Activation::Relu, ParamGroup::Encoder, &mut Rng::new(3)).unwrap();
        let err = wrong.load_bytes(&manifest, &bytes).unwrap_err().to_string();
        assert!(err.contains("f.0.weight"), "{err}");
    }
}
