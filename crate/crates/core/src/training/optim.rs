use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. Moments are kept per parameter, so one
/// instance serves every optimizer group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: Vec::new() }
    }

    /// Applies one update. Any non-finite gradient aborts the step before
    /// anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &[Tensor], lr: f64) -> Result<()> {
        if ids.len() != grads.len() {
            return Err(Error::invalid(format!("{} parameters but {} gradients", ids.len(), grads.len())));
        }
        for (id, gr) in ids.iter().zip(grads) {
            if gr.shape() != store.get(*id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.get(*id).shape().to_vec(),
                    rhs: gr.shape().to_vec(),
                });
            }
            if !gr.all_finite() {
                return Err(Error::NonFinite(format!("gradient of '{}'", store.entries()[id.0].name)));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, gr) in ids.iter().zip(grads) {
            if self.state.len() <= id.0 {
                self.state.resize(id.0 + 1, None);
            }
            let n = gr.numel();
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let w = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = gr.data()[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 10,
            threshold: 1e-4,
        }
    }
}

/// Reduce-on-plateau learning-rate controller.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        let improved = if self.best.is_finite() {
            val_loss < self.best - self.config.threshold * self.best.abs()
        } else {
            val_loss < self.best
        };
        if improved {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr *= self.config.factor;
                self.reductions += 1;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Decoder, Tensor::from_vec(vec![v]));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = one_param(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &[id], &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        // f(w) = ½w², gradient w
        adam.step(&mut s, &[id], &[Tensor::from_vec(vec![1.0])], 0.1).unwrap();
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let (mut s, id) = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut s, &[id], &[Tensor::from_vec(vec![f64::NAN])], 0.1).is_err());
        assert_eq!(s.get(id).data()[0], 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Decoder, Tensor::from_vec(vec![3.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::default());
        // f = ½(w0² + 10 w1²)
        for _ in 0..5000 {
            let w = s.get(id).data().to_vec();
            let g = Tensor::from_vec(vec![w[0], 10.0 * w[1]]);
            adam.step(&mut s, &[id], &[g], 0.01).unwrap();
        }
        let w = s.get(id).data();
        assert!((w[0] * w[0] + w[1] * w[1]).sqrt() < 1e-4, "{w:?}");
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut p = PlateauScheduler::new(1e-3, SchedulerConfig::default());
        p.step(1.0);
        for i in 0..10 {
            let lr = p.step(1.0);
            if i < 9 {
                assert_eq!(lr, 1e-3);
            }
        }
        assert_eq!(p.lr, 5e-4);
        assert_eq!(p.reductions, 1);
    }

    #[test]
    fn decreasing_losses_keep_lr() {
        let mut p = PlateauScheduler::new(1e-3, SchedulerConfig::default());
        for i in 0..50 {
            p.step(10.0 - i as f64 * 0.1);
        }
        assert_eq!(p.lr, 1e-3);
    }

    #[test]
    fn improvement_resets_counter() {
        let mut p = PlateauScheduler::new(1e-3, SchedulerConfig::default());
        p.step(1.0);
        for _ in 0..9 {
            p.step(1.0);
        }
        p.step(0.5);
        assert_eq!(p.bad_epochs, 0);
        for _ in 0..9 {
            p.step(0.5);
        }
        assert_eq!(p.lr, 1e-3);
    }
}
