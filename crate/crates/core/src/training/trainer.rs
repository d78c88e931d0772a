use std::time::Instant;

use super::{Adam, PlateauScheduler, RunEvent, RunLog, RunMetadata, TrainConfig, EpochRecord};
use crate::nn::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::{Error, Result};

/// One differentiable objective and the parameter groups it updates.
pub struct GroupLoss<'g> {
    pub name: String,
    pub loss: Var<'g>,
    pub groups: Vec<ParamGroup>,
}

impl<'g> GroupLoss<'g> {
    pub fn new(name: impl Into<String>, loss: Var<'g>, groups: &[ParamGroup]) -> Self {
        GroupLoss {
            name: name.into(),
            loss,
            groups: groups.to_vec(),
        }
    }
}

/// Anything the shared loop can optimize. The first loss returned by
/// [`Trainable::losses`] is the monitored objective; further entries are
/// adversary losses with their own parameter groups.
pub trait Trainable: Clone {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn losses<'g>(
        &mut self,
        g: &'g Graph,
        p: &Bound<'g>,
        batch: &Tensor,
        rng: &mut Rng,
        train: bool,
    ) -> Result<Vec<GroupLoss<'g>>>;

    /// Runs after the optimizer step of each training batch.
    fn post_step(&mut self) -> Result<()> {
        Ok(())
    }

    /// Smallest batch the objective is defined on.
    fn min_batch(&self) -> usize {
        1
    }

    /// Called once per attempt with the training-set size.
    fn prepare(&mut self, _n_train: usize) {}
}

pub struct TrainOutcome<T> {
    pub model: T,
    /// Snapshot with the lowest monitored loss (validation when available).
    pub best_model: T,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub log: RunLog,
}

enum AttemptError {
    Unstable { epoch: usize, reason: String },
    Fatal(Error),
}

impl From<Error> for AttemptError {
    fn from(e: Error) -> Self {
        AttemptError::Fatal(e)
    }
}

pub fn train<T, F>(factory: F, train_data: &Tensor, val_data: Option<&Tensor>, cfg: &TrainConfig) -> Result<TrainOutcome<T>>
where
    T: Trainable,
    F: Fn(&mut Rng) -> Result<T>,
{
    let meta = RunMetadata {
        config_hash: cfg.hash(),
        ..Default::default()
    };
    train_logged(factory, train_data, val_data, cfg, meta)
}

/// Mini-batch training with full restarts on instability: each restart
/// rebuilds the model from `factory` and divides the starting rate by 10.
pub fn train_logged<T, F>(
    factory: F,
    train_data: &Tensor,
    val_data: Option<&Tensor>,
    cfg: &TrainConfig,
    meta: RunMetadata,
) -> Result<TrainOutcome<T>>
where
    T: Trainable,
    F: Fn(&mut Rng) -> Result<T>,
{
    cfg.validate()?;
    if train_data.rank() != 2 || train_data.shape()[0] == 0 {
        return Err(Error::invalid(format!("training data must be non-empty [N×D], got {:?}", train_data.shape())));
    }
    let mut log = RunLog::new(meta);
    for attempt in 0..=cfg.nan_restart_max {
        let lr0 = cfg.learning_rate / 10f64.powi(attempt as i32);
        match run_attempt(&factory, train_data, val_data, cfg, attempt, lr0, &mut log) {
            Ok((model, best_model, best_epoch, best_loss)) => {
                return Ok(TrainOutcome {
                    model,
                    best_model,
                    best_epoch,
                    best_loss,
                    log,
                })
            }
            Err(AttemptError::Fatal(e)) => return Err(e),
            Err(AttemptError::Unstable { epoch, reason }) => {
                let next_lr = lr0 / 10.0;
                log::warn!("training attempt {attempt} unstable at epoch {epoch}: {reason}");
                log.push_event(RunEvent::Restart {
                    attempt,
                    epoch,
                    reason,
                    next_lr,
                });
            }
        }
    }
    Err(Error::RestartsExhausted {
        restarts: cfg.nan_restart_max,
        log: Box::new(log),
    })
}

fn batches(order: &[usize], batch_size: usize, min_batch: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_batch) {
        out.pop();
    }
    out
}

/// Mean monitored loss over `data`, parameters frozen.
pub fn evaluate_loss<T: Trainable>(model: &mut T, data: &Tensor, cfg: &TrainConfig, rng: &mut Rng) -> Result<f64> {
    let order: Vec<usize> = (0..data.shape()[0]).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in batches(&order, cfg.batch_size, model.min_batch()) {
        let xb = data.select_rows(idx);
        let g = Graph::with_precision(cfg.precision);
        let p = model.params().bind_frozen(&g);
        let losses = model.losses(&g, &p, &xb, rng, false)?;
        let first = losses.first().ok_or_else(|| Error::invalid("objective returned no losses"))?;
        total += first.loss.item() * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count as f64)
}

type AttemptResult<T> = std::result::Result<(T, T, usize, f64), AttemptError>;

fn run_attempt<T, F>(
    factory: &F,
    train_data: &Tensor,
    val_data: Option<&Tensor>,
    cfg: &TrainConfig,
    attempt: usize,
    lr0: f64,
    log: &mut RunLog,
) -> AttemptResult<T>
where
    T: Trainable,
    F: Fn(&mut Rng) -> Result<T>,
{
    let mut init_rng = Rng::with_stream(cfg.seed, 2 * attempt as u64);
    let mut rng = Rng::with_stream(cfg.seed, 2 * attempt as u64 + 1);
    let mut model = factory(&mut init_rng)?;
    let n = train_data.shape()[0];
    model.prepare(n);
    if n < model.min_batch() {
        return Err(Error::invalid(format!("{n} training rows but the objective needs batches of {}", model.min_batch())).into());
    }
    let mut adam = Adam::new(cfg.optimizer);
    let mut sched = PlateauScheduler::new(lr0, cfg.scheduler);
    let mut best: Option<(T, usize, f64)> = None;
    let start = Instant::now();

    for local_epoch in 0..cfg.num_epochs {
        let epoch = log.next_epoch();
        let order = if cfg.shuffle { rng.permutation(n) } else { (0..n).collect() };
        let lr = sched.lr;
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in batches(&order, cfg.batch_size, model.min_batch()) {
            let xb = train_data.select_rows(idx);
            let g = Graph::with_precision(cfg.precision);
            let p = model.params().bind(&g);
            let losses = model.losses(&g, &p, &xb, &mut rng, true)?;
            let Some(first) = losses.first() else {
                return Err(Error::invalid("objective returned no losses").into());
            };
            let value = first.loss.item();
            if !value.is_finite() {
                return Err(AttemptError::Unstable {
                    epoch,
                    reason: format!("non-finite {} loss ({value})", first.name),
                });
            }
            let mut updates: Vec<(Vec<ParamId>, Vec<Tensor>)> = Vec::with_capacity(losses.len());
            for gl in losses.iter().filter(|gl| !gl.groups.is_empty()) {
                g.zero_grad();
                g.backward(gl.loss)?;
                let ids = model.params().ids_in(&gl.groups);
                let mut grads = p.grads(&g, &ids);
                if grads.iter().any(|t| !t.all_finite()) {
                    return Err(AttemptError::Unstable {
                        epoch,
                        reason: format!("non-finite gradient of {} loss", gl.name),
                    });
                }
                if let Some(max_norm) = cfg.grad_clip {
                    clip(&mut grads, max_norm);
                }
                updates.push((ids, grads));
            }
            drop(losses);
            for (ids, grads) in updates {
                adam.step(model.params_mut(), &ids, &grads, lr)?;
            }
            model.post_step()?;
            if !model.params().all_finite() {
                return Err(AttemptError::Unstable {
                    epoch,
                    reason: "non-finite parameters after update".into(),
                });
            }
            sum += value * idx.len() as f64;
            count += idx.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = match val_data {
            Some(v) if v.shape()[0] > 0 => {
                let mut eval_rng = Rng::with_stream(cfg.seed ^ 0x5eed_5eed, local_epoch as u64);
                Some(evaluate_loss(&mut model, v, cfg, &mut eval_rng)?)
            }
            _ => None,
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(AttemptError::Unstable {
                epoch,
                reason: format!("non-finite monitored loss ({monitored})"),
            });
        }
        let next_lr = sched.step(monitored);
        if next_lr != lr {
            log.push_event(RunEvent::LrReduced { epoch, from: lr, to: next_lr });
        }
        if best.as_ref().is_none_or(|(_, _, b)| monitored < *b) {
            best = Some((model.clone(), epoch, monitored));
        }
        log.push_epoch(EpochRecord {
            epoch,
            attempt,
            train_loss,
            val_loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        })?;
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?} lr {lr:e}");
    }
    let (best_model, best_epoch, best_loss) = best.unwrap_or_else(|| (model.clone(), 0, f64::NAN));
    Ok((model, best_model, best_epoch, best_loss))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}
