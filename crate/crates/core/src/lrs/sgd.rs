use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without a strictly lower validation loss before the rate is cut.
    pub patience: usize,
    pub lr_factor: f64,
    pub max_epochs: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            patience: 10,
            lr_factor: 0.5,
            max_epochs: 100,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.momentum >= 0.0
            && self.momentum < 1.0
            && self.weight_decay >= 0.0
            && self.patience >= 1
            && self.lr_factor > 0.0
            && self.lr_factor < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Classic momentum SGD with L2 weight decay:
/// `v <- mu v - lr (g + wd theta)`, `theta <- theta + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        self.step_filtered(params, grads, |_| true)
    }

    /// Updates only tensors whose name passes `trainable`.
    pub fn step_filtered<P: ParamSet>(&mut self, params: &mut P, grads: &P, trainable: impl Fn(&str) -> bool) {
        let mut tensors = params.named_tensors_mut();
        let grads = grads.named_tensors();
        if self.velocity.len() != tensors.len() {
            self.velocity = tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        for (((name, theta), (_, g)), v) in tensors.iter_mut().zip(&grads).zip(self.velocity.iter_mut()) {
            if !trainable(name) {
                continue;
            }
            for ((t, &gv), vv) in theta.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv - self.lr * (gv + self.weight_decay * *t);
                *t += *vv;
            }
        }
    }
}

/// Cuts the learning rate when validation loss stops improving.
///
/// The counter resets on any strict improvement of the best loss; when it
/// reaches `patience` the rate is multiplied by `factor` and the counter
/// starts over.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss; returns the new rate.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// A model trainable by [`sgd_train`]: per-sample loss and gradient.
pub trait Trainable: ParamSet + Clone {
    type Sample;

    fn loss(&self, sample: &Self::Sample) -> Result<f64>;
    fn loss_grad(&self, sample: &Self::Sample) -> Result<(f64, Self)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub history: Vec<EpochRecord>,
}

fn mean_loss<M: Trainable>(model: &M, set: &[M::Sample]) -> Result<f64> {
    let mut s = 0.0;
    for x in set {
        s += model.loss(x)?;
    }
    Ok(s / set.len() as f64)
}

/// Per-sample momentum SGD over shuffled epochs with the plateau schedule.
pub fn sgd_train<M: Trainable>(
    mut model: M,
    train: &[M::Sample],
    val: &[M::Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut opt = Sgd::new(cfg);
    let mut schedule = PlateauSchedule::new(cfg.patience, cfg.lr_factor);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let (loss, grads) = model.loss_grad(&train[i])?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("training loss {loss}"),
                });
            }
            total += loss;
            opt.step(&mut model, &grads);
        }
        let val_loss = mean_loss(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: order.len(),
                detail: format!("validation loss {val_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            lr: opt.lr,
        });
        opt.lr = schedule.observe(val_loss, opt.lr);
    }
    Ok(TrainOutcome { model, history })
}
