use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::autodiff::Params;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Minibatch SGD with a stepped schedule: epoch `e` (0-based) runs at
/// `lr * decay^(e mod reset_period)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_reset")]
    pub reset_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop after the first epoch whose test accuracy reaches this value.
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
    /// Rescale each minibatch gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_decay() -> f64 {
    0.3
}

fn default_reset() -> usize {
    20
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.reset_period == 0 {
            return Err(Error::Config("batch_size and reset_period must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch % self.reset_period) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0 is the initialization.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Carries the final weights.
    pub model: Model,
    /// `checkpoints[e]` holds the weights after epoch `e`; index 0 is the init.
    pub checkpoints: Vec<Params>,
    pub history: Vec<EpochStats>,
    /// Highest test accuracy; ties go to the later epoch.
    pub best_epoch: usize,
}

impl TrainedModel {
    pub fn at_epoch(&self, epoch: usize) -> Result<Model> {
        let p = self
            .checkpoints
            .get(epoch)
            .ok_or_else(|| Error::InvalidArgument(format!("no checkpoint for epoch {epoch}")))?;
        self.model.with_params(p.clone())
    }

    pub fn best(&self) -> Model {
        self.at_epoch(self.best_epoch).expect("best epoch is checkpointed")
    }
}

fn mean_loss(model: &Model, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Ok(0.0);
    }
    let z = model.logits(&d.images)?;
    let k = model.spec.classes;
    let total: f64 = z
        .data()
        .chunks(k)
        .zip(&d.labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
        })
        .sum();
    Ok(total / d.len() as f64)
}

/// Trains a copy of `model`. Without a test set, checkpoint selection uses
/// training accuracy.
pub fn train(model: &Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if train.classes > model.spec.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model {}",
            train.classes, model.spec.classes
        )));
    }
    let mut m = model.clone();
    let stats = |m: &Model, epoch: usize, lr: f64| -> Result<EpochStats> {
        let train_accuracy = m.accuracy(train)?;
        Ok(EpochStats {
            epoch,
            lr,
            train_loss: mean_loss(m, train)?,
            train_accuracy,
            test_accuracy: match test {
                Some(t) => m.accuracy(t)?,
                None => train_accuracy,
            },
        })
    };
    let mut history = vec![stats(&m, 0, 0.0)?];
    let mut checkpoints = vec![m.params.clone()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch - 1);
        order.shuffle(&mut rng::rng(rng::derive(cfg.seed, epoch as u64)));
        for batch in order.chunks(cfg.batch_size) {
            let x = train.images.gather_outer(batch);
            let y = train.labels_tensor(batch);
            let (loss, mut grads) = m.loss_and_grad(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            if let Some(c) = cfg.clip_norm {
                let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
                if norm > c {
                    grads.iter_mut().for_each(|g| *g = g.scale(c / norm));
                }
            }
            m.sgd_step(&grads, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
        }
        let s = stats(&m, epoch, lr)?;
        if !s.train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: s.train_loss,
            });
        }
        log::debug!(
            "{} epoch {epoch}: loss {:.4} train {:.3} test {:.3}",
            m.spec.name,
            s.train_loss,
            s.train_accuracy,
            s.test_accuracy
        );
        let stop = cfg.stop_at_accuracy.is_some_and(|t| s.test_accuracy >= t);
        history.push(s);
        checkpoints.push(m.params.clone());
        if stop {
            break;
        }
    }
    let mut best_epoch = 0;
    for (e, s) in history.iter().enumerate() {
        if s.test_accuracy >= history[best_epoch].test_accuracy {
            best_epoch = e;
        }
    }
    Ok(TrainedModel {
        model: m,
        checkpoints,
        history,
        best_epoch,
    })
}
