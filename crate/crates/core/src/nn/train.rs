use std::f64::consts::PI;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy_on, LayerGrad, Model};
use crate::dataio::{Dataset, SplitKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta0: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            momentum: 0.9,
            batch: 128,
            epochs: 30,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.eta0.is_finite() || self.eta0 <= 0.0 {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Cosine => cosine_lr(self.eta0, epoch, self.epochs.max(1)),
            LrSchedule::Constant => self.eta0,
        }
    }
}

/// `eta0 * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(eta0: f64, t: usize, total: usize) -> f64 {
    let total = total.max(1);
    eta0 * (1.0 + (PI * t as f64 / total as f64).cos()) / 2.0
}

/// Where the optimizer is when a penalty is consulted.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub iteration: usize,
}

/// Extra loss term applied during training (the rank regularizer).
pub trait Penalty {
    /// Adds the penalty gradient into `grads`.
    fn apply(&mut self, model: &Model, grads: &mut [LayerGrad], step: StepInfo) -> Result<()>;

    fn lambda(&self, epoch: usize) -> f64;

    /// Called after every epoch with the updated model.
    fn on_epoch_end(&mut self, _model: &Model, _epoch: usize) -> Result<()> {
        Ok(())
    }

    /// Per-layer penalty values for the epoch log.
    fn layer_values(&self, _model: &Model) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Per-layer penalty values, present for regularized runs.
    pub msr: Option<Vec<f64>>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,lambda,train_loss,val_acc";
    pub const CSV_HEADER_REG: &'static str = "epoch,lr,lambda,train_loss,val_acc,msr";

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.lambda, self.train_loss, self.val_acc
        );
        if let Some(msr) = &self.msr {
            let joined: Vec<String> = msr.iter().map(|v| v.to_string()).collect();
            row.push(',');
            row.push_str(&joined.join(";"));
        }
        row
    }
}

fn nesterov_step(param: &mut f64, vel: &mut f64, grad: f64, lr: f64, mu: f64) {
    *vel = mu * *vel - lr * grad;
    *param += mu * *vel - lr * grad;
}

fn apply_update(model: &mut Model, vel: &mut [LayerGrad], grads: &[LayerGrad], lr: f64, mu: f64) {
    for ((layer, v), g) in model.layers.iter_mut().zip(vel.iter_mut()).zip(grads) {
        for ((w, vw), gw) in layer.weights_mut().into_iter().zip(v.weights.iter_mut()).zip(&g.weights) {
            Zip::from(w).and(vw).and(gw).for_each(|p, v, &g| nesterov_step(p, v, g, lr, mu));
        }
        Zip::from(layer.bias_mut())
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, v, &g| nesterov_step(p, v, g, lr, mu));
    }
}

/// Mini-batch Nesterov SGD on the train split. One seeded permutation per
/// epoch; the final partial batch is kept. Validation accuracy is logged
/// when the split has a validation part.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    config: &TrainConfig,
    mut penalty: Option<&mut dyn Penalty>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let train_idx = ds.split_indices(SplitKind::Train)?;
    if train_idx.is_empty() {
        return Err(Error::invalid("empty train split"));
    }
    let val_idx = ds.split_indices(SplitKind::Val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train_idx.to_vec();
    let mut vel: Vec<LayerGrad> = model.layers.iter().map(LayerGrad::zeros_like).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut iteration = 0usize;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch).enumerate() {
            let (x, y) = ds.gather(chunk);
            let (loss, mut grads) = model.loss_and_grad(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    msg: format!("loss is {loss}"),
                });
            }
            if let Some(p) = penalty.as_deref_mut() {
                p.apply(model, &mut grads, StepInfo { epoch, iteration })?;
            }
            apply_update(model, &mut vel, &grads, lr, config.momentum);
            loss_sum += loss * chunk.len() as f64;
            iteration += 1;
        }
        if model.layers.iter().any(|l| l.weights().iter().any(|w| w.iter().any(|v| !v.is_finite()))) {
            return Err(Error::Training {
                epoch,
                batch: order.len().div_ceil(config.batch),
                msg: "non-finite parameter".into(),
            });
        }
        let (lambda, msr) = match penalty.as_deref_mut() {
            Some(p) => {
                p.on_epoch_end(model, epoch)?;
                (p.lambda(epoch), p.layer_values(model))
            }
            None => (0.0, None),
        };
        let val_acc = if val_idx.is_empty() { f64::NAN } else { accuracy_on(model, ds, val_idx)? };
        log::debug!("epoch {epoch}: lr {lr:.5} loss {:.5} val {val_acc:.4}", loss_sum / order.len() as f64);
        log.push(EpochLog {
            epoch,
            lr,
            lambda,
            train_loss: loss_sum / order.len() as f64,
            val_acc,
            msr,
        });
    }
    Ok(log)
}
