//! Softmax cross-entropy training with a fixed step-decay schedule.

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layer::Mode;
use super::model::ModelGraph;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain SGD, no momentum.
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 50,
            lr_decay_factor: 0.8,
            lr_decay_every: 10,
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::InvalidConfig {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor", "must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every", "must be >= 1");
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Labelled examples addressable by index.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `b × 2 × L` inputs and their labels.
    fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>);
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (b, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Precondition(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut grad = Vec::with_capacity(b * classes);
    let mut loss = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Precondition(format!("label {label} >= {classes} classes")));
        }
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label].f64();
        for (c, e) in exps.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad.push(T::of((e / z - target) / b as f64));
        }
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss {loss}")));
    }
    Ok((loss, Tensor::new(vec![b, classes], grad)?))
}

/// Loss and parameter gradients for one batch (train-mode forward). The
/// BatchNorm running statistics of `model` are updated.
pub fn loss_and_grads<T: Scalar>(
    model: &mut ModelGraph<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let (logits, trace) = model.forward_traced(batch, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let grads = model.backward(&trace, &dlogits);
    if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter tensor {bad}")));
    }
    model.commit_stats(&trace);
    Ok((loss, grads))
}

/// One plain SGD step on softmax cross-entropy; returns the mean batch loss.
pub fn backward_and_step<T: Scalar>(
    model: &mut ModelGraph<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch, labels)?;
    let lr = T::of(lr);
    for (p, g) in model.params_mut().into_iter().zip(&grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(loss)
}

/// Optimizer state bound to one model's parameter layout.
#[derive(Debug, Clone)]
pub struct Trainer {
    optimizer: Optimizer,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Trainer {
    pub fn new(model: &ModelGraph<f32>, optimizer: Optimizer) -> Self {
        let zeros = || -> Vec<Vec<f32>> { model.params().iter().map(|p| vec![0.0; p.len()]).collect() };
        let (m, v) = match optimizer {
            Optimizer::Adam => (zeros(), zeros()),
            Optimizer::Sgd => (Vec::new(), Vec::new()),
        };
        Trainer {
            optimizer,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, model: &mut ModelGraph<f32>, batch: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<f64> {
        match self.optimizer {
            Optimizer::Sgd => backward_and_step(model, batch, labels, lr),
            Optimizer::Adam => {
                let (loss, grads) = loss_and_grads(model, batch, labels)?;
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.step += 1;
                let t = self.step as i32;
                let step_size = (lr * (1.0 - B2.powi(t)).sqrt() / (1.0 - B1.powi(t))) as f32;
                let eps = (EPS * (1.0 - B2.powi(t)).sqrt()) as f32;
                for (((p, g), m), v) in model
                    .params_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = B1 as f32 * *mi + (1.0 - B1 as f32) * d;
                        *vi = B2 as f32 * *vi + (1.0 - B2 as f32) * d * d;
                        *w -= step_size * *mi / (vi.sqrt() + eps);
                    }
                }
                Ok(loss)
            }
        }
    }
}

const EVAL_BATCH: usize = 256;

/// Number of correctly classified examples (eval mode).
pub fn count_correct(model: &ModelGraph<f32>, data: &dyn ExampleSource) -> Result<usize> {
    let indices: Vec<usize> = (0..data.len()).collect();
    indices
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let (x, labels) = data.batch(chunk);
            let logits = model.forward(&x, Mode::Eval)?;
            let classes = logits.shape()[1];
            Ok(logits
                .data()
                .chunks_exact(classes)
                .zip(&labels)
                .filter(|(row, &label)| argmax(row) == label)
                .count())
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))
}

/// Accuracy in percent.
pub fn accuracy(model: &ModelGraph<f32>, data: &dyn ExampleSource) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(100.0 * count_correct(model, data)? as f64 / data.len() as f64)
}

/// Mean eval-mode cross-entropy.
pub fn evaluate_loss(model: &ModelGraph<f32>, data: &dyn ExampleSource) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = model.forward(&x, Mode::Eval)?;
        total += softmax_cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based; 0 is the state before training.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss of the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Trains `model` in place and leaves it holding the weights with the best
/// validation accuracy (epoch 0, the starting weights, included).
pub fn fit(
    model: &mut ModelGraph<f32>,
    train: &dyn ExampleSource,
    val: &dyn ExampleSource,
    test: Option<&dyn ExampleSource>,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    let test_acc = |m: &ModelGraph<f32>| test.map(|t| accuracy(m, t)).transpose();
    let mut best = model.clone();
    let mut best_val = accuracy(model, val)?;
    let mut best_epoch = 0;
    let mut history = vec![EpochRecord {
        epoch: 0,
        lr: config.lr_at(0),
        train_loss: None,
        val_acc: best_val,
        test_acc: test_acc(model)?,
    }];
    let mut trainer = Trainer::new(model, config.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng::derived(config.seed, &[0x5eed, epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = train.batch(chunk);
            loss_sum += trainer.step(model, &x, &labels, lr)? * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len().max(1) as f64;
        let val_acc = accuracy(model, val)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: Some(train_loss),
            val_acc,
            test_acc: test_acc(model)?,
        };
        info!(
            "event=epoch epoch={} lr={:.6} train_loss={:.5} val_acc={:.3}{}",
            record.epoch,
            lr,
            train_loss,
            val_acc,
            record.test_acc.map(|a| format!(" test_acc={a:.3}")).unwrap_or_default()
        );
        history.push(record);
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch + 1;
            best = model.clone();
        }
    }
    *model = best;
    Ok(FitOutcome {
        history,
        best_epoch,
        best_val_acc: best_val,
    })
}
