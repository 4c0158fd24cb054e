use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::seed;

use super::graph::Graph;
use super::layers::{Forward, Model};
use super::optim::{Optimizer, OptimizerKind};
use super::tensor::Tensor;

/// Samples of one shape with integer labels, stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(sample_shape: &[usize]) -> Self {
        Dataset { sample_shape: sample_shape.to_vec(), data: Vec::new(), labels: Vec::new() }
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, sample: &[f64], label: usize) -> Result<()> {
        if sample.len() != self.sample_len() {
            bail!(Shape, "sample has {} values, expected {}", sample.len(), self.sample_len());
        }
        self.data.extend_from_slice(sample);
        self.labels.push(label);
        Ok(())
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a `[B, sample_shape..]` tensor and its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut shape = Vec::with_capacity(self.sample_shape.len() + 1);
        shape.push(indices.len());
        shape.extend_from_slice(&self.sample_shape);
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        (Tensor { shape, data }, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx).0
    }

    /// Applies `f` to every value in place (normalisation).
    pub fn map_values(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitRule {
    pub train_below: f64,
    pub val_gap: f64,
    pub epochs: usize,
}

impl Default for OverfitRule {
    fn default() -> Self {
        OverfitRule { train_below: 0.1, val_gap: 0.25, epochs: 15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub overfit: OverfitRule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            bail!(Config, "patience, batch size and epoch cap must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    Overfit,
    MaxEpochs,
}

/// Stopping rules: patience on validation loss, plus the overfit rule
/// (train loss below a threshold while validation loss sits a gap above its
/// best, for a run of consecutive epochs).
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    rule: OverfitRule,
    best: f64,
    best_epoch: usize,
    since_best: usize,
    overfit_run: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, rule: OverfitRule) -> Self {
        EarlyStopper { patience, rule, best: f64::INFINITY, best_epoch: 0, since_best: 0, overfit_run: 0 }
    }

    /// Records epoch `epoch` (1-based); returns whether it improved and
    /// whether training should stop.
    pub fn observe(&mut self, epoch: usize, train_loss: f64, val_loss: f64) -> (bool, Option<StopReason>) {
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        if train_loss < self.rule.train_below && val_loss >= self.best + self.rule.val_gap {
            self.overfit_run += 1;
        } else {
            self.overfit_run = 0;
        }
        let stop = if self.overfit_run >= self.rule.epochs {
            Some(StopReason::Overfit)
        } else if self.since_best >= self.patience {
            Some(StopReason::Patience)
        } else {
            None
        };
        (improved, stop)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

/// Splits a shuffled index list into batches; a trailing singleton is dropped
/// so that train-mode batch norm always sees at least two samples.
pub fn batches(indices: &[usize], batch_size: usize) -> Vec<&[usize]> {
    indices.chunks(batch_size.max(1)).filter(|b| b.len() >= 2 || indices.len() == 1).collect()
}

/// Mean loss over `data` in eval mode.
pub fn eval_loss(model: &Model, data: &Dataset, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = data.batch(part);
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = model.forward(&mut g, xv, &mut Forward::eval())?;
        let loss = model.loss(&mut g, out, &y)?;
        total += g.value(loss).data[0] * part.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut Optimizer, x: Tensor, y: &[usize], rng: &mut seed::Rng) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let mut fwd = Forward::train(rng);
    let out = model.forward(&mut g, xv, &mut fwd)?;
    let loss = model.loss(&mut g, out, y)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = fwd
        .params
        .iter()
        .zip(&model.params)
        .map(|(v, p)| g.grad(*v).map_or_else(|| alloc::vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    let updates = core::mem::take(&mut fwd.bn_updates);
    drop(fwd);
    opt.step(&mut model.params, &grads);
    model.apply_bn_updates(&updates);
    Ok(g.value(loss).data[0])
}

/// Mini-batch training with early stopping; leaves the model at its
/// best-validation-loss weights.
pub fn train_loop(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<History> {
    train_loop_with(model, train, val, cfg, |_| {})
}

/// As [`train_loop`], calling `on_epoch` after every epoch.
pub fn train_loop_with(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.check()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(alloc::string::String::from("training and validation sets must be non-empty")));
    }
    let mut rng = seed::rng(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.overfit);
    let mut best = (model.params.clone(), model.buffers.clone());
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for b in batches(&order, cfg.batch_size) {
            let (x, y) = train.batch(b);
            sum += train_step(model, &mut opt, x, &y, &mut rng)? * b.len() as f64;
            count += b.len();
        }
        let record =
            EpochRecord { epoch, train_loss: sum / count.max(1) as f64, val_loss: eval_loss(model, val, 256)? };
        on_epoch(&record);
        epochs.push(record);
        let (improved, reason) = stopper.observe(epoch, record.train_loss, record.val_loss);
        if improved {
            best = (model.params.clone(), model.buffers.clone());
        }
        if let Some(r) = reason {
            stop = r;
            break;
        }
    }
    (model.params, model.buffers) = best;
    Ok(History { epochs, best_epoch: stopper.best_epoch(), best_val_loss: stopper.best_loss(), stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{LayerSpec, LossKind};
    use rand::Rng;

    #[test]
    fn patience_trace() {
        let mut s = EarlyStopper::new(3, OverfitRule::default());
        let vals = [1.0, 0.9, 0.95, 0.96, 0.97];
        let mut stopped = None;
        for (i, v) in vals.iter().enumerate() {
            if let (_, Some(r)) = s.observe(i + 1, 0.5, *v) {
                stopped = Some((i + 1, r));
                break;
            }
        }
        assert_eq!(stopped, Some((5, StopReason::Patience)));
        assert_eq!(s.best_epoch(), 2);
    }

    #[test]
    fn overfit_trace() {
        let mut s = EarlyStopper::new(1000, OverfitRule::default());
        s.observe(1, 0.5, 0.4);
        for k in 1..=15 {
            let (_, r) = s.observe(1 + k, 0.05, 0.7);
            assert_eq!(r.is_some(), k == 15, "epoch {k}");
        }
        // A single break in the run resets the count.
        let mut s = EarlyStopper::new(1000, OverfitRule::default());
        s.observe(1, 0.5, 0.4);
        for k in 1..=20 {
            let val = if k == 10 { 0.5 } else { 0.7 };
            assert_eq!(s.observe(1 + k, 0.05, val).1, None);
        }
    }

    #[test]
    fn singleton_tail_is_dropped() {
        let idx: Vec<usize> = (0..9).collect();
        let b = batches(&idx, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), [4, 4]);
        let b = batches(&idx[..7], 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), [4, 3]);
    }

    fn separable(seed: u64, n: usize) -> Dataset {
        let mut rng = seed::rng(seed);
        let mut d = Dataset::new(&[2]);
        for i in 0..n {
            let label = i % 2;
            let centre = if label == 1 { 1.5 } else { -1.5 };
            let x = [centre + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            d.push(&x, label).unwrap();
        }
        d
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let train = separable(1, 40);
        let val = separable(2, 20);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::SGD,
            lr: 0.05,
            batch_size: 8,
            max_epochs: 200,
            patience: 200,
            overfit: OverfitRule::default(),
            seed: 3,
        };
        for loss in [LossKind::CrossEntropy, LossKind::Hinge, LossKind::MultiHinge] {
            let out = if loss == LossKind::Hinge { 1 } else { 2 };
            let mut m = Model::new(alloc::vec![LayerSpec::Linear { input: 2, output: out }], &[2], loss, 9).unwrap();
            let h = train_loop(&mut m, &train, &val, &cfg).unwrap();
            let preds = m.predict(&train.all(), 64).unwrap();
            assert_eq!(preds, train.labels, "{loss:?}");
            assert!(h.best_epoch <= h.epochs.len());
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty_splits() {
        let train = separable(1, 30);
        let val = separable(2, 10);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::ADAM,
            lr: 0.01,
            batch_size: 4,
            max_epochs: 5,
            patience: 10,
            overfit: OverfitRule::default(),
            seed: 5,
        };
        let layers = alloc::vec![
            LayerSpec::Linear { input: 2, output: 6 },
            LayerSpec::Relu,
            LayerSpec::Dropout { p: 0.25 },
            LayerSpec::Linear { input: 6, output: 2 },
        ];
        let run = || {
            let mut m = Model::new(layers.clone(), &[2], LossKind::CrossEntropy, 1).unwrap();
            let h = train_loop(&mut m, &train, &val, &cfg).unwrap();
            (m, h)
        };
        assert_eq!(run(), run());
        let mut m = Model::new(layers.clone(), &[2], LossKind::CrossEntropy, 1).unwrap();
        assert!(train_loop(&mut m, &Dataset::new(&[2]), &val, &cfg).is_err());
    }
}
