//! SGD with momentum and the epoch loops used for baseline training, the
//! auxiliary perturbation phase and fine-tuning.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::nn::{AuxForm, Mode, ModelGraph};
use crate::pruner::PruneHooks;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate before the first breakpoint.
    pub lr: f64,
    /// `(epoch, lr)` pairs; from `epoch` on (0-based) the rate is `lr`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the auxiliary penalty; only read in [`LossMode::Total`].
    pub lambda: f64,
    #[serde(default)]
    pub aux_form: AuxForm,
}

impl TrainConfig {
    /// Baseline from scratch: lr 0.05 decayed by 10 at half and at three quarters
    /// of the run, momentum 0.9, weight decay 5e-4, batch 64.
    pub fn baseline(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 0.05,
            lr_schedule: vec![(epochs / 2, 0.005), (epochs * 3 / 4, 0.0005)],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs,
            seed,
            lambda: 0.0,
            aux_form: AuxForm::Abs,
        }
    }

    /// Perturbation phase: lr 0.001, no weight decay, lambda 1e-5, one epoch.
    pub fn aux(seed: u64) -> Self {
        TrainConfig {
            lr: 0.001,
            lr_schedule: vec![],
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 1,
            seed,
            lambda: 1e-5,
            aux_form: AuxForm::Abs,
        }
    }

    /// Fine-tuning: lr 0.01 for the first epoch, then 0.001, and 0.0001 for the
    /// last epoch.
    pub fn finetune(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 0.01,
            lr_schedule: Self::finetune_schedule(0.01, epochs),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs,
            seed,
            lambda: 0.0,
            aux_form: AuxForm::Abs,
        }
    }

    /// `lr / 10` from epoch 1 and `lr / 100` for the last epoch once there
    /// are at least three.
    pub fn finetune_schedule(lr: f64, epochs: usize) -> Vec<(usize, f64)> {
        let mut s = Vec::new();
        if epochs >= 2 {
            s.push((1, lr * 0.1));
        }
        if epochs >= 3 {
            s.push((epochs - 1, lr * 0.01));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let rates = std::iter::once(self.lr).chain(self.lr_schedule.iter().map(|&(_, lr)| lr));
        for lr in rates {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
            }
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::invalid("lr_schedule epochs must be non-decreasing"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Rate of the last breakpoint at or before `epoch`, else `lr`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .last()
            .map_or(self.lr, |&(_, lr)| lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Cross-entropy only.
    Actual,
    /// Cross-entropy plus `lambda` times the auxiliary penalty.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-batch loss seen during the epoch (train mode).
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions made while training.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_mode: LossMode,
    pub epochs: Vec<EpochRecord>,
    pub checksum: String,
}

/// `v = momentum * v + g + weight_decay * p; p -= lr * v`, tensor by tensor.
pub fn sgd_step<E: Element>(
    params: &mut [&mut Tensor<E>],
    grads: &[&Tensor<E>],
    velocity: &mut [Tensor<E>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    let (lr, m, wd) = (E::from_f64(lr), E::from_f64(momentum), E::from_f64(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains `model` on `data` for `config.epochs` epochs of shuffled mini-batches.
/// `test`, when given, is evaluated after every epoch.
pub fn train<E: Element>(
    mut model: ModelGraph<E>,
    data: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    loss_mode: LossMode,
) -> Result<(ModelGraph<E>, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let lambda = match loss_mode {
        LossMode::Actual => 0.0,
        LossMode::Total if config.lambda > 0.0 => config.lambda,
        LossMode::Total => return Err(Error::invalid("total loss training needs lambda > 0")),
    };

    let mut velocity: Vec<Tensor<E>> = model
        .trainable_mut()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut batches, mut hits) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = data.batch::<E>(idx)?;
            let labels = data.batch_labels(idx);
            let (logits, acts) = model.forward(&x, Mode::Train)?;
            let grads = model.backward(&acts, &labels, lambda, config.aux_form)?;
            let loss = grads.data_loss + lambda * grads.aux_loss;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss;
            batches += 1;
            hits += argmax_hits(&logits, &labels);
            sgd_step(
                &mut model.trainable_mut(),
                &grads.tensors(),
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
        }

        let test_accuracy = test.map(|t| model.accuracy(t)).transpose()?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_accuracy: hits as f64 / data.len() as f64,
            test_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {} loss {:.5} train acc {:.4}{} ({:.1}s)",
            epoch,
            lr,
            rec.train_loss,
            rec.train_accuracy,
            rec.test_accuracy.map(|a| format!(" test acc {a:.4}")).unwrap_or_default(),
            rec.wall_time_s
        );
        records.push(rec);
    }

    let checksum = model.checksum();
    Ok((
        model,
        TrainReport {
            loss_mode,
            epochs: records,
            checksum,
        },
    ))
}

/// Training with the data loss only; `config.lambda` is ignored.
pub fn finetune<E: Element>(
    model: ModelGraph<E>,
    data: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelGraph<E>, TrainReport)> {
    train(model, data, test, config, LossMode::Actual)
}

/// Phase log kept by [`TrainHooks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub iteration: usize,
    pub phase: String,
    pub report: TrainReport,
}

/// [`PruneHooks`] that run [`train`] with the total loss for the perturbation
/// phase and [`finetune`] afterwards. Phase seeds are offset by the iteration.
pub struct TrainHooks<'a> {
    pub data: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub aux: TrainConfig,
    pub finetune: TrainConfig,
    pub phases: Vec<PhaseReport>,
}

impl<'a> TrainHooks<'a> {
    pub fn new(data: &'a Dataset, test: Option<&'a Dataset>, aux: TrainConfig, finetune: TrainConfig) -> Self {
        TrainHooks {
            data,
            test,
            aux,
            finetune,
            phases: Vec::new(),
        }
    }
}

impl<E: Element> PruneHooks<E> for TrainHooks<'_> {
    fn aux_train(&mut self, model: ModelGraph<E>, t: usize, epochs: usize, lambda: f64) -> Result<ModelGraph<E>> {
        let cfg = TrainConfig {
            epochs,
            lambda,
            seed: self.aux.seed.wrapping_add(t as u64),
            ..self.aux.clone()
        };
        let (m, report) = train(model, self.data, None, &cfg, LossMode::Total)?;
        self.phases.push(PhaseReport {
            iteration: t,
            phase: "aux".into(),
            report,
        });
        Ok(m)
    }

    fn finetune(&mut self, model: ModelGraph<E>, t: usize, epochs: usize) -> Result<ModelGraph<E>> {
        let mut cfg = TrainConfig {
            epochs,
            seed: self.finetune.seed.wrapping_add(t as u64),
            ..self.finetune.clone()
        };
        if epochs != self.finetune.epochs {
            cfg.lr_schedule = TrainConfig::finetune_schedule(cfg.lr, epochs);
        }
        let (m, report) = finetune(model, self.data, self.test, &cfg)?;
        self.phases.push(PhaseReport {
            iteration: t,
            phase: "finetune".into(),
            report,
        });
        Ok(m)
    }

    fn random_seed(&self, t: usize) -> u64 {
        self.aux.seed.wrapping_add(t as u64)
    }
}

fn argmax_hits<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
            best == l
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = t(&[1.0]);
        let mut v = vec![t(&[0.0])];
        sgd_step(&mut [&mut p], &[&t(&[0.5])], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = t(&[0.3, -2.0]);
        let mut v = vec![t(&[0.0, 0.0])];
        sgd_step(&mut [&mut p], &[&t(&[0.0, 0.0])], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[0.3, -2.0]);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = t(&[1.0, 2.0]);
        let mut v = vec![t(&[0.0, 0.0])];
        assert!(sgd_step(&mut [&mut p], &[&t(&[0.0])], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn lr_schedule_lookup() {
        let c = TrainConfig::baseline(20, 0);
        assert_eq!(c.lr_at(0), 0.05);
        assert_eq!(c.lr_at(9), 0.05);
        assert_eq!(c.lr_at(10), 0.005);
        assert_eq!(c.lr_at(15), 0.0005);
        assert_eq!(c.lr_at(100), 0.0005);
        let f = TrainConfig::finetune(3, 0);
        assert_eq!((f.lr_at(0), f.lr_at(1), f.lr_at(2)), (0.01, 0.001, 0.0001));
        let f = TrainConfig::finetune(5, 0);
        assert_eq!((f.lr_at(0), f.lr_at(3), f.lr_at(4)), (0.01, 0.001, 0.0001));
        assert_eq!(TrainConfig::finetune(2, 0).lr_schedule, vec![(1, 0.001)]);
        assert!(TrainConfig::finetune(1, 0).lr_schedule.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::aux(0);
        assert!(c.validate().is_ok());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::aux(0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::aux(0);
        c.lr_schedule = vec![(3, 0.1), (1, 0.2)];
        assert!(c.validate().is_err());
    }
}
