use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentConfig};
use super::optim::{sgd_momentum_step, OptimConfig, OptimState};
use super::schedule::PlateauSchedule;
use super::synth::Sample;
use crate::autograd::Tape;
use crate::checkpoint;
use crate::error::{config_err, format_err, Error, Result};
use crate::loss::{loss_on, LossKind};
use crate::model::DfnetModel;
use crate::tensor::{Float, Tensor};

const VELOCITY_PREFIX: &str = "optim.velocity.";
const STATE_PREFIX: &str = "train.";
const STATE_EPOCH: &str = "train.epoch";
const STATE_LR: &str = "train.learning_rate";
const STATE_BEST: &str = "train.best_loss";
const STATE_COUNTER: &str = "train.epochs_since_improvement";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub patience: usize,
    pub lr_factor: Float,
    pub augment: AugmentConfig,
    pub loss: LossKind,
    /// Seeds shuffling and augmentation.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            optim: OptimConfig::default(),
            patience: 10,
            lr_factor: 10.0,
            augment: AugmentConfig::default(),
            loss: LossKind::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.patience == 0 || !(self.lr_factor > 1.0) {
            return Err(config_err!(
                "plateau schedule needs patience ≥ 1 and factor > 1, got {} and {}",
                self.patience,
                self.lr_factor
            ));
        }
        self.optim.validate()?;
        self.augment.validate()?;
        if let LossKind::Sharpening(cfg) = &self.loss {
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: Float,
    /// Learning rate used during the epoch.
    pub learning_rate: Float,
    pub seconds: Float,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,lr,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{:.3}", r.epoch, r.train_loss, r.learning_rate, r.seconds);
        }
        s
    }

    pub fn losses(&self) -> Vec<Float> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// Owns the optimizer and schedule state for one model. Every epoch draws
/// its shuffle and augmentation from an RNG keyed by `(seed, epoch)`, so a
/// run resumed from a checkpoint continues exactly as an uninterrupted one.
pub struct Trainer<'m> {
    pub model: &'m mut DfnetModel,
    pub config: TrainConfig,
    pub optim: OptimState,
    pub schedule: PlateauSchedule,
    /// Index of the next epoch to run.
    pub epoch: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut DfnetModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = OptimState::new(model.params.tensors(), config.optim)?;
        let schedule = PlateauSchedule::new(config.patience, config.lr_factor);
        Ok(Trainer {
            model,
            config,
            optim,
            schedule,
            epoch: 0,
        })
    }

    /// Restores parameters, velocities and schedule state from a checkpoint
    /// written by [`Trainer::save_checkpoint`].
    pub fn resume(model: &'m mut DfnetModel, config: TrainConfig, path: &Path) -> Result<Self> {
        let entries = checkpoint::read_tensors(path)?;
        let mut trainer = Trainer::new(model, config)?;
        trainer.restore(&entries)?;
        Ok(trainer)
    }

    fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| format_err!("checkpoint has no {name:?} entry"))
        };
        let scalar = |name: &str| -> Result<Float> {
            let t = find(name)?;
            if t.len() != 1 {
                return Err(format_err!("{name:?} must be a scalar"));
            }
            Ok(t.data()[0])
        };
        self.model.params.load_from(
            entries
                .iter()
                .filter(|(n, _)| !n.starts_with(VELOCITY_PREFIX) && !n.starts_with(STATE_PREFIX))
                .map(|(n, t)| (n.as_str(), t)),
        )?;
        let names: Vec<String> = self.model.params.iter().map(|(n, _)| n.to_owned()).collect();
        for (n, v) in names.iter().zip(&mut self.optim.velocity) {
            let name = format!("{VELOCITY_PREFIX}{n}");
            let t = find(&name)?;
            if t.shape() != v.shape() {
                return Err(format_err!("{name:?} has shape {}, expected {}", t.shape(), v.shape()));
            }
            *v = t.clone();
        }
        self.epoch = scalar(STATE_EPOCH)? as usize;
        self.optim.learning_rate = scalar(STATE_LR)?;
        self.schedule.best_loss = scalar(STATE_BEST)?;
        self.schedule.epochs_since_improvement = scalar(STATE_COUNTER)? as usize;
        Ok(())
    }

    /// Parameters, velocities and schedule state; no wall-clock data, so the
    /// bytes depend only on the seeds and configuration.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect();
        for ((n, _), v) in self.model.params.iter().zip(&self.optim.velocity) {
            out.push((format!("{VELOCITY_PREFIX}{n}"), v.clone()));
        }
        out.push((STATE_EPOCH.into(), Tensor::scalar(self.epoch as Float)));
        out.push((STATE_LR.into(), Tensor::scalar(self.optim.learning_rate)));
        out.push((STATE_BEST.into(), Tensor::scalar(self.schedule.best_loss)));
        out.push((
            STATE_COUNTER.into(),
            Tensor::scalar(self.schedule.epochs_since_improvement as Float),
        ));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let entries = self.checkpoint_entries();
        checkpoint::write_tensors(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// One SGD step on a stacked batch; returns the batch loss.
    pub fn step(&mut self, images: &Tensor, masks: &Tensor) -> Result<Float> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true);
        let x = tape.constant(images.clone());
        let s = self.model.forward(&mut tape, &p, x)?;
        let (loss, _) = loss_on(&mut tape, s, masks, &self.config.loss)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = p.grads(&tape)?;
        sgd_momentum_step(self.model.params.tensors_mut(), &grads, &mut self.optim)?;
        Ok(value)
    }

    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(config_err!("training set is empty"));
        }
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let learning_rate = self.optim.learning_rate;
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (img, m) = augment(&data[i].image, &data[i].mask, &self.config.augment, &mut rng)?;
                images.push(img);
                masks.push(m);
            }
            let loss = self
                .step(&Tensor::stack(&images)?, &Tensor::stack(&masks)?)
                .map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("diverged at epoch {} batch {b}: {msg}", self.epoch))
                    }
                    other => other,
                })?;
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as Float;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {} mean loss is {train_loss}",
                self.epoch
            )));
        }
        self.schedule.update(train_loss, &mut self.optim);
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss,
            learning_rate,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until `config.epochs` have been completed in total.
    pub fn run(&mut self, data: &[Sample]) -> Result<History> {
        let mut history = History::default();
        while self.epoch < self.config.epochs {
            history.records.push(self.run_epoch(data)?);
        }
        Ok(history)
    }
}

/// Loads the model parameters of a checkpoint, ignoring optimizer and
/// schedule entries.
pub fn load_model_parameters(model: &mut DfnetModel, path: &Path) -> Result<()> {
    let entries = checkpoint::read_tensors(path)?;
    model.params.load_from(
        entries
            .iter()
            .filter(|(n, _)| !n.starts_with(VELOCITY_PREFIX) && !n.starts_with(STATE_PREFIX))
            .map(|(n, t)| (n.as_str(), t)),
    )
}

/// Trains `model` from scratch for `config.epochs` epochs.
pub fn train(model: &mut DfnetModel, data: &[Sample], config: &TrainConfig) -> Result<History> {
    Trainer::new(model, config.clone())?.run(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 0,
                train_loss: 0.5,
                learning_rate: 8e-3,
                seconds: 1.25,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,lr,seconds\n0,0.5,0.008,1.250\n");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
