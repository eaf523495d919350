//! Minibatch Adam training of the network and the loss weights.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::{dataset_tuples, preprocess, DataError, DatasetSample, PreprocessConfig};
use crate::geometry::Pose;
use crate::loss::{
    single_image_loss_eval, temporal_loss_eval, LossError, LossState, TemporalConfig,
};
use crate::model::{Mode, ModelError, PoseNet};
use crate::nn::{zeros_like, Params};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("no {len}-frame tuples with spacing {spacing} fit in any sequence")]
    NoTuples { len: usize, spacing: usize },
    #[error("non-finite loss at epoch {epoch}, step {step} (batch {batch} of the epoch)")]
    NonFinite {
        epoch: usize,
        step: u64,
        batch: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub beta0: f64,
    pub gamma0: f64,
    /// Total number of epochs; must be set explicitly.
    pub epochs: usize,
    pub seed: u64,
    /// Enables the multi-frame loss over sampled tuples.
    pub temporal: Option<TemporalConfig>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 64,
            dropout_rate: 0.5,
            beta0: LossState::BETA0,
            gamma0: LossState::GAMMA0,
            epochs: 0,
            seed: 0,
            temporal: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be set to at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.beta0.is_finite() && self.gamma0.is_finite()) {
            return bad("beta0 and gamma0 must be finite".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad(format!("invalid Adam coefficients {a:?}"));
        }
        if let Some(t) = &self.temporal {
            t.validate().map_err(TrainError::Config)?;
        }
        Ok(())
    }
}

/// One line of the training log: `epoch step loss beta gamma [pairwise]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far, this one included.
    pub step: u64,
    /// Batch loss before the update.
    pub loss: f64,
    /// Loss weights after the update.
    pub beta: f64,
    pub gamma: f64,
    /// Batch mean of the unweighted-by-alpha pairwise terms (temporal mode).
    pub pairwise: Option<f64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:?} {:?} {:?}",
            self.epoch, self.step, self.loss, self.beta, self.gamma
        )?;
        if let Some(p) = self.pairwise {
            write!(f, " {p:?}")?;
        }
        Ok(())
    }
}

impl FromStr for LogRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 5 && f.len() != 6 {
            return Err(format!("expected 5 or 6 fields, found {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
        Ok(Self {
            epoch: f[0].parse().map_err(|e| format!("epoch: {e}"))?,
            step: f[1].parse().map_err(|e| format!("step: {e}"))?,
            loss: num(2)?,
            beta: num(3)?,
            gamma: num(4)?,
            pairwise: if f.len() == 6 { Some(num(5)?) } else { None },
        })
    }
}

/// Generator for everything random in one epoch: shuffling, crops, jitter and
/// dropout. Depends only on the seed and epoch, so resuming reproduces it.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Training state: model, loss weights and optimizer moments.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PoseNet,
    pub loss_state: LossState,
    pub config: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub optimizer: Adam,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(
        mut model: PoseNet,
        config: TrainConfig,
        preprocess: PreprocessConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        preprocess.validate()?;
        if preprocess.crop as usize != model.config().input_size {
            return Err(TrainError::Config(format!(
                "crop {} does not match the model input size {}",
                preprocess.crop,
                model.config().input_size
            )));
        }
        model.set_dropout_rate(config.dropout_rate)?;
        let mut shapes: Vec<usize> = model.named_params().iter().map(|(_, s)| s.len()).collect();
        shapes.push(2);
        Ok(Self {
            loss_state: LossState::new(config.beta0, config.gamma0),
            optimizer: Adam::new(config.adam, &shapes),
            model,
            config,
            preprocess,
            epochs_done: 0,
        })
    }

    /// Restores a trainer; a checkpoint without optimizer state restarts the moments.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(ckpt.model, ckpt.train_config, ckpt.preprocess)?;
        t.loss_state = ckpt.loss_state;
        t.epochs_done = ckpt.epochs_done;
        if let Some(opt) = ckpt.optimizer {
            if opt.shapes() != t.optimizer.shapes() {
                return Err(TrainError::Config(
                    "optimizer state does not match the model".into(),
                ));
            }
            t.optimizer = opt;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            loss_state: self.loss_state,
            train_config: self.config.clone(),
            preprocess: self.preprocess.clone(),
            epochs_done: self.epochs_done,
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Index groups that each contribute one loss term: single frames, or
    /// tuples in temporal mode.
    fn units(&self, samples: &[DatasetSample]) -> Result<Vec<Vec<usize>>, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        match &self.config.temporal {
            None => Ok((0..samples.len()).map(|i| vec![i]).collect()),
            Some(t) => {
                let units = dataset_tuples(samples, t);
                if units.is_empty() {
                    return Err(TrainError::NoTuples {
                        len: t.tuple_len(),
                        spacing: t.frame_spacing,
                    });
                }
                Ok(units)
            }
        }
    }

    /// Runs one epoch and returns the mean batch loss.
    pub fn run_epoch(
        &mut self,
        samples: &[DatasetSample],
        log: &mut dyn FnMut(&LogRecord),
    ) -> Result<f64, TrainError> {
        let mut units = self.units(samples)?;
        let epoch = self.epochs_done;
        let mut rng = epoch_rng(self.config.seed, epoch);
        units.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, batch) in units.chunks(self.config.batch_size).enumerate() {
            let seeds: Vec<Vec<(u64, u64)>> = batch
                .iter()
                .map(|u| u.iter().map(|_| (rng.random(), rng.random())).collect())
                .collect();
            let record = self.step(samples, batch, &seeds, epoch, b)?;
            log(&record);
            total += record.loss;
            batches += 1;
        }
        self.epochs_done += 1;
        Ok(total / batches as f64)
    }

    fn step(
        &mut self,
        samples: &[DatasetSample],
        batch: &[Vec<usize>],
        seeds: &[Vec<(u64, u64)>],
        epoch: usize,
        batch_index: usize,
    ) -> Result<LogRecord, TrainError> {
        let non_finite = |step| TrainError::NonFinite {
            epoch,
            step,
            batch: batch_index,
        };
        let next_step = self.optimizer.step + 1;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = zeros_like(&self.model);
        let (mut d_beta, mut d_gamma) = (0.0, 0.0);
        let (mut loss, mut pairwise) = (0.0, 0.0);
        for (unit, unit_seeds) in batch.iter().zip(seeds) {
            let mut preds = Vec::with_capacity(unit.len());
            let mut caches = Vec::with_capacity(unit.len());
            let mut targets: Vec<Pose> = Vec::with_capacity(unit.len());
            for (&i, &(crop_seed, dropout_seed)) in unit.iter().zip(unit_seeds) {
                let x = preprocess(&samples[i].image, &self.preprocess, crop_seed)?;
                let (out, cache) = self
                    .model
                    .forward_cached(&x.view(), Mode::Train { dropout_seed })
                    .map_err(|e| match e {
                        ModelError::Geometry(_) => non_finite(next_step),
                        other => TrainError::Model(other),
                    })?;
                preds.push(out);
                caches.push(cache);
                targets.push(samples[i].pose);
            }
            let eval = match &self.config.temporal {
                None => single_image_loss_eval(&preds[0], &targets[0], &self.loss_state),
                Some(t) => temporal_loss_eval(&preds, &targets, &self.loss_state, t),
            }
            .map_err(|e: LossError| match e {
                LossError::NonFinite => non_finite(next_step),
                other => TrainError::Config(other.to_string()),
            })?;
            loss += eval.value * scale;
            pairwise += eval.pairwise * scale;
            d_beta += eval.d_beta * scale;
            d_gamma += eval.d_gamma * scale;
            for (cache, g) in caches.iter().zip(&eval.preds) {
                self.model
                    .backward(cache, &(g.p * scale), &(g.logq * scale), &mut grad);
            }
        }
        if !loss.is_finite() {
            return Err(non_finite(next_step));
        }
        let mut weights = [self.loss_state.beta, self.loss_state.gamma];
        {
            let gw = [d_beta, d_gamma];
            let named = grad.named_params();
            let mut grads: Vec<&[f64]> = named.iter().map(|(_, s)| *s).collect();
            grads.push(&gw);
            let mut params = self.model.params_mut();
            params.push(&mut weights);
            self.optimizer
                .update(self.config.learning_rate, &mut params, &grads);
        }
        self.loss_state = LossState::new(weights[0], weights[1]);
        Ok(LogRecord {
            epoch,
            step: self.optimizer.step,
            loss,
            beta: weights[0],
            gamma: weights[1],
            pairwise: self.config.temporal.as_ref().map(|_| pairwise),
        })
    }

    /// Trains until `config.epochs` epochs are done; returns per-epoch mean losses.
    pub fn fit(
        &mut self,
        samples: &[DatasetSample],
        log: &mut dyn FnMut(&LogRecord),
    ) -> Result<Vec<f64>, TrainError> {
        let mut losses = Vec::new();
        while self.epochs_done < self.config.epochs {
            losses.push(self.run_epoch(samples, log)?);
        }
        Ok(losses)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh run to completion.
pub fn train(
    model: PoseNet,
    samples: &[DatasetSample],
    config: TrainConfig,
    preprocess: PreprocessConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(model, config, preprocess)?;
    let mut log = Vec::new();
    let epoch_losses = trainer.fit(samples, &mut |r| {
        log::info!("{r}");
        log.push(*r);
    })?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log,
        epoch_losses,
    })
}
