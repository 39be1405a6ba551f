//! Mini-batch training loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::metrics::frame_error_rate;
use crate::model::{AcousticModel, LossSpec};
use crate::optim::{Sgd, SgdConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub base_lr: f64,
    pub epochs: usize,
    /// Utterances per mini-batch.
    pub batch_size: usize,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { base_lr: 0.1, epochs: 4, batch_size: 8, momentum: 0.9, clip_norm: Some(5.0), seed: 0 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("training needs base_lr > 0, batch_size > 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { momentum: self.momentum, clip_norm: self.clip_norm }
    }
}

/// How utterances are grouped into mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batching {
    /// Shuffle everything together.
    Mixed,
    /// Single-accent batches, accents taken in turn; shuffled within accent each epoch.
    AccentRoundRobin,
}

/// Batches of indices into `utts` for one epoch.
pub fn epoch_batches(utts: &[Utterance], batching: Batching, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, &[rng::tag("epoch-shuffle"), epoch as u64]);
    match batching {
        Batching::Mixed => {
            let mut idx: Vec<usize> = (0..utts.len()).collect();
            idx.shuffle(&mut r);
            idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        Batching::AccentRoundRobin => {
            let mut by_accent: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, u) in utts.iter().enumerate() {
                by_accent.entry(u.accent).or_default().push(i);
            }
            let mut queues: Vec<Vec<Vec<usize>>> = by_accent
                .into_values()
                .map(|mut idx| {
                    idx.shuffle(&mut r);
                    idx.chunks(batch_size).rev().map(<[usize]>::to_vec).collect()
                })
                .collect();
            let mut out = Vec::new();
            while queues.iter().any(|q| !q.is_empty()) {
                for q in &mut queues {
                    if let Some(b) = q.pop() {
                        out.push(b);
                    }
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean of the batch losses in each epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation FER after each epoch, when validation data was given.
    pub valid_fer: Vec<f64>,
}

/// Trains for `hyper.epochs` epochs.
pub fn run_epochs(
    model: &mut AcousticModel,
    data: &[Utterance],
    hyper: &TrainHyper,
    batching: Batching,
    spec: LossSpec,
) -> Result<TrainLog> {
    hyper.validate()?;
    let mut log = TrainLog::default();
    if hyper.epochs == 0 {
        return Ok(log);
    }
    if data.is_empty() {
        return Err(Error::config("no training data"));
    }
    let mut opt = Sgd::new(hyper.sgd());
    for epoch in 0..hyper.epochs {
        log.epoch_loss.push(train_one_epoch(model, &mut opt, data, hyper, batching, spec, epoch)?);
    }
    Ok(log)
}

fn train_one_epoch(
    model: &mut AcousticModel,
    opt: &mut Sgd,
    data: &[Utterance],
    hyper: &TrainHyper,
    batching: Batching,
    spec: LossSpec,
    epoch: usize,
) -> Result<f64> {
    let batches = epoch_batches(data, batching, hyper.batch_size, hyper.seed, epoch);
    let mut total = 0.0;
    for idx in &batches {
        let batch: Vec<Utterance> = idx.iter().map(|&i| data[i].clone()).collect();
        total += model.forward_backward(&batch, spec)?;
        let groups = model.groups().to_vec();
        opt.step(model.params_mut(), &groups, hyper.base_lr)?;
    }
    Ok(total / batches.len() as f64)
}

/// Frame cross-entropy training with early stopping: stops once validation
/// FER has not improved for `patience` epochs and restores the best epoch.
pub fn train_baseline(
    model: &mut AcousticModel,
    train: &[Utterance],
    valid: &[Utterance],
    hyper: &TrainHyper,
    patience: usize,
) -> Result<TrainLog> {
    hyper.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::config("baseline training needs train and validation utterances"));
    }
    let mut opt = Sgd::new(hyper.sgd());
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, model.params().clone());
    let mut stale = 0;
    for epoch in 0..hyper.epochs {
        log.epoch_loss.push(train_one_epoch(model, &mut opt, train, hyper, Batching::Mixed, LossSpec::primary(), epoch)?);
        let fer = frame_error_rate(model, valid)?;
        log.valid_fer.push(fer);
        if fer < best.0 {
            best = (fer, model.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    *model.params_mut() = best.1;
    Ok(log)
}
