use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::autograd::{Adam, AdamConfig};
use crate::data::{mean_foreground_dsc, Phantom};
use crate::error::{Error, Result};
use crate::parallel::{map_ordered, thread_limit};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Seeds the shuffling order.
    pub seed: u64,
    /// Samples of a batch evaluated concurrently.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 7,
            threads: thread_limit(),
        }
    }
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    /// Mean foreground DSC on the training cases after the epoch.
    pub train_dsc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub records: Vec<EpochRecord>,
}

impl TrainingReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_train_dsc(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_dsc)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }
}

pub fn train(net: &mut Network, cases: &[Phantom], cfg: &TrainConfig) -> Result<TrainingReport> {
    train_with(net, cases, cfg, |_| {})
}

/// Mini-batch Adam over `cases`; `on_epoch` sees each record as it is made.
pub fn train_with(
    net: &mut Network,
    cases: &[Phantom],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingReport> {
    if cases.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let classes = net.config().num_classes;
    for case in cases {
        case.labels.check_classes(classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut report = TrainingReport::default();
    let mut step = 0;
    net.params_mut().zero_grad();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sample_loss = vec![0.0; cases.len()];
        for batch in order.chunks(cfg.batch_size) {
            let shared: &Network = net;
            let results = map_ordered(batch, cfg.threads, |&i| {
                shared.loss_and_grads(&cases[i].image, &cases[i].labels)
            });
            let scale = 1.0 / batch.len() as f64;
            for (&i, result) in batch.iter().zip(results) {
                let (loss, grads) = result.map_err(|e| as_divergence(e, step))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        message: format!("loss {loss} on case {i} in epoch {epoch}"),
                    });
                }
                sample_loss[i] = loss;
                net.params_mut().accumulate(&grads, scale);
            }
            adam.step(net.params_mut());
            if let Some((_, p)) = net.params().iter().find(|(_, p)| !p.value().is_finite()) {
                return Err(Error::Divergence {
                    step,
                    message: format!("parameter {} became non-finite", p.name()),
                });
            }
            step += 1;
        }
        let loss = sample_loss.iter().sum::<f64>() / cases.len() as f64;
        let record = EpochRecord {
            epoch,
            loss,
            train_dsc: mean_train_dsc(net, cases, cfg.threads).map_err(|e| as_divergence(e, step))?,
        };
        on_epoch(&record);
        report.records.push(record);
    }
    Ok(report)
}

/// Non-finite values inside a training step mean the run diverged.
fn as_divergence(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(message) => Error::Divergence { step, message },
        other => other,
    }
}

fn mean_train_dsc(net: &Network, cases: &[Phantom], threads: usize) -> Result<f64> {
    let classes = net.config().num_classes;
    let scores = map_ordered(cases, threads, |case| -> Result<f64> {
        let pred = net.predict(&case.image)?.argmax();
        mean_foreground_dsc(&pred, &case.labels, classes)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / cases.len() as f64)
}
