use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{ForwardMode, HgvModel};
use crate::harness::{Adam, Checkpoint, TrainConfig};
use crate::ndtensor::Tape;
use crate::objective::{auprc, auroc, MetricReport};

/// Offset separating the shuffle/dropout stream from initialisation.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Epoch 0 is the untrained model.
    pub epoch: usize,
    /// Mean per-instance hybrid loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub valid_auroc: f64,
    pub valid_auprc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUROC.
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Parameters after the last epoch.
    pub last: HgvModel,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> &EpochLog {
        &self.log[self.best.epoch]
    }
}

/// Eval-mode risk probabilities for every record, in dataset order.
pub fn predict_all(model: &HgvModel, ds: &Dataset) -> Result<Vec<f64>> {
    ds.records().iter().map(|r| model.predict(r)).collect()
}

pub fn evaluate(model: &HgvModel, ds: &Dataset, n_boot: usize, seed: u64) -> Result<MetricReport> {
    let scores = predict_all(model, ds)?;
    MetricReport::compute(&scores, &ds.labels(), n_boot, seed)
}

fn valid_metrics(model: &HgvModel, ds: &Dataset) -> Result<(f64, f64)> {
    let scores = predict_all(model, ds)?;
    let labels = ds.labels();
    Ok((auroc(&scores, &labels)?, auprc(&scores, &labels)?))
}

/// Mini-batch Adam on the hybrid loss with best-validation-AUROC selection.
pub fn train(train_ds: &Dataset, valid_ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    if train_ds.is_empty() || valid_ds.is_empty() {
        return Err(Error::protocol("training and validation sets must be non-empty"));
    }
    let config = config.with_dims(train_ds.dims())?;
    if valid_ds.dims() != train_ds.dims() {
        return Err(Error::Schema("validation set dimensions differ from the training set".into()));
    }
    let mut model = HgvModel::new(config.model_config()?, config.seed)?;
    let mut adam = Adam::new(&model.store, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let records = train_ds.records();
    let mut order: Vec<usize> = (0..records.len()).collect();

    let (auroc0, auprc0) = valid_metrics(&model, valid_ds)?;
    let mut log = vec![EpochLog { epoch: 0, train_loss: None, valid_auroc: auroc0, valid_auprc: auprc0 }];
    let mut best = Checkpoint::from_model(&model, &config, 0);
    let mut best_auroc = auroc0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| &records[i]).collect();
            let dropout_seed: u64 = rng.gen();
            let (loss, grads) = {
                let mut tape = Tape::new(&model.store);
                let out = model
                    .net
                    .batch_loss(
                        &mut tape,
                        &batch,
                        |i| ForwardMode::Train { dropout_seed: dropout_seed.wrapping_add(i as u64) },
                        config.lambda_d,
                    )
                    .map_err(|e| match e {
                        Error::Domain(m) => Error::Domain(format!("epoch {epoch}, batch {b}: {m}")),
                        other => other,
                    })?;
                let loss = tape.value(out.loss).item();
                if !loss.is_finite() {
                    return Err(Error::domain(format!("non-finite loss {loss} at epoch {epoch}, batch {b}")));
                }
                (loss, tape.backward(out.loss)?)
            };
            total += loss;
            adam.step(&mut model.store, &grads);
        }
        let (va, vp) = valid_metrics(&model, valid_ds)?;
        let train_loss = total / records.len() as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.5}, valid AUROC {va:.4}, AUPRC {vp:.4}");
        log.push(EpochLog { epoch, train_loss: Some(train_loss), valid_auroc: va, valid_auprc: vp });
        if va > best_auroc {
            best_auroc = va;
            best = Checkpoint::from_model(&model, &config, epoch);
        }
    }
    Ok(TrainOutcome { best, log, last: model })
}
