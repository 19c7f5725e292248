//! Source-model training: SGD with momentum on the desk CNN.

use dua_core::layers::softmax_cross_entropy;
use dua_core::model::argmax;
use dua_core::shiftlab::Dataset;
use dua_core::{Model, Rng, Sgd};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_error_pct: f64,
}

pub struct TrainReport {
    pub model: Model,
    pub epochs: Vec<EpochRow>,
}

/// Trains from a seed-determined initialization; batch order is reshuffled
/// every epoch from a seed-derived stream.
pub fn train_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<TrainReport> {
    let mut model = Model::desk_cnn(&mut Rng::stream(cfg.seed, "train/init"));
    let mut opt = Sgd::new(cfg.lr, cfg.sgd_momentum)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::indexed(cfg.seed, "train/shuffle", epoch as u64);
        let order = rng.permutation(train.len());
        let (mut loss_sum, mut wrong, mut batches) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.train_batch) {
            // a trailing batch of one has no batch variance
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk)?;
            let (logits, trace) = model.forward_train(&batch.images)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
            wrong += (0..logits.n())
                .filter(|&i| argmax(logits.item(i)) != batch.labels[i])
                .count();
            let grads = model.backward(&trace, &grad)?;
            opt.step(&mut model, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let row = EpochRow {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches.max(1) as f64,
            train_error_pct: 100.0 * wrong as f64 / train.len() as f64,
        };
        log::info!(
            "epoch {}: loss {:.4}, train error {:.2}%",
            row.epoch,
            row.mean_loss,
            row.train_error_pct
        );
        epochs.push(row);
    }
    Ok(TrainReport { model, epochs })
}
