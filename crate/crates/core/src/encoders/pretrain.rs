//! Point-branch pretraining as instance classification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, Encoders};
use crate::celldb::{CellDatabase, CellInstance};
use crate::numerics::{Adam, AdamConfig, Mlp, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cap on the number of training instances (0 = all).
    pub max_instances: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            lr: 1e-3,
            max_instances: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains the point branch plus a linear class head (`<prefix>pretrain.head`)
/// on the real in-cell instances of `db`. Only `inst.point.*` and the head
/// are updated.
pub fn pretrain_points(
    db: &CellDatabase,
    enc: &Encoders,
    store: &mut ParamStore,
    num_classes: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainReport, EncoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = Mlp::init(
        store,
        &format!("{}pretrain.head", enc.prefix),
        &[enc.config.dim, num_classes],
        &mut rng,
    );
    let mut samples: Vec<(&CellInstance, usize)> = db
        .cells
        .iter()
        .flat_map(|c| c.real().iter())
        .filter_map(|i| i.class.map(|c| (i, c.0)))
        .collect();
    samples.shuffle(&mut rng);
    if cfg.max_instances > 0 {
        samples.truncate(cfg.max_instances);
    }
    if samples.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let trainable: Vec<String> = store
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with(&enc.point.prefix) || n.starts_with(&head.prefix))
        .collect();
    let mut adam = Adam::new(AdamConfig::default());
    let mut report = PretrainReport::default();
    for _ in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in samples.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let insts: Vec<&CellInstance> = batch.iter().map(|s| s.0).collect();
            let f = enc.point_features(&mut tape, store, &insts)?;
            let logits = head.forward(&mut tape, store, f)?;
            let lse = tape.log_sum_exp_rows(logits)?;
            let picks: Vec<usize> = batch
                .iter()
                .enumerate()
                .map(|(r, s)| r * num_classes + s.1)
                .collect();
            let target = tape.gather_elems(logits, &picks)?;
            let lse_row = tape.transpose(lse);
            let nll = tape.sub(lse_row, target)?;
            let loss = tape.mean(nll);
            total += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let all = tape.param_grads(&grads, store);
            let g = all
                .into_iter()
                .filter(|(n, _)| trainable.contains(n))
                .collect();
            adam.step(store, &g, cfg.lr)?;
        }
        report.epoch_loss.push(total / samples.len() as f64);
    }
    let mut correct = 0;
    for batch in samples.chunks(256) {
        let mut tape = Tape::new();
        let insts: Vec<&CellInstance> = batch.iter().map(|s| s.0).collect();
        let f = enc.point_features(&mut tape, store, &insts)?;
        let logits = head.forward(&mut tape, store, f)?;
        let t: &Tensor = tape.value(logits);
        for (r, s) in batch.iter().enumerate() {
            let row = t.row(r);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap();
            correct += usize::from(arg == s.1);
        }
    }
    report.train_accuracy = correct as f64 / samples.len() as f64;
    log::info!(
        "point pretraining: final loss {:.4}, accuracy {:.3}",
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.train_accuracy
    );
    Ok(report)
}
