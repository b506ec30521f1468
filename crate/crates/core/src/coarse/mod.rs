//! Text-to-cell retrieval: the dual-branch embedding, its ranking loss and
//! training loop, and exhaustive top-k search over cell embeddings.

mod augment;
mod index;

pub use augment::{flip_pair, rotate_instances, shuffle_hints};
pub use index::{
    load_index, read_index, retrieve_topk, save_index, write_index, RetrievalIndex, TopK,
    INDEX_FORMAT, INDEX_VERSION,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::celldb::{ground_truth_cell, Cell, CellDatabase, CellError, CellInstance};
use crate::encoders::{EncoderConfig, EncoderError, Encoders, Vocabulary};
use crate::numerics::{Adam, AdamConfig, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::querygen::QueryDescription;
use crate::scene::dist2;

#[derive(Debug, Error)]
pub enum CoarseError {
    #[error("invalid coarse config: {0}")]
    Config(String),
    #[error("no groundable training descriptions")]
    NoTrainingData,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query has dimension {found}, index has {expected}")]
    QueryDim { expected: usize, found: usize },
    #[error("index format: {0}")]
    Format(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfigCoarse {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub margin: f64,
    pub shuffle_hints: bool,
    pub flip_cells: bool,
    pub rotate_instances: bool,
    /// Localization threshold for checkpoint selection, meters.
    pub val_epsilon: f64,
    /// Keep the best validation checkpoint instead of the last epoch.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for TrainConfigCoarse {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            epochs: 64,
            margin: 0.35,
            shuffle_hints: true,
            flip_cells: true,
            rotate_instances: true,
            val_epsilon: 15.0,
            keep_best: true,
            seed: 0,
        }
    }
}

impl TrainConfigCoarse {
    pub fn validate(&self) -> Result<(), CoarseError> {
        let mut bad = Vec::new();
        if self.batch_size < 2 {
            bad.push("batch_size must be at least 2");
        }
        if !(self.margin >= 0.0) {
            bad.push("margin must be non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push("lr must be a finite non-negative number");
        }
        if !(self.val_epsilon > 0.0) {
            bad.push("val_epsilon must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CoarseError::Config(bad.join("; ")))
        }
    }

    pub fn without_augmentation(mut self) -> Self {
        self.shuffle_hints = false;
        self.flip_cells = false;
        self.rotate_instances = false;
        self
    }
}

/// Pairwise ranking loss over a batch of matched rows.
///
/// Both sides are L2-normalized, then every ordered pair `i ≠ j` contributes
/// `[α − ⟨c_i, t_i⟩ + ⟨c_i, t_j⟩]₊ + [α − ⟨c_i, t_i⟩ + ⟨c_j, t_i⟩]₊`.
/// Batches of one row give zero.
pub fn ranking_loss(
    tape: &mut Tape,
    cells: Var,
    texts: Var,
    margin: f64,
) -> Result<Var, NumericsError> {
    let b = tape.value(cells).rows();
    if tape.value(texts).shape() != tape.value(cells).shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "ranking_loss",
            left: tape.value(cells).shape().to_vec(),
            right: tape.value(texts).shape().to_vec(),
        });
    }
    if b < 2 {
        log::warn!("ranking loss on a batch of {b}: no negatives, loss is 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let c = tape.l2_normalize_rows(cells)?;
    let t = tape.l2_normalize_rows(texts)?;
    let tt = tape.transpose(t);
    // sim[i][j] = <c_i, t_j>
    let sim = tape.matmul(c, tt)?;
    let diag_idx: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let diag = tape.gather_elems(sim, &diag_idx)?;
    let ones = tape.constant(Tensor::filled(b, 1, 1.0));
    let diag_rows = tape.matmul(ones, diag)?;
    // pos[i][j] = <c_i, t_i>
    let pos = tape.transpose(diag_rows);
    let mut off = Tensor::filled(b, b, 1.0);
    for i in 0..b {
        off.set(i, i, 0.0);
    }
    let off = tape.constant(off);

    let a = tape.sub(sim, pos)?;
    let a = tape.add_scalar(a, margin);
    let a = tape.relu(a);
    let a = tape.mul(a, off)?;

    // simt[i][j] = <c_j, t_i>
    let simt = tape.transpose(sim);
    let bb = tape.sub(simt, pos)?;
    let bb = tape.add_scalar(bb, margin);
    let bb = tape.relu(bb);
    let bb = tape.mul(bb, off)?;

    let both = tape.add(a, bb)?;
    Ok(tape.sum(both))
}

/// Encoders plus their parameters and the tokenizer for descriptions.
#[derive(Clone, Debug)]
pub struct CoarseModel {
    pub encoders: Encoders,
    pub params: ParamStore,
    pub vocab: Vocabulary,
}

const EMBED_CHUNK: usize = 64;

impl CoarseModel {
    pub fn init(cfg: &EncoderConfig, vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoders = Encoders::init(cfg, vocab.len(), "", &mut params, &mut rng);
        Self {
            encoders,
            params,
            vocab,
        }
    }

    /// Rebuilds the layout for `cfg` and checks `params` against it.
    pub fn from_params(
        cfg: &EncoderConfig,
        vocab: Vocabulary,
        params: ParamStore,
    ) -> Result<Self, CoarseError> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoders = Encoders::init(cfg, vocab.len(), "", &mut scratch, &mut rng);
        params.validate_against(&scratch)?;
        Ok(Self {
            encoders,
            params,
            vocab,
        })
    }

    /// Copies pretrained point-branch weights (`inst.point.*`) from `other`.
    pub fn load_point_branch(&mut self, other: &ParamStore) -> usize {
        let p = &self.encoders.point.prefix;
        self.params.copy_prefixed(other, p, p)
    }

    /// L2-normalized cell embeddings `[cells, dim]`.
    pub fn embed_cells(&self, cells: &[&Cell]) -> Result<Tensor, CoarseError> {
        let mut rows = Vec::with_capacity(cells.len());
        for chunk in cells.chunks(EMBED_CHUNK) {
            let mut tape = Tape::new();
            let insts: Vec<&[CellInstance]> = chunk.iter().map(|c| c.instances.as_slice()).collect();
            let v = self.encoders.encode_cells(&mut tape, &self.params, &insts)?;
            let v = tape.l2_normalize_rows(v)?;
            rows.extend(tape.value(v).to_rows());
        }
        Ok(Tensor::from_rows(&rows)?)
    }

    /// L2-normalized description embeddings `[descriptions, dim]`.
    pub fn embed_descriptions(&self, descs: &[&QueryDescription]) -> Result<Tensor, CoarseError> {
        let mut rows = Vec::with_capacity(descs.len());
        for chunk in descs.chunks(EMBED_CHUNK) {
            let mut tape = Tape::new();
            let texts = hint_texts(chunk);
            let v = self
                .encoders
                .encode_descriptions(&mut tape, &self.params, &self.vocab, &texts)?;
            let v = tape.l2_normalize_rows(v)?;
            rows.extend(tape.value(v).to_rows());
        }
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Ranking loss of one batch of (description, cell payload) pairs.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        descs: &[&QueryDescription],
        cells: &[&[CellInstance]],
        margin: f64,
    ) -> Result<Var, CoarseError> {
        let c = self.encoders.encode_cells(tape, params, cells)?;
        let texts = hint_texts(descs);
        let t = self
            .encoders
            .encode_descriptions(tape, params, &self.vocab, &texts)?;
        Ok(ranking_loss(tape, c, t, margin)?)
    }
}

fn hint_texts<'a>(descs: &[&'a QueryDescription]) -> Vec<Vec<&'a str>> {
    descs
        .iter()
        .map(|d| d.hints.iter().map(|h| h.text.as_str()).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseEpoch {
    pub epoch: usize,
    /// Mean ranking loss per batch.
    pub loss: f64,
    /// Recall@1 at `val_epsilon` on the validation descriptions.
    pub val_recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoarseTrainReport {
    pub epochs: Vec<CoarseEpoch>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub best_recall: f64,
    pub excluded_train: usize,
}

impl CoarseTrainReport {
    /// CSV with header `epoch,loss,val_recall`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,val_recall")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.loss, e.val_recall)?;
        }
        Ok(())
    }
}

/// Drops descriptions with no containing cell; returns kept pairs and the
/// number dropped.
pub fn ground_descriptions<'a>(
    descs: &'a [QueryDescription],
    db: &CellDatabase,
) -> (Vec<(&'a QueryDescription, usize)>, usize) {
    let mut kept = Vec::with_capacity(descs.len());
    let mut dropped = 0;
    for d in descs {
        match ground_truth_cell(d.position, db) {
            Ok(c) => kept.push((d, c)),
            Err(_) => dropped += 1,
        }
    }
    (kept, dropped)
}

/// Top-1 retrieval quality: fraction within `epsilon` meters of the
/// retrieved cell's center, and fraction whose retrieved cell is the GT cell.
pub fn top1_quality(
    model: &CoarseModel,
    index: &RetrievalIndex,
    db: &CellDatabase,
    descs: &[&QueryDescription],
    epsilon: f64,
) -> Result<(f64, f64), CoarseError> {
    if descs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let emb = model.embed_descriptions(descs)?;
    let mut within = 0usize;
    let mut hit = 0usize;
    for (r, d) in descs.iter().enumerate() {
        let top = retrieve_topk(emb.row(r), index, 1)?;
        let cell = db.cell(top.ids[0]);
        if dist2(cell.center(), d.position) < epsilon {
            within += 1;
        }
        if ground_truth_cell(d.position, db).ok() == Some(cell.id) {
            hit += 1;
        }
    }
    let n = descs.len() as f64;
    Ok((within as f64 / n, hit as f64 / n))
}

/// Mini-batch training of `model` on `(description, GT cell)` pairs.
///
/// After every epoch the model is scored by recall@1 at `val_epsilon` on
/// `val` (on the training set when `val` is empty); with `keep_best` the
/// best parameters, earliest on ties, are left in `model`.
pub fn train_coarse(
    model: &mut CoarseModel,
    train: &[QueryDescription],
    val: &[QueryDescription],
    db: &CellDatabase,
    cfg: &TrainConfigCoarse,
) -> Result<CoarseTrainReport, CoarseError> {
    cfg.validate()?;
    let (pairs, dropped) = ground_descriptions(train, db);
    if dropped > 0 {
        log::warn!("coarse training: excluded {dropped} ungroundable descriptions");
    }
    if pairs.is_empty() {
        return Err(CoarseError::NoTrainingData);
    }
    let val_set: Vec<&QueryDescription> = if val.is_empty() {
        pairs.iter().map(|p| p.0).collect()
    } else {
        val.iter().collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut report = CoarseTrainReport {
        excluded_train: dropped,
        ..Default::default()
    };

    let score = |m: &CoarseModel| -> Result<f64, CoarseError> {
        let index = RetrievalIndex::build(m, db)?;
        Ok(top1_quality(m, &index, db, &val_set, cfg.val_epsilon)?.0)
    };
    let mut best_params = model.params.clone();
    report.best_recall = score(model)?;
    report.best_epoch = 0;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut descs: Vec<QueryDescription> = Vec::with_capacity(chunk.len());
            let mut cells: Vec<Vec<CellInstance>> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (d, c) = pairs[i];
                let mut d = d.clone();
                let mut cell = db.cell(c).instances.clone();
                augment_pair(&mut cell, &mut d, cfg, &mut rng);
                descs.push(d);
                cells.push(cell);
            }
            let mut tape = Tape::new();
            let drefs: Vec<&QueryDescription> = descs.iter().collect();
            let crefs: Vec<&[CellInstance]> = cells.iter().map(Vec::as_slice).collect();
            let loss = model.batch_loss(&mut tape, &model.params, &drefs, &crefs, cfg.margin)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let g = tape.param_grads(&grads, &model.params);
            adam.step(&mut model.params, &g, cfg.lr)?;
        }
        let val_recall = score(model)?;
        let loss = total / batches as f64;
        log::info!("coarse epoch {epoch}: loss {loss:.4}, val recall@1 {val_recall:.3}");
        report.epochs.push(CoarseEpoch {
            epoch,
            loss,
            val_recall,
        });
        if val_recall > report.best_recall {
            report.best_recall = val_recall;
            report.best_epoch = epoch;
            best_params = model.params.clone();
        }
    }
    if cfg.keep_best {
        model.params = best_params;
    } else {
        report.best_epoch = cfg.epochs;
        report.best_recall = report.epochs.last().map_or(report.best_recall, |e| e.val_recall);
    }
    Ok(report)
}

fn augment_pair(
    cell: &mut [CellInstance],
    desc: &mut QueryDescription,
    cfg: &TrainConfigCoarse,
    rng: &mut ChaCha8Rng,
) {
    if cfg.shuffle_hints {
        shuffle_hints(desc, rng);
    }
    if cfg.flip_cells {
        let fx = rng.gen_bool(0.5);
        let fy = rng.gen_bool(0.5);
        flip_pair(cell, desc, fx, fy);
    }
    if cfg.rotate_instances {
        rotate_instances(cell, rng);
    }
}
