//! Fine localization inside one cell: attention over hint and instance
//! descriptors, partial matching by optimal transport with dustbins, and
//! per-match translation regression.

mod attention;
mod matches;
mod sinkhorn;

pub use attention::{attend, AttentionBlock, AttentionLayer};
pub use matches::{estimate_position, extract_matches, fine_loss, FineLoss, Match, MatchCounts, RefinedEstimate};
pub use sinkhorn::{sinkhorn, sinkhorn_tape, AssignmentMatrix};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::celldb::{ground_truth_cell, gt_matches, Cell, CellDatabase, CellInstance, GroundTruthMatch};
use crate::encoders::{EncoderConfig, EncoderError, Encoders, Vocabulary};
use crate::numerics::{Adam, AdamConfig, Mlp, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::querygen::QueryDescription;
use crate::scene::ClassRegistry;

#[derive(Debug, Error)]
pub enum FineError {
    #[error("invalid fine config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite score")]
    NonFinite,
    #[error("no groundable training descriptions")]
    NoTrainingData,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Score given to padding columns; their mass can then only go to the
/// dustbin row.
pub const PAD_SCORE: f64 = -1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Multiplier on descriptor dot products; `None` means `1/√dim`.
    pub scale: Option<f64>,
    pub dustbin_init: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub threshold: f64,
    pub regressor_hidden: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            scale: None,
            dustbin_init: 1.0,
            sinkhorn_iters: 100,
            sinkhorn_tol: 1e-6,
            threshold: 0.2,
            regressor_hidden: 128,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self, dim: usize) -> Result<(), FineError> {
        let mut bad = Vec::new();
        if self.heads == 0 || dim % self.heads != 0 {
            bad.push(format!("heads ({}) must divide dim ({dim})", self.heads));
        }
        if self.sinkhorn_iters == 0 {
            bad.push("sinkhorn_iters must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            bad.push("threshold must lie in (0, 1)".into());
        }
        if !(self.sinkhorn_tol >= 0.0) {
            bad.push("sinkhorn_tol must be non-negative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(FineError::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matcher {
    pub config: MatcherConfig,
    pub blocks: Vec<AttentionBlock>,
    pub dustbin: String,
    pub regressor: Mlp,
    pub dim: usize,
}

impl Matcher {
    pub fn init(cfg: &MatcherConfig, dim: usize, store: &mut ParamStore, rng: &mut impl rand::Rng) -> Self {
        let blocks = (0..cfg.blocks)
            .map(|l| AttentionBlock::init(store, &format!("match.b{l}"), dim, cfg.heads, rng))
            .collect();
        let dustbin = "match.dustbin".to_string();
        store.insert(&dustbin, Tensor::scalar(cfg.dustbin_init));
        let h = cfg.regressor_hidden;
        let regressor = Mlp::init(store, "match.reg", &[dim, h, h, 2], rng);
        Self {
            config: cfg.clone(),
            blocks,
            dustbin,
            regressor,
            dim,
        }
    }

    pub fn scale(&self) -> f64 {
        self.config.scale.unwrap_or(1.0 / (self.dim as f64).sqrt())
    }

    /// Scaled similarities `[N_h, N_p]` with padding columns pinned to
    /// [`PAD_SCORE`].
    pub fn scores(&self, tape: &mut Tape, hints: Var, insts: Var, keep: &[bool]) -> Result<Var, NumericsError> {
        let pt = tape.transpose(insts);
        let s = tape.matmul(hints, pt)?;
        let s = tape.scale(s, self.scale());
        if keep.iter().all(|&k| k) {
            return Ok(s);
        }
        let m = tape.value(s).rows();
        let mask: Vec<f64> = (0..m).flat_map(|_| keep.iter().map(|&k| if k { 1.0 } else { 0.0 })).collect();
        let fill: Vec<f64> = (0..m).flat_map(|_| keep.iter().map(|&k| if k { 0.0 } else { PAD_SCORE })).collect();
        let n = keep.len();
        let mask = tape.constant(Tensor::matrix(m, n, mask)?);
        let fill = tape.constant(Tensor::matrix(m, n, fill)?);
        let s = tape.mul(s, mask)?;
        tape.add(s, fill)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfigFine {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfigFine {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 3e-4,
            epochs: 16,
            seed: 0,
        }
    }
}

impl TrainConfigFine {
    pub fn validate(&self) -> Result<(), FineError> {
        if self.batch_size == 0 {
            return Err(FineError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FineError::Config("lr must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// Output of one forward pass on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FineForward {
    pub log_p: Var,
    /// `[N_h, 2]` translations in cell-normalized units.
    pub translations: Var,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinePrediction {
    pub assignment: AssignmentMatrix,
    pub matches: Vec<Match>,
    /// Per hint, cell-normalized.
    pub translations: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct FineModel {
    pub encoders: Encoders,
    pub matcher: Matcher,
    pub params: ParamStore,
    pub vocab: Vocabulary,
}

impl FineModel {
    pub fn init(enc: &EncoderConfig, cfg: &MatcherConfig, vocab: Vocabulary, seed: u64) -> Result<Self, FineError> {
        cfg.validate(enc.dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoders = Encoders::init(enc, vocab.len(), "", &mut params, &mut rng);
        let matcher = Matcher::init(cfg, enc.dim, &mut params, &mut rng);
        Ok(Self {
            encoders,
            matcher,
            params,
            vocab,
        })
    }

    /// Rebuilds the layout and checks `params` against it.
    pub fn from_params(
        enc: &EncoderConfig,
        cfg: &MatcherConfig,
        vocab: Vocabulary,
        params: ParamStore,
    ) -> Result<Self, FineError> {
        let fresh = Self::init(enc, cfg, vocab, 0)?;
        params.validate_against(&fresh.params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        hints: &[&str],
        cell: &[CellInstance],
    ) -> Result<FineForward, FineError> {
        if hints.is_empty() || cell.is_empty() {
            return Err(FineError::Shape("need at least one hint and one instance".into()));
        }
        let keep: Vec<bool> = cell.iter().map(|i| !i.is_padding()).collect();
        if !keep.contains(&true) {
            return Err(FineError::Shape("cell has no real instances".into()));
        }
        let insts: Vec<&CellInstance> = cell.iter().collect();
        let p = self.encoders.encode_instances(tape, params, &insts)?;
        let h = self.encoders.encode_hints(tape, params, &self.vocab, hints)?;
        let (h, p) = attend(tape, params, &self.matcher.blocks, h, p, &keep)?;
        let s = self.matcher.scores(tape, h, p, &keep)?;
        let z = tape.param(params, &self.matcher.dustbin)?;
        let cfg = &self.matcher.config;
        let (log_p, iterations) = sinkhorn_tape(tape, s, z, cfg.sinkhorn_iters, cfg.sinkhorn_tol)?;
        let translations = self.matcher.regressor.forward(tape, params, h)?;
        Ok(FineForward {
            log_p,
            translations,
            iterations,
        })
    }

    pub fn predict(&self, hints: &[&str], cell: &Cell) -> Result<FinePrediction, FineError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, hints, &cell.instances)?;
        let assignment = AssignmentMatrix::from_log(tape.value(out.log_p), out.iterations);
        let matches = extract_matches(&assignment, self.matcher.config.threshold);
        let translations = tape
            .value(out.translations)
            .to_rows()
            .into_iter()
            .map(|r| [r[0], r[1]])
            .collect();
        Ok(FinePrediction {
            assignment,
            matches,
            translations,
        })
    }

    pub fn localize(&self, desc: &QueryDescription, cell: &Cell) -> Result<(FinePrediction, RefinedEstimate), FineError> {
        let hints: Vec<&str> = desc.hints.iter().map(|h| h.text.as_str()).collect();
        let pred = self.predict(&hints, cell)?;
        let est = estimate_position(&pred.matches, &pred.translations, cell);
        Ok((pred, est))
    }

    /// Sum of matching and translation terms for one pair.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        desc: &QueryDescription,
        cell: &Cell,
        gt: &GroundTruthMatch,
    ) -> Result<FineLoss, FineError> {
        let hints: Vec<&str> = desc.hints.iter().map(|h| h.text.as_str()).collect();
        let out = self.forward(tape, params, &hints, &cell.instances)?;
        Ok(fine_loss(tape, out.log_p, gt, cell.num_real, out.translations)?)
    }
}

/// A description paired with its GT cell and GT matches.
#[derive(Clone, Debug)]
pub struct FineSample<'a> {
    pub desc: &'a QueryDescription,
    pub cell: usize,
    pub gt: GroundTruthMatch,
}

pub fn ground_samples<'a>(
    descs: &'a [QueryDescription],
    db: &CellDatabase,
    classes: &ClassRegistry,
) -> (Vec<FineSample<'a>>, usize) {
    let mut out = Vec::with_capacity(descs.len());
    let mut dropped = 0;
    for d in descs {
        match ground_truth_cell(d.position, db) {
            Ok(c) => out.push(FineSample {
                desc: d,
                cell: c,
                gt: gt_matches(d, db.cell(c), classes, db.config.match_angle),
            }),
            Err(_) => dropped += 1,
        }
    }
    (out, dropped)
}

pub fn matching_counts(model: &FineModel, samples: &[FineSample<'_>], db: &CellDatabase) -> Result<MatchCounts, FineError> {
    let mut counts = MatchCounts::default();
    for s in samples {
        let (pred, _) = model.localize(s.desc, db.cell(s.cell))?;
        counts.add(&pred.matches, &s.gt);
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTrainReport {
    pub epochs: Vec<FineEpoch>,
    pub excluded_train: usize,
}

impl FineTrainReport {
    /// CSV with header `epoch,loss,precision,recall`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,precision,recall")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{}", e.epoch, e.loss, e.precision, e.recall)?;
        }
        Ok(())
    }
}

/// Joint training of matching and regression on GT cells. Matching
/// precision and recall are measured on `val` (the training set when `val`
/// is empty) after every epoch; the last epoch's parameters are kept.
pub fn train_fine(
    model: &mut FineModel,
    train: &[QueryDescription],
    val: &[QueryDescription],
    db: &CellDatabase,
    classes: &ClassRegistry,
    cfg: &TrainConfigFine,
) -> Result<FineTrainReport, FineError> {
    cfg.validate()?;
    let (samples, dropped) = ground_samples(train, db, classes);
    if dropped > 0 {
        log::warn!("fine training: excluded {dropped} ungroundable descriptions");
    }
    if samples.is_empty() {
        return Err(FineError::NoTrainingData);
    }
    let val_samples = if val.is_empty() {
        samples.clone()
    } else {
        ground_samples(val, db, classes).0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut report = FineTrainReport {
        excluded_train: dropped,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let s = &samples[k];
                let l = model.sample_loss(&mut tape, &model.params, s.desc, db.cell(s.cell), &s.gt)?;
                total += tape.value(l.total).item();
                losses.push(l.total);
            }
            let stacked = tape.concat_cols(&losses)?;
            let loss = tape.mean(stacked);
            let grads = tape.backward(loss)?;
            let g = tape.param_grads(&grads, &model.params);
            adam.step(&mut model.params, &g, cfg.lr)?;
        }
        let counts = matching_counts(model, &val_samples, db)?;
        let loss = total / samples.len() as f64;
        log::info!(
            "fine epoch {epoch}: loss {loss:.4}, precision {:.3}, recall {:.3}",
            counts.precision(),
            counts.recall()
        );
        report.epochs.push(FineEpoch {
            epoch,
            loss,
            precision: counts.precision(),
            recall: counts.recall(),
        });
    }
    Ok(report)
}

/// Everything computed for one (query, cell) pair, for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineDebug {
    pub query: usize,
    pub cell: usize,
    pub assignment: Vec<Vec<f64>>,
    pub matches: Vec<Match>,
    pub translations: Vec<[f64; 2]>,
    pub estimates: Vec<[f64; 2]>,
    pub position: [f64; 2],
    pub fallback: bool,
}

impl FineDebug {
    pub fn new(query: usize, cell: usize, pred: &FinePrediction, est: &RefinedEstimate) -> Self {
        Self {
            query,
            cell,
            assignment: pred.assignment.probs.clone(),
            matches: est.matches.clone(),
            translations: est.translations.clone(),
            estimates: est.estimates.clone(),
            position: est.position,
            fallback: est.fallback,
        }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<(), FineError> {
        serde_json::to_writer_pretty(w, self).map_err(|e| FineError::Io(e.into()))
    }
}
