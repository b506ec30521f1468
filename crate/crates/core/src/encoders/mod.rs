//! Learnable descriptors in a shared `dim`-dimensional space: instances,
//! cells, hints and whole descriptions.

mod pretrain;
mod vocab;

pub use pretrain::{pretrain_points, PretrainConfig, PretrainReport};
pub use vocab::{Vocabulary, UNK};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::celldb::CellInstance;
use crate::numerics::{Mlp, NumericsError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("instance {0} has no points")]
    EmptyInstance(usize),
    #[error("instances must have equal point counts ({0} vs {1})")]
    RaggedPoints(usize, usize),
    #[error("cells must have equal instance counts ({0} vs {1})")]
    RaggedCells(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Shared embedding size.
    pub dim: usize,
    pub point_hidden: usize,
    pub branch_hidden: usize,
    pub token_dim: usize,
    pub hint_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            point_hidden: 64,
            branch_hidden: 64,
            token_dim: 32,
            hint_hidden: 64,
        }
    }
}

/// Layout of every encoder network. Parameters live in a [`ParamStore`]
/// under `<prefix>inst.*`, `<prefix>cell.*`, `<prefix>hint.*` and
/// `<prefix>desc.*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub prefix: String,
    pub point: Mlp,
    pub color: Mlp,
    pub pos: Mlp,
    pub proj: Mlp,
    pub edge: Mlp,
    pub cell_out: Mlp,
    pub token_table: String,
    pub vocab_size: usize,
    pub hint: Mlp,
    pub desc_out: Mlp,
}

impl Encoders {
    pub fn init(
        cfg: &EncoderConfig,
        vocab_size: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.dim;
        let b = cfg.branch_hidden;
        let p = |s: &str| format!("{prefix}{s}");
        let point = Mlp::init(store, &p("inst.point"), &[6, cfg.point_hidden, d], rng);
        let color = Mlp::init(store, &p("inst.color"), &[3, b, b, d], rng);
        let pos = Mlp::init(store, &p("inst.pos"), &[3, b, b, d], rng);
        let proj = Mlp::init(store, &p("inst.proj"), &[3 * d, d, d, d], rng);
        let edge = Mlp::init(store, &p("cell.edge"), &[2 * d, d, d], rng);
        let cell_out = Mlp::init(store, &p("cell.out"), &[d, d], rng);
        let token_table = p("hint.embed");
        store.init_glorot(&token_table, vocab_size, cfg.token_dim, rng);
        let hint = Mlp::init(store, &p("hint.mlp"), &[cfg.token_dim, cfg.hint_hidden, d], rng);
        let desc_out = Mlp::init(store, &p("desc.out"), &[d, d], rng);
        Self {
            config: cfg.clone(),
            prefix: prefix.to_string(),
            point,
            color,
            pos,
            proj,
            edge,
            cell_out,
            token_table,
            vocab_size,
            hint,
            desc_out,
        }
    }

    pub fn validate(&self, store: &ParamStore) -> Result<(), NumericsError> {
        for m in [
            &self.point,
            &self.color,
            &self.pos,
            &self.proj,
            &self.edge,
            &self.cell_out,
            &self.hint,
            &self.desc_out,
        ] {
            m.validate(store)?;
        }
        let t = store
            .get(&self.token_table)
            .ok_or_else(|| NumericsError::MissingParam(self.token_table.clone()))?;
        let want = [self.vocab_size, self.config.token_dim];
        if t.shape() != want {
            return Err(NumericsError::ParamShape {
                name: self.token_table.clone(),
                expected: want.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Point branch only: per-point layers then max over each instance's
    /// points. Returns `[B, dim]`.
    pub fn point_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        insts: &[&CellInstance],
    ) -> Result<Var, EncoderError> {
        let n = check_points(insts)?;
        let mut data = Vec::with_capacity(insts.len() * n * 6);
        for inst in insts {
            for p in &inst.points {
                data.extend_from_slice(&[p.x, p.y, p.z, p.r, p.g, p.b]);
            }
        }
        let x = tape.constant(Tensor::matrix(insts.len() * n, 6, data)?);
        let h = self.point.forward(tape, store, x)?;
        Ok(tape.max_pool_groups(h, n)?)
    }

    /// Instance embeddings `[B, dim]`.
    pub fn encode_instances(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        insts: &[&CellInstance],
    ) -> Result<Var, EncoderError> {
        let sem = self.point_features(tape, store, insts)?;
        let rgb: Vec<f64> = insts.iter().flat_map(|i| i.mean_rgb()).collect();
        let ctr: Vec<f64> = insts.iter().flat_map(|i| i.center_norm()).collect();
        let rgb = tape.constant(Tensor::matrix(insts.len(), 3, rgb)?);
        let ctr = tape.constant(Tensor::matrix(insts.len(), 3, ctr)?);
        let col = self.color.forward(tape, store, rgb)?;
        let pos = self.pos.forward(tape, store, ctr)?;
        let fused = tape.concat_cols(&[sem, col, pos])?;
        Ok(self.proj.forward(tape, store, fused)?)
    }

    /// Edge convolution over the complete graph of each cell's instance
    /// embeddings. `feats` holds `cells × n` rows, cell by cell. Returns
    /// `[cells, dim]`.
    pub fn cell_from_instances(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feats: Var,
        n: usize,
    ) -> Result<Var, EncoderError> {
        let rows = tape.value(feats).rows();
        if n == 0 || rows % n != 0 {
            return Err(EncoderError::EmptyBatch);
        }
        let cells = rows / n;
        let mut ii = Vec::new();
        let mut jj = Vec::new();
        for c in 0..cells {
            let base = c * n;
            for i in 0..n {
                for j in 0..n {
                    if j != i || n == 1 {
                        ii.push(base + i);
                        jj.push(base + j);
                    }
                }
            }
        }
        let per_node = if n == 1 { 1 } else { n - 1 };
        let fi = tape.gather_rows(feats, &ii)?;
        let fj = tape.gather_rows(feats, &jj)?;
        let diff = tape.sub(fj, fi)?;
        let e = tape.concat_cols(&[fi, diff])?;
        let h = self.edge.forward(tape, store, e)?;
        let node = tape.max_pool_groups(h, per_node)?;
        let pooled = tape.max_pool_groups(node, n)?;
        Ok(self.cell_out.forward(tape, store, pooled)?)
    }

    /// Cell embeddings `[cells, dim]`; every cell must hold the same number
    /// of instances.
    pub fn encode_cells(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cells: &[&[CellInstance]],
    ) -> Result<Var, EncoderError> {
        let n = cells.first().ok_or(EncoderError::EmptyBatch)?.len();
        if let Some(c) = cells.iter().find(|c| c.len() != n) {
            return Err(EncoderError::RaggedCells(n, c.len()));
        }
        let all: Vec<&CellInstance> = cells.iter().flat_map(|c| c.iter()).collect();
        let f = self.encode_instances(tape, store, &all)?;
        self.cell_from_instances(tape, store, f, n)
    }

    /// Hint embeddings `[H, dim]` from token ids.
    pub fn encode_hint_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hints: &[Vec<usize>],
    ) -> Result<Var, EncoderError> {
        if hints.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let flat: Vec<usize> = hints.iter().flatten().copied().collect();
        let mut avg = Tensor::zeros(hints.len(), flat.len());
        let mut col = 0;
        for (h, ids) in hints.iter().enumerate() {
            for _ in ids {
                avg.set(h, col, 1.0 / ids.len() as f64);
                col += 1;
            }
        }
        let table = tape.param(store, &self.token_table)?;
        let tokens = tape.gather_rows(table, &flat)?;
        let avg = tape.constant(avg);
        let pooled = tape.matmul(avg, tokens)?;
        Ok(self.hint.forward(tape, store, pooled)?)
    }

    pub fn encode_hints(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocabulary,
        texts: &[&str],
    ) -> Result<Var, EncoderError> {
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| vocab.encode(t)).collect();
        self.encode_hint_tokens(tape, store, &ids)
    }

    /// Description embeddings `[B, dim]`: max over each description's hint
    /// embeddings, then a linear map. `hint_feats` holds the hints of all
    /// descriptions back to back; `counts[b]` hints belong to description b.
    pub fn description_from_hints(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hint_feats: Var,
        counts: &[usize],
    ) -> Result<Var, EncoderError> {
        let first = *counts.first().ok_or(EncoderError::EmptyBatch)?;
        let pooled = if counts.iter().all(|&c| c == first) {
            tape.max_pool_groups(hint_feats, first)?
        } else {
            let mut parts = Vec::with_capacity(counts.len());
            let mut start = 0;
            for &c in counts {
                let idx: Vec<usize> = (start..start + c).collect();
                let rows = tape.gather_rows(hint_feats, &idx)?;
                parts.push(tape.max_pool_groups(rows, c)?);
                start += c;
            }
            tape.concat_rows(&parts)?
        };
        Ok(self.desc_out.forward(tape, store, pooled)?)
    }

    pub fn encode_descriptions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocabulary,
        descs: &[Vec<&str>],
    ) -> Result<Var, EncoderError> {
        let texts: Vec<&str> = descs.iter().flatten().copied().collect();
        let counts: Vec<usize> = descs.iter().map(|d| d.len()).collect();
        if counts.contains(&0) {
            return Err(EncoderError::EmptyBatch);
        }
        let h = self.encode_hints(tape, store, vocab, &texts)?;
        self.description_from_hints(tape, store, h, &counts)
    }
}

fn check_points(insts: &[&CellInstance]) -> Result<usize, EncoderError> {
    let first = insts.first().ok_or(EncoderError::EmptyBatch)?;
    let n = first.points.len();
    for (i, inst) in insts.iter().enumerate() {
        if inst.points.is_empty() {
            return Err(EncoderError::EmptyInstance(i));
        }
        if inst.points.len() != n {
            return Err(EncoderError::RaggedPoints(n, inst.points.len()));
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests;
