use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CoarseError, CoarseModel};
use crate::celldb::{Cell, CellDatabase};
use crate::encoders::EncoderConfig;
use crate::numerics::Tensor;

pub const INDEX_FORMAT: &str = "textloc-index";
pub const INDEX_VERSION: u32 = 1;

/// Embeddings of every database cell, row `r` belonging to `ids[r]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub config: EncoderConfig,
    pub ids: Vec<usize>,
    pub embeddings: Tensor,
}

impl RetrievalIndex {
    pub fn build(model: &CoarseModel, db: &CellDatabase) -> Result<Self, CoarseError> {
        let cells: Vec<&Cell> = db.cells.iter().collect();
        let embeddings = model.embed_cells(&cells)?;
        Self::new(
            model.encoders.config.clone(),
            db.cells.iter().map(|c| c.id).collect(),
            embeddings,
        )
    }

    pub fn new(
        config: EncoderConfig,
        ids: Vec<usize>,
        embeddings: Tensor,
    ) -> Result<Self, CoarseError> {
        let idx = Self {
            config,
            ids,
            embeddings,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn validate(&self) -> Result<(), CoarseError> {
        if !self.embeddings.is_matrix() || self.embeddings.rows() != self.ids.len() {
            return Err(CoarseError::Format(format!(
                "{} ids but embedding shape {:?}",
                self.ids.len(),
                self.embeddings.shape()
            )));
        }
        if !self.embeddings.is_finite() {
            return Err(CoarseError::Format("non-finite embedding".into()));
        }
        Ok(())
    }

    /// Checks the index against the database it is used with.
    pub fn check_database(&self, db: &CellDatabase) -> Result<(), CoarseError> {
        if self.ids.len() != db.len() || self.ids.iter().zip(&db.cells).any(|(a, c)| *a != c.id) {
            return Err(CoarseError::Format(format!(
                "index covers {} cells, database has {}",
                self.ids.len(),
                db.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub ids: Vec<usize>,
    /// Set when `k` exceeded the index size and every id was returned.
    pub truncated: bool,
}

/// Exhaustive search: the `k` ids closest to `query` in Euclidean distance,
/// ties broken by lower id.
pub fn retrieve_topk(query: &[f64], index: &RetrievalIndex, k: usize) -> Result<TopK, CoarseError> {
    if k == 0 {
        return Err(CoarseError::ZeroK);
    }
    if query.len() != index.dim() {
        return Err(CoarseError::QueryDim {
            expected: index.dim(),
            found: query.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = index
        .ids
        .iter()
        .enumerate()
        .map(|(r, &id)| {
            let d: f64 = index
                .embeddings
                .row(r)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d, id)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let truncated = k > scored.len();
    if truncated {
        log::warn!("top-{k} requested from an index of {} cells", scored.len());
    }
    scored.truncate(k);
    Ok(TopK {
        ids: scored.into_iter().map(|s| s.1).collect(),
        truncated,
    })
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    index: RetrievalIndex,
}

pub fn write_index<W: Write>(index: &RetrievalIndex, w: W) -> Result<(), CoarseError> {
    let file = IndexFile {
        format: INDEX_FORMAT.into(),
        version: INDEX_VERSION,
        index: index.clone(),
    };
    serde_json::to_writer(w, &file).map_err(|e| CoarseError::Format(e.to_string()))
}

pub fn read_index<R: Read>(r: R) -> Result<RetrievalIndex, CoarseError> {
    let file: IndexFile =
        serde_json::from_reader(r).map_err(|e| CoarseError::Format(e.to_string()))?;
    if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
        return Err(CoarseError::Format(format!(
            "expected {INDEX_FORMAT} v{INDEX_VERSION}, found {} v{}",
            file.format, file.version
        )));
    }
    file.index.validate()?;
    Ok(file.index)
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<(), CoarseError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(index, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex, CoarseError> {
    read_index(BufReader::new(File::open(path)?))
}
