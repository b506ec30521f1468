use serde::{Deserialize, Serialize};

use super::AssignmentMatrix;
use crate::celldb::{Cell, GroundTruthMatch};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub hint: usize,
    pub instance: usize,
    pub confidence: f64,
}

/// Pairs whose entry is at least `threshold` and is the maximum of both its
/// row and its column over the non-dustbin block (first index on ties).
pub fn extract_matches(p: &AssignmentMatrix, threshold: f64) -> Vec<Match> {
    let m = p.num_hints();
    let n = p.num_instances();
    let argmax = |vals: &mut dyn Iterator<Item = f64>| -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, v) in vals.enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        best.1
    };
    let col_best: Vec<usize> = (0..n)
        .map(|i| argmax(&mut (0..m).map(|j| p.get(j, i))))
        .collect();
    let mut out = Vec::new();
    for j in 0..m {
        let i = argmax(&mut (0..n).map(|i| p.get(j, i)));
        let c = p.get(j, i);
        if col_best[i] == j && c >= threshold {
            out.push(Match {
                hint: j,
                instance: i,
                confidence: c,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedEstimate {
    pub matches: Vec<Match>,
    /// Per match, meters.
    pub translations: Vec<[f64; 2]>,
    /// Per match, `p̄_i + t_i` in world meters.
    pub estimates: Vec<[f64; 2]>,
    pub position: [f64; 2],
    /// No match survived, `position` is the cell center.
    pub fallback: bool,
}

/// `translations[j]` is hint `j`'s offset in cell-normalized units.
pub fn estimate_position(matches: &[Match], translations: &[[f64; 2]], cell: &Cell) -> RefinedEstimate {
    if matches.is_empty() {
        return RefinedEstimate {
            matches: Vec::new(),
            translations: Vec::new(),
            estimates: Vec::new(),
            position: cell.center(),
            fallback: true,
        };
    }
    let w = cell.size;
    let mut ts = Vec::with_capacity(matches.len());
    let mut est = Vec::with_capacity(matches.len());
    for mt in matches {
        let t = translations[mt.hint];
        let t = [t[0] * w, t[1] * w];
        let c = cell.instances[mt.instance].center_world;
        ts.push(t);
        est.push([c[0] + t[0], c[1] + t[1]]);
    }
    let k = est.len() as f64;
    let position = [
        est.iter().map(|e| e[0]).sum::<f64>() / k,
        est.iter().map(|e| e[1]).sum::<f64>() / k,
    ];
    RefinedEstimate {
        matches: matches.to_vec(),
        translations: ts,
        estimates: est,
        position,
        fallback: false,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FineLoss {
    pub total: Var,
    pub matching: Var,
    pub translation: Var,
}

/// Matching term: mean of `−log P̄` over GT pairs, dustbin entries of
/// unmatched hints, and dustbin entries of unmatched real instances.
/// Translation term: mean squared Euclidean error over GT-matched hints.
pub fn fine_loss(
    tape: &mut Tape,
    log_p: Var,
    gt: &GroundTruthMatch,
    num_real: usize,
    t_pred: Var,
) -> Result<FineLoss, NumericsError> {
    let rows = tape.value(log_p).rows();
    let cols = tape.value(log_p).cols();
    let (m, n) = (rows - 1, cols - 1);
    let mut idx = Vec::new();
    for (j, i) in gt.hint_to_instance.iter().enumerate().take(m) {
        match i {
            Some(i) => idx.push(j * cols + i),
            None => idx.push(j * cols + n),
        }
    }
    let matched = gt.instance_matched(n);
    for (i, &used) in matched.iter().enumerate().take(num_real.min(n)) {
        if !used {
            idx.push(m * cols + i);
        }
    }
    let picked = tape.gather_elems(log_p, &idx)?;
    let mean = tape.mean(picked);
    let matching = tape.scale(mean, -1.0);

    let pairs: Vec<(usize, [f64; 2])> = gt
        .t_gt
        .iter()
        .enumerate()
        .filter_map(|(j, t)| t.map(|t| (j, t)))
        .collect();
    let translation = if pairs.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().flat_map(|p| p.1).collect();
        let pred = tape.gather_rows(t_pred, &rows)?;
        let target = tape.constant(Tensor::matrix(rows.len(), 2, target)?);
        let d = tape.sub(pred, target)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        tape.scale(s, 1.0 / rows.len() as f64)
    };
    let total = tape.add(matching, translation)?;
    Ok(FineLoss {
        total,
        matching,
        translation,
    })
}

/// Matching counts for precision (`correct / predicted`) and recall
/// (`correct / gt`), summed over queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub predicted: usize,
    pub gt: usize,
    pub correct: usize,
}

impl MatchCounts {
    pub fn add(&mut self, predicted: &[Match], gt: &GroundTruthMatch) {
        self.predicted += predicted.len();
        self.gt += gt.num_matched();
        self.correct += predicted
            .iter()
            .filter(|m| gt.hint_to_instance.get(m.hint).copied().flatten() == Some(m.instance))
            .count();
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            0.0
        } else {
            self.correct as f64 / self.gt as f64
        }
    }
}
