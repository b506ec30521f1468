use serde::{Deserialize, Serialize};

use super::{min_cost_assignment, Cell, CellDatabase, CellError};
use crate::querygen::QueryDescription;
use crate::scene::{dist2, ClassRegistry};

/// Closest-center cell among those containing `position`; ties go to the
/// lowest id.
pub fn ground_truth_cell(position: [f64; 2], db: &CellDatabase) -> Result<usize, CellError> {
    let w = db.config.cell_size;
    let span = |anchors: &[f64], v: f64| -> Vec<usize> {
        anchors
            .iter()
            .enumerate()
            .filter(|(_, &a)| a <= v && v <= a + w)
            .map(|(i, _)| i)
            .collect()
    };
    let xs = span(&db.anchors_x, position[0]);
    let ys = span(&db.anchors_y, position[1]);
    let mut best: Option<(f64, usize)> = None;
    for &iy in &ys {
        for &ix in &xs {
            if let Some(id) = db.grid[iy * db.anchors_x.len() + ix] {
                let d = dist2(db.cells[id].center(), position);
                if best.map_or(true, |(bd, bid)| d < bd || (d == bd && id < bid)) {
                    best = Some((d, id));
                }
            }
        }
    }
    best.map(|b| b.1).ok_or(CellError::NoContainingCell(position))
}

/// Linear scan over every cell; reference for [`ground_truth_cell`].
pub fn ground_truth_cell_brute(position: [f64; 2], db: &CellDatabase) -> Result<usize, CellError> {
    let mut best: Option<(f64, usize)> = None;
    for c in &db.cells {
        if c.rect().contains(position) {
            let d = dist2(c.center(), position);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, c.id));
            }
        }
    }
    best.map(|b| b.1).ok_or(CellError::NoContainingCell(position))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMatch {
    /// In-cell instance index per hint.
    pub hint_to_instance: Vec<Option<usize>>,
    /// `(position - center) / W` for matched hints.
    pub t_gt: Vec<Option<[f64; 2]>>,
}

impl GroundTruthMatch {
    pub fn num_matched(&self) -> usize {
        self.hint_to_instance.iter().flatten().count()
    }

    /// Matched `(hint, instance)` pairs in hint order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.hint_to_instance
            .iter()
            .enumerate()
            .filter_map(|(h, i)| i.map(|i| (h, i)))
            .collect()
    }

    pub fn instance_matched(&self, n: usize) -> Vec<bool> {
        let mut out = vec![false; n];
        for i in self.hint_to_instance.iter().flatten() {
            out[*i] = true;
        }
        out
    }
}

/// Angle between two 2D vectors in degrees; zero vectors count as aligned.
pub(crate) fn vector_angle(a: [f64; 2], b: [f64; 2]) -> f64 {
    if a[0].hypot(a[1]) < 1e-12 || b[0].hypot(b[1]) < 1e-12 {
        return 0.0;
    }
    let cross = a[0] * b[1] - a[1] * b[0];
    let dot = a[0] * b[0] + a[1] * b[1];
    cross.atan2(dot).abs().to_degrees()
}

const MATCH_BONUS: f64 = 1e3;

/// Grounds each hint to at most one real instance of `cell`.
///
/// Labeled targets match the in-cell copy with the same source id. Targets
/// that came from stuff clustering match in-cell clusters of the same class
/// whose direction from the query position is within `max_angle` degrees of
/// the target's; among those the assignment is a maximum matching with the
/// smallest total angle.
pub fn gt_matches(
    desc: &QueryDescription,
    cell: &Cell,
    classes: &ClassRegistry,
    max_angle: f64,
) -> GroundTruthMatch {
    let n_h = desc.hints.len();
    let mut hint_to_instance = vec![None; n_h];
    let real = cell.real();
    let p = desc.position;

    let mut stuff_hints = Vec::new();
    for (h, hint) in desc.hints.iter().enumerate() {
        if hint.target.is_clustered() {
            stuff_hints.push(h);
        } else {
            hint_to_instance[h] = real.iter().position(|i| i.source == Some(hint.target));
        }
    }
    let stuff_insts: Vec<usize> = (0..real.len())
        .filter(|&i| real[i].source.is_some_and(|s| s.is_clustered()))
        .collect();
    if !stuff_hints.is_empty() && !stuff_insts.is_empty() {
        let cost: Vec<Vec<f64>> = stuff_hints
            .iter()
            .map(|&h| {
                let hint = &desc.hints[h];
                let dh = [-hint.offset[0], -hint.offset[1]];
                stuff_insts
                    .iter()
                    .map(|&i| {
                        let inst = &real[i];
                        let same = inst.class.is_some_and(|c| classes.name(c) == hint.class);
                        let di = [inst.center_world[0] - p[0], inst.center_world[1] - p[1]];
                        let a = vector_angle(dh, di);
                        if same && a < max_angle {
                            a.to_radians() - MATCH_BONUS
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        for (r, c) in min_cost_assignment(&cost).into_iter().enumerate() {
            if let Some(c) = c {
                if cost[r][c] < 0.0 {
                    hint_to_instance[stuff_hints[r]] = Some(stuff_insts[c]);
                }
            }
        }
    }
    let w = cell.size;
    let t_gt = hint_to_instance
        .iter()
        .map(|m| {
            m.map(|i| {
                let c = real[i].center_world;
                [(p[0] - c[0]) / w, (p[1] - c[1]) / w]
            })
        })
        .collect();
    GroundTruthMatch {
        hint_to_instance,
        t_gt,
    }
}
