use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::QueryError;
use crate::scene::{dist2, Instance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Closest,
    DirectionCoverage,
    ClassDiversity,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Closest => "closest",
            Strategy::DirectionCoverage => "direction-coverage",
            Strategy::ClassDiversity => "class-diversity",
        }
    }
}

/// Candidate indices ordered by center distance, then id.
fn by_distance(position: [f64; 2], cands: &[Instance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        dist2(cands[a].center_2d(), position)
            .total_cmp(&dist2(cands[b].center_2d(), position))
            .then(cands[a].id.cmp(&cands[b].id))
    });
    order
}

fn bearing(position: [f64; 2], inst: &Instance) -> f64 {
    (position[1] - inst.center[1]).atan2(position[0] - inst.center[0])
}

fn angle_between(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Picks `n` of `cands` (indices into the slice) for a description at
/// `position`.
///
/// * closest: the `n` nearest centers.
/// * direction coverage: start from the nearest, then repeatedly add the
///   instance whose direction toward the position has the largest minimum
///   angle to the directions already chosen.
/// * class diversity: repeatedly add the nearest instance of a class not yet
///   chosen; once every class is used, fall back to the nearest remaining.
///
/// Remaining ties go to the nearer instance, then the lower id.
pub fn select_instances(
    position: [f64; 2],
    cands: &[Instance],
    strategy: Strategy,
    n: usize,
) -> Result<Vec<usize>, QueryError> {
    if cands.len() < n {
        return Err(QueryError::InsufficientInstances {
            have: cands.len(),
            need: n,
        });
    }
    let order = by_distance(position, cands);
    let picked = match strategy {
        Strategy::Closest => order[..n].to_vec(),
        Strategy::DirectionCoverage => {
            let bearings: Vec<f64> = cands.iter().map(|c| bearing(position, c)).collect();
            let mut chosen = vec![order[0]];
            while chosen.len() < n {
                let mut best: Option<(f64, usize)> = None;
                for &c in &order {
                    if chosen.contains(&c) {
                        continue;
                    }
                    let score = chosen
                        .iter()
                        .map(|&s| angle_between(bearings[c], bearings[s]))
                        .fold(f64::INFINITY, f64::min);
                    // `order` is already sorted by distance, so strict
                    // improvement keeps the nearer candidate on ties.
                    if best.map_or(true, |(b, _)| score > b) {
                        best = Some((score, c));
                    }
                }
                chosen.push(best.expect("enough candidates").1);
            }
            chosen
        }
        Strategy::ClassDiversity => {
            let mut chosen = Vec::with_capacity(n);
            let mut classes = BTreeSet::new();
            for &c in &order {
                if chosen.len() == n {
                    break;
                }
                if classes.insert(cands[c].class) {
                    chosen.push(c);
                }
            }
            for &c in &order {
                if chosen.len() == n {
                    break;
                }
                if !chosen.contains(&c) {
                    chosen.push(c);
                }
            }
            chosen
        }
    };
    Ok(picked)
}
