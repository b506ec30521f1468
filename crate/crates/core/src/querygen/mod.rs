//! Query positions sampled along the trajectory and their template
//! descriptions.

mod io;
mod select;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use select::{select_instances, Strategy};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{dist2, resample_polyline, ClusterConfig, Instance, InstanceId, Palette, Rect, Scene};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("only {have} instances within the description radius, {need} required")]
    InsufficientInstances { have: usize, need: usize },
    #[error("invalid query config: {0}")]
    Config(String),
    #[error("dataset line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Clustered stuff seen from a query position gets ids in this scope range,
/// disjoint from cell scopes.
pub const QUERY_SCOPE: u64 = 1 << 37;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    /// Distance between anchors along the trajectory.
    pub spacing: f64,
    pub positions_per_location: usize,
    /// Maximum anchor offset; `None` means half the cell size.
    pub max_jitter: Option<f64>,
    pub cell_size: f64,
    pub radius: f64,
    pub num_hints: usize,
    pub strategies: Vec<Strategy>,
    pub cluster: ClusterConfig,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            spacing: 10.0,
            positions_per_location: 4,
            max_jitter: None,
            cell_size: 30.0,
            radius: 15.0,
            num_hints: 6,
            strategies: vec![
                Strategy::Closest,
                Strategy::DirectionCoverage,
                Strategy::ClassDiversity,
            ],
            cluster: ClusterConfig::default(),
        }
    }
}

impl QueryConfig {
    pub fn jitter(&self) -> f64 {
        self.max_jitter.unwrap_or(self.cell_size / 2.0)
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        let bad = |m: &str| Err(QueryError::Config(m.to_string()));
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if self.num_hints == 0 {
            return bad("num_hints must be at least 1");
        }
        if !(self.spacing > 0.0) {
            return bad("spacing must be positive");
        }
        if self.jitter() < 0.0 {
            return bad("max_jitter must be non-negative");
        }
        if self.strategies.is_empty() {
            return bad("no selection strategy enabled");
        }
        Ok(())
    }
}

/// Eight compass directions counterclockwise from east.
pub const COMPASS: [&str; 8] = [
    "east",
    "northeast",
    "north",
    "northwest",
    "west",
    "southwest",
    "south",
    "southeast",
];
pub const ON_TOP: &str = "on top of";

/// Direction word for a position relative to a target (`offset = position -
/// center`). Sectors are 45 degrees wide and centered on the compass
/// directions; an offset exactly on a boundary belongs to the
/// counterclockwise sector.
pub fn direction_word(offset: [f64; 2]) -> &'static str {
    if offset[0].hypot(offset[1]) < 1e-9 {
        return ON_TOP;
    }
    let deg = offset[1].atan2(offset[0]).to_degrees();
    let sector = ((deg + 22.5) / 45.0).floor().rem_euclid(8.0) as usize;
    COMPASS[sector % 8]
}

fn compass_index(word: &str) -> Option<usize> {
    COMPASS.iter().position(|&w| w == word)
}

/// Direction word after mirroring the scene along x (`flip_x`, east and west
/// swap) and/or y (north and south swap).
pub fn mirror_direction(word: &str, flip_x: bool, flip_y: bool) -> String {
    let Some(i) = compass_index(word) else {
        return word.to_string();
    };
    // Mirror of sector i across the y axis is 4 - i, across the x axis -i.
    let mut j = i as i64;
    if flip_x {
        j = 4 - j;
    }
    if flip_y {
        j = -j;
    }
    COMPASS[j.rem_euclid(8) as usize].to_string()
}

/// Direction word after rotating the scene by `steps` × 45 degrees.
pub fn rotate_direction(word: &str, steps: i64) -> String {
    match compass_index(word) {
        Some(i) => COMPASS[(i as i64 + steps).rem_euclid(8) as usize].to_string(),
        None => word.to_string(),
    }
}

pub fn render_hint(direction: &str, color: &str, class: &str) -> String {
    if direction == ON_TOP {
        format!("The pose is on top of a {color} {class}.")
    } else {
        format!("The pose is {direction} of a {color} {class}.")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hint {
    pub text: String,
    pub target: InstanceId,
    pub class: String,
    pub direction: String,
    pub color: String,
    /// Position minus target center, meters.
    pub offset: [f64; 2],
}

impl Hint {
    pub fn rerender(&self) -> String {
        render_hint(&self.direction, &self.color, &self.class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDescription {
    pub id: usize,
    pub scene: String,
    pub position: [f64; 2],
    pub strategy: Strategy,
    pub hints: Vec<Hint>,
}

pub fn describe(position: [f64; 2], instance: &Instance, scene: &Scene, palette: &Palette) -> Hint {
    let offset = [
        position[0] - instance.center[0],
        position[1] - instance.center[1],
    ];
    let direction = direction_word(offset);
    let color = palette.nearest(instance.mean_color());
    let class = scene.classes.name(instance.class);
    Hint {
        text: render_hint(direction, color, class),
        target: instance.id,
        class: class.to_string(),
        direction: direction.to_string(),
        color: color.to_string(),
        offset,
    }
}

/// Instances a description at `position` may refer to: labeled instances
/// plus stuff clustered in a cell-sized window centered on the position,
/// restricted to centers within the radius.
pub fn candidates(scene: &Scene, position: [f64; 2], cfg: &QueryConfig, scope: u64) -> Vec<Instance> {
    let mut out: Vec<Instance> = scene
        .labeled_within(position, cfg.radius)
        .cloned()
        .collect();
    let window = Rect::centered(position, cfg.cell_size);
    out.extend(
        scene
            .cluster_stuff_in(&window, &cfg.cluster, scope)
            .into_iter()
            .filter(|i| dist2(i.center_2d(), position) <= cfg.radius),
    );
    out
}

/// Anchors every `spacing` meters along the trajectory, each jittered
/// `positions_per_location` times uniformly within a disc of radius
/// `jitter()`. Positions outside the scene or with fewer than `num_hints`
/// candidate instances are dropped.
pub fn sample_positions(scene: &Scene, cfg: &QueryConfig, seed: u64) -> Vec<[f64; 2]> {
    sample_with_candidates(scene, cfg, seed)
        .into_iter()
        .map(|(p, _)| p)
        .collect()
}

fn sample_with_candidates(scene: &Scene, cfg: &QueryConfig, seed: u64) -> Vec<([f64; 2], Vec<Instance>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = cfg.jitter();
    let mut out = Vec::new();
    for anchor in resample_polyline(&scene.trajectory, cfg.spacing) {
        for _ in 0..cfg.positions_per_location {
            let r = jitter * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let p = [anchor[0] + r * a.cos(), anchor[1] + r * a.sin()];
            if !scene.extent.contains(p) {
                continue;
            }
            let scope = QUERY_SCOPE | out.len() as u64;
            let cands = candidates(scene, p, cfg, scope);
            if cands.len() >= cfg.num_hints {
                out.push((p, cands));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub positions: usize,
    pub descriptions: usize,
    pub unique_descriptions: usize,
}

impl DatasetStats {
    pub fn unique_ratio(&self) -> f64 {
        if self.descriptions == 0 {
            0.0
        } else {
            self.unique_descriptions as f64 / self.descriptions as f64
        }
    }
}

/// Up to one description per enabled strategy at every sampled position;
/// strategies that pick the same instance set as an earlier one are skipped.
pub fn generate_dataset(
    scene: &Scene,
    cfg: &QueryConfig,
    seed: u64,
) -> Result<(Vec<QueryDescription>, DatasetStats), QueryError> {
    cfg.validate()?;
    let palette = Palette::default();
    let sampled = sample_with_candidates(scene, cfg, seed);
    let mut out = Vec::new();
    for (position, cands) in &sampled {
        let mut seen: Vec<BTreeSet<InstanceId>> = Vec::new();
        for &strategy in &cfg.strategies {
            let picked = select_instances(*position, cands, strategy, cfg.num_hints)?;
            let key: BTreeSet<InstanceId> = picked.iter().map(|&i| cands[i].id).collect();
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let hints = picked
                .iter()
                .map(|&i| describe(*position, &cands[i], scene, &palette))
                .collect();
            out.push(QueryDescription {
                id: out.len(),
                scene: scene.id.clone(),
                position: *position,
                strategy,
                hints,
            });
        }
    }
    let unique: BTreeSet<Vec<String>> = out
        .iter()
        .map(|d| {
            let mut t: Vec<String> = d.hints.iter().map(|h| h.text.clone()).collect();
            t.sort();
            t
        })
        .collect();
    let stats = DatasetStats {
        positions: sampled.len(),
        descriptions: out.len(),
        unique_descriptions: unique.len(),
    };
    log::info!(
        "generated {} descriptions at {} positions ({} unique)",
        stats.descriptions,
        stats.positions,
        stats.unique_descriptions
    );
    Ok((out, stats))
}
