//! The retrieval database: overlapping W×W cells over a scene with their
//! padded, cell-normalized instance sets, plus ground-truth grounding of
//! descriptions.

mod grounding;
mod hungarian;
mod io;
mod streets;

pub use grounding::{ground_truth_cell, ground_truth_cell_brute, gt_matches, GroundTruthMatch};
pub use hungarian::min_cost_assignment;
pub use io::{load_database, read_database, save_database, write_database, CELLS_FORMAT, CELLS_VERSION};
pub use streets::{Region, StreetMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ClassId, ClusterConfig, Instance, InstanceId, Point, Provenance, Rect, Scene};

#[derive(Debug, Error)]
pub enum CellError {
    #[error("scene extent {extent:?} is smaller than the cell size {cell_size}")]
    ExtentTooSmall { extent: [f64; 2], cell_size: f64 },
    #[error("invalid cell grid config: {0}")]
    Config(String),
    #[error("no cell contains position {0:?}")]
    NoContainingCell([f64; 2]),
    #[error("position {0:?} lies outside every street region")]
    NoStreet([f64; 2]),
    #[error("cell database file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellGridConfig {
    pub cell_size: f64,
    pub stride: f64,
    /// Fraction of an instance's points that must fall inside a cell.
    pub third_rule: f64,
    /// Absolute inside-point count that also qualifies, at LiDAR density;
    /// scaled by the scene's density factor.
    pub min_overlap_points: usize,
    pub num_padded: usize,
    pub min_instances: usize,
    /// Points stored per instance (subsampled or cyclically repeated).
    pub points_per_instance: usize,
    pub dummy_points: usize,
    pub cluster: ClusterConfig,
    /// Street districts per axis for the default partition.
    pub street_grid: [usize; 2],
    /// Angle limit for matching clustered stuff, degrees.
    pub match_angle: f64,
}

impl Default for CellGridConfig {
    fn default() -> Self {
        Self {
            cell_size: 30.0,
            stride: 10.0,
            third_rule: 1.0 / 3.0,
            min_overlap_points: 250,
            num_padded: 16,
            min_instances: 6,
            points_per_instance: 32,
            dummy_points: 10,
            cluster: ClusterConfig::default(),
            street_grid: [3, 3],
            match_angle: 45.0,
        }
    }
}

impl CellGridConfig {
    pub fn validate(&self) -> Result<(), CellError> {
        let bad = |m: &str| Err(CellError::Config(m.to_string()));
        if !(self.cell_size > 0.0) {
            return bad("cell_size must be positive");
        }
        if !(self.stride > 0.0 && self.stride <= self.cell_size) {
            return bad("stride must satisfy 0 < stride <= cell_size");
        }
        if self.num_padded == 0 {
            return bad("num_padded must be at least 1");
        }
        if self.points_per_instance == 0 || self.dummy_points == 0 {
            return bad("point counts must be positive");
        }
        Ok(())
    }
}

/// One instance as stored in a cell: points cropped to the cell, mapped to
/// the cell frame (`(p - origin) / W`, height `z / W`) and resampled to a
/// fixed count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellInstance {
    /// Source instance; `None` for padding.
    pub source: Option<InstanceId>,
    pub class: Option<ClassId>,
    pub provenance: Option<Provenance>,
    /// Number of the source's points inside the cell.
    pub inside_points: usize,
    /// World-frame center of the cropped instance.
    pub center_world: [f64; 3],
    #[serde(with = "point_rows")]
    pub points: Vec<Point>,
}

/// Points as compact `[x, y, z, r, g, b]` rows.
mod point_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::scene::Point;

    pub fn serialize<S: Serializer>(points: &[Point], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<[f64; 6]> = points.iter().map(|p| [p.x, p.y, p.z, p.r, p.g, p.b]).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point>, D::Error> {
        let rows: Vec<[f64; 6]> = Vec::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|r| Point {
                x: r[0],
                y: r[1],
                z: r[2],
                r: r[3],
                g: r[4],
                b: r[5],
            })
            .collect())
    }
}

impl CellInstance {
    pub fn is_padding(&self) -> bool {
        self.source.is_none()
    }

    /// Center in the normalized cell frame (mean of stored points).
    pub fn center_norm(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| sorted_mean(self.points.iter().map(|p| p.xyz()[k])))
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| sorted_mean(self.points.iter().map(|p| p.rgb()[k])))
    }
}

/// Mean summed in sorted order, so it does not depend on point order.
fn sorted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub origin: [f64; 2],
    pub size: f64,
    /// Exactly `num_padded` entries; the first `num_real` are real.
    pub instances: Vec<CellInstance>,
    pub num_real: usize,
    /// Street regions the cell overlaps.
    pub streets: Vec<String>,
}

impl Cell {
    pub fn center(&self) -> [f64; 2] {
        [self.origin[0] + self.size / 2.0, self.origin[1] + self.size / 2.0]
    }

    pub fn rect(&self) -> Rect {
        Rect::square(self.origin, self.size)
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.instances.len()).map(|i| i >= self.num_real).collect()
    }

    pub fn real(&self) -> &[CellInstance] {
        &self.instances[..self.num_real]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDatabase {
    pub scene: String,
    pub config: CellGridConfig,
    pub anchors_x: Vec<f64>,
    pub anchors_y: Vec<f64>,
    /// Cell id per anchor, row-major (`iy * anchors_x.len() + ix`); `None`
    /// for rejected anchors.
    pub grid: Vec<Option<usize>>,
    pub cells: Vec<Cell>,
    pub streets: StreetMap,
}

impl CellDatabase {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, id: usize) -> &Cell {
        &self.cells[id]
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors_x.len() * self.anchors_y.len()
    }
}

/// Anchor coordinates along one axis: `min + k·S` while the window fits,
/// plus one flush with the far edge if the last regular anchor falls short.
pub fn axis_anchors(min: f64, max: f64, size: f64, stride: f64) -> Vec<f64> {
    let span = max - min - size;
    if span < -1e-9 {
        return Vec::new();
    }
    let span = span.max(0.0);
    let steps = (span / stride + 1e-9).floor() as usize;
    let mut out: Vec<f64> = (0..=steps).map(|k| min + k as f64 * stride).collect();
    let last = *out.last().unwrap();
    if max - size - last > 1e-9 {
        out.push(max - size);
    }
    out
}

/// One-third rule or absolute overlap count.
pub fn assign_in_cell(inside: usize, total: usize, third_rule: f64, min_overlap: usize) -> bool {
    total > 0 && (inside as f64 / total as f64 >= third_rule || inside >= min_overlap)
}

fn resample_points(points: &[Point], n: usize) -> Vec<Point> {
    let m = points.len();
    if m >= n {
        (0..n).map(|i| points[i * m / n]).collect()
    } else {
        (0..n).map(|i| points[i % m]).collect()
    }
}

fn normalize(p: &Point, origin: [f64; 2], size: f64) -> Point {
    Point {
        x: (p.x - origin[0]) / size,
        y: (p.y - origin[1]) / size,
        z: p.z / size,
        ..*p
    }
}

fn dummy_instance(cfg: &CellGridConfig, rng: &mut ChaCha8Rng) -> CellInstance {
    let pts: Vec<Point> = (0..cfg.dummy_points)
        .map(|_| Point {
            x: rng.gen_range(0.0..1e-3),
            y: rng.gen_range(0.0..1e-3),
            z: rng.gen_range(0.0..1e-3),
            r: 0.0,
            g: 0.0,
            b: 0.0,
        })
        .collect();
    CellInstance {
        source: None,
        class: None,
        provenance: None,
        inside_points: 0,
        center_world: [0.0; 3],
        points: resample_points(&pts, cfg.points_per_instance),
    }
}

/// Keeps the `num_padded` real instances with most inside points (stable
/// on ties) and appends padding dummies. Idempotent on padded cells.
pub fn pad_instances(
    mut real: Vec<CellInstance>,
    cfg: &CellGridConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<CellInstance>, usize) {
    real.retain(|i| !i.is_padding());
    if real.len() > cfg.num_padded {
        let mut order: Vec<usize> = (0..real.len()).collect();
        order.sort_by(|&a, &b| real[b].inside_points.cmp(&real[a].inside_points).then(a.cmp(&b)));
        let mut keep = order[..cfg.num_padded].to_vec();
        keep.sort();
        real = keep.into_iter().map(|i| real[i].clone()).collect();
    }
    let num_real = real.len();
    while real.len() < cfg.num_padded {
        real.push(dummy_instance(cfg, rng));
    }
    (real, num_real)
}

/// Crops, normalizes and pads the instances selected for a cell.
pub fn pad_and_normalize(
    origin: [f64; 2],
    instances: &[(&Instance, Vec<Point>)],
    cfg: &CellGridConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<CellInstance>, usize) {
    let real: Vec<CellInstance> = instances
        .iter()
        .map(|(inst, inside)| {
            let normalized: Vec<Point> = inside.iter().map(|p| normalize(p, origin, cfg.cell_size)).collect();
            CellInstance {
                source: Some(inst.id),
                class: Some(inst.class),
                provenance: Some(inst.provenance),
                inside_points: inside.len(),
                center_world: crate::scene::mean_xyz(inside),
                points: resample_points(&normalized, cfg.points_per_instance),
            }
        })
        .collect();
    pad_instances(real, cfg, rng)
}

/// Slides the window over the scene and keeps cells with at least
/// `min_instances` in-cell instances. Cell ids follow row-major anchor order
/// over the kept cells.
pub fn sample_cells(scene: &Scene, cfg: &CellGridConfig) -> Result<CellDatabase, CellError> {
    cfg.validate()?;
    let ext = scene.extent;
    if ext.width() < cfg.cell_size - 1e-9 || ext.height() < cfg.cell_size - 1e-9 {
        return Err(CellError::ExtentTooSmall {
            extent: [ext.width(), ext.height()],
            cell_size: cfg.cell_size,
        });
    }
    let xs = axis_anchors(ext.min[0], ext.max[0], cfg.cell_size, cfg.stride);
    let ys = axis_anchors(ext.min[1], ext.max[1], cfg.cell_size, cfg.stride);
    let streets = StreetMap::grid(ext, cfg.street_grid);
    let min_overlap = scene.scaled_count(cfg.min_overlap_points);
    let mut grid = vec![None; xs.len() * ys.len()];
    let mut cells = Vec::new();
    let mut rejected = 0usize;
    for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let rect = Rect::square([x, y], cfg.cell_size);
            let anchor = iy * xs.len() + ix;
            let mut selected: Vec<(&Instance, Vec<Point>)> = Vec::new();
            for inst in &scene.instances {
                let inside: Vec<Point> = inst
                    .points
                    .iter()
                    .filter(|p| rect.contains([p.x, p.y]))
                    .copied()
                    .collect();
                if !inside.is_empty()
                    && assign_in_cell(inside.len(), inst.points.len(), cfg.third_rule, min_overlap)
                {
                    selected.push((inst, inside));
                }
            }
            let clustered = scene.cluster_stuff_in(&rect, &cfg.cluster, cells.len() as u64);
            for inst in &clustered {
                selected.push((inst, inst.points.clone()));
            }
            if selected.len() < cfg.min_instances.max(1) {
                rejected += 1;
                continue;
            }
            let id = cells.len();
            // Clustered ids were scoped by the id this cell receives.
            let mut rng = ChaCha8Rng::seed_from_u64(anchor as u64);
            let (instances, num_real) = pad_and_normalize([x, y], &selected, cfg, &mut rng);
            grid[anchor] = Some(id);
            cells.push(Cell {
                id,
                origin: [x, y],
                size: cfg.cell_size,
                instances,
                num_real,
                streets: streets.regions_overlapping(&rect),
            });
        }
    }
    log::info!(
        "sampled {} cells from {} anchors ({} rejected)",
        cells.len(),
        xs.len() * ys.len(),
        rejected
    );
    Ok(CellDatabase {
        scene: scene.id.clone(),
        config: cfg.clone(),
        anchors_x: xs,
        anchors_y: ys,
        grid,
        cells,
        streets,
    })
}

#[cfg(test)]
mod tests;
