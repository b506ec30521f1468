//! Labeled colored point-cloud scenes, the procedural generator that stands
//! in for recorded city districts, and density clustering of stuff classes.

mod color;
mod dbscan;
pub mod fixtures;
mod generate;
mod io;

pub use color::{Palette, PaletteEntry};
pub use dbscan::{cluster_stuff, dbscan, dbscan_reference, ClusterConfig, Label};
pub use generate::{generate_scene, resample_polyline, SceneConfig};
pub use io::{
    import_labeled_cloud, load_scene, read_scene, save_scene, write_scene, LabeledCloud, LabeledPoint, CLOUD_FORMAT,
    SCENE_FORMAT, SCENE_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene extent {extent:?} is smaller than twice the cell size {cell_size}")]
    ExtentTooSmall { extent: [f64; 2], cell_size: f64 },
    #[error("no instance classes configured")]
    NoInstanceClasses,
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("instance {0:?} has no points")]
    EmptyInstance(InstanceId),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("scene file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Point {
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn rgb(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.z].iter().all(|v| v.is_finite())
            && [self.r, self.g, self.b].iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Instance,
    Stuff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub name: String,
    pub kind: ClassKind,
    /// Stuff classes that are split into localizable instances. Ground-like
    /// stuff (road, terrain) is kept as background.
    pub clustered: bool,
}

/// Fixed list of classes; a [`ClassId`] indexes into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    pub classes: Vec<SemanticClass>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        let inst = |n: &str| SemanticClass {
            name: n.to_string(),
            kind: ClassKind::Instance,
            clustered: false,
        };
        let stuff = |n: &str, clustered| SemanticClass {
            name: n.to_string(),
            kind: ClassKind::Stuff,
            clustered,
        };
        Self {
            classes: vec![
                inst("building"),
                inst("pole"),
                inst("traffic light"),
                inst("traffic sign"),
                inst("trash bin"),
                inst("bus stop"),
                inst("garage"),
                stuff("vegetation", true),
                stuff("fence", true),
                stuff("wall", true),
                stuff("sidewalk", true),
                stuff("road", false),
                stuff("terrain", false),
            ],
        }
    }
}

impl ClassRegistry {
    pub fn get(&self, id: ClassId) -> &SemanticClass {
        &self.classes[id.0]
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.classes[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().position(|c| c.name == name).map(ClassId)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.classes.len()).map(ClassId)
    }

    pub fn clustered_stuff(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.ids()
            .filter(|&id| self.get(id).kind == ClassKind::Stuff && self.get(id).clustered)
    }
}

/// Instance identifier. Labeled instances use small sequential ids; ids of
/// clustered instances are derived from (scope, class, cluster index) and
/// carry the high bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId(pub u64);

impl InstanceId {
    const CLUSTERED: u64 = 1 << 63;

    pub fn clustered(scope: u64, class: ClassId, index: usize) -> Self {
        debug_assert!(scope < (1 << 38) && class.0 < (1 << 12) && index < (1 << 12));
        Self(Self::CLUSTERED | (scope << 24) | ((class.0 as u64) << 12) | index as u64)
    }

    pub fn is_clustered(self) -> bool {
        self.0 & Self::CLUSTERED != 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Labeled,
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub class: ClassId,
    pub points: Vec<Point>,
    /// Mean of the point coordinates.
    pub center: [f64; 3],
    pub provenance: Provenance,
}

impl Instance {
    pub fn new(
        id: InstanceId,
        class: ClassId,
        points: Vec<Point>,
        provenance: Provenance,
    ) -> Result<Self, SceneError> {
        if points.is_empty() {
            return Err(SceneError::EmptyInstance(id));
        }
        let center = mean_xyz(&points);
        Ok(Self {
            id,
            class,
            points,
            center,
            provenance,
        })
    }

    pub fn center_2d(&self) -> [f64; 2] {
        [self.center[0], self.center[1]]
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            c[0] += p.r;
            c[1] += p.g;
            c[2] += p.b;
        }
        c.map(|v| v / n)
    }
}

pub fn mean_xyz(points: &[Point]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        c[0] += p.x;
        c[1] += p.y;
        c[2] += p.z;
    }
    c.map(|v| v / n)
}

/// Axis-aligned 2D rectangle `[min, max]`, closed on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn square(origin: [f64; 2], size: f64) -> Self {
        Self {
            min: origin,
            max: [origin[0] + size, origin[1] + size],
        }
    }

    pub fn centered(center: [f64; 2], size: f64) -> Self {
        let h = size / 2.0;
        Self {
            min: [center[0] - h, center[1] - h],
            max: [center[0] + h, center[1] + h],
        }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.min[0] < other.max[0]
            && other.min[0] < self.max[0]
            && self.min[1] < other.max[1]
            && other.min[1] < self.max[1]
    }
}

/// All points of one stuff class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StuffCloud {
    pub class: ClassId,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub extent: Rect,
    pub classes: ClassRegistry,
    pub instances: Vec<Instance>,
    pub stuff: Vec<StuffCloud>,
    /// Ordered 2D polyline.
    pub trajectory: Vec<[f64; 2]>,
    pub seed: u64,
    /// Point density relative to the LiDAR scale the point-count
    /// thresholds were designed for (1.0 for real scans).
    pub density_factor: f64,
}

impl Scene {
    pub fn instance(&self, id: InstanceId) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn stuff_points(&self, class: ClassId) -> &[Point] {
        self.stuff
            .iter()
            .find(|s| s.class == class)
            .map_or(&[], |s| s.points.as_slice())
    }

    /// Scales a point-count threshold designed for LiDAR density.
    pub fn scaled_count(&self, base: usize) -> usize {
        ((base as f64 * self.density_factor).round() as usize).max(1)
    }

    /// Labeled instances whose 2D center lies within `radius` of `p`.
    pub fn labeled_within(&self, p: [f64; 2], radius: f64) -> impl Iterator<Item = &Instance> {
        self.instances
            .iter()
            .filter(move |i| dist2(i.center_2d(), p) <= radius)
    }

    /// Clusters the stuff points inside `rect` into instances.
    pub fn cluster_stuff_in(&self, rect: &Rect, cfg: &ClusterConfig, scope: u64) -> Vec<Instance> {
        let min_points = self.scaled_count(cfg.min_cluster_points);
        let mut out = Vec::new();
        for class in self.classes.clustered_stuff() {
            let local: Vec<Point> = self
                .stuff_points(class)
                .iter()
                .filter(|p| rect.contains([p.x, p.y]))
                .copied()
                .collect();
            out.extend(cluster_stuff(&local, class, cfg.eps, cfg.min_pts, min_points, scope));
        }
        out
    }
}

pub fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
