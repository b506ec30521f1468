//! Scene container files.
//!
//! Two JSON layouts share the loader:
//!
//! * `textloc-scene`: header (id, extent, seed, density factor, class
//!   registry, trajectory) followed by one point block per instance and one
//!   per stuff class. Points are `[x, y, z, r, g, b]` arrays.
//! * `textloc-labeled-cloud`: an external point cloud where every point
//!   carries a class name index and an optional instance label,
//!   `[x, y, z, r, g, b, class, instance]` with `instance < 0` for
//!   unlabeled (stuff) points. Points sharing an instance label become one
//!   labeled instance; the extent defaults to the bounding box.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ClassId, ClassKind, ClassRegistry, Instance, InstanceId, Point, Provenance, Rect, Scene,
    SceneError, SemanticClass, StuffCloud,
};

pub const SCENE_FORMAT: &str = "textloc-scene";
pub const CLOUD_FORMAT: &str = "textloc-labeled-cloud";
pub const SCENE_VERSION: u32 = 1;

type Row = [f64; 6];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    format: String,
    version: u32,
    id: String,
    extent: Rect,
    seed: u64,
    density_factor: f64,
    classes: Vec<SemanticClass>,
    trajectory: Vec<[f64; 2]>,
    instances: Vec<InstanceBlock>,
    stuff: Vec<StuffBlock>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceBlock {
    id: u64,
    class: usize,
    provenance: Provenance,
    points: Vec<Row>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StuffBlock {
    class: usize,
    points: Vec<Row>,
}

/// Import container for externally labeled point clouds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledCloud {
    pub format: String,
    pub version: u32,
    pub id: String,
    #[serde(default)]
    pub extent: Option<Rect>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub density_factor: f64,
    /// Class names indexed by the per-point class label. Names must exist in
    /// the default registry.
    pub classes: Vec<String>,
    pub trajectory: Vec<[f64; 2]>,
    pub points: Vec<LabeledPoint>,
}

fn one() -> f64 {
    1.0
}

/// `[x, y, z, r, g, b, class, instance]`.
pub type LabeledPoint = [f64; 8];

fn to_row(p: &Point) -> Row {
    [p.x, p.y, p.z, p.r, p.g, p.b]
}

fn from_row(r: &[f64]) -> Result<Point, SceneError> {
    let p = Point {
        x: r[0],
        y: r[1],
        z: r[2],
        r: r[3],
        g: r[4],
        b: r[5],
    };
    if !p.is_valid() {
        return Err(SceneError::InvalidPoint(format!("{r:?}")));
    }
    Ok(p)
}

fn check_class(registry: &ClassRegistry, c: usize) -> Result<ClassId, SceneError> {
    if c < registry.len() {
        Ok(ClassId(c))
    } else {
        Err(SceneError::Format(format!("class index {c} out of range")))
    }
}

pub fn write_scene<W: Write>(scene: &Scene, w: W) -> Result<(), SceneError> {
    let file = SceneFile {
        format: SCENE_FORMAT.to_string(),
        version: SCENE_VERSION,
        id: scene.id.clone(),
        extent: scene.extent,
        seed: scene.seed,
        density_factor: scene.density_factor,
        classes: scene.classes.classes.clone(),
        trajectory: scene.trajectory.clone(),
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceBlock {
                id: i.id.0,
                class: i.class.0,
                provenance: i.provenance,
                points: i.points.iter().map(to_row).collect(),
            })
            .collect(),
        stuff: scene
            .stuff
            .iter()
            .map(|s| StuffBlock {
                class: s.class.0,
                points: s.points.iter().map(to_row).collect(),
            })
            .collect(),
    };
    serde_json::to_writer(w, &file).map_err(|e| SceneError::Format(e.to_string()))
}

/// Reads either container layout.
pub fn read_scene<R: Read>(r: R) -> Result<Scene, SceneError> {
    let value: serde_json::Value =
        serde_json::from_reader(r).map_err(|e| SceneError::Format(e.to_string()))?;
    let format = value
        .get("format")
        .and_then(|f| f.as_str())
        .ok_or_else(|| SceneError::Format("missing `format` field".into()))?
        .to_string();
    match format.as_str() {
        SCENE_FORMAT => {
            let file: SceneFile =
                serde_json::from_value(value).map_err(|e| SceneError::Format(e.to_string()))?;
            from_scene_file(file)
        }
        CLOUD_FORMAT => {
            let cloud: LabeledCloud =
                serde_json::from_value(value).map_err(|e| SceneError::Format(e.to_string()))?;
            import_labeled_cloud(&cloud)
        }
        other => Err(SceneError::Format(format!("unknown format `{other}`"))),
    }
}

fn from_scene_file(file: SceneFile) -> Result<Scene, SceneError> {
    if file.version != SCENE_VERSION {
        return Err(SceneError::Format(format!(
            "unsupported scene version {}",
            file.version
        )));
    }
    let classes = ClassRegistry {
        classes: file.classes,
    };
    let mut instances = Vec::with_capacity(file.instances.len());
    for block in file.instances {
        let class = check_class(&classes, block.class)?;
        let points = block
            .points
            .iter()
            .map(|r| from_row(r))
            .collect::<Result<Vec<_>, _>>()?;
        instances.push(Instance::new(InstanceId(block.id), class, points, block.provenance)?);
    }
    let mut stuff = Vec::with_capacity(file.stuff.len());
    for block in file.stuff {
        let class = check_class(&classes, block.class)?;
        let points = block
            .points
            .iter()
            .map(|r| from_row(r))
            .collect::<Result<Vec<_>, _>>()?;
        stuff.push(StuffCloud { class, points });
    }
    let scene = Scene {
        id: file.id,
        extent: file.extent,
        classes,
        instances,
        stuff,
        trajectory: file.trajectory,
        seed: file.seed,
        density_factor: file.density_factor,
    };
    check_extent(&scene)?;
    Ok(scene)
}

fn check_extent(scene: &Scene) -> Result<(), SceneError> {
    let inside = |p: &Point| scene.extent.contains([p.x, p.y]);
    let ok = scene.instances.iter().all(|i| i.points.iter().all(inside))
        && scene.stuff.iter().all(|s| s.points.iter().all(inside))
        && scene.trajectory.iter().all(|&p| scene.extent.contains(p));
    if ok {
        Ok(())
    } else {
        Err(SceneError::Format("points or trajectory outside the scene extent".into()))
    }
}

/// Converts an externally labeled cloud into a [`Scene`]. Points with an
/// instance label on a stuff class are treated as stuff.
pub fn import_labeled_cloud(cloud: &LabeledCloud) -> Result<Scene, SceneError> {
    if cloud.format != CLOUD_FORMAT || cloud.version != SCENE_VERSION {
        return Err(SceneError::Format(format!(
            "expected {CLOUD_FORMAT} version {SCENE_VERSION}"
        )));
    }
    let registry = ClassRegistry::default();
    let mut map = Vec::with_capacity(cloud.classes.len());
    for name in &cloud.classes {
        map.push(
            registry
                .id(name)
                .ok_or_else(|| SceneError::UnknownClass(name.clone()))?,
        );
    }
    let mut groups: BTreeMap<u64, (ClassId, Vec<Point>)> = BTreeMap::new();
    let mut stuff: BTreeMap<ClassId, Vec<Point>> = BTreeMap::new();
    for row in &cloud.points {
        let p = from_row(&row[..6])?;
        let ci = row[6];
        if ci < 0.0 || ci.fract() != 0.0 || ci as usize >= map.len() {
            return Err(SceneError::Format(format!("bad class label {ci}")));
        }
        let class = map[ci as usize];
        let inst = row[7];
        if inst >= 0.0 && registry.get(class).kind == ClassKind::Instance {
            if inst.fract() != 0.0 {
                return Err(SceneError::Format(format!("bad instance label {inst}")));
            }
            let entry = groups.entry(inst as u64 + 1).or_insert((class, Vec::new()));
            if entry.0 != class {
                return Err(SceneError::Format(format!(
                    "instance {inst} mixes classes"
                )));
            }
            entry.1.push(p);
        } else {
            stuff.entry(class).or_default().push(p);
        }
    }
    let extent = cloud.extent.unwrap_or_else(|| {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for r in cloud.points.iter().map(|r| [r[0], r[1]]).chain(cloud.trajectory.iter().copied()) {
            for k in 0..2 {
                min[k] = min[k].min(r[k]);
                max[k] = max[k].max(r[k]);
            }
        }
        if min[0].is_finite() {
            Rect::new(min, max)
        } else {
            Rect::new([0.0; 2], [0.0; 2])
        }
    });
    let instances = groups
        .into_iter()
        .map(|(id, (class, pts))| Instance::new(InstanceId(id), class, pts, Provenance::Labeled))
        .collect::<Result<Vec<_>, _>>()?;
    let scene = Scene {
        id: cloud.id.clone(),
        extent,
        classes: registry,
        instances,
        stuff: stuff
            .into_iter()
            .map(|(class, points)| StuffCloud { class, points })
            .collect(),
        trajectory: cloud.trajectory.clone(),
        seed: cloud.seed,
        density_factor: cloud.density_factor,
    };
    check_extent(&scene)?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_scene(scene, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    read_scene(BufReader::new(File::open(path)?))
}
