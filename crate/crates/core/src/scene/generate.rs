use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dist2, ClassId, ClassKind, ClassRegistry, Instance, InstanceId, Palette, Point, Provenance,
    Rect, Scene, SceneError, StuffCloud,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Scene extent in meters, anchored at the origin.
    pub size: [f64; 2],
    /// Cell size the scene must accommodate (at least two cells per axis).
    pub cell_size: f64,
    /// Distance between parallel road segments of the serpentine route.
    pub road_spacing: f64,
    /// Distance of the route's turning segments from the scene border.
    pub margin: f64,
    /// Instance classes to place; must be non-empty.
    pub instance_classes: Vec<String>,
    /// Min/max gap between consecutive street-side objects.
    pub object_spacing: [f64; 2],
    /// Points per square meter on instance surfaces.
    pub surface_density: f64,
    /// Points per square meter on clustered stuff.
    pub stuff_density: f64,
    /// Points per square meter on road and terrain.
    pub ground_density: f64,
    pub min_instance_points: usize,
    /// Point density relative to LiDAR scale, used to scale point-count thresholds.
    pub density_factor: f64,
    /// Trajectory locations must see this many labeled instances...
    pub min_neighbors: usize,
    /// ...within this radius.
    pub neighbor_radius: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: [200.0, 200.0],
            cell_size: 30.0,
            road_spacing: 50.0,
            margin: 10.0,
            instance_classes: [
                "building",
                "pole",
                "traffic light",
                "traffic sign",
                "trash bin",
                "bus stop",
                "garage",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            object_spacing: [5.0, 11.0],
            surface_density: 0.8,
            stuff_density: 2.0,
            ground_density: 0.15,
            min_instance_points: 24,
            density_factor: 0.2,
            min_neighbors: 6,
            neighbor_radius: 15.0,
        }
    }
}

/// Class-specific color choices.
fn class_colors(name: &str) -> &'static [&'static str] {
    match name {
        "building" => &["gray", "white", "brown", "red", "yellow", "orange"],
        "garage" => &["gray", "white", "brown"],
        "pole" => &["gray", "black", "green"],
        "traffic light" => &["black", "yellow", "gray"],
        "traffic sign" => &["blue", "red", "white", "yellow"],
        "trash bin" => &["green", "black", "gray", "orange"],
        "bus stop" => &["gray", "green", "blue"],
        "vegetation" => &["green", "brown"],
        "fence" => &["brown", "gray", "black"],
        "wall" => &["gray", "white", "red"],
        "sidewalk" => &["gray"],
        "road" => &["black", "gray"],
        "terrain" => &["brown", "green"],
        _ => &["gray", "white", "black", "red", "green", "blue", "yellow", "brown", "orange"],
    }
}

struct Builder<'a> {
    cfg: &'a SceneConfig,
    registry: ClassRegistry,
    palette: Palette,
    extent: Rect,
    rng: ChaCha8Rng,
    instances: Vec<Instance>,
    stuff: Vec<StuffCloud>,
    next_id: u64,
}

/// Local frame of one straight route segment: `along` unit direction and
/// `side` unit normal.
#[derive(Clone, Copy)]
struct Frame {
    origin: [f64; 2],
    along: [f64; 2],
    side: [f64; 2],
    length: f64,
}

impl Frame {
    fn at(&self, s: f64, offset: f64) -> [f64; 2] {
        [
            self.origin[0] + self.along[0] * s + self.side[0] * offset,
            self.origin[1] + self.along[1] * s + self.side[1] * offset,
        ]
    }
}

impl<'a> Builder<'a> {
    fn color(&mut self, class: ClassId) -> [f64; 3] {
        let name = self.registry.name(class).to_string();
        let choices = class_colors(&name);
        let pick = *choices.choose(&mut self.rng).unwrap();
        let base = self.palette.rgb(pick).unwrap_or([0.5, 0.5, 0.5]);
        base.map(|c| (c + self.rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
    }

    fn paint(&mut self, xyz: [f64; 3], base: [f64; 3]) -> Point {
        let j = |rng: &mut ChaCha8Rng, c: f64| (c + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
        Point {
            x: xyz[0],
            y: xyz[1],
            z: xyz[2],
            r: j(&mut self.rng, base[0]),
            g: j(&mut self.rng, base[1]),
            b: j(&mut self.rng, base[2]),
        }
    }

    fn count(&self, area: f64, density: f64, min: usize) -> usize {
        ((area * density).round() as usize).max(min)
    }

    /// Box surface (four walls and roof) with footprint centered at `c`,
    /// rotated by `yaw`.
    fn box_points(&mut self, c: [f64; 2], dims: [f64; 3], yaw: f64, base: [f64; 3]) -> Vec<Point> {
        let [w, d, h] = dims;
        let faces = [w * h, w * h, d * h, d * h, w * d];
        let area: f64 = faces.iter().sum();
        let n = self.count(area, self.cfg.surface_density, self.cfg.min_instance_points);
        let (s, co) = yaw.sin_cos();
        (0..n)
            .map(|_| {
                let mut pick = self.rng.gen_range(0.0..area);
                let mut face = 0;
                while face < 4 && pick > faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let u = self.rng.gen_range(-0.5..0.5);
                let v = self.rng.gen_range(0.0..1.0);
                let (lx, ly, z) = match face {
                    0 => (u * w, -d / 2.0, v * h),
                    1 => (u * w, d / 2.0, v * h),
                    2 => (-w / 2.0, u * d, v * h),
                    3 => (w / 2.0, u * d, v * h),
                    _ => (u * w, (v - 0.5) * d, h),
                };
                let xyz = [c[0] + lx * co - ly * s, c[1] + lx * s + ly * co, z];
                self.paint(xyz, base)
            })
            .collect()
    }

    fn cylinder_points(&mut self, c: [f64; 2], radius: f64, height: f64, base: [f64; 3]) -> Vec<Point> {
        let area = 2.0 * PI * radius * height;
        let n = self.count(area, self.cfg.surface_density * 4.0, self.cfg.min_instance_points);
        (0..n)
            .map(|_| {
                let a = self.rng.gen_range(0.0..2.0 * PI);
                let z = self.rng.gen_range(0.0..height);
                self.paint([c[0] + radius * a.cos(), c[1] + radius * a.sin(), z], base)
            })
            .collect()
    }

    fn add_instance(&mut self, class: ClassId, points: Vec<Point>) -> bool {
        if points
            .iter()
            .any(|p| !self.extent.contains([p.x, p.y]))
        {
            return false;
        }
        self.next_id += 1;
        let inst = Instance::new(InstanceId(self.next_id), class, points, Provenance::Labeled)
            .expect("generated instances have points");
        self.instances.push(inst);
        true
    }

    fn add_stuff(&mut self, class: ClassId, points: Vec<Point>) {
        let extent = self.extent;
        let keep = points.into_iter().filter(|p| extent.contains([p.x, p.y]));
        match self.stuff.iter_mut().find(|s| s.class == class) {
            Some(s) => s.points.extend(keep),
            None => self.stuff.push(StuffCloud {
                class,
                points: keep.collect(),
            }),
        }
    }

    fn class(&self, name: &str) -> Option<ClassId> {
        self.registry.id(name)
    }

    fn small_object(&mut self, class: ClassId, at: [f64; 2]) -> bool {
        let name = self.registry.name(class).to_string();
        let base = self.color(class);
        let pts = match name.as_str() {
            "pole" => {
                let h = self.rng.gen_range(5.0..8.0);
                self.cylinder_points(at, 0.15, h, base)
            }
            "traffic light" => {
                let h = self.rng.gen_range(3.5..5.0);
                let mut p = self.cylinder_points(at, 0.12, h, base);
                let head = self.box_points(at, [0.4, 0.4, 1.0], 0.0, base);
                p.extend(head.into_iter().map(|mut q| {
                    q.z += h;
                    q
                }));
                p
            }
            "traffic sign" => {
                let h = self.rng.gen_range(2.0..3.0);
                let mut p = self.cylinder_points(at, 0.06, h, base);
                let yaw = self.rng.gen_range(0.0..PI);
                let plate = self.box_points(at, [0.8, 0.1, 0.8], yaw, base);
                p.extend(plate.into_iter().map(|mut q| {
                    q.z += h;
                    q
                }));
                p
            }
            "trash bin" => {
                let yaw = self.rng.gen_range(0.0..PI);
                self.box_points(at, [0.7, 0.7, 1.1], yaw, base)
            }
            "bus stop" => self.box_points(at, [4.0, 1.6, 2.6], 0.0, base),
            "garage" => {
                let dims = [self.rng.gen_range(4.0..7.0), self.rng.gen_range(5.0..7.0), 3.0];
                self.box_points(at, dims, 0.0, base)
            }
            _ => {
                let dims = [
                    self.rng.gen_range(8.0..16.0),
                    self.rng.gen_range(6.0..12.0),
                    self.rng.gen_range(5.0..16.0),
                ];
                self.box_points(at, dims, 0.0, base)
            }
        };
        self.add_instance(class, pts)
    }

    fn segment(&mut self, frame: Frame, street_classes: &[ClassId], building_classes: &[ClassId]) {
        let cfg = self.cfg;
        let road = self.class("road");
        let sidewalk = self.class("sidewalk");
        let vegetation = self.class("vegetation");
        let fence = self.class("fence");
        let wall = self.class("wall");
        let terrain = self.class("terrain");

        if let Some(road) = road {
            let n = self.count(frame.length * 8.0, cfg.ground_density, 1);
            let base = self.color(road);
            let pts: Vec<Point> = (0..n)
                .map(|_| {
                    let s = self.rng.gen_range(0.0..frame.length);
                    let o = self.rng.gen_range(-4.0..4.0);
                    let p = frame.at(s, o);
                    self.paint([p[0], p[1], 0.0], base)
                })
                .collect();
            self.add_stuff(road, pts);
        }

        for side in [-1.0, 1.0] {
            // Sidewalk pieces separated by crossings.
            if let Some(sw) = sidewalk {
                let mut s = 0.0;
                let base = self.color(sw);
                while s < frame.length {
                    let len = self.rng.gen_range(15.0..35.0f64).min(frame.length - s);
                    let n = self.count(len * 3.0, cfg.stuff_density, 1);
                    let pts: Vec<Point> = (0..n)
                        .map(|_| {
                            let t = s + self.rng.gen_range(0.0..len);
                            let o = side * self.rng.gen_range(4.0..7.0);
                            let p = frame.at(t, o);
                            let z = self.rng.gen_range(0.05..0.2);
                            self.paint([p[0], p[1], z], base)
                        })
                        .collect();
                    self.add_stuff(sw, pts);
                    s += len + self.rng.gen_range(4.0..7.0);
                }
            }

            // Street furniture on the sidewalk edge.
            if !street_classes.is_empty() {
                let mut s = self.rng.gen_range(0.0..cfg.object_spacing[1]);
                while s < frame.length {
                    let class = *street_classes.choose(&mut self.rng).unwrap();
                    let at = frame.at(s, side * self.rng.gen_range(5.0..6.8));
                    self.small_object(class, at);
                    s += self.rng.gen_range(cfg.object_spacing[0]..cfg.object_spacing[1]);
                }
            }

            // Building row with vegetation, fences and walls in the gaps.
            let mut s = self.rng.gen_range(0.0..6.0);
            while s < frame.length {
                let roll: f64 = self.rng.gen();
                if roll < 0.6 && !building_classes.is_empty() {
                    let class = *building_classes.choose(&mut self.rng).unwrap();
                    let is_garage = self.registry.name(class) == "garage";
                    let (w, d, h) = if is_garage {
                        (self.rng.gen_range(4.0..7.0), self.rng.gen_range(5.0..7.0), 3.0)
                    } else {
                        (
                            self.rng.gen_range(8.0..18.0),
                            self.rng.gen_range(6.0..12.0),
                            self.rng.gen_range(5.0..16.0),
                        )
                    };
                    let offset = side * (9.0 + d / 2.0 + self.rng.gen_range(0.0..3.0));
                    let c = frame.at(s + w / 2.0, offset);
                    let yaw = frame.along[1].atan2(frame.along[0]);
                    let base = self.color(class);
                    let pts = self.box_points(c, [w, d, h], yaw, base);
                    self.add_instance(class, pts);
                    s += w + self.rng.gen_range(2.0..8.0);
                } else if roll < 0.8 {
                    if let Some(veg) = vegetation {
                        let r = self.rng.gen_range(1.5..3.2);
                        let c = frame.at(s + r, side * self.rng.gen_range(8.5..12.0));
                        let ctr_z = self.rng.gen_range(2.5..4.5);
                        let n = self.count(PI * r * r * 2.0, cfg.stuff_density, 1);
                        let base = self.color(veg);
                        let pts: Vec<Point> = (0..n)
                            .map(|_| {
                                let v = loop {
                                    let v = [
                                        self.rng.gen_range(-1.0..1.0f64),
                                        self.rng.gen_range(-1.0..1.0f64),
                                        self.rng.gen_range(-1.0..1.0f64),
                                    ];
                                    if v.iter().map(|a| a * a).sum::<f64>() <= 1.0 {
                                        break v;
                                    }
                                };
                                self.paint([c[0] + r * v[0], c[1] + r * v[1], ctr_z + r * v[2]], base)
                            })
                            .collect();
                        self.add_stuff(veg, pts);
                        s += 2.0 * r + self.rng.gen_range(1.0..5.0);
                    } else {
                        s += 5.0;
                    }
                } else {
                    let which = if self.rng.gen_bool(0.5) { fence } else { wall };
                    if let Some(cls) = which {
                        let len = self.rng.gen_range(6.0..16.0f64).min(frame.length - s).max(1.0);
                        let h = self.rng.gen_range(1.2..2.8);
                        let off = side * self.rng.gen_range(8.0..9.0);
                        let n = self.count(len * h * 1.5, cfg.stuff_density, 1);
                        let base = self.color(cls);
                        let pts: Vec<Point> = (0..n)
                            .map(|_| {
                                let p = frame.at(s + self.rng.gen_range(0.0..len), off);
                                let z = self.rng.gen_range(0.0..h);
                                self.paint([p[0], p[1], z], base)
                            })
                            .collect();
                        self.add_stuff(cls, pts);
                        s += len + self.rng.gen_range(2.0..6.0);
                    } else {
                        s += 5.0;
                    }
                }
            }

            // Sparse terrain behind the buildings.
            if let Some(ter) = terrain {
                let n = self.count(frame.length * 6.0, cfg.ground_density, 1);
                let base = self.color(ter);
                let pts: Vec<Point> = (0..n)
                    .map(|_| {
                        let p = frame.at(self.rng.gen_range(0.0..frame.length), side * self.rng.gen_range(20.0..24.0));
                        self.paint([p[0], p[1], 0.0], base)
                    })
                    .collect();
                self.add_stuff(ter, pts);
            }
        }
    }
}

/// Serpentine route: horizontal passes `road_spacing` apart joined by short
/// vertical connectors alternating between the left and right margin.
fn serpentine(cfg: &SceneConfig) -> Vec<[f64; 2]> {
    let [w, h] = cfg.size;
    let x0 = cfg.margin;
    let x1 = w - cfg.margin;
    let mut pts = Vec::new();
    let mut y = cfg.road_spacing / 2.0;
    let mut left_to_right = true;
    while y <= h - cfg.margin.min(cfg.road_spacing / 2.0) + 1e-9 {
        let (a, b) = if left_to_right { (x0, x1) } else { (x1, x0) };
        pts.push([a, y]);
        pts.push([b, y]);
        y += cfg.road_spacing;
        left_to_right = !left_to_right;
    }
    if pts.is_empty() {
        pts.push([x0, h / 2.0]);
        pts.push([x1, h / 2.0]);
    }
    pts
}

/// Samples points every `step` meters along a polyline (vertices included).
pub fn resample_polyline(poly: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    if poly.is_empty() {
        return out;
    }
    out.push(poly[0]);
    let mut carry = 0.0;
    for seg in poly.windows(2) {
        let len = dist2(seg[0], seg[1]);
        if len == 0.0 {
            continue;
        }
        let mut s = step - carry;
        while s <= len + 1e-9 {
            let t = s / len;
            out.push([
                seg[0][0] + (seg[1][0] - seg[0][0]) * t,
                seg[0][1] + (seg[1][1] - seg[0][1]) * t,
            ]);
            s += step;
        }
        carry = len - (s - step);
    }
    out
}

/// Builds a synthetic district: a serpentine road with sidewalks, street
/// furniture, building rows, vegetation, fences and walls.
///
/// Every trajectory location is guaranteed `min_neighbors` labeled instances
/// within `neighbor_radius`; extra poles are planted where the random layout
/// falls short.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    if cfg.size[0] < 2.0 * cfg.cell_size || cfg.size[1] < 2.0 * cfg.cell_size {
        return Err(SceneError::ExtentTooSmall {
            extent: cfg.size,
            cell_size: cfg.cell_size,
        });
    }
    if cfg.instance_classes.is_empty() {
        return Err(SceneError::NoInstanceClasses);
    }
    let registry = ClassRegistry::default();
    let mut chosen = Vec::new();
    for name in &cfg.instance_classes {
        let id = registry
            .id(name)
            .filter(|&id| registry.get(id).kind == ClassKind::Instance)
            .ok_or_else(|| SceneError::UnknownClass(name.clone()))?;
        chosen.push(id);
    }
    let is_building = |reg: &ClassRegistry, id: ClassId| matches!(reg.name(id), "building" | "garage");
    let street: Vec<ClassId> = chosen.iter().copied().filter(|&c| !is_building(&registry, c)).collect();
    let buildings: Vec<ClassId> = chosen.iter().copied().filter(|&c| is_building(&registry, c)).collect();

    let extent = Rect::new([0.0, 0.0], cfg.size);
    let mut b = Builder {
        cfg,
        registry,
        palette: Palette::default(),
        extent,
        rng: ChaCha8Rng::seed_from_u64(seed),
        instances: Vec::new(),
        stuff: Vec::new(),
        next_id: 0,
    };

    let trajectory = serpentine(cfg);
    for seg in trajectory.windows(2) {
        let length = dist2(seg[0], seg[1]);
        if length == 0.0 {
            continue;
        }
        let along = [(seg[1][0] - seg[0][0]) / length, (seg[1][1] - seg[0][1]) / length];
        let frame = Frame {
            origin: seg[0],
            along,
            side: [-along[1], along[0]],
            length,
        };
        b.segment(frame, &street, &buildings);
    }

    // Guarantee enough describable neighbors along the route.
    let filler = street.first().copied().unwrap_or(chosen[0]);
    for p in resample_polyline(&trajectory, 1.0) {
        let mut attempts = 0;
        while b
            .instances
            .iter()
            .filter(|i| dist2(i.center_2d(), p) <= cfg.neighbor_radius)
            .count()
            < cfg.min_neighbors
            && attempts < 200
        {
            attempts += 1;
            let a = b.rng.gen_range(0.0..2.0 * PI);
            let r = b.rng.gen_range(4.0..cfg.neighbor_radius * 0.7);
            let at = [p[0] + r * a.cos(), p[1] + r * a.sin()];
            b.small_object(filler, at);
        }
    }

    Ok(Scene {
        id: format!("synthetic-{seed}"),
        extent,
        classes: b.registry,
        instances: b.instances,
        stuff: b.stuff,
        trajectory,
        seed,
        density_factor: cfg.density_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_scene(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_instance_classes_is_an_error() {
        let cfg = SceneConfig {
            instance_classes: vec![],
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(SceneError::NoInstanceClasses)));
    }

    #[test]
    fn small_extent_is_an_error() {
        let cfg = SceneConfig {
            size: [50.0, 200.0],
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(SceneError::ExtentTooSmall { .. })));
    }

    #[test]
    fn default_scene_has_six_neighbors_along_route() {
        let cfg = SceneConfig::default();
        let scene = generate_scene(&cfg, 3).unwrap();
        for p in resample_polyline(&scene.trajectory, 1.0) {
            let n = scene.labeled_within(p, 15.0).count();
            assert!(n >= 6, "only {n} instances near {p:?}");
        }
    }

    #[test]
    fn everything_stays_inside_extent() {
        let scene = generate_scene(&SceneConfig::default(), 11).unwrap();
        for inst in &scene.instances {
            assert!(inst.points.iter().all(|p| scene.extent.contains([p.x, p.y]) && p.is_valid()));
            let mean = super::super::mean_xyz(&inst.points);
            for k in 0..3 {
                assert!((mean[k] - inst.center[k]).abs() < 1e-9);
            }
        }
        for s in &scene.stuff {
            assert!(s.points.iter().all(|p| scene.extent.contains([p.x, p.y])));
        }
        assert!(scene.trajectory.iter().all(|&p| scene.extent.contains(p)));
    }

    #[test]
    fn resample_includes_start_and_spacing() {
        let pts = resample_polyline(&[[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]], 5.0);
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0], [0.0, 0.0]);
        assert!((pts[4][1] - 10.0).abs() < 1e-9);
    }
}
