use super::grounding::vector_angle;
use super::*;
use crate::querygen::{Hint, QueryDescription, Strategy};
use crate::scene::{generate_scene, ClassRegistry, SceneConfig};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

fn pt(x: f64, y: f64) -> Point {
    Point { x, y, z: 1.0, r: 0.5, g: 0.5, b: 0.5 }
}

fn pole(id: u64, c: [f64; 2], n: usize) -> Instance {
    let reg = ClassRegistry::default();
    let pts = (0..n)
        .map(|k| pt(c[0] + 0.01 * (k % 7) as f64, c[1] + 0.01 * (k % 5) as f64))
        .collect();
    Instance::new(InstanceId(id), reg.id("pole").unwrap(), pts, Provenance::Labeled).unwrap()
}

fn scene_with(instances: Vec<Instance>, size: f64) -> Scene {
    Scene {
        id: "t".into(),
        extent: Rect::new([0.0, 0.0], [size, size]),
        classes: ClassRegistry::default(),
        instances,
        stuff: vec![],
        trajectory: vec![],
        seed: 0,
        density_factor: 1.0,
    }
}

/// Poles every `step` meters over the whole extent.
fn dense_scene(size: f64, step: f64) -> Scene {
    let mut inst = Vec::new();
    let mut id = 0;
    let n = (size / step) as usize;
    for i in 0..n {
        for j in 0..n {
            id += 1;
            inst.push(pole(id, [step * (i as f64 + 0.5), step * (j as f64 + 0.5)], 12));
        }
    }
    scene_with(inst, size)
}

#[test]
fn anchor_count_90m() {
    let xs = axis_anchors(0.0, 90.0, 30.0, 10.0);
    // floor((90 - 30) / 10) + 1 per axis
    let per_axis = ((90.0f64 - 30.0) / 10.0).floor() as usize + 1;
    assert_eq!(xs.len(), per_axis);
    let db = sample_cells(
        &dense_scene(90.0, 3.0),
        &CellGridConfig { min_instances: 1, ..CellGridConfig::default() },
    )
    .unwrap();
    assert_eq!(db.anchor_count(), 49);
    assert_eq!(db.len(), 49);
}

#[test]
fn stride_equal_to_size_tiles() {
    let xs = axis_anchors(0.0, 120.0, 30.0, 30.0);
    assert_eq!(xs, vec![0.0, 30.0, 60.0, 90.0]);
    assert_eq!(xs.len() * xs.len(), (120usize / 30).pow(2));
}

#[test]
fn flush_anchor_added_when_not_divisible() {
    assert_eq!(axis_anchors(0.0, 95.0, 30.0, 10.0), vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 65.0]);
    assert_eq!(axis_anchors(0.0, 30.0, 30.0, 10.0), vec![0.0]);
    assert!(axis_anchors(0.0, 20.0, 30.0, 10.0).is_empty());
}

#[test]
fn small_extent_is_an_error() {
    let s = scene_with(vec![pole(1, [5.0, 5.0], 3)], 20.0);
    assert!(matches!(sample_cells(&s, &CellGridConfig::default()), Err(CellError::ExtentTooSmall { .. })));
}

#[test]
fn empty_cells_are_rejected() {
    // Instances only in the south-west corner.
    let inst = (0..8).map(|i| pole(i + 1, [3.0 + i as f64, 3.0], 12)).collect();
    let mut s = scene_with(inst, 90.0);
    let road = s.classes.id("road").unwrap();
    s.stuff.push(crate::scene::StuffCloud {
        class: road,
        points: (0..900).map(|k| pt((k % 30) as f64 * 3.0, (k / 30) as f64 * 3.0)).collect(),
    });
    let db = sample_cells(&s, &CellGridConfig::default()).unwrap();
    assert_eq!(db.len(), 1);
    assert_eq!(db.cells[0].origin, [0.0, 0.0]);
    assert_eq!(db.grid.iter().flatten().count(), 1);
}

#[test]
fn in_cell_rules() {
    assert!(assign_in_cell(300, 900, 1.0 / 3.0, 250));
    assert!(assign_in_cell(250, 10_000, 1.0 / 3.0, 250));
    assert!(!assign_in_cell(249, 10_000, 1.0 / 3.0, 250));
    assert!(!assign_in_cell(33, 100, 1.0 / 3.0, 250));
    assert!(assign_in_cell(34, 100, 1.0 / 3.0, 250));
}

fn real_instances(n: usize) -> Vec<CellInstance> {
    (0..n)
        .map(|i| CellInstance {
            source: Some(InstanceId(i as u64 + 1)),
            class: Some(ClassId(1)),
            provenance: Some(Provenance::Labeled),
            inside_points: 10 + i,
            center_world: [0.0; 3],
            points: vec![pt(0.5, 0.5); 4],
        })
        .collect()
}

#[test]
fn padding_appends_dummies() {
    let cfg = CellGridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (inst, real) = pad_instances(real_instances(3), &cfg, &mut rng);
    assert_eq!(real, 3);
    assert_eq!(inst.len(), 16);
    assert_eq!(inst.iter().filter(|i| i.is_padding()).count(), 13);
    for d in &inst[3..] {
        assert_eq!(d.points.len(), cfg.points_per_instance);
        let distinct: std::collections::BTreeSet<_> =
            d.points.iter().map(|p| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits())).collect();
        assert_eq!(distinct.len(), cfg.dummy_points);
        for p in &d.points {
            assert_eq!(p.rgb(), [0.0, 0.0, 0.0]);
            assert!(p.xyz().iter().all(|v| (0.0..1e-3).contains(v)));
        }
    }
}

#[test]
fn cut_off_keeps_largest() {
    let cfg = CellGridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (inst, real) = pad_instances(real_instances(20), &cfg, &mut rng);
    assert_eq!(real, 16);
    assert_eq!(inst.len(), 16);
    // The four smallest (inside_points 10..13) are the dropped ones.
    assert!(inst.iter().all(|i| i.inside_points >= 14));
}

#[test]
fn padding_is_idempotent() {
    let cfg = CellGridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (once, r1) = pad_instances(real_instances(5), &cfg, &mut rng);
    let (twice, r2) = pad_instances(once.clone(), &cfg, &mut rng);
    assert_eq!(r1, r2);
    assert_eq!(once[..r1], twice[..r2]);
    assert_eq!(twice.len(), 16);
    // Normalizing with the identity frame leaves coordinates alone.
    let p = pt(0.25, 0.75);
    assert_eq!(normalize(&p, [0.0, 0.0], 1.0), p);
}

#[test]
fn far_corner_normalizes_to_one() {
    let p = normalize(&pt(40.0, 50.0), [10.0, 20.0], 30.0);
    assert_eq!((p.x, p.y), (1.0, 1.0));
    assert!((p.z - 1.0 / 30.0).abs() < 1e-15);
}

#[test]
fn resampling_keeps_point_set() {
    let pts: Vec<Point> = (0..5).map(|k| pt(k as f64, 0.0)).collect();
    let up = resample_points(&pts, 12);
    assert_eq!(up.len(), 12);
    assert_eq!(up[5], pts[0]);
    let many: Vec<Point> = (0..100).map(|k| pt(k as f64, 0.0)).collect();
    let down = resample_points(&many, 10);
    assert_eq!(down.iter().map(|p| p.x).collect::<Vec<_>>(), (0..10).map(|k| k as f64 * 10.0).collect::<Vec<_>>());
}

fn default_db() -> (Scene, CellDatabase) {
    let scene = generate_scene(&SceneConfig { size: [120.0, 120.0], ..SceneConfig::default() }, 1).unwrap();
    let db = sample_cells(&scene, &CellGridConfig::default()).unwrap();
    (scene, db)
}

#[test]
fn generated_database_is_well_formed() {
    let (_, db) = default_db();
    assert!(!db.is_empty());
    assert_eq!(db.anchor_count(), 100);
    for (i, c) in db.cells.iter().enumerate() {
        assert_eq!(c.id, i);
        assert_eq!(c.instances.len(), 16);
        assert!(c.num_real >= 6);
        assert!(!c.streets.is_empty());
        for inst in c.real() {
            for p in &inst.points {
                assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y), "{p:?}");
            }
        }
    }
    // Ids follow row-major anchor order.
    let anchors: Vec<[f64; 2]> = db.cells.iter().map(|c| [c.origin[1], c.origin[0]]).collect();
    let mut sorted = anchors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(anchors, sorted);
}

#[test]
fn database_round_trip() {
    let (_, db) = default_db();
    let mut buf = Vec::new();
    write_database(&db, &mut buf).unwrap();
    let back = read_database(buf.as_slice()).unwrap();
    assert_eq!(back, db);
    let mut again = Vec::new();
    write_database(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn gt_cell_at_center() {
    let db = sample_cells(&dense_scene(90.0, 3.0), &CellGridConfig { min_instances: 1, ..CellGridConfig::default() }).unwrap();
    for c in &db.cells {
        assert_eq!(ground_truth_cell(c.center(), &db).unwrap(), c.id);
    }
}

#[test]
fn gt_cell_boundary_tie_is_lowest_id() {
    let cfg = CellGridConfig { stride: 30.0, min_instances: 1, ..CellGridConfig::default() };
    let db = sample_cells(&dense_scene(90.0, 3.0), &cfg).unwrap();
    // Shared corner of four tiles.
    assert_eq!(ground_truth_cell([30.0, 30.0], &db).unwrap(), 0);
    assert_eq!(ground_truth_cell([45.0, 30.0], &db).unwrap(), 1);
}

#[test]
fn no_containing_cell_is_an_error() {
    let (_, db) = default_db();
    assert!(matches!(ground_truth_cell([-5.0, 10.0], &db), Err(CellError::NoContainingCell(_))));
}

#[test]
fn grid_coverage_and_center_bound() {
    use rand::Rng;
    let db = sample_cells(&dense_scene(95.0, 2.5), &CellGridConfig { min_instances: 1, ..CellGridConfig::default() }).unwrap();
    assert_eq!(db.len(), db.anchor_count());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bound = (2f64).sqrt() / 2.0 * 10.0 + 1e-9;
    for _ in 0..2000 {
        let p = [rng.gen_range(0.0..95.0), rng.gen_range(0.0..95.0)];
        let id = ground_truth_cell(p, &db).unwrap();
        let d = crate::scene::dist2(db.cells[id].center(), p);
        // Interior positions sit within half a stride diagonal of some center.
        let interior = (15.0..=80.0).contains(&p[0]) && (15.0..=80.0).contains(&p[1]);
        if interior {
            assert!(d <= bound, "{p:?} -> {d}");
        }
        assert!(d <= 15.0 * 2f64.sqrt());
    }
}

#[test]
fn gt_cell_matches_brute_force_on_generated_scene() {
    use rand::Rng;
    let (scene, db) = default_db();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3000 {
        let p = [rng.gen_range(0.0..scene.extent.max[0]), rng.gen_range(0.0..scene.extent.max[1])];
        match (ground_truth_cell(p, &db), ground_truth_cell_brute(p, &db)) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            other => panic!("disagreement at {p:?}: {other:?}"),
        }
    }
}

fn hint(target: InstanceId, class: &str, offset: [f64; 2]) -> Hint {
    Hint {
        text: String::new(),
        target,
        class: class.into(),
        direction: "east".into(),
        color: "gray".into(),
        offset,
    }
}

fn desc(position: [f64; 2], hints: Vec<Hint>) -> QueryDescription {
    QueryDescription { id: 0, scene: "t".into(), position, strategy: Strategy::Closest, hints }
}

fn cell_of(instances: Vec<(InstanceId, &str, [f64; 2])>) -> Cell {
    let reg = ClassRegistry::default();
    let cfg = CellGridConfig::default();
    let real: Vec<CellInstance> = instances
        .into_iter()
        .map(|(id, class, c)| CellInstance {
            source: Some(id),
            class: reg.id(class),
            provenance: Some(if id.is_clustered() { Provenance::Clustered } else { Provenance::Labeled }),
            inside_points: 10,
            center_world: [c[0], c[1], 1.0],
            points: vec![pt(c[0] / 30.0, c[1] / 30.0)],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (instances, num_real) = pad_instances(real, &cfg, &mut rng);
    Cell { id: 0, origin: [0.0, 0.0], size: 30.0, instances, num_real, streets: vec![] }
}

#[test]
fn labeled_hint_matches_by_id() {
    let reg = ClassRegistry::default();
    let cell = cell_of(vec![(InstanceId(4), "building", [5.0, 5.0]), (InstanceId(7), "pole", [10.0, 12.0])]);
    let d = desc([12.0, 12.0], vec![hint(InstanceId(7), "pole", [2.0, 0.0]), hint(InstanceId(99), "pole", [1.0, 1.0])]);
    let m = gt_matches(&d, &cell, &reg, 45.0);
    assert_eq!(m.hint_to_instance, vec![Some(1), None]);
    let t = m.t_gt[0].unwrap();
    assert!((t[0] - 2.0 / 30.0).abs() < 1e-15 && t[1].abs() < 1e-15);
}

#[test]
fn opposite_stuff_hint_is_unmatched() {
    let reg = ClassRegistry::default();
    let veg = reg.id("vegetation").unwrap();
    let target = InstanceId::clustered(crate::querygen::QUERY_SCOPE, veg, 0);
    let in_cell = InstanceId::clustered(0, veg, 0);
    // Target due east of the position, in-cell cluster almost due west.
    let angle = 170f64.to_radians();
    let cell = cell_of(vec![(in_cell, "vegetation", [15.0 + 5.0 * angle.cos(), 15.0 + 5.0 * angle.sin()])]);
    let d = desc([15.0, 15.0], vec![hint(target, "vegetation", [-5.0, 0.0])]);
    assert_eq!(gt_matches(&d, &cell, &reg, 45.0).num_matched(), 0);
    // Same layout at 30 degrees matches.
    let a = 30f64.to_radians();
    let cell = cell_of(vec![(in_cell, "vegetation", [15.0 + 5.0 * a.cos(), 15.0 + 5.0 * a.sin()])]);
    assert_eq!(gt_matches(&d, &cell, &reg, 45.0).num_matched(), 1);
    // Wrong class never matches.
    let cell = cell_of(vec![(in_cell, "fence", [20.0, 15.0])]);
    assert_eq!(gt_matches(&d, &cell, &reg, 45.0).num_matched(), 0);
}

/// Exhaustive oracle: best (count, -angle sum) over all injective partial
/// assignments of stuff hints to stuff instances.
fn brute_stuff(d: &QueryDescription, cell: &Cell, reg: &ClassRegistry) -> (usize, f64) {
    let hints: Vec<usize> = (0..d.hints.len()).filter(|&h| d.hints[h].target.is_clustered()).collect();
    let insts: Vec<usize> = (0..cell.num_real).filter(|&i| cell.instances[i].source.unwrap().is_clustered()).collect();
    let ok = |h: usize, i: usize| -> Option<f64> {
        let hint = &d.hints[h];
        let inst = &cell.instances[i];
        if reg.name(inst.class.unwrap()) != hint.class {
            return None;
        }
        let di = [inst.center_world[0] - d.position[0], inst.center_world[1] - d.position[1]];
        let a = vector_angle([-hint.offset[0], -hint.offset[1]], di);
        (a < 45.0).then_some(a.to_radians())
    };
    fn rec(
        k: usize,
        hints: &[usize],
        insts: &[usize],
        used: &mut Vec<bool>,
        count: usize,
        cost: f64,
        ok: &dyn Fn(usize, usize) -> Option<f64>,
        best: &mut (usize, f64),
    ) {
        if k == hints.len() {
            if count > best.0 || (count == best.0 && cost < best.1) {
                *best = (count, cost);
            }
            return;
        }
        rec(k + 1, hints, insts, used, count, cost, ok, best);
        for (j, &i) in insts.iter().enumerate() {
            if !used[j] {
                if let Some(a) = ok(hints[k], i) {
                    used[j] = true;
                    rec(k + 1, hints, insts, used, count + 1, cost + a, ok, best);
                    used[j] = false;
                }
            }
        }
    }
    let mut best = (0, 0.0);
    rec(0, &hints, &insts, &mut vec![false; insts.len()], 0, 0.0, &ok, &mut best);
    best
}

fn random_layout(seed: u64) -> (QueryDescription, Cell) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reg = ClassRegistry::default();
    let classes = ["vegetation", "fence"];
    let p = [15.0, 15.0];
    let n_inst = rng.gen_range(1..7);
    let insts: Vec<(InstanceId, &str, [f64; 2])> = (0..n_inst)
        .map(|i| {
            let class = classes[rng.gen_range(0..2)];
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(2.0..12.0);
            (InstanceId::clustered(0, reg.id(class).unwrap(), i), class, [p[0] + r * a.cos(), p[1] + r * a.sin()])
        })
        .collect();
    let n_h = rng.gen_range(1..6);
    let hints = (0..n_h)
        .map(|i| {
            let class = classes[rng.gen_range(0..2)];
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(2.0..12.0);
            let id = InstanceId::clustered(crate::querygen::QUERY_SCOPE, reg.id(class).unwrap(), i);
            hint(id, class, [-r * a.cos(), -r * a.sin()])
        })
        .collect();
    (desc(p, hints), cell_of(insts))
}

#[test]
fn stuff_assignment_matches_exhaustive_oracle() {
    let reg = ClassRegistry::default();
    let mut nontrivial = 0;
    for seed in 0..300 {
        let (d, cell) = random_layout(seed);
        let m = gt_matches(&d, &cell, &reg, 45.0);
        let (count, cost) = brute_stuff(&d, &cell, &reg);
        assert_eq!(m.num_matched(), count, "seed {seed}");
        let got: f64 = m
            .pairs()
            .iter()
            .map(|&(h, i)| {
                let c = cell.instances[i].center_world;
                vector_angle([-d.hints[h].offset[0], -d.hints[h].offset[1]], [c[0] - 15.0, c[1] - 15.0]).to_radians()
            })
            .sum();
        assert!((got - cost).abs() < 1e-9, "seed {seed}: {got} vs {cost}");
        if count > 1 {
            nontrivial += 1;
        }
    }
    assert!(nontrivial > 20);
}

proptest! {
    #[test]
    fn matches_are_injective_and_order_symmetric(seed in 0u64..10_000, rot in 0usize..6) {
        let reg = ClassRegistry::default();
        let (d, cell) = random_layout(seed);
        let m = gt_matches(&d, &cell, &reg, 45.0);
        let mut seen = std::collections::BTreeSet::new();
        for i in m.hint_to_instance.iter().flatten() {
            prop_assert!(seen.insert(*i));
            prop_assert!(*i < cell.num_real);
        }
        let mut shuffled = d.clone();
        let k = rot % shuffled.hints.len();
        shuffled.hints.rotate_left(k);
        let m2 = gt_matches(&shuffled, &cell, &reg, 45.0);
        let mut a = m.hint_to_instance.clone();
        a.rotate_left(k);
        prop_assert_eq!(m2.num_matched(), m.num_matched());
        // Optimal assignments are unique for continuous random angles.
        prop_assert_eq!(m2.hint_to_instance, a);
    }
}
