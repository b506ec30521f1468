//! Small hand-shaped scenes for tests and sanity runs.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassId, ClassKind, ClassRegistry, Instance, InstanceId, Palette, Point, Provenance, Rect, Scene};

#[derive(Clone, Debug)]
pub struct TiledConfig {
    pub tiles: [usize; 2],
    pub tile_size: f64,
    pub instances_per_tile: usize,
    /// Instances sit on a ring of this radius range around the tile center.
    pub ring: [f64; 2],
    pub points_per_instance: usize,
}

impl Default for TiledConfig {
    fn default() -> Self {
        Self {
            tiles: [4, 8],
            tile_size: 30.0,
            instances_per_tile: 6,
            ring: [4.0, 9.0],
            points_per_instance: 32,
        }
    }
}

/// All multisets of size `k` over `n` symbols, in lexicographic order.
fn multisets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for s in start..n {
            cur.push(s);
            rec(n, k, s, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Grid of square tiles, each holding a ring of instances whose class
/// multiset differs from every other tile's. With cell size and stride equal
/// to the tile size every tile becomes exactly one cell, and the instances
/// closest to a tile center are that tile's own.
///
/// The trajectory visits the tile centers row by row.
pub fn tiled_scene(cfg: &TiledConfig, seed: u64) -> Scene {
    let registry = ClassRegistry::default();
    let palette = Palette::default();
    let classes: Vec<ClassId> = registry
        .ids()
        .filter(|&c| registry.get(c).kind == ClassKind::Instance)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = multisets(classes.len(), cfg.instances_per_tile);
    sets.shuffle(&mut rng);
    let n_tiles = cfg.tiles[0] * cfg.tiles[1];
    assert!(sets.len() >= n_tiles, "not enough distinct class multisets");

    let colors: Vec<[f64; 3]> = palette.entries.iter().map(|e| e.rgb).collect();
    let mut instances = Vec::new();
    let mut trajectory = Vec::new();
    let mut next = 0u64;
    for ty in 0..cfg.tiles[1] {
        for tx in 0..cfg.tiles[0] {
            let t = ty * cfg.tiles[0] + tx;
            let center = [
                (tx as f64 + 0.5) * cfg.tile_size,
                (ty as f64 + 0.5) * cfg.tile_size,
            ];
            trajectory.push(center);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (slot, &ci) in sets[t].iter().enumerate() {
                let a = phase + 2.0 * PI * slot as f64 / cfg.instances_per_tile as f64;
                let r = rng.gen_range(cfg.ring[0]..cfg.ring[1]);
                let c = [center[0] + r * a.cos(), center[1] + r * a.sin()];
                let base = colors[rng.gen_range(0..colors.len())];
                let size = rng.gen_range(0.6..1.6);
                let height = rng.gen_range(1.0..4.0);
                let points: Vec<Point> = (0..cfg.points_per_instance)
                    .map(|_| Point {
                        x: c[0] + rng.gen_range(-size / 2.0..size / 2.0),
                        y: c[1] + rng.gen_range(-size / 2.0..size / 2.0),
                        z: rng.gen_range(0.0..height),
                        r: base[0],
                        g: base[1],
                        b: base[2],
                    })
                    .collect();
                next += 1;
                instances.push(
                    Instance::new(InstanceId(next), classes[ci], points, Provenance::Labeled)
                        .expect("non-empty"),
                );
            }
        }
    }
    // Serpentine order keeps consecutive trajectory points adjacent.
    let w = cfg.tiles[0];
    for (row, chunk) in trajectory.chunks_mut(w).enumerate() {
        if row % 2 == 1 {
            chunk.reverse();
        }
    }
    Scene {
        id: format!("tiled-{seed}"),
        extent: Rect::new(
            [0.0, 0.0],
            [
                cfg.tiles[0] as f64 * cfg.tile_size,
                cfg.tiles[1] as f64 * cfg.tile_size,
            ],
        ),
        classes: registry,
        instances,
        stuff: Vec::new(),
        trajectory,
        seed,
        density_factor: 0.1,
    }
}
