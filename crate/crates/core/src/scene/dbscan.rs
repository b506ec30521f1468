use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{ClassId, Instance, InstanceId, Point, Provenance};

/// `None` marks noise.
pub type Label = Option<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Neighborhood radius in meters.
    pub eps: f64,
    /// Neighbors (including the point itself) needed for a core point.
    pub min_pts: usize,
    /// Clusters smaller than this are discarded. Expressed at LiDAR density
    /// and scaled by the scene's density factor before use.
    pub min_cluster_points: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: 2.0,
            min_pts: 5,
            min_cluster_points: 250,
        }
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

struct Grid {
    eps: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], eps: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, eps)).or_default().push(i);
        }
        Self { eps, cells }
    }

    fn key(p: &[f64; 3], eps: f64) -> [i64; 3] {
        [
            (p[0] / eps).floor() as i64,
            (p[1] / eps).floor() as i64,
            (p[2] / eps).floor() as i64,
        ]
    }

    /// Indices within `eps` of `points[i]` (including `i`), ascending.
    fn region(&self, points: &[[f64; 3]], i: usize, out: &mut Vec<usize>) {
        out.clear();
        let k = Self::key(&points[i], self.eps);
        let eps2 = self.eps * self.eps;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&j| sq_dist(&points[i], &points[j]) <= eps2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// DBSCAN over 3D coordinates.
///
/// Points are visited in index order; a border point reachable from several
/// clusters keeps the lowest cluster id.
pub fn dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Label> {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unvisited,
        Noise,
        Cluster(usize),
    }
    assert!(eps > 0.0 && min_pts >= 1, "dbscan requires eps > 0 and min_pts >= 1");
    let n = points.len();
    let grid = Grid::new(points, eps);
    let mut state = vec![State::Unvisited; n];
    let mut next_cluster = 0;
    let mut region = Vec::new();
    let mut queue = VecDeque::new();

    for i in 0..n {
        if state[i] != State::Unvisited {
            continue;
        }
        grid.region(points, i, &mut region);
        if region.len() < min_pts {
            state[i] = State::Noise;
            continue;
        }
        let c = next_cluster;
        next_cluster += 1;
        state[i] = State::Cluster(c);
        queue.extend(region.iter().copied().filter(|&j| j != i));
        while let Some(j) = queue.pop_front() {
            match state[j] {
                State::Noise => {
                    state[j] = State::Cluster(c);
                    continue;
                }
                State::Cluster(_) => continue,
                State::Unvisited => {}
            }
            state[j] = State::Cluster(c);
            grid.region(points, j, &mut region);
            if region.len() >= min_pts {
                queue.extend(region.iter().copied());
            }
        }
    }
    state
        .into_iter()
        .map(|s| match s {
            State::Cluster(c) => Some(c),
            _ => None,
        })
        .collect()
}

/// Quadratic reference: core points by exhaustive counting, clusters as
/// connected components of the core graph numbered by their smallest core
/// index, border points to the lowest adjacent cluster.
pub fn dbscan_reference(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Label> {
    let n = points.len();
    let eps2 = eps * eps;
    let adj = |i: usize, j: usize| sq_dist(&points[i], &points[j]) <= eps2;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| adj(i, j)).count() >= min_pts)
        .collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if core[i] && core[j] && adj(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut cluster_of_root = HashMap::new();
    let mut labels = vec![None; n];
    for i in 0..n {
        if core[i] {
            let root = find(&mut parent, i);
            let next = cluster_of_root.len();
            labels[i] = Some(*cluster_of_root.entry(root).or_insert(next));
        }
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = (0..n)
                .filter(|&j| core[j] && adj(i, j))
                .filter_map(|j| labels[j])
                .min();
        }
    }
    labels
}

/// Splits one class's cell-local stuff points into instances. Clusters with
/// fewer than `min_cluster_points` points are dropped; ids derive from
/// `(scope, class, kept-cluster index)`.
pub fn cluster_stuff(
    points: &[Point],
    class: ClassId,
    eps: f64,
    min_pts: usize,
    min_cluster_points: usize,
    scope: u64,
) -> Vec<Instance> {
    if points.is_empty() {
        return Vec::new();
    }
    let coords: Vec<[f64; 3]> = points.iter().map(Point::xyz).collect();
    let labels = dbscan(&coords, eps, min_pts);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<Point>> = vec![Vec::new(); n_clusters];
    for (p, l) in points.iter().zip(&labels) {
        if let Some(c) = l {
            groups[*c].push(*p);
        }
    }
    groups
        .into_iter()
        .filter(|g| g.len() >= min_cluster_points)
        .enumerate()
        .map(|(k, g)| {
            Instance::new(InstanceId::clustered(scope, class, k), class, g, Provenance::Clustered)
                .expect("kept clusters are non-empty")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut ChaCha8Rng, center: [f64; 3], radius: f64, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    center[0] + rng.gen_range(-radius..radius),
                    center[1] + rng.gen_range(-radius..radius),
                    center[2] + rng.gen_range(-radius..radius),
                ]
            })
            .collect()
    }

    fn pt(p: [f64; 3]) -> Point {
        Point { x: p[0], y: p[1], z: p[2], r: 0.2, g: 0.6, b: 0.2 }
    }

    #[test]
    fn separated_blobs_give_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = 1.0;
        let mut pts = blob(&mut rng, [0.0, 0.0, 0.0], 0.5, 40);
        pts.extend(blob(&mut rng, [10.0 * eps, 0.0, 0.0], 0.5, 40));
        let labels = dbscan(&pts, eps, 4);
        assert!(labels.iter().all(Option::is_some));
        let distinct: std::collections::BTreeSet<_> = labels.iter().flatten().collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn chain_is_one_cluster() {
        let eps = 1.0;
        let pts: Vec<[f64; 3]> = (0..50).map(|i| [i as f64 * eps / 2.0, 0.0, 0.0]).collect();
        let labels = dbscan(&pts, eps, 3);
        assert!(labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn empty_input_gives_empty_labels() {
        assert!(dbscan(&[], 1.0, 3).is_empty());
        assert!(cluster_stuff(&[], ClassId(7), 2.0, 5, 10, 0).is_empty());
    }

    #[test]
    fn matches_reference_on_random_sets() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..200)
                .map(|_| [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..2.0)])
                .collect();
            assert_eq!(dbscan(&pts, 1.5, 4), dbscan_reference(&pts, 1.5, 4), "seed {seed}");
        }
    }

    #[test]
    fn gap_wider_than_eps_splits_strip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = Vec::new();
        for _ in 0..400 {
            let x = rng.gen_range(0.0..30.0);
            if (12.5..17.5).contains(&x) {
                continue;
            }
            pts.push(pt([x, rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.5)]));
        }
        let inst = cluster_stuff(&pts, ClassId(7), 2.0, 5, 20, 9);
        assert_eq!(inst.len(), 2);
        assert!(inst.iter().all(|i| i.provenance == Provenance::Clustered));
    }

    #[test]
    fn clusters_below_threshold_are_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let small: Vec<Point> = blob(&mut rng, [0.0, 0.0, 0.0], 1.0, 249).into_iter().map(pt).collect();
        let cfg = ClusterConfig::default();
        assert!(cluster_stuff(&small, ClassId(7), cfg.eps, cfg.min_pts, cfg.min_cluster_points, 0).is_empty());
        let mut big = small.clone();
        big.push(pt([0.1, 0.1, 0.1]));
        let kept = cluster_stuff(&big, ClassId(7), cfg.eps, cfg.min_pts, cfg.min_cluster_points, 0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].points.len(), 250);
    }

    /// Partition of core points, which does not depend on visiting order.
    fn core_partition(pts: &[[f64; 3]], labels: &[Label], eps: f64, min_pts: usize) -> Vec<Vec<[u64; 3]>> {
        let mut groups: HashMap<usize, Vec<[u64; 3]>> = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            let n = pts.iter().filter(|q| sq_dist(&pts[i], q) <= eps * eps).count();
            if n >= min_pts {
                groups
                    .entry(l.unwrap())
                    .or_default()
                    .push(pts[i].map(f64::to_bits));
            }
        }
        let mut out: Vec<Vec<[u64; 3]>> = groups.into_values().collect();
        for g in &mut out {
            g.sort();
        }
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn permutation_invariant_up_to_relabeling(seed in 0u64..1000, shift in 1usize..199) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..200)
                .map(|_| [rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0), 0.0])
                .collect();
            let mut perm = pts.clone();
            perm.rotate_left(shift);
            perm.reverse();
            let a = dbscan(&pts, 1.2, 4);
            let b = dbscan(&perm, 1.2, 4);
            prop_assert_eq!(core_partition(&pts, &a, 1.2, 4), core_partition(&perm, &b, 1.2, 4));
            let noise = |p: &[[f64; 3]], l: &[Label]| {
                let mut v: Vec<[u64; 3]> = p.iter().zip(l).filter(|(_, l)| l.is_none()).map(|(q, _)| q.map(f64::to_bits)).collect();
                v.sort();
                v
            };
            prop_assert_eq!(noise(&pts, &a), noise(&perm, &b));
        }

        #[test]
        fn cluster_stuff_respects_minimum(seed in 0u64..500, min_points in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..150)
                .map(|_| pt([rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..2.0)]))
                .collect();
            for inst in cluster_stuff(&pts, ClassId(8), 2.0, 5, min_points, 1) {
                prop_assert!(inst.points.len() >= min_points);
            }
        }
    }
}
