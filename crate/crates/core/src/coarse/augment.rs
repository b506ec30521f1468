//! Training-time augmentation for text-to-cell pairs.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::celldb::CellInstance;
use crate::querygen::{mirror_direction, render_hint, QueryDescription};

/// Mirrors cell geometry (`x → 1 − x` and/or `y → 1 − y` in the normalized
/// frame) and the matching direction words of the description.
pub fn flip_pair(
    cell: &mut [CellInstance],
    desc: &mut QueryDescription,
    flip_x: bool,
    flip_y: bool,
) {
    if !flip_x && !flip_y {
        return;
    }
    for inst in cell.iter_mut().filter(|i| !i.is_padding()) {
        for p in &mut inst.points {
            if flip_x {
                p.x = 1.0 - p.x;
            }
            if flip_y {
                p.y = 1.0 - p.y;
            }
        }
    }
    for h in &mut desc.hints {
        h.direction = mirror_direction(&h.direction, flip_x, flip_y);
        if flip_x {
            h.offset[0] = -h.offset[0];
        }
        if flip_y {
            h.offset[1] = -h.offset[1];
        }
        h.text = render_hint(&h.direction, &h.color, &h.class);
    }
}

/// Rotates each real instance about the vertical axis through its own
/// center by an independent random angle.
pub fn rotate_instances(cell: &mut [CellInstance], rng: &mut impl Rng) {
    for inst in cell.iter_mut().filter(|i| !i.is_padding()) {
        let c = inst.center_norm();
        let (s, co) = rng.gen_range(0.0..std::f64::consts::TAU).sin_cos();
        for p in &mut inst.points {
            let dx = p.x - c[0];
            let dy = p.y - c[1];
            p.x = c[0] + co * dx - s * dy;
            p.y = c[1] + s * dx + co * dy;
        }
    }
}

pub fn shuffle_hints(desc: &mut QueryDescription, rng: &mut impl Rng) {
    desc.hints.shuffle(rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::querygen::{direction_word, Hint, Strategy};
    use crate::scene::{InstanceId, Point};
    use rand::SeedableRng;

    fn inst(x: f64, y: f64) -> CellInstance {
        CellInstance {
            source: Some(InstanceId(1)),
            class: None,
            provenance: None,
            inside_points: 2,
            center_world: [0.0; 3],
            points: vec![
                Point { x, y, z: 0.0, r: 0.0, g: 0.0, b: 0.0 },
                Point { x: x + 0.1, y, z: 0.0, r: 0.0, g: 0.0, b: 0.0 },
            ],
        }
    }

    #[test]
    fn flips_keep_directions_consistent_with_offsets() {
        let offset = [3.0, 1.0];
        let dir = direction_word(offset);
        let mut d = QueryDescription {
            id: 0,
            scene: "s".into(),
            position: [0.0, 0.0],
            strategy: Strategy::Closest,
            hints: vec![Hint {
                text: render_hint(dir, "red", "pole"),
                target: InstanceId(1),
                class: "pole".into(),
                direction: dir.into(),
                color: "red".into(),
                offset,
            }],
        };
        let mut cell = vec![inst(0.2, 0.3)];
        flip_pair(&mut cell, &mut d, true, true);
        assert_eq!(d.hints[0].direction, direction_word(d.hints[0].offset));
        assert_eq!(d.hints[0].text, "The pose is west of a red pole.");
        assert!((cell[0].points[0].x - 0.8).abs() < 1e-12);
        assert!((cell[0].points[0].y - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rotation_keeps_center() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut cell = vec![inst(0.4, 0.4)];
        let before = cell[0].center_norm();
        rotate_instances(&mut cell, &mut rng);
        let after = cell[0].center_norm();
        for k in 0..3 {
            assert!((before[k] - after[k]).abs() < 1e-12);
        }
    }
}
