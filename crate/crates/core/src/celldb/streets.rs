use serde::{Deserialize, Serialize};

use super::CellError;
use crate::scene::Rect;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub rect: Rect,
}

/// Partition of the scene extent into named rectangular districts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreetMap {
    pub extent: Rect,
    pub regions: Vec<Region>,
}

impl StreetMap {
    /// `n[0] × n[1]` equal districts named `street-<row>-<col>`.
    pub fn grid(extent: Rect, n: [usize; 2]) -> Self {
        let nx = n[0].max(1);
        let ny = n[1].max(1);
        let w = extent.width() / nx as f64;
        let h = extent.height() / ny as f64;
        let mut regions = Vec::with_capacity(nx * ny);
        for r in 0..ny {
            for c in 0..nx {
                let min = [extent.min[0] + c as f64 * w, extent.min[1] + r as f64 * h];
                let max = [
                    if c + 1 == nx { extent.max[0] } else { min[0] + w },
                    if r + 1 == ny { extent.max[1] } else { min[1] + h },
                ];
                regions.push(Region {
                    name: format!("street-{r}-{c}"),
                    rect: Rect::new(min, max),
                });
            }
        }
        Self { extent, regions }
    }

    /// Region containing `p`. Regions are treated as half-open on their far
    /// edges except along the extent border, so every position inside the
    /// extent has exactly one region.
    pub fn region_of(&self, p: [f64; 2]) -> Result<&str, CellError> {
        let inside = |v: f64, lo: f64, hi: f64, border: f64| v >= lo && (v < hi || (hi == border && v <= hi));
        self.regions
            .iter()
            .find(|r| {
                inside(p[0], r.rect.min[0], r.rect.max[0], self.extent.max[0])
                    && inside(p[1], r.rect.min[1], r.rect.max[1], self.extent.max[1])
            })
            .map(|r| r.name.as_str())
            .ok_or(CellError::NoStreet(p))
    }

    /// Names of all regions a rectangle touches (closed intersection).
    pub fn regions_overlapping(&self, rect: &Rect) -> Vec<String> {
        self.regions
            .iter()
            .filter(|r| {
                rect.min[0] <= r.rect.max[0]
                    && r.rect.min[0] <= rect.max[0]
                    && rect.min[1] <= r.rect.max[1]
                    && r.rect.min[1] <= rect.max[1]
            })
            .map(|r| r.name.clone())
            .collect()
    }
}
