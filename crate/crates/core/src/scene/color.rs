use serde::{Deserialize, Serialize};

/// Named RGB anchors used both to paint synthetic instances and to name an
/// instance's color in a description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [f64; 3],
}

impl Default for Palette {
    fn default() -> Self {
        let entries = [
            ("gray", [0.5, 0.5, 0.5]),
            ("black", [0.0, 0.0, 0.0]),
            ("white", [1.0, 1.0, 1.0]),
            ("red", [0.8, 0.15, 0.15]),
            ("green", [0.2, 0.6, 0.2]),
            ("blue", [0.15, 0.3, 0.8]),
            ("yellow", [0.9, 0.85, 0.2]),
            ("brown", [0.5, 0.32, 0.18]),
            ("orange", [0.95, 0.55, 0.1]),
        ];
        Self {
            entries: entries
                .into_iter()
                .map(|(name, rgb)| PaletteEntry {
                    name: name.to_string(),
                    rgb,
                })
                .collect(),
        }
    }
}

impl Palette {
    pub fn rgb(&self, name: &str) -> Option<[f64; 3]> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.rgb)
    }

    /// Name of the anchor closest to `rgb` in Euclidean distance; ties go to
    /// the earlier entry.
    pub fn nearest(&self, rgb: [f64; 3]) -> &str {
        let mut best = (f64::INFINITY, "");
        for e in &self.entries {
            let d: f64 = (0..3).map(|i| (e.rgb[i] - rgb[i]).powi(2)).sum();
            if d < best.0 {
                best = (d, &e.name);
            }
        }
        best.1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}
