//! Experiment configuration: a TOML file with one table per stage.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use textloc::celldb::CellGridConfig;
use textloc::coarse::TrainConfigCoarse;
use textloc::encoders::{EncoderConfig, PretrainConfig};
use textloc::eval::EvalConfig;
use textloc::fine::{MatcherConfig, TrainConfigFine};
use textloc::querygen::QueryConfig;
use textloc::scene::SceneConfig;

pub const OUT_ENV: &str = "TEXTLOC_OUT";

/// Each split is its own generated scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn scene_seed(self, seed: u64) -> u64 {
        mix(seed, 2 * self.salt())
    }

    pub fn query_seed(self, seed: u64) -> u64 {
        mix(seed, 2 * self.salt() + 1)
    }
}

/// Derives independent seeds from the global one.
pub fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Share of training-scene descriptions held out for validation.
    pub val_fraction: f64,
    /// Initialize both models' point branch from `pretrain-points`.
    pub use_pretrained_points: bool,
    /// Hint count for test-scene descriptions; `None` follows `query.num_hints`.
    pub test_num_hints: Option<usize>,
    /// Positions per location on the test scene; `None` follows the query section.
    pub test_positions_per_location: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            use_pretrained_points: true,
            test_num_hints: None,
            test_positions_per_location: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Emit SVG plots next to the metric tables.
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub query: QueryConfig,
    pub cells: CellGridConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub coarse: TrainConfigCoarse,
    pub fine: TrainConfigFine,
    pub matcher: MatcherConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            query: QueryConfig::default(),
            cells: CellGridConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            coarse: TrainConfigCoarse::default(),
            fine: TrainConfigFine::default(),
            matcher: MatcherConfig::default(),
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Every problem found in a config, one entry per offending key.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration ({} problem(s))", self.0.len())?;
        for p in &self.0 {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigErrors> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigErrors(vec![format!("parse error: {}", e.message())]))?;
        let mut errors = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut root, o) {
                errors.push(e);
            }
        }
        errors.extend(unknown_keys(&root));
        let cfg = if errors.is_empty() {
            decode(root, &mut errors)
        } else {
            None
        };
        match cfg {
            Some(cfg) if errors.is_empty() => {
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Err(ConfigErrors(errors)),
        }
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigErrors> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigErrors(vec![format!("cannot read config {}: {e}", p.display())]))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Query settings for the given split.
    pub fn query_for(&self, split: Split) -> QueryConfig {
        let mut q = self.query.clone();
        if split == Split::Test {
            if let Some(n) = self.data.test_num_hints {
                q.num_hints = n;
            }
            if let Some(n) = self.data.test_positions_per_location {
                q.positions_per_location = n;
            }
        }
        q
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Semantic checks of every section; all failures are reported together.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut bad = Vec::new();
        let mut check = |key: &str, r: Result<(), String>| {
            if let Err(e) = r {
                bad.push(format!("{key}: {e}"));
            }
        };
        check("scene", scene_check(&self.scene));
        check("query", self.query.validate().map_err(|e| e.to_string()));
        check("cells", self.cells.validate().map_err(|e| e.to_string()));
        check("encoder", encoder_check(&self.encoder));
        check("pretrain", pretrain_check(&self.pretrain));
        check("coarse", self.coarse.validate().map_err(|e| e.to_string()));
        check("fine", self.fine.validate().map_err(|e| e.to_string()));
        check("matcher", self.matcher.validate(self.encoder.dim).map_err(|e| e.to_string()));
        check("eval", self.eval.validate().map_err(|e| e.to_string()));
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            bad.push("data.val_fraction: must be in [0, 1)".into());
        }
        if self.data.test_num_hints == Some(0) || self.data.test_positions_per_location == Some(0) {
            bad.push("data: test overrides must be at least 1".into());
        }
        if self.query.cell_size != self.cells.cell_size {
            bad.push("query.cell_size: must equal cells.cell_size".into());
        }
        if self.scene.cell_size != self.cells.cell_size {
            bad.push("scene.cell_size: must equal cells.cell_size".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(bad))
        }
    }
}

fn scene_check(s: &SceneConfig) -> Result<(), String> {
    if s.size.iter().any(|v| !(*v >= 2.0 * s.cell_size)) {
        return Err("size must hold at least two cells per axis".into());
    }
    if s.instance_classes.is_empty() {
        return Err("instance_classes must be non-empty".into());
    }
    Ok(())
}

fn encoder_check(e: &EncoderConfig) -> Result<(), String> {
    let dims = [e.dim, e.point_hidden, e.branch_hidden, e.token_dim, e.hint_hidden];
    if dims.contains(&0) {
        return Err("all sizes must be positive".into());
    }
    Ok(())
}

fn pretrain_check(p: &PretrainConfig) -> Result<(), String> {
    if p.batch_size == 0 || !(p.lr >= 0.0) {
        return Err("batch_size must be positive and lr non-negative".into());
    }
    Ok(())
}

/// `a.b.c=value`, where value is a TOML literal or else a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}`: expected key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override `{spec}`: empty key segment"));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{spec}`: `{p}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Dotted paths present in `root` but not in the default config.
fn unknown_keys(root: &toml::Table) -> Vec<String> {
    let schema = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    let user = serde_json::to_value(root).expect("toml values serialize");
    let mut out = Vec::new();
    walk_unknown(&schema, &user, "", &mut out);
    out
}

fn walk_unknown(schema: &Json, user: &Json, prefix: &str, out: &mut Vec<String>) {
    let (Json::Object(s), Json::Object(u)) = (schema, user) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            None => out.push(format!("{path}: unknown key")),
            Some(sv) => walk_unknown(sv, v, &path, out),
        }
    }
}

/// Decodes each section on its own so type errors in several sections are
/// all reported.
fn decode(mut root: toml::Table, errors: &mut Vec<String>) -> Option<ExperimentConfig> {
    fn take<T: DeserializeOwned + Default>(root: &mut toml::Table, key: &str, errors: &mut Vec<String>) -> T {
        match root.remove(key) {
            None => T::default(),
            Some(v) => match T::deserialize(v) {
                Ok(t) => t,
                Err(e) => {
                    errors.push(format!("{key}: {}", e.message().trim()));
                    T::default()
                }
            },
        }
    }
    let d = ExperimentConfig::default();
    let seed = root.remove("seed").map_or(Some(d.seed), |v| match v.as_integer() {
        Some(i) if i >= 0 => Some(i as u64),
        _ => {
            errors.push("seed: expected a non-negative integer".into());
            None
        }
    });
    let out_dir = root.remove("out_dir").map_or(Some(d.out_dir), |v| match v.as_str() {
        Some(s) => Some(PathBuf::from(s)),
        None => {
            errors.push("out_dir: expected a string".into());
            None
        }
    });
    let cfg = ExperimentConfig {
        seed: seed.unwrap_or_default(),
        out_dir: out_dir.unwrap_or_default(),
        data: take(&mut root, "data", errors),
        scene: take(&mut root, "scene", errors),
        query: take(&mut root, "query", errors),
        cells: take(&mut root, "cells", errors),
        encoder: take(&mut root, "encoder", errors),
        pretrain: take(&mut root, "pretrain", errors),
        coarse: take(&mut root, "coarse", errors),
        fine: take(&mut root, "fine", errors),
        matcher: take(&mut root, "matcher", errors),
        eval: take(&mut root, "eval", errors),
        report: take(&mut root, "report", errors),
    };
    errors.is_empty().then_some(cfg)
}
