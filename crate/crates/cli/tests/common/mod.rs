#![allow(dead_code)]

use std::path::Path;

use textloc_cli::ExperimentConfig;

pub const SMOKE: &str = include_str!("../../../../configs/smoke.toml");

pub fn smoke(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(SMOKE, &[]).unwrap();
    c.out_dir = out.to_path_buf();
    c
}

pub fn smoke_with(out: &Path, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let mut c = ExperimentConfig::from_toml(SMOKE, &o).unwrap();
    c.out_dir = out.to_path_buf();
    c
}
