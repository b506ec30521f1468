//! Metric tables on disk: CSV and JSON always, SVG when asked for.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textloc::eval::{line_plot_svg, recall_plot_svg, write_metrics_csv, MetricsTable, Series};

use crate::CliError;

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`, plus
/// `<dir>/<stem>_<mode>.svg` for each mode in `plot_modes`.
pub fn emit_report(dir: &Path, stem: &str, table: &MetricsTable, plot_modes: &[String]) -> Result<Vec<PathBuf>, CliError> {
    if table.rows.is_empty() {
        return Err(CliError::Usage("cannot emit a report for an empty metrics table".into()));
    }
    create_dir(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let f = fs::File::create(&csv).map_err(|e| CliError::io(&csv, e))?;
    write_metrics_csv(table, BufWriter::new(f)).map_err(|e| CliError::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    write_json(&json, table)?;
    let mut out = vec![csv, json];
    out.extend(plot_modes_svg(dir, stem, table, plot_modes)?);
    Ok(out)
}

pub fn plot_modes_svg(dir: &Path, stem: &str, table: &MetricsTable, modes: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for m in modes {
        if !table.rows.iter().any(|r| &r.mode == m) {
            return Err(CliError::Usage(format!("no metrics for mode `{m}`")));
        }
        let p = dir.join(format!("{stem}_{m}.svg"));
        write_text(&p, &recall_plot_svg(table, m))?;
        out.push(p);
    }
    Ok(out)
}

/// Metric tables of one ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub param: String,
    pub entries: Vec<AblationEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub value: f64,
    pub cells: usize,
    pub table: MetricsTable,
}

pub const ABLATION_CSV_HEADER: &str = "value,cells,mode,k,epsilon,recall";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for e in &self.entries {
            for r in &e.table.rows {
                s.push_str(&format!("{},{},{},{},{},{}\n", e.value, e.cells, r.mode, r.k, r.epsilon, r.recall));
            }
        }
        s
    }

    /// One chart per (mode, ε): recall against the swept value, one line per k.
    pub fn plots(&self) -> Vec<(String, String)> {
        let mut keys: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            for r in &e.table.rows {
                if !keys.iter().any(|(m, eps)| *m == r.mode && *eps == r.epsilon) {
                    keys.push((r.mode.clone(), r.epsilon));
                }
            }
        }
        let mut out = Vec::new();
        for (mode, eps) in keys {
            let mut ks: Vec<usize> = self
                .entries
                .iter()
                .flat_map(|e| e.table.rows.iter())
                .filter(|r| r.mode == mode && r.epsilon == eps)
                .map(|r| r.k)
                .collect();
            ks.sort();
            ks.dedup();
            let series: Vec<Series> = ks
                .iter()
                .map(|&k| Series {
                    label: format!("k = {k}"),
                    points: self
                        .entries
                        .iter()
                        .filter_map(|e| e.table.get(&mode, k, eps).map(|r| (e.value, r)))
                        .collect(),
                })
                .collect();
            let title = format!("{mode}: recall vs {} (epsilon {eps} m)", self.param);
            let name = format!("recall_vs_{}_{mode}_eps{eps}.svg", self.param);
            out.push((name, line_plot_svg(&title, &self.param, "recall", &series)));
        }
        out
    }

    pub fn write(&self, dir: &Path, plots: bool) -> Result<Vec<PathBuf>, CliError> {
        if self.entries.is_empty() {
            return Err(CliError::Usage("ablation produced no tables".into()));
        }
        create_dir(dir)?;
        let csv = dir.join("report.csv");
        write_text(&csv, &self.to_csv())?;
        let json = dir.join("report.json");
        write_json(&json, self)?;
        let mut out = vec![csv, json];
        if plots {
            out.extend(self.write_plots(dir)?);
        }
        Ok(out)
    }

    pub fn write_plots(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        let mut out = Vec::new();
        for (name, svg) in self.plots() {
            let p = dir.join(name);
            write_text(&p, &svg)?;
            out.push(p);
        }
        Ok(out)
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        create_dir(d)?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Stage("report", e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Stage("report", format!("{}: {e}", path.display())))
}
