//! Method-comparison reports: per-method, per-task evaluation losses with a
//! trailing average column, emitted as machine JSON and an aligned text
//! table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mergeforge_core::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    /// One loss per task, in `Report::tasks` order.
    pub losses: Vec<f64>,
    pub avg: f64,
}

impl MethodRow {
    pub fn new(method: String, losses: Vec<f64>) -> Self {
        let avg = losses.iter().sum::<f64>() / losses.len() as f64;
        MethodRow { method, losses, avg }
    }
}

/// Wall-clock lives outside the serialized payload (and outside equality):
/// it is written to the timings sidecar so report bytes stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Report {
    pub tasks: Vec<String>,
    pub rows: Vec<MethodRow>,
    pub config_echo: serde_json::Value,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl PartialEq for Report {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks
            && self.config_echo == other.config_echo
            && self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.method == b.method && a.losses == b.losses && a.avg == b.avg)
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Report> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned text table: methods as rows, tasks as columns, Avg last.
    pub fn render_table(&self) -> String {
        let mut headers = vec!["method".to_string()];
        headers.extend(self.tasks.iter().cloned());
        headers.push("Avg".to_string());

        let mut grid = vec![headers];
        for row in &self.rows {
            let mut cells = vec![row.method.clone()];
            cells.extend(row.losses.iter().map(|v| format!("{v:.4}")));
            cells.push(format!("{:.4}", row.avg));
            grid.push(cells);
        }

        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if c == 0 {
                    out.push_str(&format!("{cell:<width$}", width = widths[0]));
                } else {
                    out.push_str(&format!("  {cell:>width$}", width = widths[c]));
                }
            }
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}

/// Write `report.json` and `report.txt` under `dir`; bytes are a pure
/// function of the report payload.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let json_path = dir.join("report.json");
    let txt_path = dir.join("report.txt");
    fs::write(&json_path, report.to_json())?;
    fs::write(&txt_path, report.render_table())?;
    Ok((json_path, txt_path))
}
