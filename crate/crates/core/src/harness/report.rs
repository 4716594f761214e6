use std::fmt::Write as _;
use std::path::Path;

use super::config::Method;
use super::run::{write_atomic, RunManifest};
use crate::error::{Error, Result};

/// Rows of labelled cells; `None` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(r, _)| r == row)?.1[c]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("method,{}\n", self.columns.join(","));
        for (label, cells) in &self.rows {
            let cells: Vec<String> = cells
                .iter()
                .map(|c| c.map(|v| v.to_string()).unwrap_or_default())
                .collect();
            let _ = writeln!(s, "{label},{}", cells.join(","));
        }
        s
    }

    pub fn to_text(&self, percent: bool) -> String {
        let fmt = |c: &Option<f64>| match c {
            Some(v) if percent => format!("{v:.1}%"),
            Some(v) => format!("{v:.4}"),
            None => "-".into(),
        };
        let lw = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let body: Vec<Vec<String>> = self.rows.iter().map(|(_, c)| c.iter().map(fmt).collect()).collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, h)| body.iter().map(|r| r[j].len()).chain([h.len()]).max().unwrap_or(0))
            .collect();
        let mut s = format!("{:<lw$}", "method");
        for (h, w) in self.columns.iter().zip(&widths) {
            let _ = write!(s, "  {h:>w$}");
        }
        s.push('\n');
        for ((label, _), cells) in self.rows.iter().zip(&body) {
            let _ = write!(s, "{label:<lw$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(s, "  {c:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tables {
    /// Per-dataset mean regret with `Avg` and `Max` columns.
    pub regret: Table,
    /// Regret as a percentage of the DFL row.
    pub ratio: Option<Table>,
    /// Hashes of the manifests every cell comes from.
    pub sources: Vec<String>,
}

fn avg_max(cells: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = cells.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    (
        Some(v.iter().sum::<f64>() / v.len() as f64),
        Some(v.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
    )
}

pub fn report_tables(manifests: &[RunManifest]) -> Result<Tables> {
    if manifests.is_empty() {
        return Err(Error::Argument("report needs at least one manifest".into()));
    }
    let mut datasets: Vec<String> = Vec::new();
    for m in manifests {
        for id in &m.test_ids {
            if !datasets.contains(id) {
                datasets.push(id.clone());
            }
        }
    }
    let mut columns = datasets.clone();
    columns.extend(["Avg".to_string(), "Max".to_string()]);
    let rows: Vec<(String, Vec<Option<f64>>)> = manifests
        .iter()
        .map(|m| {
            let mut cells: Vec<Option<f64>> = datasets.iter().map(|d| m.mean_regret(d)).collect();
            let (avg, max) = avg_max(&cells);
            cells.extend([avg, max]);
            (m.label.clone(), cells)
        })
        .collect();
    let ratio = match manifests.iter().position(|m| m.method == Method::Dfl) {
        None => {
            log::warn!("no DFL run among the manifests; ratio table skipped");
            None
        }
        Some(k) => {
            let base = rows[k].1.clone();
            let ratio_rows = rows
                .iter()
                .map(|(label, cells)| {
                    let r = cells
                        .iter()
                        .zip(&base)
                        .map(|(c, b)| match (c, b) {
                            (Some(c), Some(b)) if *b != 0.0 => Some(c / b * 100.0),
                            _ => None,
                        })
                        .collect();
                    (label.clone(), r)
                })
                .collect();
            Some(Table {
                columns: columns.clone(),
                rows: ratio_rows,
            })
        }
    };
    Ok(Tables {
        regret: Table { columns, rows },
        ratio,
        sources: manifests.iter().map(RunManifest::hash).collect(),
    })
}

/// Writes `regret.{csv,txt}` and, when present, `ratio.{csv,txt}`.
pub fn write_tables(tables: &Tables, dir: &Path) -> Result<()> {
    let header = format!("# manifests: {}\n", tables.sources.join(","));
    write_atomic(&dir.join("regret.csv"), (header.clone() + &tables.regret.to_csv()).as_bytes())?;
    write_atomic(&dir.join("regret.txt"), (header.clone() + &tables.regret.to_text(false)).as_bytes())?;
    if let Some(r) = &tables.ratio {
        write_atomic(&dir.join("ratio.csv"), (header.clone() + &r.to_csv()).as_bytes())?;
        write_atomic(&dir.join("ratio.txt"), (header + &r.to_text(true)).as_bytes())?;
    }
    Ok(())
}
