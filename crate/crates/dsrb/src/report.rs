//! Table-shaped summaries of many runs, rendered as CSV, JSON or Markdown.

use std::fmt::Write as _;
use std::path::Path;

use dsrb_core::metrics::{aggregate_proportions, EvalReport};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// One evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Headline metrics at one proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub proportion: f64,
    pub map: f64,
    pub of1: f64,
    pub cf1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub map: f64,
    pub of1: f64,
    pub cf1: f64,
}

/// A method at one seed, or the per-cell median over seeds (`seed: None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub seed: Option<u64>,
    pub cells: Vec<Cell>,
    pub average: Averages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub proportions: Vec<f64>,
    pub rows: Vec<Row>,
    /// Full per-run reports, including per-category APs.
    pub runs: Vec<RunRecord>,
}

/// Median; the mean of the middle pair for an even count.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn averages(cells: &[Cell]) -> Averages {
    let n = cells.len() as f64;
    Averages {
        map: cells.iter().map(|c| c.map).sum::<f64>() / n,
        of1: cells.iter().map(|c| c.of1).sum::<f64>() / n,
        cf1: cells.iter().map(|c| c.cf1).sum::<f64>() / n,
    }
}

impl Report {
    /// Groups runs by method (in `methods` order) and seed, adding a median
    /// row per method when there is more than one seed.
    pub fn from_runs(name: &str, proportions: &[f64], methods: &[String], runs: Vec<RunRecord>) -> Result<Self> {
        let mut rows = Vec::new();
        for method in methods {
            let mut seeds: Vec<u64> = runs.iter().filter(|r| &r.method == method).map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let mut seed_rows = Vec::new();
            for &seed in &seeds {
                let mut reports = Vec::new();
                for &p in proportions {
                    let r = runs
                        .iter()
                        .find(|r| &r.method == method && r.seed == seed && r.report.proportion == Some(p))
                        .ok_or_else(|| Error::Config(format!("missing run {method} p={p} seed={seed}")))?;
                    reports.push(r.report.clone());
                }
                let agg = aggregate_proportions(&reports)?;
                seed_rows.push(Row {
                    method: method.clone(),
                    seed: Some(seed),
                    cells: reports
                        .iter()
                        .zip(proportions)
                        .map(|(r, &p)| Cell {
                            proportion: p,
                            map: r.map,
                            of1: r.of1(),
                            cf1: r.cf1(),
                        })
                        .collect(),
                    average: Averages {
                        map: agg.map,
                        of1: agg.of1,
                        cf1: agg.cf1,
                    },
                });
            }
            if seed_rows.len() > 1 {
                let cells: Vec<Cell> = proportions
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let pick = |f: fn(&Cell) -> f64| median(&seed_rows.iter().map(|r| f(&r.cells[i])).collect::<Vec<_>>());
                        Cell {
                            proportion: p,
                            map: pick(|c| c.map),
                            of1: pick(|c| c.of1),
                            cf1: pick(|c| c.cf1),
                        }
                    })
                    .collect();
                let average = averages(&cells);
                seed_rows.push(Row {
                    method: method.clone(),
                    seed: None,
                    cells,
                    average,
                });
            }
            rows.extend(seed_rows);
        }
        Ok(Self {
            name: name.into(),
            proportions: proportions.to_vec(),
            rows,
            runs,
        })
    }

    /// The row summarizing `method`: the median row, or the only seed row.
    pub fn summary(&self, method: &str) -> Option<&Row> {
        let mine: Vec<&Row> = self.rows.iter().filter(|r| r.method == method).collect();
        mine.iter().find(|r| r.seed.is_none()).or(mine.first()).copied()
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["method".to_string(), "seed".to_string()];
        h.extend(self.proportions.iter().map(|p| format!("map@{}%", (p * 100.0).round())));
        h.extend(["avg_map", "avg_of1", "avg_cf1"].map(String::from));
        h
    }

    fn row_fields(r: &Row) -> Vec<String> {
        let pct = |x: f64| format!("{:.4}", x * 100.0);
        let mut f = vec![r.method.clone(), r.seed.map_or("median".into(), |s| s.to_string())];
        f.extend(r.cells.iter().map(|c| pct(c.map)));
        f.extend([pct(r.average.map), pct(r.average.of1), pct(r.average.cf1)]);
        f
    }

    /// Percentages, one row per method and seed.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::row_fields(r).join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: "<report>".into(),
            source,
        })?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", Self::row_fields(r).join(" | "));
        }
        out
    }

    /// Writes `report.csv`, `report.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_text(&dir.join("report.csv"), &self.to_csv())?;
        io::write_text(&dir.join("report.json"), &self.to_json()?)?;
        io::write_text(&dir.join("report.md"), &self.to_markdown())
    }

    pub fn read(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}
