//! Run records, result tables and their CSV and markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError};

pub const ARTIFACT_VERSION: &str = concat!("bspde ", env!("CARGO_PKG_VERSION"));

/// Everything needed to reproduce and interpret one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub kind: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub threads: usize,
    pub reproducible: bool,
    /// Run seed plus every seed derived from it.
    pub seeds: BTreeMap<String, u64>,
    /// Wall-clock seconds per phase; excluded from replay comparison.
    pub timings: BTreeMap<String, f64>,
    pub table: ErrorTable,
    /// Kind-specific scalars (losses, residuals, diagnostics).
    pub results: BTreeMap<String, Value>,
}

/// Error measurements indexed by a mesh or step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorTable {
    /// Name of the size column, e.g. `h` or `tau`.
    pub size: String,
    pub columns: Vec<String>,
    /// Whether observed orders are meaningful for these columns.
    pub orders: bool,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub size: f64,
    pub values: Vec<f64>,
    /// Standard errors, `0` where the value is exact.
    pub std_errors: Vec<f64>,
}

impl ErrorTable {
    pub fn new(size: &str, columns: &[&str], orders: bool) -> Self {
        Self {
            size: size.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            orders,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, size: f64, values: Vec<f64>, std_errors: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        debug_assert_eq!(std_errors.len(), self.columns.len());
        self.rows.push(TableRow {
            size,
            values,
            std_errors,
        });
    }

    /// Rows sorted coarse to fine.
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by(|a, b| b.size.total_cmp(&a.size));
        self
    }

    /// `orders[r][c]` against row `r − 1`: `log(e₁/e₂)/log(s₁/s₂)`.
    pub fn observed_orders(&self) -> Vec<Vec<Option<f64>>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                (0..self.columns.len())
                    .map(|c| {
                        if r == 0 || !self.orders {
                            return None;
                        }
                        let prev = &self.rows[r - 1];
                        Some((prev.values[c] / row.values[c]).ln() / (prev.size / row.size).ln())
                    })
                    .collect()
            })
            .collect()
    }

    /// Fixed column order, dot decimals, empty order cells in the first row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec![self.size.clone()];
        for c in &self.columns {
            header.push(c.clone());
            header.push(format!("{c} se"));
            if self.orders {
                header.push(format!("{c} order"));
            }
        }
        out.push_str(
            &header
                .iter()
                .map(|h| csv_field(h))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
        let orders = self.observed_orders();
        for (row, ord) in self.rows.iter().zip(&orders) {
            let mut cells = vec![num(row.size)];
            for c in 0..self.columns.len() {
                cells.push(num(row.values[c]));
                cells.push(num(row.std_errors[c]));
                if self.orders {
                    cells.push(ord[c].map(num).unwrap_or_default());
                }
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Markdown in the layout `h | e₁ | Order | e₂ | Order`, with `--` for
    /// the first row's orders.
    pub fn to_markdown(&self) -> String {
        let mut head = vec![self.size.clone()];
        for c in &self.columns {
            head.push(c.clone());
            if self.orders {
                head.push("Order".to_string());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", head.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(head.len()));
        let orders = self.observed_orders();
        for (row, ord) in self.rows.iter().zip(&orders) {
            let mut cells = vec![size_label(&self.size, row.size)];
            for c in 0..self.columns.len() {
                cells.push(format!("{:.2e}", row.values[c]));
                if self.orders {
                    cells.push(
                        ord[c]
                            .map(|o| format!("{o:.2}"))
                            .unwrap_or_else(|| "--".to_string()),
                    );
                }
            }
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shortest round-tripping decimal; never locale dependent.
fn num(x: f64) -> String {
    format!("{x:e}")
}

fn size_label(name: &str, s: f64) -> String {
    let inv = 1.0 / s;
    if name == "h" && (inv - inv.round()).abs() < 1e-9 * inv {
        format!("1/{}", inv.round() as u64)
    } else {
        format!("{s:.4e}")
    }
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let rec: Self = serde_json::from_str(&text).map_err(|e| CliError::Record {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        rec.config.validate()?;
        Ok(rec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("records serialize")
    }

    /// Comparable view: everything except wall-clock timings and the
    /// thread count, which may legitimately differ between replays.
    pub fn comparable(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("records serialize");
        if let Value::Object(m) = &mut v {
            m.remove("timings");
            m.remove("threads");
        }
        v
    }
}

/// First path at which two JSON values differ, with both leaves rendered.
pub fn first_difference(a: &Value, b: &Value, path: &str) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(p), Some(q)) => {
                        if let Some(d) = first_difference(p, q, &sub) {
                            return Some(d);
                        }
                    }
                    (p, q) => return Some((sub, render(p), render(q))),
                }
            }
            None
        }
        (Value::Array(x), Value::Array(y)) => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                if let Some(d) = first_difference(p, q, &format!("{path}[{i}]")) {
                    return Some(d);
                }
            }
            if x.len() != y.len() {
                return Some((
                    format!("{path}.len"),
                    x.len().to_string(),
                    y.len().to_string(),
                ));
            }
            None
        }
        (Value::Number(p), Value::Number(q)) => {
            // Compare as f64 bit patterns so 1 and 1.0 agree but any
            // rounding difference is reported.
            let same = match (p.as_f64(), q.as_f64()) {
                (Some(s), Some(t)) if p.is_f64() || q.is_f64() => s.to_bits() == t.to_bits(),
                _ => p == q,
            };
            (!same).then(|| (path.to_string(), p.to_string(), q.to_string()))
        }
        _ => (a != b).then(|| (path.to_string(), a.to_string(), b.to_string())),
    }
}

fn render(v: Option<&Value>) -> String {
    v.map(|v| v.to_string())
        .unwrap_or_else(|| "<missing>".to_string())
}

/// Merges the tables of records of one kind into a single comparison table.
pub fn merge(records: &[RunRecord]) -> Result<ErrorTable, CliError> {
    let first = records
        .first()
        .ok_or_else(|| CliError::InvalidArgument("report needs at least one record".into()))?;
    let mut table = ErrorTable {
        rows: Vec::new(),
        ..first.table.clone()
    };
    for r in records {
        if r.kind != first.kind {
            return Err(CliError::InvalidArgument(format!(
                "records mix experiment kinds `{}` and `{}`",
                first.kind, r.kind
            )));
        }
        if r.table.columns != table.columns || r.table.size != table.size {
            return Err(CliError::InvalidArgument(
                "records have different table columns".into(),
            ));
        }
        table.rows.extend(r.table.rows.iter().cloned());
    }
    Ok(table.sorted())
}
