//! Turns result records into the summary table: one row per method, one
//! column per test variety, plus a cross-variety average column. Rendered
//! both as aligned plain text (percent points) and as CSV (raw values).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::{average_records, RunRecord};

/// Canonical row order; methods outside this list keep appearance order.
const METHOD_ORDER: [&str; 7] = [
    "en",
    "related",
    "cl",
    "fusion",
    "ensemble",
    "emea-s1",
    "emea-s10",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub metric_name: String,
    /// Column order.
    pub varieties: Vec<String>,
    /// Row order.
    pub methods: Vec<String>,
    /// Seed-averaged value per (method, variety).
    pub cells: BTreeMap<(String, String), f64>,
    /// Cross-variety mean per method (over the varieties present).
    pub row_average: BTreeMap<String, f64>,
}

fn method_rank(m: &str) -> (usize, String) {
    match METHOD_ORDER.iter().position(|k| *k == m) {
        Some(i) => (i, String::new()),
        None => {
            // Budget-trained adapters sort after the fixed rows, by budget.
            if let Some(n) = m.strip_prefix("new-adapter-") {
                if let Ok(n) = n.parse::<u64>() {
                    return (METHOD_ORDER.len(), format!("{n:020}"));
                }
            }
            (METHOD_ORDER.len() + 1, m.to_string())
        }
    }
}

/// Aggregate records into the summary table. Per-seed rows are averaged;
/// pre-averaged rows (no seed) are used as-is and take precedence.
pub fn build_table(records: &[RunRecord]) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::Data("no records to report".to_string()));
    }
    let metric_name = records[0].metric_name.clone();
    if let Some(r) = records.iter().find(|r| r.metric_name != metric_name) {
        return Err(Error::Data(format!(
            "mixed metrics in one report: '{}' and '{}'",
            metric_name, r.metric_name
        )));
    }

    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in average_records(records) {
        cells.insert((r.method.clone(), r.variety.clone()), r.value);
    }
    for r in records.iter().filter(|r| r.seed.is_none()) {
        cells.insert((r.method.clone(), r.variety.clone()), r.value);
    }

    let mut varieties: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in records {
        if !varieties.contains(&r.variety) {
            varieties.push(r.variety.clone());
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    methods.sort_by_key(|m| method_rank(m));

    let mut row_average = BTreeMap::new();
    for m in &methods {
        let vals: Vec<f64> = varieties
            .iter()
            .filter_map(|v| cells.get(&(m.clone(), v.clone())).copied())
            .collect();
        if !vals.is_empty() {
            row_average.insert(m.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }

    Ok(ReportTable {
        metric_name,
        varieties,
        methods,
        cells,
        row_average,
    })
}

impl ReportTable {
    /// Aligned plain-text table; values in percent, two decimals.
    pub fn render_text(&self) -> String {
        let mut headers = vec![format!("method ({})", self.metric_name)];
        headers.extend(self.varieties.iter().cloned());
        headers.push("avg".to_string());

        let fmt = |v: Option<&f64>| match v {
            Some(v) => format!("{:.2}", v * 100.0),
            None => "-".to_string(),
        };
        let mut rows: Vec<Vec<String>> = Vec::new();
        for m in &self.methods {
            let mut row = vec![m.clone()];
            for v in &self.varieties {
                row.push(fmt(self.cells.get(&(m.clone(), v.clone()))));
            }
            row.push(fmt(self.row_average.get(m)));
            rows.push(row);
        }

        let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{:<w$}", c, w = widths[0])
                    } else {
                        format!("{:>w$}", c, w = widths[i])
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = String::new();
        out.push_str(&line(&headers));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    /// CSV with raw metric values at full precision.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("method,metric");
        for v in &self.varieties {
            out.push(',');
            out.push_str(v);
        }
        out.push_str(",avg\n");
        for m in &self.methods {
            out.push_str(m);
            out.push(',');
            out.push_str(&self.metric_name);
            for v in &self.varieties {
                out.push(',');
                match self.cells.get(&(m.clone(), v.clone())) {
                    Some(x) => out.push_str(&x.to_string()),
                    None => out.push('-'),
                }
            }
            out.push(',');
            match self.row_average.get(m) {
                Some(x) => out.push_str(&x.to_string()),
                None => out.push('-'),
            }
            out.push('\n');
        }
        out
    }
}
