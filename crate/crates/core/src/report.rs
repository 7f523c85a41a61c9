//! Deterministic tabular and JSON output.

use serde::Serialize;

use crate::real::Precision;

/// Binary64 with 17 significant digits; round-trips exactly.
pub fn num(v: f64) -> String {
    if v == 0.0 {
        // Keep the sign of zero out of artifacts.
        return "0".into();
    }
    format!("{v:.16e}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// CSV with a header row and `\n` line endings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csv {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        Csv { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn header(&self) -> String {
        self.columns.join(",")
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Common summary emitted beside every experiment table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub estimate: Option<f64>,
    pub window: Option<[usize; 2]>,
    pub fit_r2: Option<f64>,
    pub precision_mode: Precision,
}

/// JSON with keys sorted at every level.
pub fn sorted_json<T: Serialize>(value: &T) -> String {
    // serde_json's map type is ordered by key.
    let v = serde_json::to_value(value).expect("serializable");
    let mut s = serde_json::to_string_pretty(&v).expect("json");
    s.push('\n');
    s
}
