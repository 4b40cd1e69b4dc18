use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::run::RunSummary;
use crate::error::{Error, Result};
use crate::eval::CUTOFFS;
use crate::model::Causality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub protocol: String,
    pub metric: String,
    pub first: f64,
    pub second: f64,
    /// `(second - first) / first`; `None` when `first` is zero.
    pub improvement: Option<f64>,
}

/// Paired metric table with a relative-improvement column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub first_label: String,
    pub second_label: String,
    pub rows: Vec<CompareRow>,
}

fn relative(first: f64, second: f64) -> Option<f64> {
    (first != 0.0).then(|| (second - first) / first)
}

fn percent(x: Option<f64>) -> String {
    match x {
        Some(0.0) => "0.00%".into(),
        Some(v) => format!("{:+.2}%", 100.0 * v),
        None => "n/a".into(),
    }
}

/// Compares two runs' test metrics. An AE/AR pair is always ordered AE
/// first, so the improvement column reads `(AR - AE) / AE`.
pub fn compare_runs(a: &RunSummary, b: &RunSummary) -> Result<CompareTable> {
    let (first, second) = if a.causality == Causality::Ar && b.causality == Causality::Ae {
        (b, a)
    } else {
        (a, b)
    };
    let label = |s: &RunSummary, fallback: &str| {
        if a.causality != b.causality {
            s.causality.label().to_string()
        } else {
            format!("{} ({fallback})", s.causality)
        }
    };
    let mut rows = Vec::new();
    for ra in &first.test {
        let rb = second
            .test
            .iter()
            .find(|r| r.protocol == ra.protocol)
            .ok_or_else(|| {
                Error::contract(format!("second run lacks protocol {}", ra.protocol.label()))
            })?;
        for (name, get) in [("Recall", 0), ("NDCG", 1)] {
            for k in CUTOFFS {
                let (x, y) = if get == 0 {
                    (ra.recall_at(k), rb.recall_at(k))
                } else {
                    (ra.ndcg_at(k), rb.ndcg_at(k))
                };
                rows.push(CompareRow {
                    protocol: ra.protocol.label(),
                    metric: format!("{name}@{k}"),
                    first: x,
                    second: y,
                    improvement: relative(x, y),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::contract("runs have no test metrics to compare"));
    }
    Ok(CompareTable {
        first_label: label(first, "A"),
        second_label: label(second, "B"),
        rows,
    })
}

impl CompareTable {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<16} {:<10} {:>10} {:>10} {:>9}\n",
            "protocol", "metric", self.first_label, self.second_label, "Improv."
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:<10} {:>10.4} {:>10.4} {:>9}",
                r.protocol,
                r.metric,
                r.first,
                r.second,
                percent(r.improvement)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "protocol,metric,{},{},improvement\n",
            self.first_label, self.second_label
        );
        for r in &self.rows {
            let imp = r.improvement.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{imp}",
                r.protocol, r.metric, r.first, r.second
            );
        }
        s
    }
}
