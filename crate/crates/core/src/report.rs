//! Plain-text rendering of metric reports, loss curves, and point
//! clouds.

use crate::metrics::Metrics;
use crate::train::LossPoint;
use std::fmt::Write as _;

/// Machine-readable lines, one metric per line: `bin metric value`.
/// Values print in full f64 round-trip precision.
pub fn records(rows: &[(String, Metrics)]) -> String {
    let mut out = String::new();
    for (label, m) in rows {
        for (name, value) in Metrics::NAMES.iter().zip(m.values()) {
            let _ = writeln!(out, "{label} {name} {value}");
        }
    }
    out
}

/// Human-readable aligned table, one row per bin.
pub fn table(rows: &[(String, Metrics)]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once("bin".len()))
        .max()
        .unwrap_or(3);
    let mut out = format!("{:<label_w$}", "bin");
    for name in Metrics::NAMES {
        let _ = write!(out, " {name:>9}");
    }
    out.push('\n');
    for (label, m) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for value in m.values() {
            let _ = write!(out, " {value:>9.4}");
        }
        out.push('\n');
    }
    out
}

/// Comma-separated loss curve: header then one `iter,lr,loss` row per
/// recorded iteration.
pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("iter,lr,loss\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.iter, p.lr, p.loss);
    }
    out
}
