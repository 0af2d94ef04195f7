//! CSV and JSON serialisation of sweep reports.
//!
//! CSV columns are fixed: `lambda,ens_acc,ens_ce,single_acc,single_ce,seeds,wall_s`.
//! Seeds are joined with `;`, missing accuracies are empty, and every number
//! is written with 17 significant digits so it parses back to the same `f64`.
//! JSON carries the resolved configuration and per-seed results as well.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::ReportFormat;
use crate::error::{CliError, Result};
use crate::experiment::SweepReport;

pub const CSV_HEADER: &str = "lambda,ens_acc,ens_ce,single_acc,single_ce,seeds,wall_s";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn to_csv(report: &SweepReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let seeds = row
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            num(row.lambda),
            opt_num(row.ens_acc),
            num(row.ens_ce),
            opt_num(row.single_acc),
            num(row.single_ce),
            seeds,
            num(row.wall_s)
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn to_json(report: &SweepReport) -> String {
    serde_json::to_string_pretty(report).expect("reports contain only finite numbers")
}

pub fn from_json(text: &str) -> Result<SweepReport> {
    serde_json::from_str(text).map_err(|e| CliError::validation("report", e.to_string()))
}

pub fn write_report(report: &SweepReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Json => to_json(report),
    };
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Fixed-width summary for the terminal.
pub fn render_table(report: &SweepReport) -> String {
    let (acc, err) = match report.mode {
        crate::config::Mode::Ncl => ("", "mse"),
        _ => ("acc", "ce"),
    };
    let mut out = format!(
        "{:>8}  {:>10}  {:>10}  {:>10}  {:>10}  {:>8}\n",
        "lambda",
        format!("ens_{acc}"),
        format!("ens_{err}"),
        format!("single_{acc}"),
        format!("single_{err}"),
        "wall_s"
    );
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for row in &report.rows {
        writeln!(
            out,
            "{:>8}  {:>10}  {:>10.4}  {:>10}  {:>10.4}  {:>8.1}",
            row.lambda,
            cell(row.ens_acc),
            row.ens_ce,
            cell(row.single_acc),
            row.single_ce,
            row.wall_s
        )
        .expect("writing to a String cannot fail");
    }
    out
}
