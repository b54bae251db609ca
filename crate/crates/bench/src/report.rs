//! results.csv, results.md and entropy_report.csv.

use std::path::{Path, PathBuf};

use fastadasp::metrics::{cost_table_markdown, RunReport};

use crate::config::{Metric, RunConfig, SweepSpec};
use crate::error::{BenchError, Result};
use crate::run::Cell;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_MD: &str = "results.md";
pub const ENTROPY_CSV: &str = "entropy_report.csv";

pub const ENTROPY_HEADER: [&str; 8] = [
    "policy",
    "target_pct",
    "k_tokens",
    "layer",
    "entropy",
    "transfer_entropy",
    "rank",
    "selected",
];

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| BenchError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| BenchError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn pct_label(t: f64) -> String {
    let p = 100.0 * t;
    if (p - p.round()).abs() < 1e-9 {
        format!("{:.0}%", p)
    } else {
        format!("{p}%")
    }
}

fn target_field(t: Option<f64>) -> String {
    t.map(|t| format!("{:.1}", 100.0 * t)).unwrap_or_default()
}

/// A `failed` row with the cell's identity filled in and the error last.
fn failure_fields(cell: &Cell, base: &RunConfig, error: &str) -> Vec<String> {
    let mut row = vec![String::new(); RunReport::CSV_HEADER.len()];
    let f = &base.fixture;
    row[0] = "failed".into();
    row[1] = cell.policy.to_string();
    row[2] = base.plan.schedule.to_string();
    row[4] = f.audio_len.to_string();
    row[5] = f.text_len.to_string();
    row[6] = f.decode_steps.to_string();
    row[7] = f.seed.to_string();
    row[8] = target_field(cell.target);
    row[RunReport::CSV_HEADER.len() - 1] = error.to_string();
    row
}

pub fn write_results_csv(path: &Path, cells: &[Cell], base: &RunConfig) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RunReport::CSV_HEADER)?;
    for cell in cells {
        match &cell.result {
            Ok(out) => w.write_record(out.report.csv_fields())?,
            Err(e) => w.write_record(failure_fields(cell, base, &e.to_string()))?,
        }
    }
    w.flush().map_err(|source| BenchError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn metric_value(report: &RunReport, metric: Metric) -> String {
    match metric {
        Metric::FlopsReduction => format!("{:.2}", report.flops_reduction_pct),
        Metric::Rtf => format!("{:.4}", report.rtf),
        Metric::Throughput => format!("{:.2}", report.throughput),
        Metric::KvBytes => report.kv_bytes_reduced.to_string(),
        Metric::KTokens => report.k_tokens.to_string(),
    }
}

/// Policies down, targets across, `spec.metric` in each cell.
pub fn sweep_markdown(spec: &SweepSpec, cells: &[Cell]) -> String {
    let f = &spec.base.fixture;
    let mut out = format!(
        "# {} by policy and FLOPs reduction target\n\nL_audio={}, L_text={}, decode_steps={}, schedule={}, seed={}\n\n| Policy | ",
        spec.metric, f.audio_len, f.text_len, f.decode_steps, spec.base.plan.schedule, f.seed
    );
    let labels: Vec<String> = spec.targets.iter().map(|&t| pct_label(t)).collect();
    out.push_str(&labels.join(" | "));
    out.push_str(" |\n|---|");
    out.push_str(&"---|".repeat(labels.len()));
    out.push('\n');
    for policy in &spec.policies {
        out.push_str(&format!("| {policy} |"));
        for &t in &spec.targets {
            let cell = cells
                .iter()
                .find(|c| c.policy == *policy && c.target == Some(t))
                .expect("one cell per policy and target");
            let value = match &cell.result {
                Ok(o) => metric_value(&o.report, spec.metric),
                Err(_) => "failed".into(),
            };
            out.push_str(&format!(" {value} |"));
        }
        out.push('\n');
    }
    out
}

/// One row per candidate layer of every cell that ran layer selection.
/// Returns false when no cell did.
pub fn write_entropy_csv(path: &Path, cells: &[Cell]) -> Result<bool> {
    let reports: Vec<_> = cells
        .iter()
        .filter_map(|c| match &c.result {
            Ok(o) => o.entropy.as_ref().map(|e| (c, e)),
            Err(_) => None,
        })
        .collect();
    if reports.is_empty() {
        return Ok(false);
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ENTROPY_HEADER)?;
    for (cell, rep) in reports {
        for cand in &rep.candidates {
            w.write_record([
                cell.policy.to_string(),
                target_field(cell.target),
                rep.k_tokens.to_string(),
                cand.layer.to_string(),
                format!("{:.12}", cand.entropy),
                format!("{:.12}", cand.transfer_entropy),
                rep.rank_of(cand.layer).map(|r| r.to_string()).unwrap_or_default(),
                (cand.layer == rep.selected()).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|source| BenchError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(true)
}

pub fn write_single(out: &Path, cell: &Cell) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let csv_path = out.join(RESULTS_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(RunReport::CSV_HEADER)?;
    let mut reports = Vec::new();
    if let Ok(o) = &cell.result {
        w.write_record(o.report.csv_fields())?;
        reports.push(o.report.clone());
    }
    w.flush().map_err(|source| BenchError::Write {
        path: csv_path.clone(),
        source,
    })?;
    let md_path = out.join(RESULTS_MD);
    write_text(&md_path, &cost_table_markdown(&reports))?;
    let mut files = vec![csv_path, md_path];
    let entropy_path = out.join(ENTROPY_CSV);
    if write_entropy_csv(&entropy_path, std::slice::from_ref(cell))? {
        files.push(entropy_path);
    }
    Ok(files)
}

pub fn write_sweep(out: &Path, spec: &SweepSpec, cells: &[Cell]) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let csv_path = out.join(RESULTS_CSV);
    write_results_csv(&csv_path, cells, &spec.base)?;
    let md_path = out.join(RESULTS_MD);
    write_text(&md_path, &sweep_markdown(spec, cells))?;
    let mut files = vec![csv_path, md_path];
    let entropy_path = out.join(ENTROPY_CSV);
    if write_entropy_csv(&entropy_path, cells)? {
        files.push(entropy_path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_labels() {
        let labels: Vec<String> = [0.1, 0.2, 0.3, 0.4, 0.5].iter().map(|&t| pct_label(t)).collect();
        assert_eq!(labels.join(" "), "10% 20% 30% 40% 50%");
        assert_eq!(pct_label(0.125), "12.5%");
    }
}
