//! Report emission: Markdown and CSV tables with deterministic bytes, plus raw
//! per-run JSON logs that `report` can re-render.

use super::experiments::{aggregate, AggRow, RunRecord};
use crate::error::{GttaError, Result};
use std::path::Path;

/// Write `<stem>.md` and `<stem>.csv` for a set of run records. Errors before
/// touching the filesystem when there is nothing to report.
pub fn write_report(
    records: &[RunRecord],
    settings: &[&str],
    title: &str,
    md_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    if records.is_empty() {
        return Err(GttaError::EmptyEval);
    }
    let rows = aggregate(records, settings);
    if rows.is_empty() {
        return Err(GttaError::EmptyEval);
    }
    std::fs::write(csv_path, render_csv(&rows))?;
    std::fs::write(md_path, render_markdown(&rows, settings, title))?;
    Ok(())
}

pub fn render_csv(rows: &[AggRow]) -> String {
    let mut out = String::from("setting,domain,acc_mean,acc_std,auc_mean,auc_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2}\n",
            r.setting, r.domain, r.acc_mean, r.acc_std, r.auc_mean, r.auc_std
        ));
    }
    out
}

/// Parse a CSV produced by `render_csv` (used for round-trip checks and by
/// downstream tooling).
pub fn parse_csv(text: &str) -> Result<Vec<AggRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(GttaError::ConfigParse(format!("bad csv line: {line}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| GttaError::ConfigParse(format!("bad number {s}: {e}")))
        };
        rows.push(AggRow {
            setting: parts[0].to_string(),
            domain: parts[1].to_string(),
            acc_mean: num(parts[2])?,
            acc_std: num(parts[3])?,
            auc_mean: num(parts[4])?,
            auc_std: num(parts[5])?,
        });
    }
    Ok(rows)
}

/// One table in the layout of the source tables: rows are settings, columns are
/// domains plus the average, each cell "ACC/AUC".
pub fn render_markdown(rows: &[AggRow], settings: &[&str], title: &str) -> String {
    let mut domains: Vec<String> = Vec::new();
    for r in rows {
        if !domains.contains(&r.domain) {
            domains.push(r.domain.clone());
        }
    }
    let mut out = format!("# {title}\n\nACC/AUC per target domain, mean ± std over seeds.\n\n");
    out.push_str("| setting |");
    for d in &domains {
        out.push_str(&format!(" {d} |"));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &domains {
        out.push_str("---|");
    }
    out.push('\n');
    for &setting in settings {
        let setting_rows: Vec<&AggRow> = rows.iter().filter(|r| r.setting == setting).collect();
        if setting_rows.is_empty() {
            continue;
        }
        out.push_str(&format!("| {setting} |"));
        for d in &domains {
            let cell = setting_rows
                .iter()
                .find(|r| &r.domain == d)
                .map(|r| {
                    format!(
                        " {:.2}±{:.2}/{:.2}±{:.2} |",
                        r.acc_mean, r.acc_std, r.auc_mean, r.auc_std
                    )
                })
                .unwrap_or_else(|| " – |".into());
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

pub fn write_runs_json(records: &[RunRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(GttaError::EmptyEval);
    }
    std::fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

pub fn read_runs_json(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Distinct settings in first-appearance order (for re-rendering stored runs).
pub fn settings_of(records: &[RunRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.setting) {
            out.push(r.setting.clone());
        }
    }
    out
}

/// 8×8 heatmap as CSV (row per grid row, 6 decimals).
pub fn heatmap_csv(heat: &[f64], grid: usize) -> String {
    let mut out = String::new();
    for r in 0..grid {
        let row: Vec<String> = (0..grid).map(|c| format!("{:.6}", heat[r * grid + c])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Heatmap as an ASCII PGM (P2, max 255), scaled by the map's maximum.
pub fn heatmap_pgm(heat: &[f64], grid: usize) -> String {
    let max = heat.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{grid} {grid}\n255\n");
    for r in 0..grid {
        let row: Vec<String> = (0..grid)
            .map(|c| {
                let v = if max > 0.0 { heat[r * grid + c] / max } else { 0.0 };
                format!("{}", (v * 255.0).round() as u32)
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
