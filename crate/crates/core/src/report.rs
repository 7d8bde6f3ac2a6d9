//! Report files: `report.json`, `metrics.csv` and one SVG bar chart per
//! constraint under `figures/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{ConstraintAggregate, RunReport};
use crate::mitigation::Constraint;
use crate::stats::MetricSummary;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("report.json is not a valid report: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const PHASES: [&str; 2] = ["before", "after"];

/// Writes `report.json`, `metrics.csv` and the figures. Returns the paths written.
pub fn emit_outputs(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, report.to_json()).map_err(io_err(&json_path))?;
    let csv_path = dir.join("metrics.csv");
    write_metrics_csv(report, &csv_path)?;
    let mut written = vec![json_path, csv_path];
    written.extend(emit_figures(report, dir)?);
    Ok(written)
}

/// Long-format table: one row per run, phase, constraint and metric.
pub fn write_metrics_csv(report: &RunReport, path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "phase", "constraint", "metric", "value"])?;
    for run in &report.runs {
        for constraint in &report.header.config.constraints {
            let Some(after) = run.after.get(constraint) else {
                continue;
            };
            for (phase, snap) in PHASES.iter().zip([&run.before, after]) {
                for (metric, value) in snap.flatten() {
                    w.write_record([
                        run.run.to_string(),
                        phase.to_string(),
                        constraint.name().to_string(),
                        metric,
                        value.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<RunReport, ReportError> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `figures/<constraint>.svg` for every constraint with aggregate results.
pub fn emit_figures(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let fig_dir = dir.join("figures");
    let mut written = Vec::new();
    for (constraint, agg) in &report.aggregate {
        if agg.metrics.is_empty() {
            continue;
        }
        fs::create_dir_all(&fig_dir).map_err(io_err(&fig_dir))?;
        let path = fig_dir.join(format!("{}.svg", constraint.name()));
        fs::write(&path, render_svg(*constraint, agg)).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Re-reads `report.json` in `dir` and regenerates its figures.
pub fn reemit_figures(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    emit_figures(&read_report(dir)?, dir)
}

struct Panel {
    title: String,
    /// (group label, metric key)
    bars: Vec<(String, String)>,
}

fn panels(constraint: Constraint, agg: &ConstraintAggregate) -> Vec<Panel> {
    let (per_group, ratio, diff, title) = match constraint {
        Constraint::DemographicParity => ("selection_rate", "dp_ratio", "dp_difference", "Selection rate"),
        Constraint::EqualizedOdds => ("fnr", "eo_ratio", "eo_difference", "False negative rate"),
    };
    let prefix = format!("{per_group}.");
    let groups: Vec<(String, String)> = agg
        .metrics
        .keys()
        .filter_map(|k| k.strip_prefix(&prefix).map(|g| (g.to_string(), k.clone())))
        .collect();
    vec![
        Panel {
            title: title.into(),
            bars: groups,
        },
        Panel {
            title: ratio.into(),
            bars: vec![("all".into(), ratio.into())],
        },
        Panel {
            title: diff.into(),
            bars: vec![("all".into(), diff.into())],
        },
    ]
}

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 40.0;
const BAR_W: f64 = 26.0;
const COLORS: [&str; 2] = ["#4c72b0", "#dd8452"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bars (before/after) with stderr error bars; one panel per metric.
pub fn render_svg(constraint: Constraint, agg: &ConstraintAggregate) -> String {
    let panels = panels(constraint, agg);
    let width = MARGIN + panels.len() as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.5 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{height}" style="fill:#ffffff"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(constraint.name())
    );
    let base_y = MARGIN + PANEL_H;
    for (pi, panel) in panels.iter().enumerate() {
        let x0 = MARGIN + pi as f64 * (PANEL_W + MARGIN);
        let summaries: Vec<(&str, &MetricSummary)> = panel
            .bars
            .iter()
            .filter_map(|(g, k)| agg.metrics.get(k).map(|m| (g.as_str(), m)))
            .collect();
        let top = summaries
            .iter()
            .flat_map(|(_, m)| [m.before.mean + m.before.stderr, m.after.mean + m.after.stderr])
            .filter(|v| v.is_finite())
            .fold(1.0_f64, f64::max);
        let scale = |v: f64| PANEL_H * (v.clamp(0.0, top) / top);

        let _ = writeln!(s, r#"<g data-panel="{}">"#, escape(&panel.title));
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{MARGIN}" x2="{x0}" y2="{base_y}" style="stroke:#333333"/>"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{base_y}" x2="{}" y2="{base_y}" style="stroke:#333333"/>"#,
            x0 + PANEL_W
        );
        for tick in [0.0, 0.5, 1.0] {
            let y = base_y - scale(tick * top);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
                x0 - 4.0,
                y + 4.0,
                tick * top
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + PANEL_W / 2.0,
            MARGIN - 8.0,
            escape(&panel.title)
        );
        let slot = PANEL_W / summaries.len().max(1) as f64;
        for (gi, (group, m)) in summaries.iter().enumerate() {
            let centre = x0 + slot * (gi as f64 + 0.5);
            for (phi, (phase, spread)) in PHASES.iter().zip([&m.before, &m.after]).enumerate() {
                let bx = centre - BAR_W + phi as f64 * BAR_W;
                let h = scale(spread.mean);
                let _ = writeln!(
                    s,
                    r#"<rect x="{bx:.2}" y="{:.2}" width="{BAR_W}" height="{h:.2}" data-phase="{phase}" data-group="{}" style="fill:{}"><title>{} {phase}: {:.4} ± {:.4}</title></rect>"#,
                    base_y - h,
                    escape(group),
                    COLORS[phi],
                    escape(group),
                    spread.mean,
                    spread.stderr
                );
                let cx = bx + BAR_W / 2.0;
                let lo = base_y - scale(spread.mean - spread.stderr);
                let hi = base_y - scale(spread.mean + spread.stderr);
                let _ = writeln!(
                    s,
                    r#"<path d="M{cx:.2} {lo:.2} V{hi:.2} M{:.2} {lo:.2} H{:.2} M{:.2} {hi:.2} H{:.2}" style="stroke:#000000;fill:none"/>"#,
                    cx - 5.0,
                    cx + 5.0,
                    cx - 5.0,
                    cx + 5.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{centre:.2}" y="{}" text-anchor="middle">{}</text>"#,
                base_y + 14.0,
                escape(group)
            );
        }
        s.push_str("</g>\n");
    }
    for (phi, phase) in PHASES.iter().enumerate() {
        let lx = MARGIN + phi as f64 * 90.0;
        let ly = height - 18.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="12" height="12" style="fill:{}"/><text x="{}" y="{ly}">{phase}</text>"#,
            ly - 10.0,
            COLORS[phi],
            lx + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}
