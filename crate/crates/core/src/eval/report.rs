use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CorrelationReport, ScorePoint};
use crate::error::{Error, Result};

/// Paths written by [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Scatter of OTCE (x) against accuracy (y) for one target.
pub fn scatter_svg(
    title: &str,
    metric: &str,
    points: &[&ScorePoint],
    pearson: Option<f64>,
) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let (x0, x1) = padded_range(points.iter().map(|p| p.otce));
    let (y0, y1) = padded_range(points.iter().map(|p| p.accuracy));
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let heading = match pearson {
        Some(r) => format!("{} (r = {r:.3})", escape(title)),
        None => escape(title),
    };
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{heading}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#,
            px(v),
            H - B + 16.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            L - 4.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">OTCE (nats)</text>"#,
        (L + W - R) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0,
        escape(metric)
    );
    for p in points {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>{}</title></circle>"#,
            px(p.otce),
            py(p.accuracy),
            escape(&p.source_id)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.json`, `scores.csv` and, with `plots`, one
/// `scatter_<target>.svg` per target into `dir`.
pub fn write_report(report: &CorrelationReport, dir: &Path, plots: bool) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let json = dir.join("report.json");
    fs::write(&json, report.to_json() + "\n").map_err(|e| Error::io(&json, e))?;

    let csv_path = dir.join("scores.csv");
    let mut writer = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", csv_path.display()));
    writer
        .write_record(["target_id", "source_id", "otce", "accuracy"])
        .map_err(csv_err)?;
    for p in &report.points {
        writer
            .write_record([
                p.target_id.clone(),
                p.source_id.clone(),
                p.otce.to_string(),
                p.accuracy.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut svgs = Vec::new();
    if plots {
        for (target, corr) in &report.per_target {
            let pts: Vec<&ScorePoint> = report
                .points
                .iter()
                .filter(|p| &p.target_id == target)
                .collect();
            let path = dir.join(format!("scatter_{}.svg", file_stem(target)));
            let svg = scatter_svg(target, &report.metric, &pts, corr.pearson);
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            svgs.push(path);
        }
    }
    Ok(ReportFiles {
        json,
        csv: csv_path,
        plots: svgs,
    })
}
