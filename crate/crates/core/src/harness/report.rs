use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::format_metrics_csv;
use crate::plateau::Event;

use super::run::RunRecord;

/// One named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// A vertical marker line with a short label.
pub struct Marker {
    pub x: f64,
    pub label: &'static str,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn bounds(series: &[Series<'_>]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A plain SVG line chart. Output depends only on the inputs.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>], markers: &[Marker]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(w, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(w, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        w,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(w, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-size="10">{v:.3}</text>"#, PAD - 4.0);
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(w, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="10">{v}</text>"#, H - PAD + 14.0);
    }
    let _ = writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        w,
        r#"<text x="14" y="{c}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {c})">{}</text>"#,
        escape(y_label),
        c = H / 2.0
    );
    for m in markers {
        let x = sx(m.x);
        let _ = writeln!(
            w,
            r#"<line x1="{x:.1}" y1="{PAD}" x2="{x:.1}" y2="{}" stroke="gray" stroke-dasharray="4 3"/><text x="{x:.1}" y="{}" font-size="9" text-anchor="middle">{}</text>"#,
            H - PAD,
            PAD - 4.0,
            escape(m.label)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{ly:.1}" font-size="10" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Files written by [`report`].
pub struct ReportFiles {
    pub metrics_csv: String,
    pub curves_csv: String,
    pub accuracy_svg: String,
    /// `(run_id, svg)` loss curves with peak/plateau markers.
    pub loss_svgs: Vec<(String, String)>,
}

pub fn build_report(records: &[RunRecord]) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::config("report needs at least one run"));
    }
    let rows: Vec<_> = records.iter().map(|r| r.metrics.clone()).collect();
    let metrics_csv = format_metrics_csv(&rows)?;
    let mut curves_csv = String::from("run_id,samples_seen,accuracy\n");
    for r in records {
        for p in &r.trace.points {
            writeln!(curves_csv, "{},{},{:.6}", r.run_id, p.samples_seen, p.accuracy).expect("write to string");
        }
    }
    let series: Vec<Series<'_>> = records
        .iter()
        .map(|r| Series {
            name: &r.run_id,
            points: r.trace.points.iter().map(|p| (p.samples_seen as f64, p.accuracy)).collect(),
        })
        .collect();
    let accuracy_svg = line_chart("Average accuracy", "samples seen", "accuracy", &series, &[]);
    let loss_svgs = records
        .iter()
        .map(|r| {
            let s = Series {
                name: "train loss",
                points: r.rows.iter().map(|row| (row.step as f64, row.train_loss)).collect(),
            };
            let markers: Vec<Marker> = r
                .events()
                .into_iter()
                .map(|(step, e)| Marker {
                    x: step as f64,
                    label: if e == Event::Peak { "peak" } else { "plateau" },
                })
                .collect();
            let svg = line_chart(&format!("Loss surface: {}", r.run_id), "step", "loss", &[s], &markers);
            (r.run_id.clone(), svg)
        })
        .collect();
    Ok(ReportFiles {
        metrics_csv,
        curves_csv,
        accuracy_svg,
        loss_svgs,
    })
}

/// Writes `metrics.csv`, `curves.csv`, `accuracy.svg` and one
/// `loss_<run_id>.svg` per run into `out`.
pub fn report(records: &[RunRecord], out: &Path) -> Result<()> {
    let files = build_report(records)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), &files.metrics_csv)?;
    fs::write(out.join("curves.csv"), &files.curves_csv)?;
    fs::write(out.join("accuracy.svg"), &files.accuracy_svg)?;
    for (id, svg) in &files.loss_svgs {
        fs::write(out.join(format!("loss_{id}.svg")), svg)?;
    }
    Ok(())
}
