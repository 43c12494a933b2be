//! Static SVG learning curves: mean success per configuration with a ±std band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::BenchError;
use crate::report::{mean, std_dev, Row};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// `(env_step, mean, std)` of success rate across seeds.
pub type Curve = Vec<(u64, f64, f64)>;

/// Per task, per configuration label, the success curve across seeds.
pub fn curves(rows: &[Row]) -> BTreeMap<String, BTreeMap<String, Curve>> {
    let mut acc: BTreeMap<String, BTreeMap<String, BTreeMap<u64, Vec<f64>>>> = BTreeMap::new();
    for r in rows {
        acc.entry(r.task.clone())
            .or_default()
            .entry(r.label())
            .or_default()
            .entry(r.env_step)
            .or_default()
            .push(r.success_rate);
    }
    acc.into_iter()
        .map(|(task, labels)| {
            let c = labels
                .into_iter()
                .map(|(label, steps)| {
                    let curve = steps.into_iter().map(|(s, v)| (s, mean(&v), std_dev(&v))).collect();
                    (label, curve)
                })
                .collect();
            (task, c)
        })
        .collect()
}

fn render(task: &str, series: &BTreeMap<String, Curve>) -> String {
    let max_step = series
        .values()
        .flat_map(|c| c.iter().map(|p| p.0))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let x = |s: u64| MARGIN + (s as f64 / max_step) * (WIDTH - 2.0 * MARGIN);
    let y = |v: f64| HEIGHT - MARGIN - v.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{task}</text>"#,
        WIDTH / 2.0
    );
    let (x0, x1, y0, y1) = (x(0), x(max_step as u64), y(0.0), y(1.0));
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" stroke="black" fill="none"/>"#
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.2}</text>"#,
            x0 - 4.0,
            y(v) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x1:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
        y0 + 14.0,
        max_step as u64
    );
    for (i, (label, curve)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut band = String::new();
        for &(s, m, sd) in curve {
            let _ = write!(band, "{:.2},{:.2} ", x(s), y(m + sd));
        }
        for &(s, m, sd) in curve.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", x(s), y(m - sd));
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = curve.iter().map(|&(s, m, _)| format!("{:.2},{:.2}", x(s), y(m))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="11" fill="{color}">{label}</text>"#,
            x1 - 90.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<task>.svg` per task into `dir`. Nothing is written for empty input.
pub fn plot_rows(rows: &[Row], dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Empty);
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (task, series) in curves(rows) {
        let path = dir.join(format!("{task}.svg"));
        std::fs::write(&path, render(&task, &series))?;
        out.push(path);
    }
    Ok(out)
}
