//! Per-stage metric trajectories of protocol runs, drawn as static SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use citrack::continual::stage_dir;
use citrack::{Error, Result};

#[derive(Debug, Deserialize)]
struct Row {
    stage: usize,
    method: String,
    class: String,
    #[serde(rename = "MOTA")]
    mota: Option<f64>,
    #[serde(rename = "IDF1")]
    idf1: Option<f64>,
    #[serde(rename = "AP")]
    ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePoint {
    pub stage: usize,
    pub mmota: Option<f64>,
    pub midf1: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub label: String,
    pub points: Vec<StagePoint>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Reads `stage_<b>/metrics.csv` for `b = 0, 1, ...` until one is missing.
pub fn load_run(dir: &Path) -> Result<RunSeries> {
    let mut points = Vec::new();
    let mut label = None;
    for b in 0.. {
        let path = stage_dir(dir, b).join("metrics.csv");
        if !path.exists() {
            break;
        }
        let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let rows: Vec<Row> = reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (overall, classes): (Vec<&Row>, Vec<&Row>) = rows.iter().partition(|r| r.class == "overall");
        let overall = overall.first().ok_or_else(|| Error::Format(format!("{}: no overall row", path.display())))?;
        label.get_or_insert_with(|| overall.method.clone());
        points.push(StagePoint {
            stage: overall.stage,
            mmota: mean(classes.iter().map(|r| r.mota)),
            midf1: mean(classes.iter().map(|r| r.idf1)),
            map: overall.ap,
        });
    }
    let label = label.ok_or_else(|| Error::NotFound(format!("no stage metrics under {}", dir.display())))?;
    Ok(RunSeries { label, points })
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn panel(svg: &mut String, x0: f64, title: &str, series: &[RunSeries], pick: fn(&StagePoint) -> Option<f64>) {
    let n_stages = series.iter().flat_map(|s| &s.points).map(|p| p.stage + 1).max().unwrap_or(1);
    let lo = series.iter().flat_map(|s| &s.points).filter_map(pick).fold(0.0f64, f64::min);
    let hi = 1.0f64.max(series.iter().flat_map(|s| &s.points).filter_map(pick).fold(0.0, f64::max));
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let sx = |stage: usize| x0 + MARGIN + if n_stages > 1 { w * stage as f64 / (n_stages - 1) as f64 } else { w / 2.0 };
    let sy = |v: f64| MARGIN + h * (hi - v) / (hi - lo);

    let _ = writeln!(svg, r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{title}</text>"#, x0 + PANEL_W / 2.0);
    let _ = writeln!(
        svg,
        r##"<rect x="{:.1}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="#888"/>"##,
        x0 + MARGIN
    );
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.2}</text>"#,
            x0 + MARGIN - 4.0,
            sy(v) + 3.0
        );
    }
    for b in 0..n_stages {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">stage {b}</text>"#,
            sx(b),
            MARGIN + h + 14.0
        );
    }
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64)> = s.points.iter().filter_map(|p| pick(p).map(|v| (sx(p.stage), sy(v)))).collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for (x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
        }
    }
}

pub fn render(series: &[RunSeries]) -> String {
    let legend_h = 18.0 * series.len() as f64 + 10.0;
    let (width, height) = (3.0 * PANEL_W, PANEL_H + legend_h);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut svg, 0.0, "mMOTA", series, |p| p.mmota);
    panel(&mut svg, PANEL_W, "mIDF1", series, |p| p.midf1);
    panel(&mut svg, 2.0 * PANEL_W, "mAP", series, |p| p.map);
    for (k, s) in series.iter().enumerate() {
        let y = PANEL_H + 14.0 + 18.0 * k as f64;
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(svg, r#"<rect x="{MARGIN}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{y:.1}" font-size="12">{}</text>"#, MARGIN + 18.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
