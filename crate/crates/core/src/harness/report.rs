use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["step", "experiment_id", "task", "metric", "value"];

/// One long-format row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub experiment_id: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Appends rows to `metrics.csv`; the header is written on creation.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { inner })
    }

    pub fn push(&mut self, row: &MetricRow) -> Result<()> {
        self.inner
            .serialize(row)
            .map_err(|e| Error::Format(format!("metrics row: {e}")))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io("metrics.csv", e))
    }
}

/// Reads a metrics file, rejecting any other header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format(format!(
            "{}: expected header {}, found {}",
            path.display(),
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Reads every file and renders one combined SVG.
pub fn emit_reports(paths: &[&Path]) -> Result<String> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_metrics(p)?);
    }
    Ok(render_svg(&rows))
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(svg.as_bytes()).map_err(|e| Error::io(path, e))
}

const WIDTH: f64 = 720.0;
const CHART_H: f64 = 260.0;
const MARGIN_L: f64 = 70.0;
const PLOT_W: f64 = 420.0;
const PLOT_H: f64 = 180.0;
const MARGIN_T: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Widens a degenerate range so a flat series still has a drawable axis.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    }
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

/// One line chart per metric, one polyline per experiment and task.
pub fn render_svg(rows: &[MetricRow]) -> String {
    let mut charts: BTreeMap<&str, Series> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.value.is_finite()) {
        let key = format!("{} / {}", r.experiment_id, r.task);
        charts.entry(&r.metric).or_default().entry(key).or_default().push((r.step as f64, r.value));
    }
    let n = charts.len().max(1);
    let height = CHART_H * n as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{height}" fill="white"/>"#);
    if charts.is_empty() {
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="middle" fill="#b00">warning: no metric rows to plot</text>"##,
            WIDTH / 2.0,
            CHART_H / 2.0
        );
    }
    for (i, (metric, series)) in charts.iter().enumerate() {
        render_chart(&mut s, metric, series, CHART_H * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

fn render_chart(s: &mut String, metric: &str, series: &Series, y0: f64) {
    let points = series.values().flatten();
    let (xmin, xmax) = points.clone().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = points.fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (xmin, xmax) = padded(xmin, xmax);
    let (ymin, ymax) = padded(ymin, ymax);
    let top = y0 + MARGIN_T;
    let px = |x: f64| MARGIN_L + (x - xmin) / (xmax - xmin) * PLOT_W;
    let py = |y: f64| top + PLOT_H - (y - ymin) / (ymax - ymin) * PLOT_H;

    let _ = writeln!(s, r#"<g class="chart">"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_L}" y="{}" font-size="13" font-weight="bold">{}</text>"#,
        y0 + 22.0,
        escape(metric)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN_L}" y="{top}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (xmin + f * (xmax - xmin), ymin + f * (ymax - ymin));
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#444">{}</text>"##,
            px(xv),
            top + PLOT_H + 14.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end" fill="#444">{}</text>"##,
            MARGIN_L - 4.0,
            py(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#444">step</text>"##,
        MARGIN_L + PLOT_W / 2.0,
        top + PLOT_H + 30.0
    );
    for (j, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        if let [(x, y)] = pts[..] {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 8.0 + 16.0 * j as f64;
        let lx = MARGIN_L + PLOT_W + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(name));
    }
    s.push_str("</g>\n");
}
