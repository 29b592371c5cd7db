//! Figures and a markdown summary regenerated from a run directory's CSVs.
//! Every figure is a plain SVG written from numbers that are also on disk, so
//! re-running on unchanged CSVs reproduces the files byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::pipeline::{fold_dir, MANIFEST_FILE, STATUS_FILE};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone)]
enum Mark {
    Line(Vec<(f64, f64)>),
    Points(Vec<(f64, f64)>),
    /// `(x, lo, hi)` filled band.
    Band(Vec<(f64, f64, f64)>),
    /// `(x, y, lo, hi)` point with a vertical interval.
    ErrorBars(Vec<(f64, f64, f64, f64)>),
}

#[derive(Debug, Clone)]
struct Series {
    label: String,
    color: &'static str,
    mark: Mark,
}

/// One set of axes.
#[derive(Debug, Clone, Default)]
struct Panel {
    title: String,
    xlabel: String,
    ylabel: String,
    x: Option<(f64, f64)>,
    y: Option<(f64, f64)>,
    diagonal: bool,
    series: Vec<Series>,
}

impl Panel {
    fn new(title: impl Into<String>, xlabel: &str, ylabel: &str) -> Self {
        Panel {
            title: title.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
            ..Panel::default()
        }
    }

    fn add(&mut self, label: impl Into<String>, color: &'static str, mark: Mark) {
        self.series.push(Series {
            label: label.into(),
            color,
            mark,
        });
    }

    fn extent(&self) -> ((f64, f64), (f64, f64)) {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for s in &self.series {
            match &s.mark {
                Mark::Line(p) | Mark::Points(p) => {
                    xs.extend(p.iter().map(|q| q.0));
                    ys.extend(p.iter().map(|q| q.1));
                }
                Mark::Band(b) => {
                    xs.extend(b.iter().map(|q| q.0));
                    ys.extend(b.iter().flat_map(|q| [q.1, q.2]));
                }
                Mark::ErrorBars(b) => {
                    xs.extend(b.iter().map(|q| q.0));
                    ys.extend(b.iter().flat_map(|q| [q.1, q.2, q.3]));
                }
            }
        }
        let range = |v: &[f64]| {
            let v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.04 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        (
            self.x.unwrap_or_else(|| range(&xs)),
            self.y.unwrap_or_else(|| range(&ys)),
        )
    }

    fn render(&self, out: &mut String, ox: f64, oy: f64, w: f64, h: f64) {
        let (ml, mr, mt, mb) = (52.0, 12.0, 26.0, 40.0);
        let (pw, ph) = (w - ml - mr, h - mt - mb);
        let ((x0, x1), (y0, y1)) = self.extent();
        let sx = |x: f64| ox + ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| oy + mt + ph - (y - y0) / (y1 - y0) * ph;
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#444"/>"##,
            ox + ml,
            oy + mt
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
            ox + ml + pw / 2.0,
            oy + 17.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
            ox + ml + pw / 2.0,
            oy + h - 6.0,
            escape(&self.xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            ox + 12.0,
            oy + mt + ph / 2.0,
            ox + 12.0,
            oy + mt + ph / 2.0,
            escape(&self.ylabel)
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{}</text>"#,
                sx(fx),
                oy + mt + ph + 13.0,
                tick(fx)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="9">{}</text>"#,
                ox + ml - 4.0,
                sy(fy) + 3.0,
                tick(fy)
            );
        }
        if self.diagonal {
            let lo = x0.max(y0);
            let hi = x1.min(y1);
            if hi > lo {
                let _ = writeln!(
                    out,
                    r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
                    sx(lo),
                    sy(lo),
                    sx(hi),
                    sy(hi)
                );
            }
        }
        for s in &self.series {
            match &s.mark {
                Mark::Line(p) => {
                    let pts: Vec<String> = p
                        .iter()
                        .filter(|q| q.0.is_finite() && q.1.is_finite())
                        .map(|q| format!("{:.2},{:.2}", sx(q.0), sy(q.1)))
                        .collect();
                    let _ = writeln!(
                        out,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                        pts.join(" "),
                        s.color
                    );
                }
                Mark::Points(p) => {
                    for q in p.iter().filter(|q| q.0.is_finite() && q.1.is_finite()) {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#,
                            sx(q.0),
                            sy(q.1),
                            s.color
                        );
                    }
                }
                Mark::Band(b) => {
                    let upper = b.iter().map(|q| format!("{:.2},{:.2}", sx(q.0), sy(q.2)));
                    let lower = b.iter().rev().map(|q| format!("{:.2},{:.2}", sx(q.0), sy(q.1)));
                    let pts: Vec<String> = upper.chain(lower).collect();
                    let _ = writeln!(
                        out,
                        r#"<polygon points="{}" fill="{}" fill-opacity="0.2" stroke="none"/>"#,
                        pts.join(" "),
                        s.color
                    );
                }
                Mark::ErrorBars(b) => {
                    for &(x, y, lo, hi) in b {
                        if lo.is_finite() && hi.is_finite() {
                            let _ = writeln!(
                                out,
                                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}"/>"#,
                                sx(x),
                                sy(lo),
                                sx(x),
                                sy(hi),
                                s.color
                            );
                        }
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                            sx(x),
                            sy(y),
                            s.color
                        );
                    }
                }
            }
        }
        let labelled: Vec<&Series> = self.series.iter().filter(|s| !s.label.is_empty()).collect();
        for (k, s) in labelled.iter().enumerate() {
            let y = oy + mt + 12.0 + 12.0 * k as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{}"/><text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#,
                ox + ml + pw - 90.0,
                y - 7.0,
                s.color,
                ox + ml + pw - 78.0,
                y,
                escape(&s.label)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Panels laid out on a grid.
fn figure(panels: &[Panel], columns: usize, panel_w: f64, panel_h: f64) -> String {
    let columns = columns.max(1).min(panels.len().max(1));
    let rows = panels.len().div_ceil(columns).max(1);
    let (w, h) = (panel_w * columns as f64, panel_h * rows as f64);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        p.render(&mut out, c as f64 * panel_w, r as f64 * panel_h, panel_w, panel_h);
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap of `values[row][col]`; `None` cells are drawn hatched grey.
fn heatmap(
    title: &str,
    rows: &[String],
    cols: &[String],
    values: &[Vec<Option<f64>>],
    xlabel: &str,
    ylabel: &str,
) -> String {
    let cell = 34.0;
    let (ml, mt) = (70.0, 40.0);
    let w = ml + cell * cols.len() as f64 + 90.0;
    let h = mt + cell * rows.len() as f64 + 50.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (r, label) in rows.iter().enumerate() {
        let y = mt + cell * r as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
            ml - 6.0,
            y + cell / 2.0 + 3.0,
            escape(label)
        );
        for (c, v) in values[r].iter().enumerate() {
            let x = ml + cell * c as f64;
            match v {
                Some(v) => {
                    let t = ((v - 0.5) / 0.5).clamp(0.0, 1.0);
                    let (rr, gg, bb) = (
                        (255.0 - 200.0 * t) as u8,
                        (255.0 - 120.0 * t) as u8,
                        (255.0 - 40.0 * t) as u8,
                    );
                    let _ = writeln!(
                        out,
                        r#"<rect x="{x:.2}" y="{y:.2}" width="{cell}" height="{cell}" fill="rgb({rr},{gg},{bb})" stroke="white"/><text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{v:.2}</text>"#,
                        x + cell / 2.0,
                        y + cell / 2.0 + 3.0
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x:.2}" y="{y:.2}" width="{cell}" height="{cell}" fill="#ddd" stroke="white"/>"##
                    );
                }
            }
        }
    }
    for (c, label) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            ml + cell * c as f64 + cell / 2.0,
            mt + cell * rows.len() as f64 + 14.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
        ml + cell * cols.len() as f64 / 2.0,
        h - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" font-size="11" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        mt + cell * rows.len() as f64 / 2.0,
        mt + cell * rows.len() as f64 / 2.0,
        escape(ylabel)
    );
    out.push_str("</svg>\n");
    out
}

/// Rows of a CSV file as string maps keyed by header.
fn read_table(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    table_from_str(&text)
}

fn table_from_str(text: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(out)
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row.get(key).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN)
}

fn folds_on_disk(out: &Path) -> Vec<(usize, PathBuf)> {
    (0..64)
        .map(|k| (k, fold_dir(out, k)))
        .filter(|(_, d)| d.is_dir())
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Figures that depend on one per-fold CSV, one panel per fold.
fn per_fold_panels<F>(folds: &[(usize, PathBuf)], file: &str, mut build: F) -> Result<Vec<Panel>>
where
    F: FnMut(usize, &[BTreeMap<String, String>]) -> Panel,
{
    let mut panels = Vec::new();
    for (k, dir) in folds {
        let path = dir.join(file);
        if path.exists() {
            panels.push(build(*k, &read_table(&path)?));
        }
    }
    Ok(panels)
}

fn curve_figure(
    folds: &[(usize, PathBuf)],
    file: &str,
    title: &str,
    x: &str,
    y: &str,
    xl: &str,
    yl: &str,
) -> Result<Option<String>> {
    let mut panel = Panel::new(title, xl, yl);
    panel.x = Some((0.0, 1.0));
    panel.y = Some((0.0, 1.0));
    for (k, dir) in folds {
        let path = dir.join(file);
        if path.exists() {
            let pts: Vec<(f64, f64)> = read_table(&path)?.iter().map(|r| (num(r, x), num(r, y))).collect();
            panel.add(format!("fold {k}"), color(*k), Mark::Line(pts));
        }
    }
    Ok((!panel.series.is_empty()).then(|| figure(&[panel], 1, 420.0, 380.0)))
}

/// Write `figures/*.svg` and `report.md` under `out` from the CSVs of a run.
pub fn emit_report(out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    if !out.is_dir() {
        return Err(Error::Validation(format!("{} is not a run directory", out.display())));
    }
    let figs = out.join("figures");
    std::fs::create_dir_all(&figs).map_err(|e| Error::io(&figs, e))?;
    let folds = folds_on_disk(out);
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let p = figs.join(name);
        write(&p, &svg)?;
        written.push(p);
        Ok(())
    };

    if let Some(svg) = curve_figure(
        &folds,
        "roc.csv",
        "Annotator ROC (validation)",
        "fpr",
        "tpr",
        "false positive rate",
        "true positive rate",
    )? {
        emit("roc.svg", svg)?;
    }
    if let Some(svg) = curve_figure(
        &folds,
        "pr.csv",
        "Annotator precision-recall (validation)",
        "recall",
        "precision",
        "recall",
        "precision",
    )? {
        emit("pr.svg", svg)?;
    }

    // F-beta curves live in the second table of calibration.csv
    let mut fb = Panel::new("F-beta over thresholds (training)", "threshold", "F-beta");
    for (k, dir) in &folds {
        let path = dir.join("calibration.csv");
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Some((_, curve)) = text.split_once("\n\n") {
                let pts: Vec<(f64, f64)> = table_from_str(curve)?
                    .iter()
                    .map(|r| (num(r, "threshold"), num(r, "fbeta")))
                    .collect();
                fb.add(format!("fold {k}"), color(*k), Mark::Line(pts));
            }
        }
    }
    if !fb.series.is_empty() {
        emit("fbeta.svg", figure(&[fb], 1, 420.0, 360.0))?;
    }

    // observed vs forecasted correlation coefficients per lag, all folds pooled
    let mut by_lag: BTreeMap<usize, Panel> = BTreeMap::new();
    for (k, dir) in &folds {
        let path = dir.join("moments.csv");
        if !path.exists() {
            continue;
        }
        let mut pts: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for r in read_table(&path)? {
            pts.entry(num(&r, "lag") as usize)
                .or_default()
                .push((num(&r, "observed"), num(&r, "forecasted")));
        }
        for (lag, p) in pts {
            let title = if lag == 0 {
                "Cross-correlation".to_string()
            } else {
                format!("Lag-{lag} correlation")
            };
            let panel = by_lag.entry(lag).or_insert_with(|| {
                let mut p = Panel::new(title, "observed r", "forecasted r");
                p.diagonal = true;
                p
            });
            panel.add(format!("fold {k}"), color(*k), Mark::Points(p));
        }
    }
    if !by_lag.is_empty() {
        let panels: Vec<Panel> = by_lag.into_values().collect();
        emit("moments.svg", figure(&panels, 3, 320.0, 300.0))?;
    }

    for (k, dir) in &folds {
        if !dir.join("qq.csv").exists() {
            continue;
        }
        let rows = read_table(&dir.join("qq.csv"))?;
        let mut panels: BTreeMap<String, Panel> = BTreeMap::new();
        let mut order = Vec::new();
        let mut pts: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
        for r in &rows {
            let f = r["feature"].clone();
            if !order.contains(&f) {
                order.push(f.clone());
            }
            pts.entry((f, r["split"].clone()))
                .or_default()
                .push((num(r, "theoretical"), num(r, "sample")));
        }
        for ((f, split), p) in pts {
            let panel = panels.entry(f.clone()).or_insert_with(|| {
                let mut pn = Panel::new(f.clone(), "normal quantile", "sample quantile");
                pn.diagonal = true;
                pn
            });
            let c = if split == "train" { color(0) } else { color(1) };
            panel.add(split, c, Mark::Points(p));
        }
        let ordered: Vec<Panel> = order.iter().filter_map(|f| panels.remove(f)).collect();
        emit(&format!("qq_fold_{k}.svg"), figure(&ordered, 5, 240.0, 220.0))?;
    }

    for (k, dir) in &folds {
        let path = dir.join("sleeves.csv");
        if !path.exists() {
            continue;
        }
        let rows = read_table(&path)?;
        let mut patients: Vec<String> = Vec::new();
        for r in &rows {
            if !patients.contains(&r["patient_id"]) {
                patients.push(r["patient_id"].clone());
            }
        }
        for pid in patients {
            let mut order: Vec<String> = Vec::new();
            let mut obs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            let mut fc: BTreeMap<String, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r["patient_id"] == pid) {
                let f = r["feature"].clone();
                if !order.contains(&f) {
                    order.push(f.clone());
                }
                let t = num(r, "visit");
                obs.entry(f.clone()).or_default().push((t, num(r, "observed")));
                if !r["mean"].is_empty() {
                    fc.entry(f)
                        .or_default()
                        .push((t, num(r, "mean"), num(r, "lo95"), num(r, "hi95")));
                }
            }
            let panels: Vec<Panel> = order
                .iter()
                .map(|f| {
                    let mut p = Panel::new(f.clone(), "visit", "transformed value");
                    if let Some(b) = fc.get(f) {
                        p.add("", color(0), Mark::Band(b.iter().map(|q| (q.0, q.2, q.3)).collect()));
                        p.add("forecast", color(0), Mark::Line(b.iter().map(|q| (q.0, q.1)).collect()));
                    }
                    p.add("observed", color(1), Mark::Line(obs[f].clone()));
                    p
                })
                .collect();
            emit(&format!("sleeves_fold_{k}_{pid}.svg"), figure(&panels, 5, 260.0, 220.0))?;
        }
    }

    let losses = per_fold_panels(&folds, "training_loss.csv", |k, rows| {
        let mut p = Panel::new(format!("Training loss, fold {k}"), "epoch", "loss");
        for (i, model) in ["forecaster", "annotator"].iter().enumerate() {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r["model"] == *model)
                .map(|r| (num(r, "epoch"), num(r, "loss")))
                .collect();
            p.add(*model, color(i), Mark::Line(pts));
        }
        p
    })?;
    if !losses.is_empty() {
        emit("training_loss.svg", figure(&losses, 3, 320.0, 260.0))?;
    }

    let agg_path = out.join("aggregate.csv");
    let agg = if agg_path.exists() {
        read_table(&agg_path)?
    } else {
        Vec::new()
    };
    let find = |metric: &str, h: &str, n: &str| {
        agg.iter()
            .find(|r| r["metric"] == metric && r["horizon"] == h && r["n_prior"] == n)
    };

    // combined pipeline: per-horizon AUROC with 95% intervals, and the grid
    let mut per_h = Vec::new();
    for m in 1..=64 {
        if let Some(r) = find("combined.auroc", &m.to_string(), "") {
            per_h.push((m as f64, num(r, "mean"), num(r, "ci95_lo"), num(r, "ci95_hi")));
        }
    }
    if !per_h.is_empty() {
        let mut p = Panel::new("Forecast-then-annotate AUROC", "horizon (visits)", "AUROC");
        p.add("mean ± 95% CI", color(0), Mark::ErrorBars(per_h.clone()));
        p.add("", color(0), Mark::Line(per_h.iter().map(|q| (q.0, q.1)).collect()));
        emit("combined_horizon.svg", figure(&[p], 1, 420.0, 340.0))?;
    }
    let mut n_values: Vec<usize> = Vec::new();
    let mut m_values: Vec<usize> = Vec::new();
    for r in agg.iter().filter(|r| r["metric"] == "combined_cell.auroc") {
        if let (Ok(n), Ok(m)) = (r["n_prior"].parse::<usize>(), r["horizon"].parse::<usize>()) {
            if !n_values.contains(&n) {
                n_values.push(n);
            }
            if !m_values.contains(&m) {
                m_values.push(m);
            }
        }
    }
    n_values.sort_unstable();
    m_values.sort_unstable();
    if !n_values.is_empty() {
        let values: Vec<Vec<Option<f64>>> = n_values
            .iter()
            .map(|n| {
                m_values
                    .iter()
                    .map(|m| find("combined_cell.auroc", &m.to_string(), &n.to_string()).map(|r| num(r, "mean")))
                    .collect()
            })
            .collect();
        let rows: Vec<String> = n_values.iter().map(|n| n.to_string()).collect();
        let cols: Vec<String> = m_values.iter().map(|m| m.to_string()).collect();
        emit(
            "combined_grid.svg",
            heatmap(
                "AUROC by prior visits and horizon (fold mean)",
                &rows,
                &cols,
                &values,
                "horizon (visits)",
                "prior visits",
            ),
        )?;
    }

    // per-feature forecast correlation at the first horizon
    let features = crate::cohort::Feature::ALL;
    let mut model = Vec::new();
    let mut locf = Vec::new();
    let mut diff = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let get = |kind: &str| find(&format!("forecast_r.{kind}.{}", f.name()), "1", "").map(|r| num(r, "mean"));
        if let Some(v) = get("model") {
            model.push((i as f64, v));
        }
        if let Some(v) = get("locf") {
            locf.push((i as f64, v));
        }
        if let Some(v) = get("model_diff") {
            diff.push((i as f64, v));
        }
    }
    if !model.is_empty() {
        let names: Vec<&str> = features.iter().map(|f| f.name()).collect();
        let mut p = Panel::new(
            format!("One-step Pearson r by feature ({})", names.join(", ")),
            "feature index",
            "Pearson r",
        );
        p.add("forecast", color(0), Mark::Points(model));
        p.add("last value", color(1), Mark::Points(locf));
        p.add("forecast, differences", color(2), Mark::Points(diff));
        emit("forecast_correlations.svg", figure(&[p], 1, 640.0, 340.0))?;
    }

    let md = summary_markdown(out, &agg)?;
    let p = out.join("report.md");
    write(&p, &md)?;
    written.push(p);
    Ok(written)
}

fn summary_markdown(out: &Path, agg: &[BTreeMap<String, String>]) -> Result<String> {
    let manifest_path = out.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        KeyValues::load(&manifest_path)?
    } else {
        KeyValues::default()
    };
    let k: usize = manifest.get("config.folds")?.unwrap_or(0);
    let status_path = out.join(STATUS_FILE);
    let status = if status_path.exists() {
        read_table(&status_path)?
    } else {
        Vec::new()
    };
    let mut s = String::from("# Cross-validation report\n\n## Folds\n\n| fold | status | note |\n|---|---|---|\n");
    let total = k.max(status.len());
    for fold in 0..total {
        let row = status.iter().find(|r| r["fold"] == fold.to_string());
        let (st, msg) = match row {
            Some(r) => (r["status"].clone(), r.get("message").cloned().unwrap_or_default()),
            None => ("missing".into(), String::new()),
        };
        let _ = writeln!(s, "| {fold} | {st} | {msg} |");
    }
    s += "\n## Fold means\n\n| metric | horizon | mean | sd | 95% CI | folds |\n|---|---|---|---|---|---|\n";
    for r in agg
        .iter()
        .filter(|r| r["n_prior"].is_empty() && !r["metric"].starts_with("forecast_r."))
    {
        let ci = if r["ci95_lo"].is_empty() {
            String::new()
        } else {
            format!("[{:.4}, {:.4}]", num(r, "ci95_lo"), num(r, "ci95_hi"))
        };
        let sd = if r["sd"].is_empty() {
            String::new()
        } else {
            format!("{:.4}", num(r, "sd"))
        };
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {sd} | {ci} | {} |",
            r["metric"],
            r["horizon"],
            num(r, "mean"),
            r["n_folds"]
        );
    }
    s += "\nPer-feature correlations, per-cell grid values and all per-fold numbers are in `aggregate.csv` and `metrics.csv`; figures are in `figures/`.\n";
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_is_reproducible_and_marks_missing_folds() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        std::fs::write(out.join(MANIFEST_FILE), "config.folds = 5\n").unwrap();
        std::fs::write(out.join(STATUS_FILE), "fold,status,message\n0,ok,\n").unwrap();
        std::fs::write(
            out.join("aggregate.csv"),
            "metric,horizon,n_prior,n_folds,mean,sd,ci95_lo,ci95_hi\ncombined.auroc,1,,1,0.8,,,\ncombined_cell.auroc,1,2,1,0.7,,,\n",
        )
        .unwrap();
        let f0 = fold_dir(out, 0);
        std::fs::create_dir_all(&f0).unwrap();
        std::fs::write(f0.join("roc.csv"), "threshold,fpr,tpr\n1,0,0\n0.5,0.2,0.7\n0,1,1\n").unwrap();
        let first = emit_report(out).unwrap();
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let second = emit_report(out).unwrap();
        assert_eq!(first, second);
        for (p, b) in second.iter().zip(&bytes) {
            assert_eq!(&std::fs::read(p).unwrap(), b, "{}", p.display());
        }
        let md = std::fs::read_to_string(out.join("report.md")).unwrap();
        assert!(md.contains("| 0 | ok |"));
        for k in 1..5 {
            assert!(md.contains(&format!("| {k} | missing |")));
        }
        assert!(out.join("figures/roc.svg").exists());
        assert!(out.join("figures/combined_grid.svg").exists());
    }

    #[test]
    fn unwritable_target_is_an_error() {
        assert!(emit_report("/nonexistent/run").is_err());
    }
}
