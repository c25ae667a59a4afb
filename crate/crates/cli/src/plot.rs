use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lossmix::analysis::{analyze_run, summarize_method, Quartiles, DEFAULT_MIN_POINTS, DEFAULT_WINDOW_FACTOR};
use lossmix::curve::{load_curve_dir, StoredRun, COLUMNS};

use crate::PlotKind;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 55.0;
const PALETTE: [&str; 9] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

pub fn run(kind: PlotKind, curves: &Path, out: &Path, metric: &str) -> Result<()> {
    if !COLUMNS.contains(&metric) || metric == "step" {
        bail!("unknown metric {metric} (expected one of {})", COLUMNS[1..].join(", "));
    }
    let (runs, bad) = load_curve_dir(curves)?;
    for e in &bad {
        eprintln!("skipped {e}");
    }
    if runs.is_empty() {
        bail!("no curve files in {}", curves.display());
    }
    let mut by_method: BTreeMap<String, Vec<StoredRun>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.curve.method.clone()).or_default().push(r);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = match kind {
        PlotKind::Curves => vec![(format!("curves_{metric}.svg"), curves_svg(&by_method, metric)?)],
        PlotKind::Weights => weights_svgs(&by_method)?,
        PlotKind::Doublebox => vec![("doublebox.svg".to_string(), doublebox_svg(&by_method, metric)?)],
    };
    for (name, svg) in files {
        let path = out.join(&name);
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    if !bad.is_empty() {
        bail!("{} curve file(s) could not be read", bad.len());
    }
    Ok(())
}

/// Linear map from data ranges onto the plot area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Frame {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Frame { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }

    fn open(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
        let (x0, x1) = (self.px(self.x.0), self.px(self.x.1));
        let (y0, y1) = (self.py(self.y.0), self.py(self.y.1));
        let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none"><path d="M{x0:.1},{y1:.1} V{y0:.1} H{x1:.1}"/></g>"#);
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let (xp, yp) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                s,
                r#"<line x1="{xp:.1}" y1="{y0:.1}" x2="{xp:.1}" y2="{:.1}" stroke="black"/><text x="{xp:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                y0 + 4.0,
                y0 + 18.0,
                tick(xv)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{yp:.1}" x2="{x0:.1}" y2="{yp:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 7.0,
                yp + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text class="xlabel" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text class="ylabel" transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
        s
    }
}

fn legend(s: &mut String, entries: &[(&str, &str)]) {
    let x = WIDTH - MARGIN_RIGHT + 15.0;
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            x + 18.0,
            y,
            escape(name)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values
        .filter(|v| v.is_finite())
        .fold(None, |acc, v| Some(acc.map_or((v, v), |(lo, hi): (f64, f64)| (lo.min(v), hi.max(v)))))
}

/// Mean of `f` over runs at every logged step, ignoring NaN entries.
fn mean_by_step(runs: &[StoredRun], f: impl Fn(&lossmix::curve::CurveRow) -> f64) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in runs {
        for row in &r.curve.rows {
            let v = f(row);
            if v.is_finite() {
                let e = acc.entry(row.step).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
}

fn curves_svg(by_method: &BTreeMap<String, Vec<StoredRun>>, metric: &str) -> Result<String> {
    let series: Vec<(&str, Vec<(usize, f64)>)> = by_method
        .iter()
        .map(|(m, runs)| (m.as_str(), mean_by_step(runs, |r| r.get(metric).unwrap_or(f64::NAN))))
        .filter(|(_, pts)| !pts.is_empty())
        .collect();
    if series.is_empty() {
        bail!("metric {metric} has no values in any curve");
    }
    let xr = range(series.iter().flat_map(|(_, p)| p.iter().map(|(s, _)| *s as f64))).unwrap();
    let yr = range(series.iter().flat_map(|(_, p)| p.iter().map(|(_, v)| *v))).unwrap();
    let frame = Frame::new(xr, (yr.0.min(0.0), yr.1));
    let mut s = frame.open(&format!("mean {metric} per method"), "step", metric);
    let mut entries = Vec::new();
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x as f64), frame.py(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            d.join(" ")
        );
        entries.push((*name, color));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Shares of the inverted weights, `(1/w_i) / Σ_j 1/w_j`. These are the
/// factors each loss is multiplied by, so they sum to one at every step.
pub fn weight_shares(w: &[f64]) -> Option<Vec<f64>> {
    if w.is_empty() || w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let inv: Vec<f64> = w.iter().map(|v| 1.0 / v).collect();
    let total: f64 = inv.iter().sum();
    Some(inv.iter().map(|v| v / total).collect())
}

fn weights_svgs(by_method: &BTreeMap<String, Vec<StoredRun>>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (method, runs) in by_method {
        // Average the shares, not the weights, so every run counts equally.
        let share = mean_by_step(runs, |r| weight_shares(&[r.w_iou, r.w_distance]).map_or(f64::NAN, |s| s[0]));
        if share.is_empty() {
            continue;
        }
        let xr = range(share.iter().map(|(s, _)| *s as f64)).unwrap();
        let frame = Frame::new(xr, (0.0, 1.0));
        let mut s = frame.open(&format!("{method}: normalized inverted weights"), "step", "share");
        let top: Vec<String> = share.iter().map(|(x, v)| format!("{:.2},{:.2}", frame.px(*x as f64), frame.py(*v))).collect();
        let (first, last) = (share[0].0 as f64, share[share.len() - 1].0 as f64);
        let _ = writeln!(
            s,
            r#"<polygon class="share" data-loss="iou" fill="{}" fill-opacity="0.7" points="{:.2},{:.2} {} {:.2},{:.2}"/>"#,
            PALETTE[0],
            frame.px(first),
            frame.py(0.0),
            top.join(" "),
            frame.px(last),
            frame.py(0.0)
        );
        let _ = writeln!(
            s,
            r#"<polygon class="share" data-loss="distance" fill="{}" fill-opacity="0.7" points="{:.2},{:.2} {} {:.2},{:.2}"/>"#,
            PALETTE[1],
            frame.px(first),
            frame.py(1.0),
            top.join(" "),
            frame.px(last),
            frame.py(1.0)
        );
        legend(&mut s, &[("iou", PALETTE[0]), ("distance", PALETTE[1])]);
        s.push_str("</svg>\n");
        out.push((format!("weights_{method}.svg"), s));
    }
    if out.is_empty() {
        bail!("metrics w_iou and w_distance have no values in any curve; no method weights both losses");
    }
    Ok(out)
}

fn doublebox_svg(by_method: &BTreeMap<String, Vec<StoredRun>>, metric: &str) -> Result<String> {
    let mut boxes: Vec<(&str, Quartiles, Quartiles, (f64, f64), (f64, f64))> = Vec::new();
    for (method, runs) in by_method {
        let analyses = runs
            .iter()
            .map(|r| analyze_run(&r.curve, r.status.as_ref(), metric, DEFAULT_WINDOW_FACTOR, DEFAULT_MIN_POINTS))
            .collect::<lossmix::Result<Vec<_>>>()?;
        let sum = summarize_method(method, &analyses)?;
        if let (Some(cx), Some(cy)) = (sum.convergence_step, sum.post_mean) {
            let xr = range(sum.convergence_steps.iter().copied()).unwrap();
            let yr = range(sum.post_means.iter().copied()).unwrap();
            boxes.push((method.as_str(), cx, cy, xr, yr));
        } else {
            eprintln!("{method}: no converged runs, left out of the box plot");
        }
    }
    if boxes.is_empty() {
        bail!("no method has a converged run on {metric}");
    }
    let xr = range(boxes.iter().flat_map(|b| [b.3 .0, b.3 .1])).unwrap();
    let yr = range(boxes.iter().flat_map(|b| [b.4 .0, b.4 .1])).unwrap();
    let pad = |(lo, hi): (f64, f64)| {
        let d = (hi - lo).max(hi.abs() * 0.05).max(1e-9) * 0.08;
        (lo - d, hi + d)
    };
    let frame = Frame::new(pad(xr), pad(yr));
    let ylabel = if metric == "eval_combined" { "combined error".to_string() } else { metric.to_string() };
    let mut s = frame.open("convergence step vs error after convergence", "convergence step", &ylabel);
    let mut entries = Vec::new();
    for (i, (name, cx, cy, (xmin, xmax), (ymin, ymax))) in boxes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let (x1, x3, xm) = (frame.px(cx.q1), frame.px(cx.q3), frame.px(cx.median));
        let (y1, y3, ym) = (frame.py(cy.q1), frame.py(cy.q3), frame.py(cy.median));
        let _ = writeln!(s, r#"<g class="box" data-method="{}" stroke="{color}">"#, escape(name));
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.25"/>"#,
            x1.min(x3),
            y1.min(y3),
            (x3 - x1).abs(),
            (y3 - y1).abs()
        );
        let _ = writeln!(
            s,
            r#"<path fill="none" d="M{:.2},{ym:.2} H{:.2} M{xm:.2},{:.2} V{:.2} M{x1:.2},{ym:.2} H{x3:.2} M{xm:.2},{y1:.2} V{y3:.2}"/>"#,
            frame.px(*xmin),
            frame.px(*xmax),
            frame.py(*ymin),
            frame.py(*ymax)
        );
        s.push_str("</g>\n");
        entries.push((*name, color));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    Ok(s)
}
