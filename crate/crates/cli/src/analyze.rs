use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lossmix::analysis::{analyze_run, compare_methods, summarize_method, Comparison, KsMatrix, MethodSummary, Quartiles, RunAnalysis};
use lossmix::curve::{load_curve_dir, COLUMNS};
use serde::Serialize;

pub struct Options {
    pub metric: String,
    pub baselines: Vec<String>,
    pub window_factor: f64,
    pub min_points: usize,
    pub alpha: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    metric: &'a str,
    window_factor: f64,
    min_points: usize,
    alpha: f64,
    skipped_files: Vec<String>,
    runs: Vec<RunAnalysis>,
    methods: Vec<MethodSummary>,
    comparison: Comparison,
}

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";

pub fn run(curves: &Path, out: &Path, opts: &Options) -> Result<()> {
    if !COLUMNS.contains(&opts.metric.as_str()) || opts.metric == "step" {
        bail!("unknown metric {} (expected one of {})", opts.metric, COLUMNS[1..].join(", "));
    }
    let (stored, bad) = load_curve_dir(curves)?;
    let mut skipped: Vec<String> = bad.iter().map(|e| e.to_string()).collect();
    let mut runs = Vec::new();
    for s in &stored {
        match analyze_run(&s.curve, s.status.as_ref(), &opts.metric, opts.window_factor, opts.min_points) {
            Ok(r) => runs.push(r),
            Err(e) => skipped.push(format!("{}: {e}", s.curve.run_id)),
        }
    }
    for s in &skipped {
        eprintln!("skipped {s}");
    }
    if runs.is_empty() {
        bail!("no usable curve files in {}", curves.display());
    }

    let mut by_method: BTreeMap<&str, Vec<RunAnalysis>> = BTreeMap::new();
    for r in &runs {
        by_method.entry(r.method.as_str()).or_default().push(r.clone());
    }
    let methods: Vec<MethodSummary> = by_method
        .iter()
        .map(|(m, rs)| summarize_method(m, rs))
        .collect::<lossmix::Result<_>>()?;
    for b in &opts.baselines {
        if !by_method.contains_key(b.as_str()) {
            bail!("baseline {b} has no runs in {}", curves.display());
        }
    }
    let comparison = if methods.len() < 2 {
        let empty = || KsMatrix { methods: vec![], cells: vec![] };
        Comparison { deltas: vec![], convergence_ks: empty(), error_ks: empty() }
    } else {
        compare_methods(&methods, &opts.baselines, opts.alpha)?
    };

    let summary = Summary {
        metric: &opts.metric,
        window_factor: opts.window_factor,
        min_points: opts.min_points,
        alpha: opts.alpha,
        skipped_files: skipped.clone(),
        runs,
        methods,
        comparison,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(out.join(SUMMARY_JSON), json + "\n").with_context(|| format!("writing {}", out.display()))?;
    let text = render_text(&summary);
    fs::write(out.join(SUMMARY_TXT), &text).with_context(|| format!("writing {}", out.display()))?;
    print!("{text}");

    if !skipped.is_empty() {
        bail!("{} curve file(s) could not be analysed", skipped.len());
    }
    Ok(())
}

fn q(v: Option<Quartiles>, f: fn(&Quartiles) -> f64) -> String {
    v.map_or_else(|| "-".into(), |q| format!("{:.4}", f(&q)))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:+.2}%"))
}

fn ks_table(out: &mut String, title: &str, m: &KsMatrix) {
    if m.methods.is_empty() {
        return;
    }
    let w = m.methods.iter().map(|s| s.len()).max().unwrap_or(0).max(8);
    let _ = writeln!(out, "\n{title} (D, * = reject)");
    let _ = write!(out, "{:w$}", "");
    for name in &m.methods {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    for (name, row) in m.methods.iter().zip(&m.cells) {
        let _ = write!(out, "{name:w$}");
        for cell in row {
            let s = match cell {
                Some(r) => format!("{:.3}{}", r.d, if r.reject { "*" } else { "" }),
                None => "-".into(),
            };
            let _ = write!(out, "  {s:>w$}");
        }
        out.push('\n');
    }
}

fn render_text(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "metric {}", s.metric);
    let _ = writeln!(
        out,
        "{:<12} {:>4} {:>4} {:>5} {:>6} {:>12} {:>12} {:>10} {:>10} {:>8} {:>8}",
        "method", "runs", "dead", "conv", "unconv", "conv q1", "conv median", "err q1", "err median", "pickup", "iou"
    );
    for m in &s.methods {
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>4} {:>5} {:>6} {:>12} {:>12} {:>10} {:>10} {:>8} {:>8}",
            m.method,
            m.runs,
            m.dead,
            m.converged,
            m.not_converged,
            q(m.convergence_step, |q| q.q1),
            q(m.convergence_step, |q| q.median),
            q(m.post_mean, |q| q.q1),
            q(m.post_mean, |q| q.median),
            q(m.pickup_rate, |q| q.median),
            q(m.iou, |q| q.median),
        );
    }
    if !s.comparison.deltas.is_empty() {
        let _ = writeln!(out, "\nrelative change of method versus baseline");
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:>12} {:>12} {:>12} {:>12}",
            "method", "baseline", "conv median", "conv mean", "pickup", "iou"
        );
        for d in &s.comparison.deltas {
            let _ = writeln!(
                out,
                "{:<12} {:<12} {:>12} {:>12} {:>12} {:>12}",
                d.method,
                d.baseline,
                pct(d.convergence_median_pct),
                pct(d.convergence_mean_pct),
                pct(d.pickup_rate_pct),
                pct(d.iou_pct)
            );
        }
    }
    ks_table(&mut out, "KS on convergence steps", &s.comparison.convergence_ks);
    ks_table(&mut out, "KS on post-convergence error", &s.comparison.error_ks);
    for f in &s.skipped_files {
        let _ = writeln!(out, "\nskipped {f}");
    }
    out
}
