use serde::Serialize;

use super::convergence::{detect_convergence, ConvergenceReport};
use super::ks::{ks_two_sample, KsResult};
use crate::curve::{RunCurve, RunStatus};
use crate::error::{Error, Result};

pub const DEFAULT_METRIC: &str = "eval_combined";

/// Linear-interpolation quantile of an ascending sample.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return Some(sorted[lo]);
    }
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Quartiles> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Quartiles {
            q1: quantile(&v, 0.25)?,
            median: quantile(&v, 0.5)?,
            q3: quantile(&v, 0.75)?,
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

/// One run reduced to the numbers the method summary needs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunAnalysis {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub dead: bool,
    pub converged: bool,
    pub convergence_step: Option<usize>,
    /// Mean of the analysed metric from the convergence point on.
    pub post_mean: Option<f64>,
    pub post_std: Option<f64>,
    /// `1 − mean pickup error` over the same suffix.
    pub pickup_rate: Option<f64>,
    /// `1 − mean IoU error` over the same suffix.
    pub iou: Option<f64>,
}

fn suffix_mean(curve: &RunCurve, column: &str, from: usize) -> Option<f64> {
    let v = curve.column(column)?;
    let tail = &v[from..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Runs the convergence detector on `metric` of `curve`. Dead runs and
/// runs too short for the detector are reported as not converged.
pub fn analyze_run(
    curve: &RunCurve,
    status: Option<&RunStatus>,
    metric: &str,
    window_factor: f64,
    min_points: usize,
) -> Result<RunAnalysis> {
    let series = curve
        .column(metric)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown metric column {metric}")))?;
    if series.iter().all(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("metric column {metric} of {} is empty", curve.run_id)));
    }
    let dead = status.is_some_and(RunStatus::is_dead);
    let report = if dead || series.len() < min_points {
        None
    } else {
        Some(detect_convergence(&series, window_factor, min_points)?)
    };
    let mut out = RunAnalysis {
        run_id: curve.run_id.clone(),
        method: curve.method.clone(),
        seed: curve.seed,
        dead,
        converged: false,
        convergence_step: None,
        post_mean: None,
        post_std: None,
        pickup_rate: None,
        iou: None,
    };
    if let Some(ConvergenceReport { converged: true, index: Some(i), post_mean, post_std, .. }) = report {
        out.converged = true;
        out.convergence_step = Some(curve.rows[i].step);
        out.post_mean = post_mean;
        out.post_std = post_std;
        out.pickup_rate = suffix_mean(curve, "eval_pickup_error", i).map(|e| 1.0 - e);
        out.iou = suffix_mean(curve, "eval_iou_error", i).map(|e| 1.0 - e);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub dead: usize,
    pub converged: usize,
    /// Live runs that never settled.
    pub not_converged: usize,
    pub convergence_step: Option<Quartiles>,
    pub post_mean: Option<Quartiles>,
    pub pickup_rate: Option<Quartiles>,
    pub iou: Option<Quartiles>,
    /// Per-run values of converged runs, in seed order.
    pub convergence_steps: Vec<f64>,
    pub post_means: Vec<f64>,
}

/// Aggregates runs of one method. Dead and unconverged runs are counted
/// but left out of the quartiles.
pub fn summarize_method(method: &str, runs: &[RunAnalysis]) -> Result<MethodSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!("method {method} has no runs")));
    }
    let mut ok: Vec<&RunAnalysis> = runs.iter().filter(|r| r.converged && !r.dead).collect();
    ok.sort_by_key(|r| r.seed);
    let steps: Vec<f64> = ok.iter().filter_map(|r| r.convergence_step.map(|s| s as f64)).collect();
    let posts: Vec<f64> = ok.iter().filter_map(|r| r.post_mean).collect();
    let rates: Vec<f64> = ok.iter().filter_map(|r| r.pickup_rate).collect();
    let ious: Vec<f64> = ok.iter().filter_map(|r| r.iou).collect();
    let dead = runs.iter().filter(|r| r.dead).count();
    Ok(MethodSummary {
        method: method.to_string(),
        runs: runs.len(),
        dead,
        converged: ok.len(),
        not_converged: runs.len() - dead - ok.len(),
        convergence_step: Quartiles::of(&steps),
        post_mean: Quartiles::of(&posts),
        pickup_rate: Quartiles::of(&rates),
        iou: Quartiles::of(&ious),
        convergence_steps: steps,
        post_means: posts,
    })
}

/// `(a − b) / b · 100`.
pub fn relative_delta_pct(a: f64, b: f64) -> Option<f64> {
    (b != 0.0 && a.is_finite() && b.is_finite()).then(|| (a - b) / b * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDelta {
    pub method: String,
    pub baseline: String,
    pub convergence_median_pct: Option<f64>,
    pub convergence_mean_pct: Option<f64>,
    pub pickup_rate_pct: Option<f64>,
    pub iou_pct: Option<f64>,
}

/// KS results between every ordered pair of methods; `None` where a
/// method has no converged runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KsMatrix {
    pub methods: Vec<String>,
    pub cells: Vec<Vec<Option<KsResult>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub deltas: Vec<PairDelta>,
    pub convergence_ks: KsMatrix,
    pub error_ks: KsMatrix,
}

fn ks_matrix(summaries: &[MethodSummary], pick: impl Fn(&MethodSummary) -> &[f64], alpha: f64) -> Result<KsMatrix> {
    let mut cells = Vec::with_capacity(summaries.len());
    for a in summaries {
        let mut row = Vec::with_capacity(summaries.len());
        for b in summaries {
            let (x, y) = (pick(a), pick(b));
            row.push(if x.is_empty() || y.is_empty() { None } else { Some(ks_two_sample(x, y, alpha)?) });
        }
        cells.push(row);
    }
    Ok(KsMatrix {
        methods: summaries.iter().map(|s| s.method.clone()).collect(),
        cells,
    })
}

/// Relative deltas of each method against each baseline (every other
/// method when `baselines` is empty) and KS matrices over the converged
/// runs' convergence steps and post-convergence errors.
pub fn compare_methods(summaries: &[MethodSummary], baselines: &[String], alpha: f64) -> Result<Comparison> {
    let delta = |a: Option<Quartiles>, b: Option<Quartiles>, f: fn(&Quartiles) -> f64| match (a, b) {
        (Some(a), Some(b)) => relative_delta_pct(f(&a), f(&b)),
        _ => None,
    };
    let mut deltas = Vec::new();
    for a in summaries {
        for b in summaries {
            let wanted = if baselines.is_empty() { a.method != b.method } else { baselines.contains(&b.method) };
            if !wanted {
                continue;
            }
            deltas.push(PairDelta {
                method: a.method.clone(),
                baseline: b.method.clone(),
                convergence_median_pct: delta(a.convergence_step, b.convergence_step, |q| q.median),
                convergence_mean_pct: delta(a.convergence_step, b.convergence_step, |q| q.mean),
                pickup_rate_pct: delta(a.pickup_rate, b.pickup_rate, |q| q.median),
                iou_pct: delta(a.iou, b.iou, |q| q.median),
            });
        }
    }
    Ok(Comparison {
        deltas,
        convergence_ks: ks_matrix(summaries, |s| &s.convergence_steps, alpha)?,
        error_ks: ks_matrix(summaries, |s| &s.post_means, alpha)?,
    })
}
