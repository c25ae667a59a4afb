use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_FACTOR: f64 = 0.5;
pub const DEFAULT_MIN_POINTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub converged: bool,
    /// Index of the first accepted point.
    pub index: Option<usize>,
    pub post_mean: Option<f64>,
    pub post_std: Option<f64>,
    pub points_remaining: usize,
}

/// Absorbs rounding in the mean, so a constant run is accepted.
fn slack(xs: &[f64]) -> f64 {
    4.0 * f64::EPSILON * xs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Finds where `series` settles.
///
/// Starting from the whole series, the first remaining point is accepted
/// if it lies within `window_factor` population standard deviations of the
/// mean of the remaining points. Otherwise it is dropped and the mean and
/// deviation are recomputed over what is left. The search gives up once
/// fewer than `min_points` remain.
pub fn detect_convergence(series: &[f64], window_factor: f64, min_points: usize) -> Result<ConvergenceReport> {
    if min_points == 0 {
        return Err(Error::InvalidArgument("min_points must be at least 1".into()));
    }
    if series.len() < min_points {
        return Err(Error::InvalidArgument(format!(
            "series has {} points, fewer than min_points = {min_points}",
            series.len()
        )));
    }
    if !(window_factor >= 0.0 && window_factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("window factor must be non-negative, got {window_factor}")));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("series value {} at index {i}", series[i])));
    }
    for start in 0..=series.len() - min_points {
        let rest = &series[start..];
        let (mean, std) = mean_std(rest);
        if (rest[0] - mean).abs() <= window_factor * std + slack(rest) {
            return Ok(ConvergenceReport {
                converged: true,
                index: Some(start),
                post_mean: Some(mean),
                post_std: Some(std),
                points_remaining: rest.len(),
            });
        }
    }
    Ok(ConvergenceReport {
        converged: false,
        index: None,
        post_mean: None,
        post_std: None,
        points_remaining: min_points - 1,
    })
}
