//! Post-hoc analysis of run curves.

mod convergence;
mod ks;
mod summary;

pub use convergence::{detect_convergence, ConvergenceReport, DEFAULT_MIN_POINTS, DEFAULT_WINDOW_FACTOR};
pub use ks::{ks_critical_value, ks_statistic, ks_two_sample, KsResult, DEFAULT_ALPHA};
pub use summary::{
    analyze_run, compare_methods, quantile, relative_delta_pct, summarize_method, Comparison, KsMatrix,
    MethodSummary, PairDelta, Quartiles, RunAnalysis, DEFAULT_METRIC,
};
