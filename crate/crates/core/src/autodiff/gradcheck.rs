//! Central-difference verification of [`Graph::backward`].

use super::graph::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Index of the worst element.
    pub worst: usize,
    pub checked: usize,
    /// Elements whose ±h perturbation crosses a kink (relu, clamp, ...).
    pub excluded: Vec<usize>,
    /// Elements whose perturbed evaluation was not finite.
    pub non_finite: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.non_finite.is_empty() && p.max_rel_error < self.tolerance)
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded.len()).sum()
    }
}

fn evaluate<F>(build: &F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok((g.value(out).item(), g.kink_signature()))
}

/// Compares backward gradients of `build` against `(f(θ+h) - f(θ-h)) / 2h`
/// for every element of every parameter tensor.
///
/// `build` receives the parameter nodes in the order of `params` and must
/// return a scalar node. It is re-run for every perturbation, so anything
/// random inside it has to be seeded inside the closure.
pub fn finite_difference_check<F>(build: F, params: &[Tensor], h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &ids)?;
    let base_sig = g.kink_signature();
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.take_or_zeros(id, p.shape()))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdReport {
        tolerance: tol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, param) in params.iter().enumerate() {
        let mut check = ParamCheck::default();
        for e in 0..param.len() {
            let orig = param.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let (plus, sig_plus) = evaluate(&build, &work)?;
            work[pi].data_mut()[e] = orig - h;
            let (minus, sig_minus) = evaluate(&build, &work)?;
            work[pi].data_mut()[e] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                check.non_finite.push(e);
                continue;
            }
            if sig_plus != base_sig || sig_minus != base_sig {
                check.excluded.push(e);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            check.checked += 1;
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = e;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
