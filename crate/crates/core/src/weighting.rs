//! Running loss statistics and variance-based loss weightings.
//!
//! Every strategy produces a [`WeightVector`] `w` that enters the total loss
//! as `Σ L_i / w_i + ln w_i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::EPS_DEN;

/// Smallest weight any variance rule will hand out.
pub const W_MIN: f64 = 1e-12;

pub const DEFAULT_STATS_DECAY: f64 = 0.99;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StatEntry {
    pub current: f64,
    pub mean: f64,
    pub var: f64,
}

impl StatEntry {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

/// Exponential moving mean and variance per loss.
#[derive(Clone, Debug)]
pub struct LossStats {
    decay: f64,
    entries: Vec<StatEntry>,
    observations: usize,
}

impl LossStats {
    pub fn new(n_losses: usize, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "stats decay must lie in [0, 1)");
        Self {
            decay,
            entries: vec![StatEntry::default(); n_losses],
            observations: 0,
        }
    }

    /// Statistics as if `observations` losses had already been folded in.
    pub fn from_entries(entries: Vec<StatEntry>, observations: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("stats decay must lie in [0, 1), got {decay}")));
        }
        if let Some(e) = entries.iter().find(|e| !(e.var >= 0.0) || !e.mean.is_finite() || !e.current.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid statistics entry {e:?}")));
        }
        Ok(Self { decay, entries, observations })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    pub fn is_seeded(&self) -> bool {
        self.observations > 0
    }

    pub fn entries(&self) -> &[StatEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &StatEntry {
        &self.entries[i]
    }

    /// Folds one observation per loss into the averages. The first call
    /// seeds the mean with the observation and the variance with 0; later
    /// calls update the mean first and measure the deviation against it.
    pub fn update(&mut self, observed: &[f64]) -> Result<()> {
        if observed.len() != self.entries.len() {
            return Err(Error::shape(
                "update_stats",
                format!("expected {} losses, got {}", self.entries.len(), observed.len()),
            ));
        }
        if let Some((i, v)) = observed.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss {i} observed as {v}; gradients have likely exploded"
            )));
        }
        let b = self.decay;
        for (e, &l) in self.entries.iter_mut().zip(observed) {
            e.current = l;
            if self.observations == 0 {
                e.mean = l;
                e.var = 0.0;
            } else {
                e.mean = b * e.mean + (1.0 - b) * l;
                let d = l - e.mean;
                e.var = b * e.var + (1.0 - b) * d * d;
            }
        }
        self.observations += 1;
        Ok(())
    }
}

/// Strictly positive per-loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "weights must be positive and finite, got {w}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weights from a variance rule, with the indices that hit [`W_MIN`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightOutcome {
    pub weights: WeightVector,
    pub floored: Vec<usize>,
}

fn floored(raw: impl Iterator<Item = f64>) -> WeightOutcome {
    let mut floored = Vec::new();
    let weights = raw
        .enumerate()
        .map(|(i, w)| {
            if w >= W_MIN && w.is_finite() {
                w
            } else {
                floored.push(i);
                W_MIN
            }
        })
        .collect();
    WeightOutcome {
        weights: WeightVector(weights),
        floored,
    }
}

/// `Σ L_i / w_i + ln w_i`.
pub fn combine_weighted(losses: &[f64], weights: &WeightVector) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::shape(
            "combine_weighted",
            format!("{} losses but {} weights", losses.len(), weights.len()),
        ));
    }
    Ok(losses
        .iter()
        .zip(weights.as_slice())
        .map(|(l, w)| l / w + w.ln())
        .sum())
}

/// Graph form of [`combine_weighted`]; gradients reach whichever of the
/// loss and weight nodes require them.
pub fn combine_weighted_node(g: &mut Graph, losses: &[NodeId], weights: &[NodeId]) -> Result<NodeId> {
    if losses.len() != weights.len() || losses.is_empty() {
        return Err(Error::shape(
            "combine_weighted",
            format!("{} losses but {} weights", losses.len(), weights.len()),
        ));
    }
    if let Some(w) = weights.iter().map(|&w| g.value(w)).find(|w| w.data().iter().any(|v| !(*v > 0.0))) {
        return Err(Error::InvalidArgument(format!("weights must be positive, got {w:?}")));
    }
    let mut total: Option<NodeId> = None;
    for (&l, &w) in losses.iter().zip(weights) {
        let scaled = g.div(l, w)?;
        let penalty = g.ln(w);
        let term = g.add(scaled, penalty)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `w_i = 2 σ²_i`, which makes the weighted total equal
/// `Σ L_i / (2σ²_i) + ln 2σ²_i`.
pub fn kgc_weights(stats: &LossStats) -> WeightOutcome {
    floored(stats.entries().iter().map(|e| 2.0 * e.var))
}

/// `w_i = 2 (σ²_i + eps)`.
pub fn kgc_eps_weights(stats: &LossStats, eps: f64) -> Result<WeightOutcome> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    Ok(floored(stats.entries().iter().map(|e| 2.0 * (e.var + eps))))
}

/// `w_i = 2 σ²_i / mean_i`; means at or below [`EPS_DEN`] are floored.
pub fn kgc_mean_weights(stats: &LossStats) -> WeightOutcome {
    floored(stats.entries().iter().map(|e| {
        if e.mean > EPS_DEN {
            2.0 * e.var / e.mean
        } else {
            0.0
        }
    }))
}

pub fn fixed_sum_weights(n: usize) -> WeightVector {
    assert!(n >= 1, "need at least one loss");
    WeightVector(vec![1.0; n])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    Kgc,
    KgcEps { eps: f64 },
    KgcMean,
}

/// A variance rule that falls back to plain summation until the
/// statistics hold `warmup_steps` observations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceWeighting {
    pub rule: VarianceRule,
    pub warmup_steps: usize,
}

impl VarianceWeighting {
    pub fn weights(&self, stats: &LossStats) -> Result<WeightOutcome> {
        if stats.observations() < self.warmup_steps {
            return Ok(WeightOutcome {
                weights: fixed_sum_weights(stats.len()),
                floored: Vec::new(),
            });
        }
        Ok(match self.rule {
            VarianceRule::Kgc => kgc_weights(stats),
            VarianceRule::KgcEps { eps } => kgc_eps_weights(stats, eps)?,
            VarianceRule::KgcMean => kgc_mean_weights(stats),
        })
    }
}
