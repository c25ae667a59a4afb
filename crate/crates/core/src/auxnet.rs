//! Online-trained auxiliary network that turns loss statistics into
//! combination weights.
//!
//! The network sees `[L_i, mean_i, std_i]` for every loss, passes them
//! through one relu hidden layer and emits one raw value per loss, which
//! `softplus(·) + W_FLOOR` maps to a strictly positive weight. It is trained
//! by its own Adam instance on the relative change of the weighted total
//! loss against that total's running mean, with the losses held constant.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, StepOutcome};
use crate::tensor::Tensor;
use crate::weighting::{combine_weighted, combine_weighted_node, LossStats, WeightVector};
use crate::EPS_DEN;

pub const W_FLOOR: f64 = 1e-6;
pub const DEFAULT_HIDDEN: usize = 24;
pub const FEATURES_PER_LOSS: usize = 3;

/// `[L_1, mean_1, std_1, L_2, mean_2, std_2, ...]`.
pub fn auxnet_features(stats: &LossStats) -> Vec<f64> {
    stats
        .entries()
        .iter()
        .flat_map(|e| [e.current, e.mean, e.std()])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxNet {
    n_losses: usize,
    hidden: usize,
    // [hidden, 3n], [hidden], [n, hidden], [n]
    params: Vec<Tensor>,
}

impl AuxNet {
    pub fn new<R: Rng + ?Sized>(n_losses: usize, hidden: usize, rng: &mut R) -> Self {
        assert!(n_losses >= 1 && hidden >= 1);
        let inputs = FEATURES_PER_LOSS * n_losses;
        let params = vec![
            Tensor::glorot_uniform(&[hidden, inputs], inputs, hidden, rng),
            Tensor::zeros(&[hidden]),
            Tensor::glorot_uniform(&[n_losses, hidden], hidden, n_losses, rng),
            Tensor::zeros(&[n_losses]),
        ];
        Self { n_losses, hidden, params }
    }

    pub fn zeros(n_losses: usize, hidden: usize) -> Self {
        let inputs = FEATURES_PER_LOSS * n_losses;
        Self {
            n_losses,
            hidden,
            params: vec![
                Tensor::zeros(&[hidden, inputs]),
                Tensor::zeros(&[hidden]),
                Tensor::zeros(&[n_losses, hidden]),
                Tensor::zeros(&[n_losses]),
            ],
        }
    }

    pub fn from_params(n_losses: usize, params: Vec<Tensor>) -> Result<Self> {
        let inputs = FEATURES_PER_LOSS * n_losses;
        let hidden = params.first().map(|p| p.shape()[0]).unwrap_or(0);
        let expected: [&[usize]; 4] = [&[hidden, inputs], &[hidden], &[n_losses, hidden], &[n_losses]];
        if params.len() != 4 || params.iter().zip(expected).any(|(p, e)| p.shape() != e) {
            return Err(Error::shape(
                "auxnet",
                format!("parameter shapes do not match {n_losses} losses"),
            ));
        }
        Ok(Self { n_losses, hidden, params })
    }

    pub fn n_losses(&self) -> usize {
        self.n_losses
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Records the forward pass and returns one scalar weight node per loss.
    pub fn forward_node(&self, g: &mut Graph, params: &[NodeId], features: NodeId) -> Result<Vec<NodeId>> {
        if g.value(features).shape() != [FEATURES_PER_LOSS * self.n_losses] {
            return Err(Error::shape(
                "auxnet_forward",
                format!(
                    "expected {} features, got shape {:?}",
                    FEATURES_PER_LOSS * self.n_losses,
                    g.value(features).shape()
                ),
            ));
        }
        let h = g.matvec(params[0], features)?;
        let h = g.add(h, params[1])?;
        let h = g.relu(h);
        let raw = g.matvec(params[2], h)?;
        let raw = g.add(raw, params[3])?;
        let pos = g.softplus(raw);
        let w = g.add_scalar(pos, W_FLOOR);
        (0..self.n_losses).map(|i| g.index(w, i)).collect()
    }

    pub fn forward(&self, features: &[f64]) -> Result<WeightVector> {
        if !self.params.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite("auxnet parameters".into()));
        }
        let mut g = Graph::new();
        let ids: Vec<_> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let f = g.constant(Tensor::new(&[features.len()], features.to_vec())?);
        let w = self.forward_node(&mut g, &ids, f)?;
        WeightVector::new(w.iter().map(|&n| g.value(n).item()).collect())
    }
}

/// Running mean of the weighted total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalLossStats {
    decay: f64,
    mean: Option<f64>,
}

impl TotalLossStats {
    pub fn new(decay: f64) -> Self {
        Self { decay, mean: None }
    }

    pub fn mean(&self) -> Option<f64> {
        self.mean
    }

    pub fn update(&mut self, total: f64) {
        self.mean = Some(match self.mean {
            None => total,
            Some(m) => self.decay * m + (1.0 - self.decay) * total,
        });
    }
}

/// `(total - mean) / |mean|`, or `None` when `|mean| < EPS_DEN`.
///
/// Dividing by the magnitude keeps the objective pointing at a lower total
/// when the running mean is negative, which happens once the `ln w` terms
/// dominate.
pub fn auxnet_loss(total: f64, mean: f64) -> Option<f64> {
    if mean.abs() < EPS_DEN {
        None
    } else {
        Some((total - mean) / mean.abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxStep {
    Applied,
    /// The running total mean was too close to zero; no update.
    GuardedDenominator,
    /// The gradient was not finite; no update.
    SkippedNonFinite,
}

/// Auxnet parameters together with their optimizer and total-loss mean.
#[derive(Clone, Debug)]
pub struct AuxnetTrainer {
    net: AuxNet,
    adam: Adam,
    total_stats: TotalLossStats,
}

impl AuxnetTrainer {
    pub fn new(net: AuxNet, adam: AdamConfig, stats_decay: f64) -> Self {
        let adam = Adam::new(adam, net.params());
        Self {
            net,
            adam,
            total_stats: TotalLossStats::new(stats_decay),
        }
    }

    pub fn net(&self) -> &AuxNet {
        &self.net
    }

    pub fn total_stats(&self) -> &TotalLossStats {
        &self.total_stats
    }

    pub fn weights(&self, stats: &LossStats) -> Result<WeightVector> {
        self.net.forward(&auxnet_features(stats))
    }

    /// Gradient of the auxnet objective with respect to its parameters,
    /// for the given features, constant losses and running mean.
    pub fn objective_gradient(net: &AuxNet, features: &[f64], losses: &[f64], mean: f64) -> Result<Option<(f64, Vec<Tensor>)>> {
        let mut g = Graph::new();
        let ids: Vec<_> = net.params().iter().map(|p| g.param(p.clone())).collect();
        let f = g.constant(Tensor::new(&[features.len()], features.to_vec())?);
        let w = net.forward_node(&mut g, &ids, f)?;
        let l: Vec<_> = losses.iter().map(|&v| g.scalar(v)).collect();
        let total = combine_weighted_node(&mut g, &l, &w)?;
        if mean.abs() < EPS_DEN {
            return Ok(None);
        }
        let centered = g.add_scalar(total, -mean);
        let objective = g.scale(centered, 1.0 / mean.abs());
        let value = g.value(objective).item();
        let mut grads = g.backward(objective)?;
        let grads = ids
            .iter()
            .zip(net.params())
            .map(|(&id, p)| grads.take_or_zeros(id, p.shape()))
            .collect();
        Ok(Some((value, grads)))
    }

    /// One Adam update of the auxnet from this step's statistics and
    /// (constant) losses. The total-loss mean is seeded from the first
    /// total and updated after the step.
    pub fn step(&mut self, stats: &LossStats, losses: &[f64]) -> Result<AuxStep> {
        let features = auxnet_features(stats);
        let weights = self.net.forward(&features)?;
        let total = combine_weighted(losses, &weights)?;
        if self.total_stats.mean().is_none() {
            self.total_stats.update(total);
        }
        let mean = self.total_stats.mean().expect("seeded");
        let outcome = match Self::objective_gradient(&self.net, &features, losses, mean) {
            Ok(None) => AuxStep::GuardedDenominator,
            Ok(Some((_, grads))) => match self.adam.step(self.net.params_mut(), &grads)? {
                StepOutcome::Applied => AuxStep::Applied,
                StepOutcome::SkippedNonFinite => AuxStep::SkippedNonFinite,
            },
            Err(Error::NonFinite(_)) => AuxStep::SkippedNonFinite,
            Err(e) => return Err(e),
        };
        self.total_stats.update(total);
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_stats(values: &[(f64, f64, f64)]) -> LossStats {
        let mut s = LossStats::new(values.len(), 0.99);
        s.update(&values.iter().map(|v| v.0).collect::<Vec<_>>()).unwrap();
        s
    }

    #[test]
    fn features_are_packed_per_loss() {
        let mut s = LossStats::new(2, 0.5);
        s.update(&[0.6, 0.2]).unwrap();
        s.update(&[0.4, 0.2]).unwrap();
        // mean 0.5, var 0.5*0 + 0.5*(0.4-0.5)^2 = 0.005
        let f = auxnet_features(&s);
        assert_eq!(f.len(), 6);
        assert_eq!(&f[..2], &[0.4, 0.5]);
        assert!((f[2] - 0.005f64.sqrt()).abs() < 1e-15);
        assert_eq!(&f[3..], &[0.2, 0.2, 0.0]);
    }

    #[test]
    fn zero_params_give_ln_two() {
        let net = AuxNet::zeros(2, DEFAULT_HIDDEN);
        let w = net.forward(&[0.4, 0.5, 0.1, 0.2, 0.2, 0.0]).unwrap();
        for &wi in w.as_slice() {
            assert!((wi - (2f64.ln() + W_FLOOR)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_wrong_feature_count_and_nan_params() {
        let net = AuxNet::zeros(2, 4);
        assert!(net.forward(&[1.0; 5]).is_err());
        let mut bad = net.clone();
        bad.params_mut()[3].data_mut()[0] = f64::NAN;
        assert!(matches!(bad.forward(&[1.0; 6]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn weights_are_positive_for_wild_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut net = AuxNet::new(2, 8, &mut rng);
            for p in net.params_mut() {
                for v in p.data_mut() {
                    *v *= rng.random_range(-200.0..200.0);
                }
            }
            let feats: Vec<f64> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
            let w = net.forward(&feats).unwrap();
            assert!(w.as_slice().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn loss_reference_values() {
        assert_eq!(auxnet_loss(1.3, 1.3), Some(0.0));
        assert_eq!(auxnet_loss(2.0, 1.0), Some(1.0));
        assert_eq!(auxnet_loss(0.5, 1.0), Some(-0.5));
        assert_eq!(auxnet_loss(0.5, 1e-12), None);
        // Negative means keep the sign of improvement.
        assert_eq!(auxnet_loss(-3.0, -2.0), Some(-0.5));
    }

    #[test]
    fn stationary_weights_leave_params_unchanged() {
        // Zero params give w = ln 2 + floor; use those as the losses.
        let net = AuxNet::zeros(2, 6);
        let w = 2f64.ln() + W_FLOOR;
        let stats = seeded_stats(&[(w, w, 0.0), (w, w, 0.0)]);
        let mut trainer = AuxnetTrainer::new(net.clone(), AdamConfig::default(), 0.99);
        let out = trainer.step(&stats, &[w, w]).unwrap();
        assert_eq!(out, AuxStep::Applied);
        for (a, b) in trainer.net().params().iter().zip(net.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_loss_pushes_weight_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = AuxNet::new(2, DEFAULT_HIDDEN, &mut rng);
        let stats = seeded_stats(&[(3.0, 3.0, 0.0), (3.0, 3.0, 0.0)]);
        let before = net.forward(&auxnet_features(&stats)).unwrap();
        assert!(before.as_slice().iter().all(|&w| w < 3.0));
        let mut trainer = AuxnetTrainer::new(net, AdamConfig::default(), 0.99);
        for _ in 0..20 {
            trainer.step(&stats, &[3.0, 3.0]).unwrap();
        }
        let after = trainer.weights(&stats).unwrap();
        for (a, b) in after.as_slice().iter().zip(before.as_slice()) {
            assert!(a > b, "{b} -> {a}");
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let net = AuxNet::new(2, 6, &mut rng);
            let feats: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..2.0)).collect();
            let losses = [rng.random_range(0.1..1.0), rng.random_range(1.0..20.0)];
            let mean = rng.random_range(0.5..3.0);
            let f2 = feats.clone();
            let n2 = net.clone();
            let report = finite_difference_check(
                move |g, p| {
                    let f = g.constant(Tensor::new(&[6], f2.clone())?);
                    let w = n2.forward_node(g, p, f)?;
                    let l: Vec<_> = losses.iter().map(|&v| g.scalar(v)).collect();
                    let t = combine_weighted_node(g, &l, &w)?;
                    let c = g.add_scalar(t, -mean);
                    Ok(g.scale(c, 1.0 / mean))
                },
                net.params(),
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }
}
