//! Detection losses over per-class activation maps.
//!
//! Each trained loss has a graph form (`*_node`) used during training and a
//! plain-value form used for evaluation. The value forms build a throwaway
//! graph of constants, so both paths share one implementation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::EPS_DEN;

/// Lower clamp for probabilities inside the cross-entropy logarithm.
pub const XENT_CLAMP: f64 = 1e-12;

/// Labeled grasp target in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickupPoint {
    pub row: f64,
    pub col: f64,
}

impl PickupPoint {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(&self, other: &PickupPoint) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceScale {
    pub cm_per_pixel: f64,
    /// Pixel distances are divided by this before variance weighting.
    pub kgc_pixel_divisor: f64,
}

impl Default for DistanceScale {
    fn default() -> Self {
        Self {
            cm_per_pixel: 0.1,
            kgc_pixel_divisor: 100.0,
        }
    }
}

impl DistanceScale {
    pub fn new(cm_per_pixel: f64, kgc_pixel_divisor: f64) -> Result<Self> {
        let s = Self {
            cm_per_pixel,
            kgc_pixel_divisor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cm_per_pixel > 0.0 && self.cm_per_pixel.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cm_per_pixel must be positive, got {}",
                self.cm_per_pixel
            )));
        }
        if !(self.kgc_pixel_divisor > 0.0 && self.kgc_pixel_divisor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kgc_pixel_divisor must be positive, got {}",
                self.kgc_pixel_divisor
            )));
        }
        Ok(())
    }
}

/// Which union the soft IoU divides by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouDenominator {
    /// `Σ(p + g - p·g)`, the probabilistic union.
    #[default]
    Union,
    /// `Σp + Σg`, which counts the intersection twice.
    SumOfAreas,
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} and mask {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_non_negative(op: &str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "{op}: activations must be non-negative, found {v}"
        )));
    }
    Ok(())
}

/// `1 - I/U` with `I = Σ min(p,1)·g` and `U = Σ(p + g - min(p,1)·g) + ε`.
///
/// Activations above 1 count as full overlap inside the mask and as excess
/// area outside it, which keeps the error in `[0, 1]` for unbounded relu
/// outputs. For `p ∈ [0, 1]` this is the plain product form.
pub fn soft_iou_node(g: &mut Graph, pred: NodeId, mask: NodeId, denominator: IouDenominator) -> Result<NodeId> {
    check_same_shape("soft_iou_error", g.value(pred), g.value(mask))?;
    check_non_negative("soft_iou_error", g.value(pred))?;
    let capped = g.clamp_max(pred, 1.0);
    let overlap = g.mul(capped, mask)?;
    let inter = g.sum(overlap);
    let pred_area = g.sum(pred);
    let mask_area = g.sum(mask);
    let areas = g.add(pred_area, mask_area)?;
    let union = match denominator {
        IouDenominator::Union => g.sub(areas, inter)?,
        IouDenominator::SumOfAreas => areas,
    };
    let union = g.add_scalar(union, EPS_DEN);
    let iou = g.div(inter, union)?;
    let neg = g.scale(iou, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

fn coordinate_grids(h: usize, w: usize) -> (Tensor, Tensor) {
    let rows = Tensor::from_fn(&[h, w], |i| (i / w) as f64);
    let cols = Tensor::from_fn(&[h, w], |i| (i % w) as f64);
    (rows, cols)
}

/// Activation-weighted mean pixel coordinate `Σ p·(i,j) / (Σ p + ε)`.
pub fn centroid_node(g: &mut Graph, pred: NodeId) -> Result<(NodeId, NodeId)> {
    let shape = g.value(pred).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("centroid", format!("expected [H,W], got {shape:?}")));
    }
    let (rows, cols) = coordinate_grids(shape[0], shape[1]);
    let rows = g.constant(rows);
    let cols = g.constant(cols);
    let mass = g.sum(pred);
    let mass = g.add_scalar(mass, EPS_DEN);
    let wr = g.mul(pred, rows)?;
    let wr = g.sum(wr);
    let wc = g.mul(pred, cols)?;
    let wc = g.sum(wc);
    Ok((g.div(wr, mass)?, g.div(wc, mass)?))
}

/// Euclidean pixel distance between the activation centroid and `target`.
pub fn centroid_distance_node(g: &mut Graph, pred: NodeId, target: PickupPoint) -> Result<NodeId> {
    let (r, c) = centroid_node(g, pred)?;
    let dr = g.add_scalar(r, -target.row);
    let dc = g.add_scalar(c, -target.col);
    let dr2 = g.mul(dr, dr)?;
    let dc2 = g.mul(dc, dc)?;
    let sq = g.add(dr2, dc2)?;
    Ok(g.sqrt(sq))
}

/// `1 - 1/(d² + 1)` on a distance node in centimetres.
pub fn pickup_error_node(g: &mut Graph, distance_cm: NodeId) -> Result<NodeId> {
    let sq = g.mul(distance_cm, distance_cm)?;
    let den = g.add_scalar(sq, 1.0);
    let one = g.scalar(1.0);
    let frac = g.div(one, den)?;
    let neg = g.scale(frac, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean per-pixel cross entropy of `pred[K,H,W]` against `masks[K,H,W]`.
///
/// Predictions are normalized per pixel by their sum across classes
/// (relu outputs are already non-negative); pixels with no labeled class
/// contribute zero.
pub fn cross_entropy_node(g: &mut Graph, pred: NodeId, masks: NodeId) -> Result<NodeId> {
    let shape = g.value(pred).shape().to_vec();
    check_same_shape("cross_entropy_error", g.value(pred), g.value(masks))?;
    if shape.len() != 3 {
        return Err(Error::shape("cross_entropy_error", format!("expected [K,H,W], got {shape:?}")));
    }
    check_non_negative("cross_entropy_error", g.value(pred))?;
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let channels: Vec<NodeId> = (0..k).map(|c| g.select_channel(pred, c)).collect::<Result<_>>()?;
    let mut total = channels[0];
    for &c in &channels[1..] {
        total = g.add(total, c)?;
    }
    let total = g.add_scalar(total, EPS_DEN);
    let mut acc: Option<NodeId> = None;
    for (c, &ch) in channels.iter().enumerate() {
        let prob = g.div(ch, total)?;
        let prob = g.clamp_min(prob, XENT_CLAMP);
        let logp = g.ln(prob);
        let target = g.select_channel(masks, c)?;
        let term = g.mul(logp, target)?;
        let term = g.sum(term);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let acc = acc.expect("at least one class");
    Ok(g.scale(acc, -1.0 / (h * w) as f64))
}

// Value forms.

pub fn soft_iou_error(pred: &Tensor, mask: &Tensor) -> Result<f64> {
    soft_iou_error_with(pred, mask, IouDenominator::Union)
}

pub fn soft_iou_error_with(pred: &Tensor, mask: &Tensor, denominator: IouDenominator) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let m = g.constant(mask.clone());
    let e = soft_iou_node(&mut g, p, m, denominator)?;
    Ok(g.value(e).item())
}

pub fn centroid(pred: &Tensor) -> Result<PickupPoint> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let (r, c) = centroid_node(&mut g, p)?;
    Ok(PickupPoint::new(g.value(r).item(), g.value(c).item()))
}

pub fn centroid_distance_error(pred: &Tensor, target: PickupPoint) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let d = centroid_distance_node(&mut g, p, target)?;
    Ok(g.value(d).item())
}

/// Grasp-failure estimate `1 - 1/(d² + 1)` for a miss of `distance_cm`.
pub fn pickup_error(distance_cm: f64) -> Result<f64> {
    if !(distance_cm >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pickup distance must be non-negative, got {distance_cm}"
        )));
    }
    Ok(-1.0 / (distance_cm * distance_cm + 1.0) + 1.0)
}

pub fn pickup_rate(pickup_error: f64) -> f64 {
    1.0 - pickup_error
}

pub fn cross_entropy_error(pred: &Tensor, masks: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let m = g.constant(masks.clone());
    let e = cross_entropy_node(&mut g, p, m)?;
    Ok(g.value(e).item())
}

/// Soft IoU error plus pickup error of the centroid miss. Evaluation only.
pub fn combined_eval_error(pred: &Tensor, mask: &Tensor, target: PickupPoint, scale: &DistanceScale) -> Result<f64> {
    let iou = soft_iou_error(pred, mask)?;
    let d = centroid_distance_error(pred, target)?;
    Ok(iou + pickup_error(d * scale.cm_per_pixel)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, data: &[f64]) -> Tensor {
        Tensor::new(&[h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn iou_perfect_overlap_is_zero() {
        let mask = map(2, 3, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(soft_iou_error(&mask, &mask).unwrap().abs() < 1e-8);
    }

    #[test]
    fn iou_zero_prediction_is_one() {
        let mask = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(soft_iou_error(&zero, &mask).unwrap(), 1.0);
    }

    #[test]
    fn iou_one_pixel_mask_full_prediction() {
        let mask = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let ones = Tensor::full(&[2, 2], 1.0);
        let e = soft_iou_error(&ones, &mask).unwrap();
        assert!((e - 0.75).abs() < 1e-8, "{e}");
    }

    #[test]
    fn iou_rejects_negative_and_mismatched() {
        let mask = map(1, 2, &[1.0, 0.0]);
        let bad = map(1, 2, &[0.5, -0.1]);
        assert!(matches!(soft_iou_error(&bad, &mask), Err(Error::InvalidArgument(_))));
        assert!(matches!(soft_iou_error(&Tensor::zeros(&[2, 2]), &mask), Err(Error::Shape { .. })));
    }

    #[test]
    fn iou_stays_in_unit_interval_for_large_activations() {
        let mask = map(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let pred = map(2, 2, &[5.0, 3.0, 0.0, 0.0]);
        let e = soft_iou_error(&pred, &mask).unwrap();
        assert!((0.0..=1.0).contains(&e), "{e}");
        assert!(e > 0.0);
    }

    #[test]
    fn iou_sum_of_areas_variant() {
        let mask = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        // I = 1, U = 4 + 1
        let e = soft_iou_error_with(&Tensor::full(&[2, 2], 1.0), &mask, IouDenominator::SumOfAreas).unwrap();
        assert!((e - 0.8).abs() < 1e-8);
    }

    #[test]
    fn iou_increases_when_outside_activations_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mask = Tensor::from_fn(&[4, 4], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            let pred = Tensor::from_fn(&[4, 4], |_| rng.random_range(0.0..1.0));
            let outside = Tensor::from_fn(&[4, 4], |i| {
                let p = pred.data()[i];
                if mask.data()[i] == 0.0 { p * 1.5 + 0.1 } else { p }
            });
            let before = soft_iou_error(&pred, &mask).unwrap();
            let after = soft_iou_error(&outside, &mask).unwrap();
            if mask.sum() < 16.0 {
                assert!(after > before, "{before} -> {after}");
            }
        }
    }

    #[test]
    fn centroid_single_activation_at_target() {
        let mut pred = Tensor::zeros(&[5, 6]);
        pred.data_mut()[2 * 6 + 3] = 0.7;
        let d = centroid_distance_error(&pred, PickupPoint::new(2.0, 3.0)).unwrap();
        assert!(d < 1e-7, "{d}");
    }

    #[test]
    fn centroid_symmetric_pair_cancels() {
        let mut pred = Tensor::zeros(&[5, 5]);
        pred.data_mut()[5 + 1] = 2.0; // (1,1)
        pred.data_mut()[3 * 5 + 3] = 2.0; // (3,3)
        let d = centroid_distance_error(&pred, PickupPoint::new(2.0, 2.0)).unwrap();
        assert!(d < 1e-7, "{d}");
    }

    #[test]
    fn centroid_three_four_five() {
        let mut pred = Tensor::zeros(&[6, 6]);
        pred.data_mut()[0] = 1.0;
        let d = centroid_distance_error(&pred, PickupPoint::new(3.0, 4.0)).unwrap();
        assert!((d - 5.0).abs() < 1e-7);
    }

    #[test]
    fn centroid_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = Tensor::from_fn(&[7, 9], |_| rng.random_range(0.0..1.0));
        let a = centroid(&pred).unwrap();
        let b = centroid(&pred.map(|v| v * 37.5)).unwrap();
        // Only the ε in the mass denominator separates the two.
        assert!((a.row - b.row).abs() < 1e-7 && (a.col - b.col).abs() < 1e-7);
    }

    #[test]
    fn uniform_map_centroid_is_image_center() {
        let c = centroid(&Tensor::full(&[6, 9], 0.3)).unwrap();
        assert!((c.row - 2.5).abs() < 1e-7 && (c.col - 4.0).abs() < 1e-7);
    }

    #[test]
    fn pickup_error_grasp_statistics() {
        assert_eq!(pickup_error(0.0).unwrap(), 0.0);
        assert!((pickup_error(1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((pickup_error(3.0).unwrap() - 0.9).abs() < 1e-12);
        assert!(pickup_error(-0.1).is_err());
    }

    #[test]
    fn pickup_rate_complements_error() {
        assert_eq!(pickup_rate(0.0), 1.0);
        assert_eq!(pickup_rate(0.5), 0.5);
        assert!((pickup_rate(pickup_error(3.0).unwrap()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pickup_error_slope_vanishes() {
        let slope = |d: f64| 2.0 * d / (d * d + 1.0).powi(2);
        let mut prev = pickup_error(0.0).unwrap();
        for i in 1..200 {
            let d = i as f64 * 0.1;
            let e = pickup_error(d).unwrap();
            assert!(e > prev);
            prev = e;
        }
        assert!(slope(14.0) < 1e-3);
        assert!(slope(0.5) > 0.0);
    }

    #[test]
    fn cross_entropy_reference_values() {
        // one-hot prediction on a fully labeled 1x2 image with 2 classes
        let masks = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(cross_entropy_error(&masks, &masks).unwrap() < 1e-7);
        // uniform over 3 classes
        let masks3 = Tensor::new(&[3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let uniform = Tensor::full(&[3, 1, 1], 0.4);
        let e = cross_entropy_error(&uniform, &masks3).unwrap();
        assert!((e - 3f64.ln()).abs() < 1e-7);
        // 0.25 on the true class
        let m = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let p = Tensor::new(&[2, 1, 1], vec![0.25, 0.75]).unwrap();
        let e = cross_entropy_error(&p, &m).unwrap();
        assert!((e - 4f64.ln()).abs() < 1e-7, "{e}");
        assert!((e - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn combined_error_compositions() {
        let scale = DistanceScale::new(0.2, 100.0).unwrap();
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.data_mut()[5] = 1.0;
        let target = PickupPoint::new(1.0, 1.0);
        assert!(combined_eval_error(&mask, &mask, target, &scale).unwrap() < 1e-7);

        let zero = Tensor::zeros(&[4, 4]);
        let expected = 1.0 + pickup_error(2f64.sqrt() * 0.2).unwrap();
        assert!((combined_eval_error(&zero, &mask, target, &scale).unwrap() - expected).abs() < 1e-9);

        // IoU error 0.75 and a 5 px miss: a 2x2 block of ones over a
        // single-pixel mask has centroid (0.5, 0.5).
        let mut pred = Tensor::zeros(&[6, 6]);
        let mut m = Tensor::zeros(&[6, 6]);
        for &(r, c) in &[(0, 0), (0, 1), (1, 0), (1, 1)] {
            pred.data_mut()[r * 6 + c] = 1.0;
        }
        m.data_mut()[0] = 1.0;
        let target = PickupPoint::new(0.5 + 3.0, 0.5 + 4.0);
        let e = combined_eval_error(&pred, &m, target, &scale).unwrap();
        assert!((e - 1.25).abs() < 1e-7, "{e}");
    }

    #[test]
    fn distance_scale_validation() {
        assert!(DistanceScale::new(0.0, 100.0).is_err());
        assert!(DistanceScale::new(0.1, -1.0).is_err());
        assert!(DistanceScale::new(0.1, 100.0).is_ok());
    }

    #[test]
    fn trained_losses_pass_gradient_check_on_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..3 {
            let mask = Tensor::from_fn(&[8, 8], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
            let pred = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.05..0.95));
            let target = PickupPoint::new(rng.random_range(0.0..7.0), rng.random_range(0.0..7.0));
            let m = mask.clone();
            let iou = finite_difference_check(
                move |g, p| {
                    let mk = g.constant(m.clone());
                    soft_iou_node(g, p[0], mk, IouDenominator::Union)
                },
                std::slice::from_ref(&pred),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(iou.passed(), "{iou:?}");
            let dist = finite_difference_check(
                move |g, p| centroid_distance_node(g, p[0], target),
                std::slice::from_ref(&pred),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(dist.passed(), "{dist:?}");
        }
    }
}
