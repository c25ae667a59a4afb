//! Fully convolutional hourglass segmentation network.
//!
//! Strided convolutions halve the resolution down to a bottleneck, and
//! transposed convolutions restore it to one relu activation map per class.
//! With an empty encoder the network degenerates to a single 1x1 conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::losses::{centroid, PickupPoint};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HourglassConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// Filters per encoder layer; the decoder mirrors them.
    pub encoder: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dropout_rate: f64,
    /// 1-based indices into the full layer list (encoder then decoder)
    /// whose activations receive dropout. The output layer is excluded.
    pub dropout_layers: Vec<usize>,
    /// Initial bias of every layer.
    pub bias_init: f64,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 64,
            in_channels: 4,
            classes: 3,
            encoder: vec![12, 24, 48],
            kernel: 4,
            stride: 2,
            padding: 1,
            dropout_rate: 0.15,
            dropout_layers: vec![3, 4],
            bias_init: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv,
    Transposed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSpec {
    kind: LayerKind,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl LayerSpec {
    fn kernel_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv => [self.c_out, self.c_in, self.kernel, self.kernel],
            LayerKind::Transposed => [self.c_in, self.c_out, self.kernel, self.kernel],
        }
    }

    fn out_size(&self, n: usize) -> Option<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        match self.kind {
            LayerKind::Conv => (n + 2 * p).checked_sub(k).map(|v| v / s + 1),
            LayerKind::Transposed => ((n - 1) * s + k).checked_sub(2 * p).filter(|&v| v > 0),
        }
    }
}

impl HourglassConfig {
    fn layers(&self) -> Vec<LayerSpec> {
        if self.encoder.is_empty() {
            return vec![LayerSpec {
                kind: LayerKind::Conv,
                c_in: self.in_channels,
                c_out: self.classes,
                kernel: 1,
                stride: 1,
                padding: 0,
            }];
        }
        let mut layers = Vec::with_capacity(2 * self.encoder.len());
        let mut c = self.in_channels;
        for &f in &self.encoder {
            layers.push(LayerSpec {
                kind: LayerKind::Conv,
                c_in: c,
                c_out: f,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            c = f;
        }
        let mut targets: Vec<usize> = self.encoder.iter().rev().skip(1).copied().collect();
        targets.push(self.classes);
        for f in targets {
            layers.push(LayerSpec {
                kind: LayerKind::Transposed,
                c_in: c,
                c_out: f,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            c = f;
        }
        layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers().len()
    }

    /// Checks the layer arithmetic and returns the spatial size after
    /// every layer.
    pub fn validate(&self) -> Result<Vec<(usize, usize)>> {
        let bad = |msg: String| Err(Error::Config(format!("hourglass: {msg}")));
        if self.height == 0 || self.width == 0 || self.in_channels == 0 || self.classes == 0 {
            return bad("input size, channels and classes must be positive".into());
        }
        if self.encoder.iter().any(|&f| f == 0) {
            return bad("filter counts must be positive".into());
        }
        if !self.encoder.is_empty() && (self.kernel == 0 || self.stride == 0) {
            return bad("kernel and stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        let layers = self.layers();
        if let Some(&i) = self.dropout_layers.iter().find(|&&i| i == 0 || i >= layers.len()) {
            return bad(format!(
                "dropout layer {i} must be between 1 and {} (the output layer takes none)",
                layers.len().saturating_sub(1)
            ));
        }
        if let Some(&last) = self.encoder.last() {
            if last < self.classes {
                return bad(format!(
                    "bottleneck has {last} channels but the class vector needs {}",
                    self.classes
                ));
            }
        }
        let mut sizes = Vec::with_capacity(layers.len());
        let (mut h, mut w) = (self.height, self.width);
        for (i, l) in layers.iter().enumerate() {
            match (l.out_size(h), l.out_size(w)) {
                (Some(nh), Some(nw)) if nh > 0 && nw > 0 => {
                    h = nh;
                    w = nw;
                }
                _ => return bad(format!("layer {} cannot process {h}x{w}", i + 1)),
            }
            sizes.push((h, w));
        }
        if (h, w) != (self.height, self.width) {
            return bad(format!(
                "output is {h}x{w} but input is {}x{}; choose sizes divisible by the stride schedule",
                self.height, self.width
            ));
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug)]
pub struct Hourglass {
    config: HourglassConfig,
    layers: Vec<LayerSpec>,
    /// Kernel then bias for every layer.
    params: Vec<Tensor>,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[K, H, W]`, non-negative.
    pub maps: NodeId,
    /// Innermost activation `[C, h, w]`.
    pub bottleneck: NodeId,
}

impl Hourglass {
    pub fn new<R: Rng + ?Sized>(config: HourglassConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        let mut params = Vec::with_capacity(2 * layers.len());
        for l in &layers {
            let area = l.kernel * l.kernel;
            params.push(Tensor::glorot_uniform(&l.kernel_shape(), l.c_in * area, l.c_out * area, rng));
            params.push(Tensor::full(&[l.c_out], config.bias_init));
        }
        Ok(Self { config, layers, params })
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records a forward pass of `image[C,H,W]`. Dropout is applied only
    /// when `dropout` carries an rng.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        image: NodeId,
        mut dropout: Option<&mut R>,
    ) -> Result<Forward> {
        let shape = g.value(image).shape();
        let expected = [self.config.in_channels, self.config.height, self.config.width];
        if shape != expected {
            return Err(Error::shape("hourglass", format!("expected input {expected:?}, got {shape:?}")));
        }
        let mut x = image;
        let mut bottleneck = image;
        let depth = self.config.encoder.len();
        for (i, l) in self.layers.iter().enumerate() {
            let (k, b) = (params[2 * i], params[2 * i + 1]);
            x = match l.kind {
                LayerKind::Conv => g.conv2d(x, k, l.stride, l.padding)?,
                LayerKind::Transposed => g.conv2d_transposed(x, k, l.stride, l.padding)?,
            };
            x = g.add_channel_bias(x, b)?;
            x = g.relu(x);
            if self.config.dropout_layers.contains(&(i + 1)) {
                if let Some(rng) = dropout.as_deref_mut() {
                    x = g.dropout(x, self.config.dropout_rate, rng, true)?;
                }
            }
            if i + 1 == depth {
                bottleneck = x;
            }
        }
        if depth == 0 {
            bottleneck = x;
        }
        Ok(Forward { maps: x, bottleneck })
    }

    /// Evaluation-mode class maps `[K, H, W]`.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids: Vec<_> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(image.clone());
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, &ids, x, None)?;
        Ok(g.value(out.maps).clone())
    }

    /// Predicted pickup point for `class`: the centroid of its map.
    pub fn predict_pickup(&self, image: &Tensor, class: usize) -> Result<PickupPoint> {
        if class >= self.config.classes {
            return Err(Error::InvalidArgument(format!("class {class} out of {}", self.config.classes)));
        }
        centroid(&self.predict(image)?.channel(class)?)
    }

    /// Per-class score read off the innermost layer: the spatial mean of
    /// its first `K` channels.
    pub fn class_scores(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ids: Vec<_> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(image.clone());
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, &ids, x, None)?;
        let b = g.value(out.bottleneck);
        (0..self.config.classes)
            .map(|c| {
                let ch = b.channel(c)?;
                Ok(ch.sum() / ch.len() as f64)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_maps_input_to_class_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HourglassConfig::default();
        let sizes = cfg.validate().unwrap();
        assert_eq!(sizes, vec![(24, 32), (12, 16), (6, 8), (12, 16), (24, 32), (48, 64)]);
        let net = Hourglass::new(cfg, &mut rng).unwrap();
        let out = net.predict(&Tensor::full(&[4, 48, 64], 0.5)).unwrap();
        assert_eq!(out.shape(), &[3, 48, 64]);
        assert!(out.data().iter().all(|&v| v >= 0.0));
        assert_eq!(net.class_scores(&Tensor::full(&[4, 48, 64], 0.5)).unwrap().len(), 3);
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let cfg = HourglassConfig::default();
        let a = Hourglass::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Hourglass::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        // 4*12*16 + 12*24*16 + 24*48*16 + 48*24*16 + 24*12*16 + 12*3*16, plus biases
        let kernels = 16 * (48 + 288 + 1152 + 1152 + 288 + 36);
        let biases = 12 + 24 + 48 + 24 + 12 + 3;
        assert_eq!(a.parameter_count(), kernels + biases);
    }

    #[test]
    fn degenerate_pixel_classifier() {
        let cfg = HourglassConfig {
            height: 5,
            width: 7,
            classes: 1,
            encoder: vec![],
            dropout_layers: vec![],
            ..Default::default()
        };
        let net = Hourglass::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(net.parameter_count(), 4 + 1);
        let out = net.predict(&Tensor::full(&[4, 5, 7], 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 5, 7]);
    }

    #[test]
    fn inconsistent_layer_arithmetic_is_rejected() {
        let cfg = HourglassConfig {
            height: 50,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("output is"), "{err}");
        let cfg = HourglassConfig {
            dropout_layers: vec![6],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = HourglassConfig {
            encoder: vec![8, 2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn evaluation_is_deterministic_and_dropout_free() {
        let net = Hourglass::new(HourglassConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let img = Tensor::from_fn(&[4, 48, 64], |i| ((i * 7919) % 97) as f64 / 97.0);
        assert_eq!(net.predict(&img).unwrap(), net.predict(&img).unwrap());
    }

    #[test]
    fn small_network_gradients_match_finite_differences() {
        let cfg = HourglassConfig {
            height: 8,
            width: 8,
            in_channels: 2,
            classes: 2,
            encoder: vec![3, 4],
            dropout_layers: vec![],
            bias_init: 0.1,
            ..Default::default()
        };
        let net = Hourglass::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let img = Tensor::from_fn(&[2, 8, 8], |i| ((i * 31) % 17) as f64 / 17.0);
        let n2 = net.clone();
        let report = finite_difference_check(
            move |g, p| {
                let x = g.constant(img.clone());
                let out = n2.forward::<ChaCha8Rng>(g, p, x, None)?;
                let w = g.constant(Tensor::from_fn(&[2, 8, 8], |i| (i % 5) as f64 - 2.0));
                let y = g.mul(out.maps, w)?;
                Ok(g.sum(y))
            },
            net.params(),
            1e-5, // at 1e-6 one ulp of the output already costs 1e-10 on zero gradients
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel {:?}", report.max_rel_error());
    }
}
