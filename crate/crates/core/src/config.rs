//! Experiment configuration, read from TOML.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::losses::{DistanceScale, IouDenominator};
use crate::model::HourglassConfig;
use crate::optim::AdamConfig;
use crate::weighting::DEFAULT_STATS_DECAY;

/// How the training losses of a run are chosen and combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Iou,
    Distance,
    Xent,
    /// Trains on the pickup error directly. Expected to stall.
    Pickup,
    Sum,
    Kgc,
    KgcEps,
    KgcMean,
    Auxnet,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Iou,
        Strategy::Distance,
        Strategy::Xent,
        Strategy::Pickup,
        Strategy::Sum,
        Strategy::Kgc,
        Strategy::KgcEps,
        Strategy::KgcMean,
        Strategy::Auxnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Iou => "iou",
            Strategy::Distance => "distance",
            Strategy::Xent => "xent",
            Strategy::Pickup => "pickup",
            Strategy::Sum => "sum",
            Strategy::Kgc => "kgc",
            Strategy::KgcEps => "kgc_eps",
            Strategy::KgcMean => "kgc_mean",
            Strategy::Auxnet => "auxnet",
        }
    }

    pub fn from_name(name: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Whether the run combines the IoU and distance losses.
    pub fn is_multi_loss(self) -> bool {
        matches!(
            self,
            Strategy::Sum | Strategy::Kgc | Strategy::KgcEps | Strategy::KgcMean | Strategy::Auxnet
        )
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A method entry: either a bare strategy name or a table with options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Name(Strategy),
    Table(MethodOptions),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOptions {
    pub strategy: Strategy,
    /// Identifier used in file names; defaults to the strategy name.
    pub label: Option<String>,
    pub warmup_steps: Option<usize>,
    pub eps: Option<f64>,
    /// Divisor applied to the pixel distance before summation.
    pub distance_divisor: Option<f64>,
    pub aux_hidden: Option<usize>,
    pub aux_lr: Option<f64>,
}

/// A method with every option resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Method {
    pub label: String,
    pub strategy: Strategy,
    pub warmup_steps: usize,
    pub eps: f64,
    pub distance_divisor: f64,
    pub aux_hidden: usize,
    pub aux_lr: f64,
}

pub const DEFAULT_WARMUP_STEPS: usize = 50;
pub const DEFAULT_KGC_EPS: f64 = 1e-3;
pub const DEFAULT_SUM_DIVISOR: f64 = 100.0;

impl Method {
    pub fn new(strategy: Strategy) -> Method {
        Method {
            label: strategy.name().to_string(),
            strategy,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            eps: DEFAULT_KGC_EPS,
            distance_divisor: DEFAULT_SUM_DIVISOR,
            aux_hidden: crate::auxnet::DEFAULT_HIDDEN,
            aux_lr: AdamConfig::desk().lr,
        }
    }

    fn resolve(entry: &MethodEntry, optimizer: &AdamConfig) -> Result<Method> {
        let o = match entry {
            MethodEntry::Name(s) => {
                return Ok(Method {
                    aux_lr: optimizer.lr,
                    ..Method::new(*s)
                })
            }
            MethodEntry::Table(o) => o,
        };
        let base = Method::new(o.strategy);
        let m = Method {
            label: o.label.clone().unwrap_or(base.label),
            strategy: o.strategy,
            warmup_steps: o.warmup_steps.unwrap_or(base.warmup_steps),
            eps: o.eps.unwrap_or(base.eps),
            distance_divisor: o.distance_divisor.unwrap_or(base.distance_divisor),
            aux_hidden: o.aux_hidden.unwrap_or(base.aux_hidden),
            aux_lr: o.aux_lr.unwrap_or(optimizer.lr),
        };
        let bad = |what: &str| Err(Error::Config(format!("method {}: {what}", m.label)));
        if m.label.is_empty() || !m.label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return bad("label must be non-empty and use only [A-Za-z0-9_-]");
        }
        if !(m.eps > 0.0) || !(m.distance_divisor > 0.0) || !(m.aux_lr >= 0.0) || m.aux_hidden == 0 {
            return bad("eps, distance_divisor and aux_hidden must be positive, aux_lr non-negative");
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub stats_decay: f64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub methods: Vec<MethodEntry>,
    /// A run is dead once more than this fraction of output activations
    /// on the validation set is exactly zero and nothing overlaps a mask.
    pub dead_zero_fraction: f64,
    /// Union used by the trained IoU loss. Evaluation always uses the
    /// probabilistic union.
    pub iou_denominator: IouDenominator,
    pub dataset: DatasetConfig,
    pub model: HourglassConfig,
    pub optimizer: AdamConfig,
    pub scale: DistanceScale,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            eval_every: 100,
            batch_size: 8,
            stats_decay: DEFAULT_STATS_DECAY,
            seeds: vec![1, 2, 3, 4, 5],
            out: "runs".into(),
            methods: ["iou", "distance", "sum", "auxnet"]
                .iter()
                .map(|n| MethodEntry::Name(Strategy::from_name(n).unwrap()))
                .collect(),
            dead_zero_fraction: 0.99,
            iou_denominator: IouDenominator::Union,
            dataset: DatasetConfig::default(),
            model: HourglassConfig::default(),
            optimizer: AdamConfig::desk(),
            scale: DistanceScale::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.out, &mut cfg.dataset.dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.eval_every == 0 || self.batch_size == 0 {
            return bad("eval_every and batch_size must be positive".into());
        }
        if !(self.stats_decay > 0.0 && self.stats_decay < 1.0) {
            return bad(format!("stats_decay must lie in (0, 1), got {}", self.stats_decay));
        }
        if !(0.0..=1.0).contains(&self.dead_zero_fraction) {
            return bad("dead_zero_fraction must lie in [0, 1]".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("seed {s} is listed twice"));
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        let methods = self.resolved_methods()?;
        let mut labels = HashSet::new();
        if let Some(m) = methods.iter().find(|m| !labels.insert(m.label.as_str())) {
            return bad(format!("method label {} is used twice", m.label));
        }
        self.optimizer.validate()?;
        self.scale.validate()?;
        self.dataset.generator.validate()?;
        self.model.validate()?;
        let (g, m) = (&self.dataset.generator, &self.model);
        if (g.height, g.width, g.classes) != (m.height, m.width, m.classes) {
            return bad(format!(
                "model expects {}x{} with {} classes but the generator makes {}x{} with {}",
                m.height, m.width, m.classes, g.height, g.width, g.classes
            ));
        }
        if m.in_channels != crate::data::IMAGE_CHANNELS {
            return bad(format!("model needs {} input channels", crate::data::IMAGE_CHANNELS));
        }
        Ok(())
    }

    pub fn resolved_methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|e| Method::resolve(e, &self.optimizer)).collect()
    }

    /// The seven-method, twenty-seed comparison at the original image size
    /// and schedule.
    pub fn paper_protocol() -> Self {
        let mut model = HourglassConfig {
            height: 192,
            width: 256,
            ..HourglassConfig::default()
        };
        model.encoder = vec![16, 32, 64, 128];
        model.dropout_layers = vec![4, 5];
        let generator = crate::data::GeneratorConfig {
            height: 192,
            width: 256,
            size_scale: 1.0,
            ..Default::default()
        };
        Self {
            steps: 100_000,
            eval_every: 500,
            seeds: (1..=20).collect(),
            methods: ["iou", "distance", "sum", "kgc", "kgc_eps", "kgc_mean", "auxnet"]
                .iter()
                .map(|n| MethodEntry::Name(Strategy::from_name(n).unwrap()))
                .collect(),
            dataset: DatasetConfig {
                generator,
                n_train: 12_000,
                n_val: 1_000,
                ..DatasetConfig::default()
            },
            model,
            optimizer: AdamConfig::full_scale(),
            ..Self::default()
        }
    }
}
