//! The pipeline configuration file.
//!
//! A single TOML file drives every command; all defaults live here and
//! nothing else is consulted (apart from the `--seed` flag, which overrides
//! `seed`, and `LAP_DATA_DIR`, which anchors relative data paths). Unknown
//! keys are rejected so typos cannot silently fall back to defaults.
//!
//! Reference hyper-parameter values for the three published setups are noted
//! on the corresponding keys: chest X-ray (single concept head, two 1x1
//! convolutions with 8 hidden channels, MinAR 0.1 / MaxAR 0.5 / IAR 0.1),
//! face attributes (three heads at 0.02 / 0.2 / 0.01 plus a free head with
//! MaxAR 0.1 only), and ImageNet-scale plug-in (1000 heads, linear
//! aggregation, MinAR = IAR = 0.01 without MaxAR, auxiliary weight 0.125,
//! LAP-only stage then fine-tuning of the containing block and classifier).
//! The shipped defaults are scaled to the bundled synthetic dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lap_core::graph::{LayerDesc, LayerGraph, LayerKind, Placement, PlacementSpec};
use lap_core::lap::{Aggregation, KernelSpec, LapConfig};
use lap_core::losses::{DiscLossConfig, HeadRatios, LossWeights, TermWeights};
use lap_core::synth::{
    BackgroundSpec, ConceptShapeSpec, DistractorSpec, ShapeKind, SynthSpec,
};
use lap_core::train::{OptimizerKind, Stage, Supervision};

fn err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::anyhow!("config error: {}", msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed: dataset content, parameter init, batch shuffling and the
    /// evaluation baseline all derive from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub interpret: InterpretConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            train: TrainConfig::default(),
            interpret: InterpretConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root. A relative path is resolved against `LAP_DATA_DIR`
    /// when that variable is set.
    pub dir: String,
    /// `lapm` (one float container per split) or `png` (one file per image).
    pub format: String,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub bg_grid: usize,
    pub bg_low: f64,
    pub bg_high: f64,
    pub bg_noise: f64,
    /// `circle` or `square`.
    pub concept_kind: String,
    pub concept_size_min: usize,
    pub concept_size_max: usize,
    pub concept_contrast: f64,
    pub concept_jitter: f64,
    pub distractor_kind: String,
    pub distractor_size_min: usize,
    pub distractor_size_max: usize,
    pub distractor_contrast: f64,
    pub distractor_jitter: f64,
    pub distractor_max_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".into(),
            format: "lapm".into(),
            image_size: 64,
            n_train: 2000,
            n_val: 250,
            n_test: 250,
            bg_grid: 8,
            bg_low: 0.10,
            bg_high: 0.45,
            bg_noise: 0.05,
            concept_kind: "circle".into(),
            concept_size_min: 7,
            concept_size_max: 12,
            concept_contrast: 0.4,
            concept_jitter: 0.03,
            distractor_kind: "square".into(),
            distractor_size_min: 3,
            distractor_size_max: 5,
            distractor_contrast: 0.25,
            distractor_jitter: 0.03,
            distractor_max_count: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Only `cnn3` (a stack of conv/relu/pool blocks) is built in.
    pub arch: String,
    /// Output channels per block.
    pub channels: Vec<usize>,
    pub classes: usize,
    /// Pool layers to replace with LAPs (e.g. `block2.pool`). Empty builds
    /// the vanilla twin.
    pub lap_targets: Vec<String>,
    pub heads: usize,
    /// Hidden width of the scorer; 0 means a single 1x1 convolution.
    /// Chest X-ray reference: 8.
    pub hidden: usize,
    /// `max`, `sum` or `linear`. ImageNet reference: `linear`.
    pub aggregation: String,
    pub alpha_init: f64,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: "cnn3".into(),
            channels: vec![8, 16, 32],
            classes: 2,
            lap_targets: vec!["block2.pool".into(), "block3.pool".into()],
            heads: 1,
            hidden: 0,
            aggregation: "max".into(),
            alpha_init: 4.0,
            epsilon: 1e-4,
        }
    }
}

/// Per-head overrides of the active-ratio settings; absent fields skip the
/// corresponding loss term (that is how a free head is configured).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadOverride {
    pub min_ar: Option<f64>,
    pub max_ar: Option<f64>,
    pub iar: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `task`, `weak` or `boxes`.
    pub supervision: String,
    /// Uniform ratios for every head. References: chest X-ray 0.1 / 0.5 /
    /// 0.1; face attributes 0.02 / 0.2 / 0.01; ImageNet 0.01 / none / 0.01.
    pub min_ar: Option<f64>,
    pub max_ar: Option<f64>,
    pub iar: Option<f64>,
    /// Per-head overrides; when non-empty it must list every head.
    pub heads: Vec<HeadOverride>,
    pub concordance_t: f64,
    pub one_sided_concordance: bool,
    pub task_weight: f64,
    /// ImageNet reference: 0.125.
    pub per_lap_weight: f64,
    pub per_pair_weight: f64,
    pub selector_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            supervision: "weak".into(),
            min_ar: Some(0.06),
            max_ar: Some(0.2),
            iar: Some(0.1),
            heads: Vec::new(),
            concordance_t: 0.1,
            one_sided_concordance: false,
            task_weight: 1.0,
            per_lap_weight: 0.25,
            per_pair_weight: 0.25,
            selector_weight: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    /// Substring patterns over parameter names; `"*"` matches everything.
    pub trainable: Vec<String>,
    pub epochs: usize,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            name: "main".into(),
            trainable: vec!["*".into()],
            epochs: 10,
            optimizer: "adam".into(),
            lr: 1e-3,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            stages: vec![StageConfig::default()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub decay_alpha: f64,
    /// Concept head whose integrated map is exported and evaluated.
    pub concept: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            decay_alpha: 0.8,
            concept: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Keep-k fractions of the faithfulness protocol; 1.0 is always
    /// evaluated in addition.
    pub ks: Vec<f64>,
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            ks: lap_core::evaluate::DEFAULT_KS.to_vec(),
            probe_hidden: 16,
            probe_epochs: 300,
            probe_lr: 0.05,
        }
    }
}

fn shape_kind(name: &str) -> anyhow::Result<ShapeKind> {
    match name {
        "circle" => Ok(ShapeKind::Circle),
        "square" => Ok(ShapeKind::Square),
        other => Err(err(format!("unknown shape kind '{}'", other))),
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read {}: {}", path.display(), e)))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| err(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.model.arch != "cnn3" {
            return Err(err(format!("unknown arch '{}'", self.model.arch)));
        }
        if self.model.channels.is_empty() {
            return Err(err("model.channels must not be empty"));
        }
        if self.model.classes < 2 {
            return Err(err("model.classes must be >= 2"));
        }
        if !["lapm", "png"].contains(&self.data.format.as_str()) {
            return Err(err(format!("unknown data format '{}'", self.data.format)));
        }
        if !["task", "weak", "boxes"].contains(&self.losses.supervision.as_str()) {
            return Err(err(format!(
                "unknown supervision '{}'",
                self.losses.supervision
            )));
        }
        if !self.losses.heads.is_empty() && self.losses.heads.len() != self.model.heads {
            return Err(err(format!(
                "losses.heads lists {} heads, model has {}",
                self.losses.heads.len(),
                self.model.heads
            )));
        }
        let blocks = self.model.channels.len();
        for t in &self.model.lap_targets {
            let known = (1..=blocks).any(|b| *t == format!("block{}.pool", b)) || t == "gap";
            if !known {
                return Err(err(format!("lap target '{}' does not name a pool", t)));
            }
        }
        if self.train.stages.is_empty() {
            return Err(err("train.stages must not be empty"));
        }
        for s in &self.train.stages {
            if !["adam", "sgd"].contains(&s.optimizer.as_str()) {
                return Err(err(format!("unknown optimizer '{}'", s.optimizer)));
            }
        }
        self.synth_spec()?.validate().map_err(|e| err(e.to_string()))?;
        self.lap_config(KernelSpec::square(2, 2))?
            .validate()
            .map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    /// Dataset root, honoring `LAP_DATA_DIR` for relative paths.
    pub fn data_dir(&self) -> PathBuf {
        let p = PathBuf::from(&self.data.dir);
        if p.is_absolute() {
            return p;
        }
        match std::env::var_os("LAP_DATA_DIR") {
            Some(root) => PathBuf::from(root).join(p),
            None => p,
        }
    }

    pub fn synth_spec(&self) -> anyhow::Result<SynthSpec> {
        let d = &self.data;
        Ok(SynthSpec {
            image_size: d.image_size,
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            background: BackgroundSpec {
                grid: d.bg_grid,
                low: d.bg_low,
                high: d.bg_high,
                noise: d.bg_noise,
            },
            concepts: vec![ConceptShapeSpec {
                kind: shape_kind(&d.concept_kind)?,
                size_range: (d.concept_size_min, d.concept_size_max),
                contrast: d.concept_contrast,
                intensity_jitter: d.concept_jitter,
            }],
            distractors: DistractorSpec {
                kind: shape_kind(&d.distractor_kind)?,
                size_range: (d.distractor_size_min, d.distractor_size_max),
                contrast: d.distractor_contrast,
                intensity_jitter: d.distractor_jitter,
                max_count: d.distractor_max_count,
            },
            seed: self.seed,
        })
    }

    pub fn disc_config(&self) -> DiscLossConfig {
        let l = &self.losses;
        let heads = if l.heads.is_empty() {
            vec![
                HeadRatios {
                    min_ar: l.min_ar,
                    max_ar: l.max_ar,
                    iar: l.iar,
                };
                self.model.heads
            ]
        } else {
            l.heads
                .iter()
                .map(|h| HeadRatios {
                    min_ar: h.min_ar,
                    max_ar: h.max_ar,
                    iar: h.iar,
                })
                .collect()
        };
        DiscLossConfig {
            heads,
            concordance_t: l.concordance_t,
            one_sided_concordance: l.one_sided_concordance,
            weights: TermWeights::default(),
        }
    }

    pub fn lap_config(&self, kernel: KernelSpec) -> anyhow::Result<LapConfig> {
        let aggregation = match self.model.aggregation.as_str() {
            "max" => Aggregation::Max,
            "sum" => Aggregation::Sum,
            "linear" => Aggregation::Linear,
            other => return Err(err(format!("unknown aggregation '{}'", other))),
        };
        Ok(LapConfig {
            kernel,
            heads: self.model.heads,
            hidden: (self.model.hidden > 0).then_some(self.model.hidden),
            aggregation,
            alpha_init: self.model.alpha_init,
            epsilon: self.model.epsilon,
            disc: self.disc_config(),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            task: self.losses.task_weight,
            per_lap: self.losses.per_lap_weight,
            per_pair: self.losses.per_pair_weight,
            selector: self.losses.selector_weight,
        }
    }

    pub fn supervision(&self) -> Supervision {
        match self.losses.supervision.as_str() {
            "task" => Supervision::Task,
            "boxes" => Supervision::Boxes,
            _ => Supervision::Weak,
        }
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.train
            .stages
            .iter()
            .map(|s| Stage {
                name: s.name.clone(),
                trainable: s.trainable.clone(),
                epochs: s.epochs,
                optimizer: if s.optimizer == "sgd" {
                    OptimizerKind::Sgd
                } else {
                    OptimizerKind::Adam
                },
                lr: s.lr,
                weight_decay: s.weight_decay,
            })
            .collect()
    }

    /// The plain (vanilla-pooling) architecture.
    pub fn base_descs(&self) -> Vec<LayerDesc> {
        let size = self.data.image_size;
        let mut descs = Vec::new();
        let mut in_ch = 1usize;
        let mut dim = size;
        for (i, &out_ch) in self.model.channels.iter().enumerate() {
            let b = i + 1;
            descs.push(LayerDesc::new(
                format!("block{}.conv", b),
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    kernel: KernelSpec {
                        kernel_h: 3,
                        kernel_w: 3,
                        stride_h: 1,
                        stride_w: 1,
                        padding: 1,
                    },
                },
            ));
            descs.push(LayerDesc::new(format!("block{}.relu", b), LayerKind::Relu));
            descs.push(LayerDesc::new(
                format!("block{}.pool", b),
                LayerKind::MaxPool {
                    kernel: KernelSpec::square(2, 2),
                },
            ));
            in_ch = out_ch;
            dim /= 2;
        }
        let _ = dim;
        descs.push(LayerDesc::new(
            "gap",
            LayerKind::AdaptiveAvgPool { out_h: 1, out_w: 1 },
        ));
        descs.push(LayerDesc::new("flatten", LayerKind::Flatten));
        descs.push(LayerDesc::new(
            "fc",
            LayerKind::Linear {
                in_features: in_ch,
                out_features: self.model.classes,
            },
        ));
        descs
    }

    pub fn placement_spec(&self) -> anyhow::Result<PlacementSpec> {
        let cfg = self.lap_config(KernelSpec::square(2, 2))?;
        Ok(PlacementSpec {
            placements: self
                .model
                .lap_targets
                .iter()
                .map(|t| Placement {
                    target: t.clone(),
                    cfg: cfg.clone(),
                })
                .collect(),
        })
    }

    /// Builds the model: the vanilla graph plus the configured LAP surgery.
    pub fn build_model(&self) -> anyhow::Result<LayerGraph> {
        let base = LayerGraph::from_descs(
            (1, self.data.image_size, self.data.image_size),
            &self.base_descs(),
            self.seed,
        )?;
        let spec = self.placement_spec()?;
        Ok(lap_core::graph::extend_architecture(&base, &spec, self.seed)?)
    }
}
