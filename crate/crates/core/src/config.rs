//! Model, loss and training configuration, with the desk and paper-scale
//! presets. Config files are TOML; any field left out falls back to the
//! selected preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SplitConfig;
use crate::error::{Error, Result};

/// Environment variable overriding every seed in a loaded config.
pub const SEED_ENV: &str = "TVPR_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// rows of the temporal position table
    pub max_frames: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    /// output channels of each separable convolution layer
    pub conv_channels: Vec<usize>,
    /// temporal stride of each layer
    pub temporal_strides: Vec<usize>,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub spatial_stride: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub max_seconds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionConfig {
    pub max_len: usize,
    pub min_count: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationHead {
    /// `(cos + 1) / 2`
    Cosine,
    /// concatenation, hidden layer, GELU, scalar, sigmoid
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    pub dim: usize,
    pub head: RelationHead,
    pub mlp_hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// negatives only: `sum over j != i`
    PaperExclusive,
    /// InfoNCE: `sum over all j`
    StandardInclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub denominator: Denominator,
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            denominator: Denominator::PaperExclusive,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub motion: MotionConfig,
    pub caption: CaptionConfig,
    pub fusion: FusionConfig,
    pub relation: RelationConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            visual: VisualConfig {
                height: 32,
                width: 32,
                patch_size: 8,
                dim: 64,
                blocks: 2,
                heads: 4,
                mlp_ratio: 4,
                max_frames: 16,
                dropout: 0.0,
            },
            motion: MotionConfig {
                conv_channels: vec![16, 32],
                temporal_strides: vec![1, 2],
                spatial_kernel: 3,
                temporal_kernel: 3,
                spatial_stride: 2,
                dim: 32,
                layers: 2,
                heads: 2,
                mlp_ratio: 4,
                dropout: 0.1,
                max_seconds: 16,
            },
            caption: CaptionConfig {
                max_len: 32,
                min_count: 1,
                dim: 64,
                layers: 2,
                heads: 2,
                mlp_ratio: 4,
                dropout: 0.1,
            },
            fusion: FusionConfig {
                dim: 64,
                layers: 2,
                heads: 4,
                mlp_ratio: 4,
                dropout: 0.0,
            },
            relation: RelationConfig {
                dim: 64,
                head: RelationHead::Cosine,
                mlp_hidden: 64,
            },
        }
    }

    pub fn paper() -> Self {
        Self {
            visual: VisualConfig {
                height: 224,
                width: 224,
                patch_size: 16,
                dim: 768,
                blocks: 12,
                heads: 12,
                mlp_ratio: 4,
                max_frames: 32,
                dropout: 0.0,
            },
            motion: MotionConfig {
                conv_channels: vec![64, 192],
                temporal_strides: vec![1, 2],
                spatial_kernel: 3,
                temporal_kernel: 3,
                spatial_stride: 2,
                dim: 256,
                layers: 4,
                heads: 4,
                mlp_ratio: 4,
                dropout: 0.1,
                max_seconds: 16,
            },
            caption: CaptionConfig {
                max_len: 32,
                min_count: 1,
                dim: 768,
                layers: 12,
                heads: 12,
                mlp_ratio: 4,
                dropout: 0.1,
            },
            fusion: FusionConfig {
                dim: 512,
                layers: 12,
                heads: 8,
                mlp_ratio: 4,
                dropout: 0.1,
            },
            relation: RelationConfig {
                dim: 512,
                head: RelationHead::Cosine,
                mlp_hidden: 512,
            },
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    VisualOnly,
    MotionOnly,
    VisMoConcat,
    FullFfa,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::VisualOnly,
        Ablation::MotionOnly,
        Ablation::VisMoConcat,
        Ablation::FullFfa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::VisualOnly => "visual_only",
            Ablation::MotionOnly => "motion_only",
            Ablation::VisMoConcat => "vis_mo_concat",
            Ablation::FullFfa => "full_ffa",
        }
    }

    /// Component columns: (visual encoder, motion encoder, fusion aggregator).
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Ablation::VisualOnly => (true, false, false),
            Ablation::MotionOnly => (false, true, false),
            Ablation::VisMoConcat => (true, true, false),
            Ablation::FullFfa => (true, true, true),
        }
    }

    pub fn uses_motion(self) -> bool {
        self.components().1
    }

    pub fn uses_visual(self) -> bool {
        self.components().0
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub num_frames: usize,
    pub ablation: Ablation,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub split: SplitConfig,
    /// precomputed motion features replacing the convolutional extractor,
    /// resolved relative to the manifest's directory
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_features: Option<String>,
}

impl TrainConfig {
    /// Desk preset: reduced model widths, batch 8, 8 frames.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            learning_rate: DESK_LEARNING_RATE,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            num_frames: 8,
            ablation: Ablation::FullFfa,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            model: ModelConfig::desk(),
            split: SplitConfig::default(),
            motion_features: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            learning_rate: 3e-5,
            epochs: 30,
            batch_size: 16,
            num_frames: 15,
            model: ModelConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        crate::dataset::split::check_ratios(self.split.ratios)?;
        if self.batch_size < 2 && self.loss.denominator == Denominator::PaperExclusive {
            return Err(Error::config(format!(
                "batch size {} leaves the negatives-only denominator empty; use at least 2",
                self.batch_size
            )));
        }
        if self.batch_size == 0 || self.num_frames == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size, num_frames and epochs must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.num_frames > self.model.visual.max_frames {
            return Err(Error::config(format!(
                "num_frames {} exceeds the temporal table capacity {}",
                self.num_frames, self.model.visual.max_frames
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_with_preset(text, Self::preset)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&read(path)?)?;
        if let Some(seed) = seed_override()? {
            cfg.seed = seed;
            cfg.split.seed = seed;
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}

pub const DESK_LEARNING_RATE: f64 = 3e-5;

/// Reads the seed override from the environment, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses `text` on top of the preset named by its `preset` key (desk when
/// absent): tables are merged key by key, other values replace the preset's.
pub(crate) fn parse_with_preset<C>(text: &str, preset: impl Fn(Preset) -> C) -> Result<C>
where
    C: Serialize + for<'de> Deserialize<'de>,
{
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::format("config", e.to_string()))?;
    let which = match user.get("preset") {
        Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::format("config", e.to_string()))?,
        None => Preset::Desk,
    };
    let mut base = toml::Table::try_from(preset(which)).map_err(|e| Error::format("config", e.to_string()))?;
    merge(&mut base, user);
    toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| Error::format("config", e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
