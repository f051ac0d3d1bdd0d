//! Pipeline configuration: defaults, then a JSON file, then dotted-path
//! overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowadapt_core::cbst::SelfTrainConfig;
use flowadapt_core::synthgen::{DomainShift, SceneSpec};
use flowadapt_core::{FeatureConfig, FlowEncoding, FlowParams, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CONFIG_VERSION: u32 = 1;

/// Per-stage offsets added to the top-level seed.
pub mod seed_offset {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const ADAPT: u64 = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: SceneSpec,
    pub source_shift: DomainShift,
    pub target_shift: DomainShift,
    pub n_source: usize,
    pub n_target: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            source_shift: DomainShift::identity(),
            target_shift: DomainShift::target_default(),
            n_source: 40,
            n_target: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    #[default]
    Estimated,
    GroundTruth,
}

/// Flow-map encoding fused with RGB, or `None` for the RGB-only baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingChoice {
    #[default]
    ColorWheel,
    MagDir,
    Mag,
    None,
}

impl EncodingChoice {
    pub fn encoding(self) -> Option<FlowEncoding> {
        match self {
            EncodingChoice::ColorWheel => Some(FlowEncoding::ColorWheel),
            EncodingChoice::MagDir => Some(FlowEncoding::MagDir),
            EncodingChoice::Mag => Some(FlowEncoding::Mag),
            EncodingChoice::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub source: FlowSource,
    pub encoding: EncodingChoice,
    pub params: FlowParams,
    /// Magnitude mapped to full saturation; fixed so every frame shares
    /// one scale.
    pub max_mag: f32,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            source: FlowSource::Estimated,
            encoding: EncodingChoice::ColorWheel,
            params: FlowParams::default(),
            max_mag: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub pixels_per_image: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            pixels_per_image: 1000,
        }
    }
}

/// Seeds inside `model.train` and `adapt` are replaced by values derived
/// from the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub flow: FlowConfig,
    pub model: ModelConfig,
    pub adapt: SelfTrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            synth: SynthConfig::default(),
            flow: FlowConfig::default(),
            model: ModelConfig::default(),
            adapt: SelfTrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Builds the effective config from an optional file and overrides of
    /// the form `dotted.path=value`. Values parse as JSON, falling back to
    /// a plain string.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let file_value: Value = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                let mut base = serde_json::to_value(PipelineConfig::default())?;
                merge(&mut base, file_value);
                base
            }
            None => serde_json::to_value(PipelineConfig::default())?,
        };
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        let cfg: PipelineConfig = serde_json::from_value(value).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg.with_stage_seeds())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            );
        }
        self.synth.spec.validate()?;
        self.synth.source_shift.validate()?;
        self.synth.target_shift.validate()?;
        self.flow.params.validate()?;
        if !(self.flow.max_mag > 0.0 && self.flow.max_mag.is_finite()) {
            bail!("flow.max_mag must be positive");
        }
        if self.model.hidden == 0 {
            bail!("model.hidden must be positive");
        }
        self.model.train.validate()?;
        self.adapt.schedule.validate()?;
        self.adapt.train.validate()?;
        Ok(())
    }

    fn with_stage_seeds(mut self) -> Self {
        self.model.train.seed = self.seed.wrapping_add(seed_offset::TRAIN);
        self.adapt.seed = self.seed.wrapping_add(seed_offset::ADAPT);
        self.adapt.train.seed = self.seed.wrapping_add(seed_offset::ADAPT);
        self
    }

    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(part)
                .with_context(|| format!("unknown config key `{key}`"))?,
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .with_context(|| format!("`{part}` in `{key}` is not an index"))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .with_context(|| format!("index {idx} out of range ({len}) in `{key}`"))?
            }
            _ => bail!("config key `{key}` descends into a scalar"),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
