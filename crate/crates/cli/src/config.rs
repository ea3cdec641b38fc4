use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shapelock::cropping::CropConfig;
use shapelock::cyclegan::{GanModelSpec, GanTrainConfig};
use shapelock::imaging::WindowSpec;
use shapelock::phantom::{DatasetConfig, Domain, PhantomSpec, Split};
use shapelock::preprocess::PreprocessConfig;
use shapelock::segmentation::{SegTrainConfig, UNetSpec};
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 128 px phantoms, 64 px network input, small models.
    Desk,
    /// 512 px phantoms, 256 px input, full-size models.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSection {
    pub spec: PhantomSpec,
    pub healthy: DatasetConfig,
    pub pathological: DatasetConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSection {
    pub out_size: usize,
    pub window: WindowSpec,
    #[serde(flatten)]
    pub detect: CropConfig,
}

impl CropSection {
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            crop: self.detect,
            window: self.window,
            out_size: self.out_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleGanSection {
    pub model: GanModelSpec,
    pub train: GanTrainConfig,
    /// Healthy split used for per-epoch testing and checkpoint selection.
    pub test_split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSection {
    pub model: UNetSpec,
    pub train: SegTrainConfig,
    /// CycleGAN checkpoint enabling augmentation.
    pub generator: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSection {
    pub threshold: f32,
    pub models: Vec<NamedPath>,
    pub datasets: Vec<NamedPath>,
    /// Splits evaluated for healthy manifests; pathological ones use every slice.
    pub healthy_splits: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub scale: Scale,
    pub phantom: PhantomSection,
    pub crop: CropSection,
    pub cyclegan: CycleGanSection,
    pub segmentation: SegmentationSection,
    pub evaluation: EvaluationSection,
}

impl PipelineConfig {
    pub fn preset(scale: Scale) -> Self {
        let (image_size, out_size, gan, unet, epochs) = match scale {
            Scale::Desk => (128, 64, GanModelSpec::desk(), UNetSpec::desk(), 20),
            Scale::Full => (512, 256, GanModelSpec::full(), UNetSpec::full(), 100),
        };
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            scale,
            phantom: PhantomSection {
                spec: PhantomSpec::scaled_to(image_size),
                healthy: DatasetConfig::default(),
                pathological: DatasetConfig {
                    domain: Domain::Pathological,
                    ..DatasetConfig::default()
                },
            },
            crop: CropSection {
                out_size,
                window: WindowSpec::lung(),
                detect: CropConfig::default(),
            },
            cyclegan: CycleGanSection {
                model: gan,
                train: GanTrainConfig {
                    epochs,
                    ..Default::default()
                },
                test_split: Split::Val,
            },
            segmentation: SegmentationSection {
                model: unet,
                train: SegTrainConfig {
                    epochs,
                    ..Default::default()
                },
                generator: None,
            },
            evaluation: EvaluationSection {
                threshold: 0.5,
                models: Vec::new(),
                datasets: Vec::new(),
                healthy_splits: vec![Split::Test],
            },
        }
    }

    /// Preset for the requested scale, overlaid with the file and then the flags.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let user: Value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map(Value::Table)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Table(Default::default()),
        };
        let scale = match (overrides.scale, user.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e| CliError::config(format!("scale: {e}")))?,
            (None, None) => Scale::Desk,
        };
        let mut merged = Value::try_from(Self::preset(scale)).expect("preset serializes");
        merge(&mut merged, user.clone());
        let mut cfg: Self = merged
            .try_into()
            .map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        unknown_keys(&user, &Value::try_from(&cfg).expect("config serializes"), "")?;
        cfg.scale = scale;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        // one global seed drives every module
        cfg.cyclegan.train.seed = cfg.seed;
        cfg.segmentation.train.seed = cfg.seed;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scale: Option<Scale>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
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

/// Rejects user keys that did not survive deserialization (typos would
/// otherwise be ignored silently).
fn unknown_keys(user: &Value, parsed: &Value, path: &str) -> Result<(), CliError> {
    let (Value::Table(u), Value::Table(p)) = (user, parsed) else {
        return Ok(());
    };
    for (k, v) in u {
        let full = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match p.get(k) {
            Some(pv) => unknown_keys(v, pv, &full)?,
            None => return Err(CliError::config(format!("unknown config key `{full}`"))),
        }
    }
    Ok(())
}
