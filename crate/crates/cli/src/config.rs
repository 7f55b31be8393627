//! Experiment configuration: TOML schema, dotted overrides and the resolved snapshot.

use std::path::{Path, PathBuf};

use fundus_core::distillation::KdConfig;
use fundus_core::modelzoo::{Backbone, ModelSpec, Pretrained, Regime, SiameseSpec};
use fundus_core::synthdata::SynthSpec;
use fundus_core::training::TrainConfig;
use fundus_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub metadata_csv: PathBuf,
    pub image_root: PathBuf,
    /// Read `train.csv`/`val.csv` (or the `_pairs` variants) from here instead of splitting.
    pub manifest_dir: Option<PathBuf>,
    pub train_ratio: f64,
    /// Decode every image once up front.
    pub preload: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            metadata_csv: PathBuf::from("data/full_df.csv"),
            image_root: PathBuf::from("data/preprocessed_images"),
            manifest_dir: None,
            train_ratio: 0.8,
            preload: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    pub regime: String,
    /// Safetensors file or directory of `<backbone>.safetensors`; random init when absent.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::MobilenetV2.name().into(),
            regime: Regime::FullFinetune.name().into(),
            pretrained: None,
        }
    }
}

fn field_error(field: &str, e: Error) -> Error {
    Error::Config(format!("{field}: {e}"))
}

impl ModelConfig {
    pub fn spec(&self, section: &str) -> Result<ModelSpec> {
        let backbone: Backbone = self
            .backbone
            .parse()
            .map_err(|e| field_error(&format!("{section}.backbone"), e))?;
        let regime: Regime = self
            .regime
            .parse()
            .map_err(|e| field_error(&format!("{section}.regime"), e))?;
        Ok(ModelSpec::new(backbone, regime))
    }

    pub fn pretrained(&self) -> Pretrained {
        self.pretrained.clone().map_or(Pretrained::Random, Pretrained::From)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub kd: KdConfig,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student: ModelConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            kd: KdConfig::default(),
            teacher_checkpoint: None,
            student: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiameseConfig {
    pub backbone: String,
    pub regime: String,
    pub projection_dim: usize,
    pub fused_dim: usize,
    pub hidden_dim: usize,
    pub projection_dropout: f32,
    pub classifier_dropout: f32,
    /// Single-eye checkpoint or weight file whose extractor seeds the shared branch.
    pub init_from: Option<PathBuf>,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        let d = SiameseSpec::default();
        SiameseConfig {
            backbone: d.backbone.backbone.name().into(),
            regime: d.backbone.regime.name().into(),
            projection_dim: d.projection_dim,
            fused_dim: d.fused_dim,
            hidden_dim: d.hidden_dim,
            projection_dropout: d.projection_dropout,
            classifier_dropout: d.classifier_dropout,
            init_from: None,
        }
    }
}

impl SiameseConfig {
    pub fn spec(&self) -> Result<SiameseSpec> {
        let backbone = ModelConfig {
            backbone: self.backbone.clone(),
            regime: self.regime.clone(),
            pretrained: None,
        }
        .spec("siamese")?;
        Ok(SiameseSpec {
            backbone,
            projection_dim: self.projection_dim,
            fused_dim: self.fused_dim,
            hidden_dim: self.hidden_dim,
            projection_dropout: self.projection_dropout,
            classifier_dropout: self.classifier_dropout,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub checkpoint: Option<PathBuf>,
    /// Validation images explained, taken in manifest order.
    pub samples: usize,
    /// Class whose logit is explained; the sample's own label when absent.
    pub target_class: Option<usize>,
    pub opacity: f32,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            checkpoint: None,
            samples: 4,
            target_class: None,
            opacity: fundus_core::explain::DEFAULT_OPACITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub backbones: Vec<String>,
    pub regimes: Vec<String>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            backbones: vec![Backbone::MobilenetV2.name().into()],
            regimes: vec![Regime::FullFinetune.name().into(), Regime::FrozenBackbone.name().into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub siamese: SiameseConfig,
    pub synth: SynthSpec,
    pub evaluate: EvaluateConfig,
    pub explain: ExplainConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            siamese: SiameseConfig::default(),
            synth: SynthSpec::default(),
            evaluate: EvaluateConfig::default(),
            explain: ExplainConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn parse_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Command-line adjustments applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads the file (if any), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in &overrides.sets {
            apply_override(&mut table, s)?;
        }
        if let Some(seed) = overrides.seed {
            for key in ["seed", "train.seed", "synth.seed"] {
                apply_override(&mut table, &format!("{key}={seed}"))?;
            }
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(dir) = &overrides.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| field_error(section, e));
        wrap("train", self.train.validate())?;
        wrap("distill.kd", self.distill.kd.validate())?;
        wrap("synth", self.synth.validate())?;
        self.model.spec("model")?;
        self.distill.student.spec("distill.student")?;
        self.siamese.spec()?;
        for b in &self.benchmark.backbones {
            b.parse::<Backbone>().map_err(|e| field_error("benchmark.backbones", e))?;
        }
        for r in &self.benchmark.regimes {
            r.parse::<Regime>().map_err(|e| field_error("benchmark.regimes", e))?;
        }
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            return Err(Error::Config(format!("data.train_ratio {} outside (0, 1)", self.data.train_ratio)));
        }
        if !(0.0..=1.0).contains(&self.explain.opacity) {
            return Err(Error::Config(format!("explain.opacity {} outside [0, 1]", self.explain.opacity)));
        }
        if matches!(self.explain.target_class, Some(c) if c > 1) {
            return Err(Error::Config("explain.target_class must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Every field materialized, in a stable order.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
