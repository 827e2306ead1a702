//! Run configuration: built-in defaults, then a TOML file, then `key=value`
//! overrides with dotted keys (`curriculum.F=2`, `mim.ratio=0.5`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Region, SceneFormat, SplitSpec};
use crate::difficulty::Aggregation;
use crate::model::{EncoderSpec, HeadSpec, DEFAULT_PARAM_BUDGET};
use crate::nn::AdamW;
use crate::pretext::{MaskingConfig, SpatialJigsawConfig, SpectralJigsawConfig};
use crate::synthetic::SyntheticSpec;
use crate::training::{FinetuneConfig, LossWeights, PretextConfig, Strategy, TrainConfig};
use crate::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scene files; empty means a synthetic scene from `[synthetic]`.
    pub scenes: Vec<PathBuf>,
    pub format: Option<SceneFormat>,
    pub tile_size: usize,
    pub pretrain_stride: usize,
    /// Split rectangles; empty means the default column split.
    pub regions: Vec<Region>,
    pub num_classes: usize,
    pub ignore_id: Option<i32>,
    /// Extra unlabelled synthetic scenes (same class spectra, other seeds)
    /// tiled in full for the pretraining pool.
    pub extra_pretrain_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: Vec::new(),
            format: None,
            tile_size: 16,
            pretrain_stride: 8,
            regions: Vec::new(),
            num_classes: 3,
            ignore_id: None,
            extra_pretrain_scenes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub param_budget: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 16],
            feature_dim: 16,
            param_budget: DEFAULT_PARAM_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub enabled: bool,
    #[serde(rename = "S")]
    pub stages: usize,
    #[serde(rename = "K")]
    pub initial_epochs: usize,
    #[serde(rename = "F")]
    pub growth: f64,
    pub aggregation: Aggregation,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stages: 3,
            initial_epochs: 4,
            growth: 1.5,
            aggregation: Aggregation::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialJigsawSection {
    /// Square patch side in pixels.
    pub patch: usize,
}

impl Default for SpatialJigsawSection {
    fn default() -> Self {
        Self { patch: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralJigsawSection {
    pub blocks: usize,
}

impl Default for SpectralJigsawSection {
    fn default() -> Self {
        Self { blocks: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JigsawConfig {
    pub spatial: SpatialJigsawSection,
    pub spectral: SpectralJigsawSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    /// Square patch side in pixels.
    pub patch: usize,
    /// Band groups; each masked patch spans `bands / band_groups` bands.
    pub band_groups: usize,
    pub ratio: f64,
}

impl Default for MimConfig {
    fn default() -> Self {
        let m = MaskingConfig::default();
        Self {
            patch: m.patch_height,
            band_groups: m.band_groups,
            ratio: m.ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: Strategy,
    pub batch_size: usize,
    /// Epochs of non-curriculum pretraining; unset means matched to the
    /// curriculum's step budget.
    pub epochs: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Cmtssl,
            batch_size: 16,
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub freeze_encoder: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            learning_rate: 2e-3,
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub jigsaw: JigsawConfig,
    pub mim: MimConfig,
    pub loss: LossWeights,
    pub optim: AdamW,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::default(),
            curriculum: CurriculumConfig::default(),
            jigsaw: JigsawConfig::default(),
            mim: MimConfig::default(),
            loss: LossWeights::default(),
            optim: AdamW::default(),
            train: TrainSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set`: a TOML literal, else a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(config_err)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let parsed: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.loss.validate()?;
        self.train_config(self.train.strategy, self.seed).validate()?;
        if self.data.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.data.tile_size == 0 || self.data.pretrain_stride == 0 {
            return Err(Error::Config("tile size and stride must be positive".into()));
        }
        if !(self.mim.ratio > 0.0 && self.mim.ratio < 1.0) {
            return Err(Error::Config(format!("mim.ratio must lie in (0, 1), got {}", self.mim.ratio)));
        }
        if !(self.finetune.learning_rate > 0.0) || self.finetune.batch_size == 0 {
            return Err(Error::Config("fine-tuning needs a positive learning rate and batch size".into()));
        }
        Ok(())
    }

    pub fn pretext(&self) -> PretextConfig {
        PretextConfig {
            spatial: SpatialJigsawConfig {
                patch_height: self.jigsaw.spatial.patch,
                patch_width: self.jigsaw.spatial.patch,
            },
            spectral: SpectralJigsawConfig {
                blocks: self.jigsaw.spectral.blocks,
            },
            masking: MaskingConfig {
                patch_height: self.mim.patch,
                patch_width: self.mim.patch,
                band_groups: self.mim.band_groups,
                ratio: self.mim.ratio,
            },
        }
    }

    pub fn train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optim,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs.unwrap_or(1),
            strategy,
            seed,
            pretext: self.pretext(),
            aggregation: self.curriculum.aggregation,
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            optimizer: AdamW {
                learning_rate: self.finetune.learning_rate,
                ..self.optim
            },
            batch_size: self.finetune.batch_size,
            epochs: self.finetune.epochs,
            seed,
            num_classes: self.data.num_classes,
            ignore_id: self.data.ignore_id,
            freeze_encoder: self.finetune.freeze_encoder,
        }
    }

    pub fn encoder_spec(&self, bands: usize) -> EncoderSpec {
        EncoderSpec {
            height: self.data.tile_size,
            width: self.data.tile_size,
            bands,
            widths: self.model.widths.clone(),
            feature_dim: self.model.feature_dim,
        }
    }

    pub fn pretext_heads(&self, bands: usize) -> Vec<HeadSpec> {
        let grid = self.data.tile_size / self.jigsaw.spatial.patch.max(1);
        crate::model::pretext_heads(bands, (grid, grid), self.jigsaw.spectral.blocks)
    }

    /// Split rectangles for a `height × width` scene. Without explicit
    /// regions the columns are cut at 3/8 and 1/2 of the width (rounded down
    /// to whole tiles): train on the left, validation next, test on the right.
    pub fn split_spec(&self, height: usize, width: usize) -> SplitSpec {
        let t = self.data.tile_size;
        let regions = if self.data.regions.is_empty() {
            let snap = |x: usize| x / t * t;
            let a = snap(width * 3 / 8);
            let b = snap(width / 2);
            let h = snap(height);
            let w = snap(width);
            vec![
                Region::new(0, 0, a, h, crate::data::Split::Train),
                Region::new(a, 0, b, h, crate::data::Split::Validation),
                Region::new(b, 0, w, h, crate::data::Split::Test),
            ]
        } else {
            self.data.regions.clone()
        };
        SplitSpec {
            tile_size: t,
            pretrain_stride: self.data.pretrain_stride,
            regions,
        }
    }
}

/// Short names accepted by `sweep --param`.
pub fn sweep_key(param: &str) -> String {
    match param {
        "S" | "K" | "F" => format!("curriculum.{param}"),
        "alpha_spa" => "loss.spatial".into(),
        "alpha_spe" => "loss.spectral".into(),
        "alpha_mim" => "loss.mim".into(),
        "mask_ratio" => "mim.ratio".into(),
        "lr" => "optim.learning_rate".into(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn precedence_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\n[curriculum]\nF = 2.0\nK = 10\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["curriculum.F=1.25".into(), "mim.ratio=0.5".into()]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.curriculum.initial_epochs, 10);
        assert_eq!(cfg.curriculum.growth, 1.25);
        assert_eq!(cfg.mim.ratio, 0.5);
        assert_eq!(cfg.curriculum.stages, 3);
    }

    #[test]
    fn string_override_and_unknown_key() {
        let cfg = RunConfig::resolve(None, &["train.strategy=mtssl".into()]).unwrap();
        assert_eq!(cfg.train.strategy, Strategy::Mtssl);
        assert!(matches!(
            RunConfig::resolve(None, &["curriculum.Q=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::resolve(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn default_split_is_disjoint() {
        let spec = RunConfig::default().split_spec(128, 128);
        spec.validate().unwrap();
        assert_eq!(spec.regions[0].x1, 48);
        assert_eq!(spec.regions[1].x1, 64);
    }

    #[test]
    fn sweep_aliases() {
        assert_eq!(sweep_key("F"), "curriculum.F");
        assert_eq!(sweep_key("optim.eps"), "optim.eps");
    }
}
