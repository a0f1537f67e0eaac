//! Run configuration: one JSON document covering scenes, grid, model,
//! training, evaluation and ablation switches. Every field has a default and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::VoxelConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Variant};
use crate::synth::SceneSpec;
use crate::targets::TargetConfig;

/// Format version written into checkpoints and printed by `--version`.
pub const FORMAT_VERSION: &str = concat!("raanet-", env!("CARGO_PKG_VERSION"), "/ckpt-1");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub num_classes: usize,
    pub widths: [usize; 3],
    pub head_width: usize,
    pub heatmap_bias: f64,
    pub heatmap_clamp: f64,
    /// Classes that use the small-object Gaussian decay.
    pub small_classes: Vec<usize>,
    pub d_large: f64,
    pub d_small: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TargetConfig::default();
        ArchConfig {
            num_classes: m.num_classes,
            widths: m.widths,
            head_width: m.head_width,
            heatmap_bias: m.heatmap_bias,
            heatmap_clamp: m.heatmap_clamp,
            small_classes: t.small_classes,
            d_large: t.d_large,
            d_small: t.d_small,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Flip / rotate / scale each training scene.
    pub augment: bool,
    /// Percentiles of per-box point counts used as density thresholds.
    pub density_percentiles: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            weights: LossWeights::default(),
            augment: true,
            density_percentiles: (30.0, 70.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub peak_window: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub ap_iou: f64,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            peak_window: 3,
            score_threshold: 0.1,
            nms_iou: 0.2,
            ap_iou: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_raa: bool,
    /// With `use_raa`, restrict range-aware convs to the heads.
    pub lite: bool,
    pub use_adle: bool,
    pub use_aniso_gaussian: bool,
    /// Regress dims in meters instead of logs.
    pub raw_dims: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_raa: true,
            lite: false,
            use_adle: true,
            use_aniso_gaussian: true,
            raw_dims: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub voxel: VoxelConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." {
                String::new()
            } else {
                format!("/{}", path.replace('.', "/"))
            };
            Error::Config {
                pointer,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |pointer: &str, message: String| {
            Err(Error::Config {
                pointer: pointer.into(),
                message,
            })
        };
        self.scene.validate()?;
        self.voxel.geometry()?;
        self.train.weights.validate()?;
        if self.train.batch_size == 0 {
            return bad("/train/batch_size", "must be positive".into());
        }
        if !(self.train.lr > 0.0) {
            return bad("/train/lr", format!("must be positive, got {}", self.train.lr));
        }
        if self.eval.peak_window % 2 == 0 {
            return bad("/eval/peak_window", "must be odd".into());
        }
        if self.model.num_classes == 0 {
            return bad("/model/num_classes", "must be positive".into());
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.ablation.use_raa, self.ablation.lite)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant(),
            use_adle: self.ablation.use_adle,
            num_classes: self.model.num_classes,
            widths: self.model.widths,
            head_width: self.model.head_width,
            heatmap_bias: self.model.heatmap_bias,
            heatmap_clamp: self.model.heatmap_clamp,
        }
    }

    pub fn target_config(&self) -> TargetConfig {
        TargetConfig {
            num_classes: self.model.num_classes,
            small_classes: self.model.small_classes.clone(),
            d_large: self.model.d_large,
            d_small: self.model.d_small,
            tau: self.train.weights.tau,
            anisotropic: self.ablation.use_aniso_gaussian,
            raw_dims: self.ablation.raw_dims,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.variant(), Variant::Full);
        assert_eq!(cfg.train.weights.lambda_box, 0.25);
    }

    #[test]
    fn unknown_key_reports_pointer() {
        let err = RunConfig::from_json(r#"{"train": {"epochs": 3, "bogus": 1}}"#).unwrap_err();
        match err {
            Error::Config { pointer, message } => {
                assert_eq!(pointer, "/train/bogus");
                assert!(message.contains("bogus"));
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = RunConfig::from_json(r#"{"train": {"lr": "fast"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { pointer, .. } if pointer == "/train/lr"));
    }

    #[test]
    fn semantic_checks() {
        assert!(RunConfig::from_json(r#"{"train": {"batch_size": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"voxel": {"x_range": [0, 1], "y_range": [0, 1], "z_range": [0, 1], "cell": [0.3, 0.3]}}"#).is_err());
    }
}
