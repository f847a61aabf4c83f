//! TOML configuration, flag overrides and conversion into the core types.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use locate_core::imageops::{AugmentConfig, Standardization};
use locate_core::{Backbone, BackboneConfig, LossWeights, Palette, SyntheticBackbone, TrainConfig, TransferMode};
use serde::{Deserialize, Serialize};

use crate::error::{LocateError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Synthetic,
    VitAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Seen,
    Unseen,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seen => "seen",
            Self::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "seen" => Ok(Self::Seen),
            "unseen" => Ok(Self::Unseen),
            _ => Err(format!("unknown setting {s:?} (expected seen or unseen)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "GKT", alias = "gkt")]
    Gkt,
    #[serde(rename = "RKT", alias = "rkt")]
    Rkt,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "GKT" => Ok(Self::Gkt),
            "RKT" => Ok(Self::Rkt),
            _ => Err(format!("unknown transfer mode {s:?} (expected GKT or RKT)")),
        }
    }
}

impl From<Mode> for TransferMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Gkt => TransferMode::Gkt,
            Mode::Rkt => TransferMode::Rkt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Part materials in the synthetic palette.
    pub part_materials: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self { kind: BackboneKind::Synthetic, patch_size: 16, feature_dim: 32, seed: 0, part_materials: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamSection {
    pub shared: bool,
}

impl Default for CamSection {
    fn default() -> Self {
        Self { shared: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub tau: f64,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self { tau: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub enabled: bool,
    #[serde(rename = "K")]
    pub k: usize,
    pub mu: f64,
    pub kmeans_restarts: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self { enabled: true, k: 3, mu: 0.65, kmeans_restarts: locate_core::select::DEFAULT_RESTARTS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_cos: f64,
    pub lambda_c: f64,
    pub alpha: f64,
    pub use_cos: bool,
    pub use_lc: bool,
    pub lc_gt_only: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_cos: w.lambda_cos,
            lambda_c: w.lambda_c,
            alpha: w.alpha,
            use_cos: true,
            use_lc: true,
            lc_gt_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub mode: Mode,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { mode: Mode::Rkt }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub setting: Setting,
    #[serde(rename = "N")]
    pub n: usize,
    pub batch_size: usize,
    pub resize: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            root: None,
            setting: Setting::Seen,
            n: 3,
            batch_size: 16,
            resize: aug.resize,
            crop: aug.crop,
            flip_prob: aug.flip_prob,
            mean: aug.standardization.mean,
            std: aug.standardization.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// No default: must come from the file or `--epochs`.
    pub epochs: Option<usize>,
    pub warmup_epochs: usize,
    /// Stop after this many optimisation steps, even mid-epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            epochs: None,
            warmup_epochs: t.warmup_epochs,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtSection {
    /// Gaussian width in pixels at stored image resolution.
    pub sigma: f64,
}

impl Default for GtSection {
    fn default() -> Self {
        Self { sigma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/latest") }
    }
}

/// Fully resolved settings for any subcommand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub backbone: BackboneSection,
    pub cam: CamSection,
    pub extract: ExtractSection,
    pub select: SelectSection,
    pub loss: LossSection,
    pub transfer: TransferSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub gt: GtSection,
    pub output: OutputSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LocateError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LocateError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| LocateError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            momentum: self.train.momentum,
            batch_size: self.data.batch_size,
            epochs: self.train.epochs.unwrap_or(0),
            warmup_epochs: self.train.warmup_epochs,
            exo_per_ego: self.data.n,
            prototypes: self.select.k,
            kmeans_restarts: self.select.kmeans_restarts,
            tau: self.extract.tau,
            mu: self.select.mu,
            weights: LossWeights {
                lambda_cos: self.loss.lambda_cos,
                lambda_c: self.loss.lambda_c,
                alpha: self.loss.alpha,
            },
            transfer: self.transfer.mode.into(),
            use_selector: self.select.enabled,
            use_cos: self.loss.use_cos,
            use_concentration: self.loss.use_lc,
            concentration_gt_only: self.loss.lc_gt_only,
            shared_head: self.cam.shared,
            seed: self.seed,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            resize: self.data.resize,
            crop: self.data.crop,
            flip_prob: self.data.flip_prob,
            standardization: Standardization { mean: self.data.mean, std: self.data.std },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.augment().validate()?;
        if self.data.std.iter().any(|s| !(*s > 0.0)) {
            return Err(LocateError::Config("data.std entries must be positive".into()));
        }
        if !(self.gt.sigma > 0.0) {
            return Err(LocateError::Config(format!("gt.sigma must be positive, got {}", self.gt.sigma)));
        }
        Ok(())
    }

    /// Validation for training, which additionally needs an epoch count.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        match self.train.epochs {
            Some(e) if e > 0 => Ok(()),
            Some(_) => Err(LocateError::Config("train.epochs must be positive".into())),
            None => Err(LocateError::Config("train.epochs is required (set it in the config or pass --epochs)".into())),
        }
    }

    pub fn build_backbone(&self) -> Result<Box<dyn Backbone + Send + Sync>> {
        match self.backbone.kind {
            BackboneKind::Synthetic => {
                let palette = Palette::standard(self.backbone.part_materials)?.standardized(self.data.mean, self.data.std);
                let cfg = BackboneConfig { patch_size: self.backbone.patch_size, feature_dim: self.backbone.feature_dim };
                Ok(Box::new(SyntheticBackbone::new(self.backbone.seed, cfg, palette)?))
            }
            BackboneKind::VitAdapter => Err(LocateError::Config(
                "backbone.kind = \"vit-adapter\" needs exported pretrained weights, which this build cannot load; \
                 use \"synthetic\""
                    .into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = Config::default();
        assert_eq!((c.extract.tau, c.select.mu, c.select.k, c.data.n), (0.6, 0.65, 3, 3));
        assert_eq!((c.loss.lambda_cos, c.loss.lambda_c, c.loss.alpha), (1.0, 0.07, 0.5));
        assert_eq!((c.train.lr, c.train.weight_decay, c.data.batch_size), (1e-3, 5e-4, 16));
        assert_eq!(c.train.epochs, None);
        assert!(c.validate().is_ok());
        assert!(matches!(c.validate_for_training(), Err(LocateError::Config(m)) if m.contains("epochs")));
    }

    #[test]
    fn toml_round_trip_and_spec_keys() {
        let c = Config::from_toml("[select]\nK = 5\nmu = 0.7\n[data]\nN = 2\n[transfer]\nmode = \"GKT\"\n").unwrap();
        assert_eq!((c.select.k, c.select.mu, c.data.n, c.transfer.mode), (5, 0.7, 2, Mode::Gkt));
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("[select]\nkay = 2\n"), Err(LocateError::Config(_))));
    }

    #[test]
    fn vit_adapter_is_a_config_error() {
        let c = Config::from_toml("[backbone]\nkind = \"vit-adapter\"\n").unwrap();
        let err = c.build_backbone().err().unwrap();
        assert_eq!(err.exit_code(), 2);
    }
}
