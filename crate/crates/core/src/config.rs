//! Flat run configuration: every model, loss and schedule constant as one
//! key of a TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AffinityMode;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, OhemConfig, TisLossMode};
use crate::pipeline::{AttentionKind, ModelConfig, Pooling, Schedule, Stage};

/// File name under which a run records its configuration.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// Compute device. Only the CPU is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Device {
    #[default]
    Cpu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training dataset directory.
    pub train_dir: Option<PathBuf>,
    /// Evaluation dataset directory.
    pub test_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub device: Device,
    pub seed: u64,

    pub backbone_channels: Vec<usize>,
    pub downsample_factor: usize,
    pub groups: usize,
    pub expansion: f64,
    pub affinity: AffinityMode,
    pub attention: AttentionKind,
    pub pooled_h: usize,
    pub pooled_w: usize,
    pub fox_h: usize,
    pub fox_w: usize,
    pub k: usize,
    pub t_tr: f64,
    pub t_tcl: f64,
    pub n_center_points: usize,
    pub min_area: usize,
    pub head_channels: usize,
    pub pooling: Pooling,
    pub stage: Stage,

    pub alpha: f64,
    pub beta: f64,
    pub lambda_tcl: f64,
    pub lambda_scale: f64,
    pub lambda_sin_theta: f64,
    pub lambda_cos_theta: f64,
    pub lambda_sin_phi: f64,
    pub lambda_cos_phi: f64,
    pub ohem_neg_pos_ratio: f64,
    pub ohem_min_kept: usize,
    pub tis_loss: TisLossMode,

    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr_warmup: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub roi_jitter: f64,

    pub iou_thresh: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&ModelConfig::default(), &Schedule::default())
    }
}

impl RunConfig {
    /// Flattens a model configuration and schedule; the seed comes from the schedule.
    pub fn from_parts(m: &ModelConfig, s: &Schedule) -> Self {
        let l = m.loss.lambda;
        Self {
            train_dir: None,
            test_dir: None,
            out_dir: PathBuf::from("runs"),
            device: Device::Cpu,
            seed: s.seed,
            backbone_channels: m.backbone_channels.clone(),
            downsample_factor: m.downsample_factor,
            groups: m.groups,
            expansion: m.expansion,
            affinity: m.affinity,
            attention: m.attention,
            pooled_h: m.pooled_shape.0,
            pooled_w: m.pooled_shape.1,
            fox_h: m.fox_output_shape.0,
            fox_w: m.fox_output_shape.1,
            k: m.k,
            t_tr: m.t_tr,
            t_tcl: m.t_tcl,
            n_center_points: m.n_center_points,
            min_area: m.min_area,
            head_channels: m.head_channels,
            pooling: m.pooling,
            stage: m.stage,
            alpha: m.loss.alpha,
            beta: m.loss.beta,
            lambda_tcl: l[0],
            lambda_scale: l[1],
            lambda_sin_theta: l[2],
            lambda_cos_theta: l[3],
            lambda_sin_phi: l[4],
            lambda_cos_phi: l[5],
            ohem_neg_pos_ratio: m.ohem.neg_pos_ratio,
            ohem_min_kept: m.ohem.min_kept,
            tis_loss: m.tis_loss,
            warmup_epochs: s.warmup_epochs,
            epochs: s.epochs,
            lr_warmup: s.lr_warmup,
            lr: s.lr,
            lr_decay: s.lr_decay,
            decay_every: s.decay_every,
            roi_jitter: s.roi_jitter,
            iou_thresh: 0.5,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone_channels: self.backbone_channels.clone(),
            downsample_factor: self.downsample_factor,
            groups: self.groups,
            expansion: self.expansion,
            affinity: self.affinity,
            attention: self.attention,
            pooled_shape: (self.pooled_h, self.pooled_w),
            fox_output_shape: (self.fox_h, self.fox_w),
            k: self.k,
            t_tr: self.t_tr,
            t_tcl: self.t_tcl,
            n_center_points: self.n_center_points,
            min_area: self.min_area,
            head_channels: self.head_channels,
            pooling: self.pooling,
            stage: self.stage,
            loss: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                lambda: [
                    self.lambda_tcl,
                    self.lambda_scale,
                    self.lambda_sin_theta,
                    self.lambda_cos_theta,
                    self.lambda_sin_phi,
                    self.lambda_cos_phi,
                ],
            },
            ohem: OhemConfig {
                neg_pos_ratio: self.ohem_neg_pos_ratio,
                min_kept: self.ohem_min_kept,
            },
            tis_loss: self.tis_loss,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            lr_warmup: self.lr_warmup,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            roi_jitter: self.roi_jitter,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.schedule().validate()?;
        if !(self.iou_thresh > 0.0 && self.iou_thresh < 1.0) {
            return Err(Error::Config(format!("iou_thresh = {} outside (0, 1)", self.iou_thresh)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Writes the configuration as [`RUN_CONFIG_FILE`] inside `dir`.
    pub fn save_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("groups = 4"));
        assert!(text.contains("pooling = \"geoalign\""));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.model_config(), ModelConfig::default());
        assert_eq!(cfg.schedule(), Schedule::default());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("groups = 2\nstage = \"first-only\"\nseed = 7\n").unwrap();
        assert_eq!(cfg.groups, 2);
        assert_eq!(cfg.model_config().stage, Stage::FirstOnly);
        assert_eq!(cfg.schedule().seed, 7);
        assert_eq!(cfg.epochs, Schedule::default().epochs);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["grups = 2", "groups = 3", "iou_thresh = 1.5", "t_tr = 0", "groups = \"x\""] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn saved_next_to_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: 3,
            ..RunConfig::default()
        };
        let path = cfg.save_to_dir(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), RUN_CONFIG_FILE);
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
