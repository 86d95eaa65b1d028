//! Sweeps over the attention group count, the RoI pooling variant and the
//! stage layout, each reported as a results table.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{evaluate, MatchResult, TableRow};
use crate::pipeline::{detect_all, train, Model, ModelConfig, Pooling, Schedule, Stage};
use crate::synth::Sample;

/// Group counts of the attention sweep.
pub const GROUP_SWEEP: [usize; 5] = [2, 4, 8, 12, 16];
/// Feature width used by the group sweep; divisible by every swept count.
pub const SWEEP_CHANNELS: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Groups,
    Pooling,
    Stage,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Groups => "groups",
            Axis::Pooling => "pooling",
            Axis::Stage => "stage",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "groups" => Ok(Axis::Groups),
            "pooling" => Ok(Axis::Pooling),
            "stage" => Ok(Axis::Stage),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

/// The labelled configurations of one sweep, derived from `base`.
pub fn settings(axis: Axis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    match axis {
        Axis::Groups => GROUP_SWEEP
            .iter()
            .map(|&groups| {
                let mut cfg = base.clone();
                cfg.backbone_channels[3] = SWEEP_CHANNELS;
                cfg.groups = groups;
                (format!("G={groups}"), cfg)
            })
            .collect(),
        Axis::Pooling => Pooling::ALL
            .iter()
            .map(|&pooling| (pooling.to_string(), ModelConfig { pooling, ..base.clone() }))
            .collect(),
        Axis::Stage => Stage::ALL
            .iter()
            .map(|&stage| (stage.to_string(), ModelConfig { stage, ..base.clone() }))
            .collect(),
    }
}

/// Merged match counts of a model over `samples` and its throughput in images per second.
pub fn score(model: &Model, samples: &[Sample], iou_thresh: f64) -> Result<(MatchResult, f64)> {
    let (outputs, elapsed) = detect_all(model, samples)?;
    let per_image = outputs
        .iter()
        .zip(samples)
        .map(|(o, s)| evaluate(&o.detections, &s.polygons, iou_thresh))
        .collect::<Result<Vec<_>>>()?;
    let fps = samples.len() as f64 / elapsed.as_secs_f64().max(1e-9);
    Ok((MatchResult::merge(&per_image), fps))
}

/// Trains one model per setting on `train_set` and scores it on `test_set`.
/// The first-only setting reuses the two-stage model with its second stage
/// switched off, since both share the same segmentation training.
pub fn run(
    axis: Axis,
    base: &ModelConfig,
    schedule: &Schedule,
    train_set: &[Sample],
    test_set: &[Sample],
    iou_thresh: f64,
) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    let mut two_stage: Option<Model> = None;
    for (setting, cfg) in settings(axis, base) {
        log::info!("ablation {axis}: {setting}");
        let model = match (axis, cfg.stage, &two_stage) {
            (Axis::Stage, Stage::FirstOnly, Some(m)) => {
                let mut m = m.clone();
                m.config.stage = Stage::FirstOnly;
                m
            }
            _ => train(train_set, &cfg, schedule, None)?.model,
        };
        let (result, fps) = score(&model, test_set, iou_thresh)?;
        if axis == Axis::Stage && cfg.stage == Stage::Both {
            two_stage = Some(model);
        }
        rows.push(TableRow { setting, result, fps });
    }
    Ok(rows)
}
