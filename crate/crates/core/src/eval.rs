//! Polygon IoU matching and recall / precision / H-mean.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use geo::{Area, BooleanOps, LineString, Polygon};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::TextPolygon;
use crate::pipeline::Detection;
use crate::synth::{format_coords, parse_coords};

fn to_geo(p: &TextPolygon) -> Result<Polygon<f64>> {
    if p.len() < 3 || p.area() <= 1e-12 {
        return Err(invalid("degenerate polygon"));
    }
    let ring: LineString<f64> = p.vertices.iter().map(|v| (v.x, v.y)).collect();
    Ok(Polygon::new(ring, vec![]))
}

/// Intersection over union by exact polygon clipping.
pub fn polygon_iou(a: &TextPolygon, b: &TextPolygon) -> Result<f64> {
    let (ga, gb) = (to_geo(a)?, to_geo(b)?);
    let inter = ga.intersection(&gb).unsigned_area();
    let union = ga.unsigned_area() + gb.unsigned_area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
}

impl MatchResult {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let hmean = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            hmean,
        }
    }

    /// Sums the counts of several images.
    pub fn merge(results: &[MatchResult]) -> Self {
        let (tp, fp, fn_) = results.iter().fold((0, 0, 0), |a, r| (a.0 + r.tp, a.1 + r.fp, a.2 + r.fn_));
        Self::from_counts(tp, fp, fn_)
    }
}

/// Greedy one-to-one matching in descending score order. A prediction
/// takes the unmatched ground truth of highest IoU if that IoU reaches the
/// threshold. Degenerate predictions never match.
pub fn evaluate(preds: &[Detection], gts: &[TextPolygon], iou_thresh: f64) -> Result<MatchResult> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(invalid(format!("IoU threshold {iou_thresh} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = polygon_iou(&preds[i].polygon, gt).unwrap_or(0.0);
            if iou >= iou_thresh && best.is_none_or(|b| iou > b.1) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp += 1;
        }
    }
    Ok(MatchResult::from_counts(tp, preds.len() - tp, gts.len() - tp))
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub setting: String,
    pub result: MatchResult,
    /// Images per second.
    pub fps: f64,
}

/// Tab-separated table with columns `setting, R, P, H, FPS`.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut out = String::from("setting\tR\tP\tH\tFPS\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.2}",
            r.setting, r.result.recall, r.result.precision, r.result.hmean, r.fps
        );
    }
    out
}

/// Writes one detection per line as `x1,y1,...,xn,yn;score`.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut s = String::new();
    for d in dets {
        let _ = writeln!(s, "{};{}", format_coords(&d.polygon.coords()), d.score);
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads detections written by [`write_detections`]. Lines without a
/// score, such as ground-truth annotations, get score 1.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (coords, score) = match line.split_once(';') {
            Some((c, s)) => (c, s.trim().parse::<f64>().map_err(|e| parse_err(format!("bad score `{s}`: {e}")))?),
            None => (line, 1.0),
        };
        let polygon = TextPolygon::from_coords(&parse_coords(path, i + 1, coords)?).map_err(|e| parse_err(e.to_string()))?;
        out.push(Detection { polygon, score });
    }
    Ok(out)
}
