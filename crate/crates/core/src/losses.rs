//! Training objectives: OHEM cross-entropy for the text map, the L1 warp
//! loss, the six-term geometry loss and their weighted total.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fox::{channel, GeometryLabels};
use crate::nn::{sigmoid, softplus};
use crate::roi::SamplingGrid;
use crate::tensor::Tensor;

/// Smallest ground-truth scale used as a denominator of the relative scale error.
pub const SCALE_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// TCL, scale, sin theta, cos theta, sin phi, cos phi.
    pub lambda: [f64; 6],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: [1.0; 6],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OhemConfig {
    pub neg_pos_ratio: f64,
    pub min_kept: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            neg_pos_ratio: 3.0,
            min_kept: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TisLossMode {
    /// Positives plus the hardest negatives.
    #[default]
    Ohem,
    /// Every pixel.
    PlainMean,
}

/// Per-term values of the geometry loss (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoxLossTerms {
    pub tcl: f64,
    pub scale: f64,
    pub sin_theta: f64,
    pub cos_theta: f64,
    pub sin_phi: f64,
    pub cos_phi: f64,
    pub total: f64,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Two-class cross-entropy per pixel. Channel 0 is non-text, channel 1 is text.
fn pixel_ce(l0: f64, l1: f64, positive: bool) -> f64 {
    // -log softmax = softplus(other - own)
    if positive {
        softplus(l0 - l1)
    } else {
        softplus(l1 - l0)
    }
}

fn check_tis(logits: &Tensor, mask: &[bool]) -> Result<()> {
    let (h, w, c) = logits.check_dims3("text logits")?;
    if c != 2 || mask.len() != h * w {
        return Err(invalid(format!(
            "text logits {:?} against a mask of {} pixels",
            logits.shape(),
            mask.len()
        )));
    }
    logits.check_finite("text logits")
}

/// Pixels that enter the loss: every positive plus the `K` negatives with the
/// largest loss, `K = min(#neg, max(floor(ratio * #pos), min_kept))`.
/// Ties keep the lower index.
pub fn ohem_select(losses: &[f64], mask: &[bool], cfg: &OhemConfig) -> Vec<usize> {
    let mut selected: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut neg: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let want = ((cfg.neg_pos_ratio * selected.len() as f64).floor() as usize).max(cfg.min_kept);
    let keep = want.min(neg.len());
    neg.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    selected.extend_from_slice(&neg[..keep]);
    selected.sort_unstable();
    selected
}

/// Returns the loss and the selected pixel indices.
pub fn tis_loss_forward(logits: &Tensor, mask: &[bool], cfg: &OhemConfig, mode: TisLossMode) -> Result<(f64, Vec<usize>)> {
    check_tis(logits, mask)?;
    if !(cfg.neg_pos_ratio.is_finite() && cfg.neg_pos_ratio > 0.0) {
        return Err(invalid("OHEM ratio must be positive and finite"));
    }
    let losses: Vec<f64> = logits
        .data()
        .chunks_exact(2)
        .zip(mask)
        .map(|(l, &m)| pixel_ce(l[0], l[1], m))
        .collect();
    let selected = match mode {
        TisLossMode::Ohem => ohem_select(&losses, mask, cfg),
        TisLossMode::PlainMean => (0..mask.len()).collect(),
    };
    if selected.is_empty() {
        return Ok((0.0, selected));
    }
    let loss = selected.iter().map(|&i| losses[i]).sum::<f64>() / selected.len() as f64;
    Ok((loss, selected))
}

pub fn tis_loss_backward(logits: &Tensor, mask: &[bool], selected: &[usize]) -> Tensor {
    let mut g = Tensor::zeros(logits.shape());
    if selected.is_empty() {
        return g;
    }
    let inv = 1.0 / selected.len() as f64;
    for &i in selected {
        let (l0, l1) = (logits.data()[2 * i], logits.data()[2 * i + 1]);
        let p1 = sigmoid(l1 - l0);
        let y1 = if mask[i] { 1.0 } else { 0.0 };
        g.data_mut()[2 * i + 1] = (p1 - y1) * inv;
        g.data_mut()[2 * i] = -(p1 - y1) * inv;
    }
    g
}

/// OHEM cross-entropy of 2-channel text logits against a binary mask.
pub fn loss_tis(pred_logits: &Tensor, gt_mask: &[bool], cfg: &OhemConfig) -> Result<f64> {
    Ok(tis_loss_forward(pred_logits, gt_mask, cfg, TisLossMode::Ohem)?.0)
}

pub fn l1_mean(a: &Tensor, target: &Tensor) -> Result<f64> {
    if a.shape() != target.shape() || a.is_empty() {
        return Err(invalid(format!("L1 between {:?} and {:?}", a.shape(), target.shape())));
    }
    Ok(a.data().iter().zip(target.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn l1_mean_backward(a: &Tensor, target: &Tensor) -> Tensor {
    let inv = 1.0 / a.len() as f64;
    let data = a
        .data()
        .iter()
        .zip(target.data())
        .map(|(x, y)| {
            let d = x - y;
            if d == 0.0 {
                0.0
            } else {
                d.signum() * inv
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), data).expect("shape")
}

/// Mean absolute coordinate difference between two grids.
pub fn loss_align(warped: &SamplingGrid, targets: &SamplingGrid) -> Result<f64> {
    l1_mean(&warped.points, &targets.points)
}

static SCALE_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

fn check_fox(pred: &Tensor, labels: &GeometryLabels) -> Result<()> {
    let (h, w, c) = pred.check_dims3("geometry prediction")?;
    if c != 6 || labels.maps.data.shape() != [h, w, 6] || labels.tcl.len() != h * w {
        return Err(invalid(format!(
            "geometry prediction {:?} against labels {:?}",
            pred.shape(),
            labels.maps.data.shape()
        )));
    }
    pred.check_finite("geometry prediction")
}

fn scale_denominator(s: f64) -> f64 {
    if s <= SCALE_EPS && !SCALE_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("ground-truth scale {s} on a TCL pixel clamped to {SCALE_EPS}");
    }
    s.max(SCALE_EPS)
}

/// Geometry loss on the raw 6-channel head output (channel 1 is a logit).
/// The TCL term is the mean binary cross-entropy over all pixels; the
/// regression terms average smoothed-L1 residuals over TCL pixels.
pub fn fox_loss_forward(pred: &Tensor, labels: &GeometryLabels, w: &LossWeights) -> Result<FoxLossTerms> {
    check_fox(pred, labels)?;
    let gt = labels.maps.data.data();
    let p = pred.data();
    let n = labels.tcl.len();
    let mut t = FoxLossTerms::default();
    let mut count = 0usize;
    for i in 0..n {
        let (pi, gi) = (&p[i * 6..][..6], &gt[i * 6..][..6]);
        let z = pi[channel::TCL];
        t.tcl += if labels.tcl[i] { softplus(-z) } else { softplus(z) };
        if !labels.tcl[i] {
            continue;
        }
        count += 1;
        let s = scale_denominator(gi[channel::SCALE]);
        t.scale += smooth_l1((pi[channel::SCALE] - gi[channel::SCALE]) / s);
        t.sin_theta += smooth_l1(pi[channel::SIN_THETA] - gi[channel::SIN_THETA]);
        t.cos_theta += smooth_l1(pi[channel::COS_THETA] - gi[channel::COS_THETA]);
        t.sin_phi += smooth_l1(pi[channel::SIN_PHI] - gi[channel::SIN_PHI]);
        t.cos_phi += smooth_l1(pi[channel::COS_PHI] - gi[channel::COS_PHI]);
    }
    t.tcl /= n as f64;
    if count > 0 {
        let inv = 1.0 / count as f64;
        t.scale *= inv;
        t.sin_theta *= inv;
        t.cos_theta *= inv;
        t.sin_phi *= inv;
        t.cos_phi *= inv;
    }
    let l = &w.lambda;
    t.total = l[0] * t.tcl + l[1] * t.scale + l[2] * t.sin_theta + l[3] * t.cos_theta + l[4] * t.sin_phi + l[5] * t.cos_phi;
    Ok(t)
}

pub fn fox_loss_backward(pred: &Tensor, labels: &GeometryLabels, w: &LossWeights) -> Tensor {
    let gt = labels.maps.data.data();
    let p = pred.data();
    let n = labels.tcl.len();
    let count = labels.tcl.iter().filter(|&&b| b).count();
    let l = &w.lambda;
    let mut g = Tensor::zeros(pred.shape());
    let gd = g.data_mut();
    let inv_all = 1.0 / n as f64;
    let inv_tcl = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    for i in 0..n {
        let (pi, gi) = (&p[i * 6..][..6], &gt[i * 6..][..6]);
        let y = if labels.tcl[i] { 1.0 } else { 0.0 };
        gd[i * 6 + channel::TCL] = l[0] * (sigmoid(pi[channel::TCL]) - y) * inv_all;
        if !labels.tcl[i] {
            continue;
        }
        let s = gi[channel::SCALE].max(SCALE_EPS);
        gd[i * 6 + channel::SCALE] = l[1] * smooth_l1_grad((pi[channel::SCALE] - gi[channel::SCALE]) / s) / s * inv_tcl;
        for (ch, lam) in [
            (channel::SIN_THETA, l[2]),
            (channel::COS_THETA, l[3]),
            (channel::SIN_PHI, l[4]),
            (channel::COS_PHI, l[5]),
        ] {
            gd[i * 6 + ch] = lam * smooth_l1_grad(pi[ch] - gi[ch]) * inv_tcl;
        }
    }
    g
}

/// Weighted geometry loss of the raw head output.
pub fn loss_fox(pred: &Tensor, gt: &GeometryLabels, w: &LossWeights) -> Result<f64> {
    Ok(fox_loss_forward(pred, gt, w)?.total)
}

pub fn loss_total(l_tis: f64, l_align: f64, l_fox: f64, w: &LossWeights) -> f64 {
    l_tis + w.alpha * l_align + w.beta * l_fox
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::fox::GeometryMaps;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_from(gt: Tensor, tcl: Vec<bool>) -> GeometryLabels {
        GeometryLabels {
            maps: GeometryMaps { data: gt },
            tcl,
        }
    }

    fn random_labels(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GeometryLabels {
        let tcl: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        let gt = Tensor::from_fn3(h, w, 6, |y, x, c| {
            let on = tcl[y * w + x];
            match c {
                0 if on => rng.random_range(1.0..4.0),
                1 if on => 1.0,
                _ if on => rng.random_range(-1.0..1.0),
                _ => 0.0,
            }
        });
        labels_from(gt, tcl)
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn relative_scale_residual() {
        let mut gt = Tensor::zeros(&[1, 1, 6]);
        gt.data_mut()[..6].copy_from_slice(&[2.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let labels = labels_from(gt.clone(), vec![true]);
        let mut pred = gt.clone();
        pred.data_mut()[0] = 3.0;
        pred.data_mut()[1] = 40.0;
        let t = fox_loss_forward(&pred, &labels, &LossWeights::default()).unwrap();
        assert_eq!(t.scale, 0.125);
        assert_eq!((t.sin_theta, t.cos_theta, t.sin_phi, t.cos_phi), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn regression_terms_vanish_at_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = random_labels(4, 5, &mut rng);
        let mut pred = labels.maps.data.clone();
        for (i, &on) in labels.tcl.iter().enumerate() {
            pred.data_mut()[i * 6 + 1] = if on { 30.0 } else { -30.0 };
        }
        let t = fox_loss_forward(&pred, &labels, &LossWeights::default()).unwrap();
        assert_eq!([t.scale, t.sin_theta, t.cos_theta, t.sin_phi, t.cos_phi], [0.0; 5]);
        assert!(t.tcl < 1e-6);
    }

    #[test]
    fn saturated_and_uniform_tis() {
        let mask: Vec<bool> = (0..16).map(|i| i % 5 == 0).collect();
        let sat = Tensor::from_fn3(4, 4, 2, |y, x, c| {
            let pos = mask[y * 4 + x];
            if (c == 1) == pos {
                20.0
            } else {
                0.0
            }
        });
        assert!(loss_tis(&sat, &mask, &OhemConfig::default()).unwrap() < 1e-6);
        let zeros = Tensor::zeros(&[4, 4, 2]);
        for m in [mask.clone(), vec![false; 16], vec![true; 16]] {
            let l = loss_tis(&zeros, &m, &OhemConfig::default()).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    /// Exhaustive oracle: sort every negative by loss (descending, index
    /// ascending on ties) and keep the first `K`.
    fn oracle_selection(logits: &Tensor, mask: &[bool], ratio: f64, min_kept: usize) -> Vec<usize> {
        let mut negs: Vec<(f64, usize)> = Vec::new();
        let mut out = Vec::new();
        for i in 0..mask.len() {
            let (l0, l1) = (logits.data()[2 * i], logits.data()[2 * i + 1]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            if mask[i] {
                out.push(i);
            } else {
                negs.push((lse - l0, i));
            }
        }
        let k = ((ratio * out.len() as f64).floor() as usize).max(min_kept).min(negs.len());
        for _ in 0..k {
            let mut best = 0;
            for j in 1..negs.len() {
                if negs[j].0 > negs[best].0 {
                    best = j;
                }
            }
            out.push(negs.remove(best).1);
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn ohem_matches_sort_oracle_on_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::from_fn3(4, 4, 2, |_, _, _| rng.random_range(-3.0..3.0));
        let mut mask = vec![false; 16];
        mask[5] = true;
        mask[10] = true;
        let cfg = OhemConfig {
            neg_pos_ratio: 3.0,
            min_kept: 0,
        };
        let (_, sel) = tis_loss_forward(&logits, &mask, &cfg, TisLossMode::Ohem).unwrap();
        assert_eq!(sel.len(), 8);
        assert_eq!(sel, oracle_selection(&logits, &mask, 3.0, 0));
    }

    #[test]
    fn align_offset_convention() {
        let a = SamplingGrid {
            points: Tensor::from_fn3(3, 4, 2, |y, x, c| (y * 10 + x + c) as f64),
        };
        let mut b = a.clone();
        for p in b.points.data_mut().chunks_exact_mut(2) {
            p[0] += 1.0;
        }
        assert_eq!(loss_align(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_align(&b, &a).unwrap(), 0.5);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(loss_total(1.0, 2.0, 3.0, &w), 6.0);
        let w = LossWeights { alpha: 0.0, ..w };
        assert_eq!(loss_total(1.0, 2.0, 3.0, &w), 4.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(loss_tis(&Tensor::zeros(&[2, 2, 2]), &[true; 3], &OhemConfig::default()).is_err());
        let g = SamplingGrid {
            points: Tensor::zeros(&[2, 2, 2]),
        };
        let h = SamplingGrid {
            points: Tensor::zeros(&[2, 3, 2]),
        };
        assert!(loss_align(&g, &h).is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = random_labels(3, 4, &mut rng);
        // keep residuals inside the quadratic zone of smoothed-L1
        let pred = Tensor::from_fn3(3, 4, 6, |y, x, c| {
            labels.maps.data.at3(y, x, c) + rng.random_range(-0.6..0.6)
        });
        let w = LossWeights {
            lambda: [0.7, 1.3, 0.9, 1.1, 0.5, 1.7],
            ..LossWeights::default()
        };
        let err = max_rel_error(
            &[pred],
            |g, v| g.fox_loss(v[0], labels.clone(), w).unwrap().0,
            1e-6,
        );
        assert!(err < 1e-4, "fox {err}");

        let logits = Tensor::from_fn3(4, 4, 2, |_, _, _| rng.random_range(-2.0..2.0));
        let mask: Vec<bool> = (0..16).map(|i| i % 4 == 1).collect();
        for mode in [TisLossMode::Ohem, TisLossMode::PlainMean] {
            let cfg = OhemConfig {
                neg_pos_ratio: 2.0,
                min_kept: 0,
            };
            let err = max_rel_error(&[logits.clone()], |g, v| g.tis_loss(v[0], &mask, &cfg, mode).unwrap(), 1e-6);
            assert!(err < 1e-4, "tis {err}");
        }
    }

    proptest! {
        #[test]
        fn fox_loss_is_homogeneous_in_lambda(seed in 0u64..500, c in 0.1f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(3, 3, &mut rng);
            let pred = Tensor::from_fn3(3, 3, 6, |_, _, _| rng.random_range(-2.0..2.0));
            let w = LossWeights::default();
            let wc = LossWeights { lambda: [c; 6], ..w };
            let a = loss_fox(&pred, &labels, &w).unwrap();
            let b = loss_fox(&pred, &labels, &wc).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-12 * b.abs().max(1.0));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn ohem_matches_oracle(seed in 0u64..500, npos in 0usize..20, ratio in 0.5f64..4.0, min_kept in 0usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_fn3(8, 8, 2, |_, _, _| rng.random_range(-3.0..3.0));
            let mut mask = vec![false; 64];
            for _ in 0..npos {
                mask[rng.random_range(0..64)] = true;
            }
            let cfg = OhemConfig { neg_pos_ratio: ratio, min_kept };
            let (loss, sel) = tis_loss_forward(&logits, &mask, &cfg, TisLossMode::Ohem).unwrap();
            prop_assert_eq!(sel, oracle_selection(&logits, &mask, ratio, min_kept));
            prop_assert!(loss >= 0.0);
        }
    }
}
