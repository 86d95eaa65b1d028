//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run alone with `cargo test -p nasklab --test acceptance`.

use std::cell::OnceCell;
use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nasklab::ablation;
use nasklab::attention::{attention_flops, gsca_block, gsca_forward, hidden_width, Conv1x1, GscaParams};
use nasklab::autograd::{Graph, Var};
use nasklab::eval::{polygon_iou, MatchResult};
use nasklab::fox::{self, decode, generate_geometry_labels, normalize_orientation, DecodeConfig, GeometryLabels, GeometryMaps, Quad};
use nasklab::geometry::Point;
use nasklab::losses::{self, LossWeights, OhemConfig, TisLossMode};
use nasklab::params::{GraphParams, ParamStore};
use nasklab::pipeline::{train, ModelConfig, Schedule, Stage};
use nasklab::roi::{self, geo_align, roi_align, AffineField, RoIBox, RoiFrame};
use nasklab::synth::{render, CurveFamily, Sample, SynthSpec, SynthWord};
use nasklab::Tensor;

type Outcome = Result<String, String>;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn within(limit: Duration, elapsed: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, budget {limit:?}"))
    }
}

// ---------------------------------------------------------------- 1

/// Reference RoI Align over a rotated box given in map pixels: `k x k`
/// bilinear samples per bin at the sub-cell centers, zero outside the map,
/// pixel centers at integer + 0.5.
fn reference_roi_align(map: &Tensor, roi: &RoIBox, oh: usize, ow: usize, k: usize) -> Tensor {
    let (h, w, c) = map.dims3();
    let (sn, cs) = roi.angle.sin_cos();
    let at = |y: i64, x: i64, ch: usize| {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            map.at3(y as usize, x as usize, ch)
        }
    };
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for by in 0..oh {
        for bx in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for sy in 0..k {
                    for sx in 0..k {
                        // fraction of the box width/height, from -1/2 to 1/2
                        let fu = ((bx * k + sx) as f64 + 0.5) / (ow * k) as f64 - 0.5;
                        let fv = ((by * k + sy) as f64 + 0.5) / (oh * k) as f64 - 0.5;
                        let (lx, ly) = (fu * roi.size.0, fv * roi.size.1);
                        let px = roi.center.x + cs * lx - sn * ly - 0.5;
                        let py = roi.center.y + sn * lx + cs * ly - 0.5;
                        let (x0, y0) = (px.floor(), py.floor());
                        let (tx, ty) = (px - x0, py - y0);
                        let (x0, y0) = (x0 as i64, y0 as i64);
                        acc += (1.0 - ty) * ((1.0 - tx) * at(y0, x0, ch) + tx * at(y0, x0 + 1, ch))
                            + ty * ((1.0 - tx) * at(y0 + 1, x0, ch) + tx * at(y0 + 1, x0 + 1, ch));
                    }
                }
                out.set3(by, bx, ch, acc / (k * k) as f64);
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (h, w, c) = (rng.random_range(3..20), rng.random_range(3..30), rng.random_range(1..4));
        let map = random_tensor(&[h, w, c], -1.0, 1.0, &mut rng);
        let roi = RoIBox::new(
            Point::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)),
            (rng.random_range(0.5..w as f64), rng.random_range(0.5..h as f64)),
            rng.random_range(-PI..PI),
        );
        let (oh, ow, k) = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..4));
        let reference = reference_roi_align(&map, &roi, oh, ow, k);
        let field = AffineField::identity(k * oh, k * ow);
        let geo = geo_align(&map, &roi, &field, oh, ow, k).map_err(|e| e.to_string())?;
        let align = roi_align(&map, &roi, oh, ow, k).map_err(|e| e.to_string())?;
        worst = worst.max(geo.max_abs_diff(&reference)).max(align.max_abs_diff(&reference));
    }
    within(Duration::from_secs(10), start.elapsed())?;
    if worst <= 1e-6 {
        Ok(format!("100 cases, max |diff| {worst:.1e}"))
    } else {
        Err(format!("max |diff| {worst:.3e} > 1e-6"))
    }
}

// ---------------------------------------------------------------- 2

fn conv1x1(x: &Tensor, conv: &Conv1x1) -> Tensor {
    let (h, w, c) = x.dims3();
    let wt = conv.weight.data();
    Tensor::from_fn3(h, w, c, |y, xx, o| {
        conv.bias.data()[o] + (0..c).map(|i| x.at3(y, xx, i) * wt[i * c + o]).sum::<f64>()
    })
}

/// Direct evaluation of the block: grouped all-pairs softmax attention,
/// output projection, squeeze-excitation channel softmax, residual sum.
fn reference_gsca(x: &Tensor, p: &GscaParams) -> Tensor {
    let (h, w, c) = x.dims3();
    let (theta, phi, q) = (conv1x1(x, &p.theta), conv1x1(x, &p.phi), conv1x1(x, &p.q));
    let width = c / p.groups;
    let mut y = Tensor::zeros(&[h, w, c]);
    for g in 0..p.groups {
        let tokens: Vec<(usize, usize, usize)> = (0..h)
            .flat_map(|yy| (0..w).flat_map(move |xx| (0..width).map(move |k| (yy, xx, g * width + k))))
            .collect();
        for &(yy, xx, ch) in &tokens {
            let a = theta.at3(yy, xx, ch);
            let logits: Vec<f64> = tokens.iter().map(|&(y2, x2, c2)| a * phi.at3(y2, x2, c2)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let v: f64 = logits
                .iter()
                .zip(&tokens)
                .map(|(l, &(y2, x2, c2))| (l - m).exp() / z * q.at3(y2, x2, c2))
                .sum();
            y.set3(yy, xx, ch, v);
        }
    }
    let y = conv1x1(&y, &p.out_proj);
    let hidden = p.r_w1.shape()[0];
    let mean: Vec<f64> = (0..c)
        .map(|ch| (0..h).flat_map(|yy| (0..w).map(move |xx| (yy, xx))).map(|(yy, xx)| x.at3(yy, xx, ch)).sum::<f64>() / (h * w) as f64)
        .collect();
    let z: Vec<f64> = (0..hidden)
        .map(|j| (0..c).map(|i| p.r_w1.data()[j * c + i] * mean[i]).sum::<f64>().max(0.0))
        .collect();
    let logits: Vec<f64> = (0..c).map(|i| (0..hidden).map(|j| p.r_w2.data()[i * hidden + j] * z[j]).sum()).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = e.iter().sum();
    Tensor::from_fn3(h, w, c, |yy, xx, ch| x.at3(yy, xx, ch) + e[ch] / total * y.at3(yy, xx, ch))
}

fn random_conv(c: usize, rng: &mut ChaCha8Rng) -> Conv1x1 {
    Conv1x1 {
        weight: random_tensor(&[1, 1, c, c], -0.8, 0.8, rng),
        bias: random_tensor(&[c], -0.3, 0.3, rng),
    }
}

/// Fully random block parameters, including a nonzero output projection.
fn random_gsca(c: usize, groups: usize, rng: &mut ChaCha8Rng) -> GscaParams {
    let expansion = [1.0, 2.0][rng.random_range(0..2)];
    let hidden = hidden_width(c, expansion);
    GscaParams {
        theta: random_conv(c, rng),
        phi: random_conv(c, rng),
        q: random_conv(c, rng),
        out_proj: random_conv(c, rng),
        r_w1: random_tensor(&[hidden, c], -1.0, 1.0, rng),
        r_w2: random_tensor(&[c, hidden], -1.0, 1.0, rng),
        groups,
        expansion,
        ..GscaParams::identity(c, groups, expansion)
    }
}

/// A random `(h, w, c, groups)` with `h w c <= 64` and `groups | c`.
fn small_attention_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let c = [1, 2, 3, 4, 6, 8][rng.random_range(0..6)];
    let divisors: Vec<usize> = (1..=c).filter(|g| c % g == 0).collect();
    let groups = divisors[rng.random_range(0..divisors.len())];
    let h = rng.random_range(1..=(64 / c).min(8));
    let w = rng.random_range(1..=(64 / (c * h)).max(1));
    (h, w, c, groups)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w, c, groups) = small_attention_shape(&mut rng);
        assert!(h * w * c <= 64);
        let p = random_gsca(c, groups, &mut rng);
        let x = random_tensor(&[h, w, c], -1.5, 1.5, &mut rng);
        let got = gsca_forward(&x, &p).map_err(|e| e.to_string())?;
        worst = worst.max(got.max_abs_diff(&reference_gsca(&x, &p)));
    }
    within(Duration::from_secs(30), start.elapsed())?;
    if worst <= 1e-6 {
        Ok(format!("50 cases, max |diff| {worst:.1e}"))
    } else {
        Err(format!("max |diff| {worst:.3e} > 1e-6"))
    }
}

// ---------------------------------------------------------------- 3

const FD_STEP: f64 = 1e-6;
/// Gradient magnitude below which errors are measured against this floor
/// instead; some gradients are exactly zero (a bias shared by every key of
/// a softmax), where central differences only see rounding noise.
const GRAD_FLOOR: f64 = 1e-4;

/// Central-difference check of `loss(graph, store)` against the tape, over
/// every entry of every tensor in `store`. Returns the worst per-tensor
/// relative error `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
fn finite_difference_error(store: &ParamStore, loss: &dyn Fn(&mut Graph, &GraphParams) -> Var) -> f64 {
    let mut g = Graph::new();
    let p = store.load(&mut g, true);
    let out = loss(&mut g, &p);
    g.backward(out).unwrap();
    let analytic = p.grads(&g);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let p = s.load(&mut g, false);
        let out = loss(&mut g, &p);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (name, t) in store.iter() {
        let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
        for j in 0..t.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[name].data()[j];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(diff / scale.max(GRAD_FLOOR));
    }
    worst
}

/// Random-sign linear probe of a tensor output: an L1 distance to a target
/// at least 5 away from every entry, so no kink is crossed. The target is
/// fixed on the first (unperturbed) call.
fn probe(g: &mut Graph, out: Var, target: &OnceCell<Tensor>, seed: u64) -> Var {
    let target = target.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = g.value(out);
        let data = v
            .data()
            .iter()
            .map(|&a| {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                a - s * (5.0 + rng.random_range(0.0..1.0))
            })
            .collect();
        Tensor::from_vec(v.shape(), data).unwrap()
    });
    g.l1_mean(out, target.clone()).unwrap()
}

fn random_labels(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GeometryLabels {
    let mut data = random_tensor(&[h, w, 6], -1.0, 1.0, rng);
    for px in data.data_mut().chunks_exact_mut(6) {
        px[fox::channel::SCALE] = rng.random_range(0.5..6.0);
    }
    GeometryLabels {
        maps: GeometryMaps { data },
        tcl: (0..h * w).map(|_| rng.random_bool(0.3)).collect(),
    }
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.2)).collect()
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        alpha: rng.random_range(0.5..2.0),
        beta: rng.random_range(0.5..2.0),
        lambda: std::array::from_fn(|_| rng.random_range(0.5..2.0)),
    }
}

/// A box inside an `h x w` map and a field near the identity.
fn random_roi_field(h: usize, w: usize, gh: usize, gw: usize, rng: &mut ChaCha8Rng) -> (RoIBox, Tensor) {
    let roi = RoIBox::new(
        Point::new(rng.random_range(0.3 * w as f64..0.7 * w as f64), rng.random_range(0.3 * h as f64..0.7 * h as f64)),
        (rng.random_range(2.0..0.8 * w as f64), rng.random_range(2.0..0.8 * h as f64)),
        rng.random_range(-0.5..0.5),
    );
    let mut field = AffineField::identity(gh, gw).params;
    for v in field.data_mut() {
        *v += rng.random_range(-0.15..0.15);
    }
    (roi, field)
}

fn gradient_family(name: &str, seed: u64, case: impl Fn(&mut ChaCha8Rng) -> f64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..20).map(|_| case(&mut rng)).fold(0.0, f64::max);
    if worst < 1e-4 {
        Ok(format!("{name} {worst:.0e}"))
    } else {
        Err(format!("{name} relative error {worst:.3e} >= 1e-4"))
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();

    parts.push(gradient_family("gsca", 301, |rng| {
        let (h, w, c, groups) = (rng.random_range(1..4), rng.random_range(1..4), [2, 4][rng.random_range(0..2)], 2);
        let p = random_gsca(c, groups, rng);
        let mut store = ParamStore::new();
        p.insert_into(&mut store, "gsca");
        store.insert("x", random_tensor(&[h, w, c], -1.0, 1.0, rng));
        let (seed, target) = (rng.random(), OnceCell::new());
        finite_difference_error(&store, &|g, ps| {
            let m = gsca_block(g, ps, "gsca", ps.get("x").unwrap(), groups, p.mode).unwrap();
            probe(g, m, &target, seed)
        })
    })?);

    parts.push(gradient_family("geoalign", 302, |rng| {
        let (h, w, c, k) = (rng.random_range(4..9), rng.random_range(4..12), rng.random_range(1..3), rng.random_range(1..3));
        let (oh, ow) = (rng.random_range(1..3), rng.random_range(1..4));
        let (roi, field) = random_roi_field(h, w, k * oh, k * ow, rng);
        let mut store = ParamStore::new();
        store.insert("map", random_tensor(&[h, w, c], -1.0, 1.0, rng));
        store.insert("field", field);
        let (seed, target) = (rng.random(), OnceCell::new());
        finite_difference_error(&store, &|g, ps| {
            let grid = g.affine_grid(ps.get("field").unwrap(), roi).unwrap();
            let v = g.sample_pool(ps.get("map").unwrap(), grid, k, 1.0).unwrap();
            probe(g, v, &target, seed)
        })
    })?);

    parts.push(gradient_family("tis", 303, |rng| {
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        let mask = random_mask(h * w, rng);
        let ohem = OhemConfig {
            neg_pos_ratio: 3.0,
            min_kept: rng.random_range(1..8),
        };
        let mut store = ParamStore::new();
        store.insert("logits", random_tensor(&[h, w, 2], -3.0, 3.0, rng));
        finite_difference_error(&store, &|g, ps| {
            g.tis_loss(ps.get("logits").unwrap(), &mask, &ohem, TisLossMode::Ohem).unwrap()
        })
    })?);

    parts.push(gradient_family("align", 304, |rng| {
        let (gh, gw) = (rng.random_range(1..5), rng.random_range(1..9));
        let (roi, field) = random_roi_field(20, 40, gh, gw, rng);
        let mut target = roi::affine_grid(&field, &roi).unwrap();
        for v in target.data_mut() {
            *v += if rng.random_bool(0.5) { 2.0 } else { -2.0 };
        }
        let mut store = ParamStore::new();
        store.insert("field", field);
        finite_difference_error(&store, &|g, ps| {
            let grid = g.affine_grid(ps.get("field").unwrap(), roi).unwrap();
            g.l1_mean(grid, target.clone()).unwrap()
        })
    })?);

    parts.push(gradient_family("fox", 305, |rng| {
        let (h, w) = (8, 32);
        let labels = random_labels(h, w, rng);
        let weights = random_weights(rng);
        let mut store = ParamStore::new();
        store.insert("pred", random_tensor(&[h, w, 6], -2.0, 2.0, rng));
        finite_difference_error(&store, &|g, ps| g.fox_loss(ps.get("pred").unwrap(), labels.clone(), weights).unwrap().0)
    })?);

    parts.push(gradient_family("total", 306, |rng| {
        let (h, w) = (4, 6);
        let mask = random_mask(h * w, rng);
        let labels = random_labels(4, 8, rng);
        let weights = random_weights(rng);
        let (roi, field) = random_roi_field(20, 40, 2, 3, rng);
        let target = roi::affine_grid(&field, &roi).unwrap().map(|v| v + 1.5);
        let mut store = ParamStore::new();
        store.insert("logits", random_tensor(&[h, w, 2], -3.0, 3.0, rng));
        store.insert("field", field);
        store.insert("pred", random_tensor(&[4, 8, 6], -2.0, 2.0, rng));
        finite_difference_error(&store, &|g, ps| {
            let lt = g.tis_loss(ps.get("logits").unwrap(), &mask, &OhemConfig::default(), TisLossMode::Ohem).unwrap();
            let grid = g.affine_grid(ps.get("field").unwrap(), roi).unwrap();
            let la = g.l1_mean(grid, target.clone()).unwrap();
            let (lf, _) = g.fox_loss(ps.get("pred").unwrap(), labels.clone(), weights).unwrap();
            g.weighted_sum(&[(lt, 1.0), (la, weights.alpha), (lf, weights.beta)]).unwrap()
        })
    })?);

    within(Duration::from_secs(120), start.elapsed())?;
    Ok(format!("20 cases each, worst relative error: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 4 and 10

/// Smallest radius of curvature along a word's character centers, in
/// character heights.
fn curvature_radius(word: &SynthWord) -> f64 {
    let c: Vec<Point> = word.segments.iter().map(|s| s.center).collect();
    let height = 2.0 * word.segments.iter().map(|s| s.scale).sum::<f64>() / c.len() as f64;
    c.windows(3)
        .map(|t| {
            let (a, b) = (t[1] - t[0], t[2] - t[1]);
            let turn = a.cross(b).atan2(a.dot(b)).abs();
            0.5 * (a.norm() + b.norm()) / turn.max(1e-12) / height
        })
        .fold(f64::INFINITY, f64::min)
}

/// Smallest curvature radius of the smooth suite, in character heights;
/// tighter words are where neighbouring characters start to fold.
const SMOOTH_RADIUS: f64 = 1.5;

/// Words of the default generator in order: all of them, and the first 100
/// with smooth curvature.
fn round_trip_suites() -> (Vec<SynthWord>, Vec<SynthWord>) {
    let spec = SynthSpec::default();
    let mut all = Vec::new();
    let mut smooth = Vec::new();
    for i in 0.. {
        for word in render(&spec, i).unwrap().words {
            if smooth.len() < 100 && curvature_radius(&word) >= SMOOTH_RADIUS {
                smooth.push(word.clone());
            }
            all.push(word);
        }
        if smooth.len() == 100 {
            break;
        }
    }
    (all, smooth)
}

fn round_trip_frame(quads: &[Quad]) -> RoiFrame {
    let pts: Vec<Point> = quads.iter().flatten().copied().collect();
    RoiFrame::from_box(&RoIBox::enclosing(&pts).unwrap(), 32, 256).unwrap()
}

/// Encodes a word into geometry maps and decodes it again with `n` center
/// points; the IoU of the best decoded polygon, 0 when none decodes.
fn round_trip_iou(word: &SynthWord, n: usize) -> f64 {
    let frame = round_trip_frame(&word.quads);
    let labels = generate_geometry_labels(&word.quads, &frame).unwrap();
    let cfg = DecodeConfig {
        n_center_points: n,
        ..DecodeConfig::default()
    };
    let decoded = decode(&labels.maps, &frame, &cfg).unwrap();
    decoded
        .polygons
        .iter()
        .map(|p| polygon_iou(p, &word.polygon).unwrap())
        .fold(0.0, f64::max)
}

fn iou_stats(words: &[SynthWord]) -> (f64, f64) {
    let mut ious: Vec<f64> = words.iter().map(|w| round_trip_iou(w, 8)).collect();
    ious.sort_by(f64::total_cmp);
    let n = ious.len();
    (0.5 * (ious[(n - 1) / 2] + ious[n / 2]), ious[0])
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (all, suite) = round_trip_suites();
    let sheared = suite.iter().filter(|w| w.shears.iter().any(|s| s.abs() > 0.2)).count();
    let (median, min) = iou_stats(&suite);
    let elapsed = start.elapsed();
    let (all_median, all_min) = iou_stats(&all);
    within(Duration::from_secs(60), elapsed)?;
    let detail = format!(
        "median IoU {median:.3}, min {min:.3} over 100 smooth words ({sheared} with a shear above 0.2 rad); \
         all {} generated words: median {all_median:.3}, min {all_min:.3}",
        all.len()
    );
    if median >= 0.85 && min >= 0.8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10() -> Outcome {
    let (_, suite) = round_trip_suites();
    let means: Vec<f64> = [2, 4, 6, 8]
        .iter()
        .map(|&n| suite.iter().map(|w| round_trip_iou(w, n)).sum::<f64>() / suite.len() as f64)
        .collect();
    let detail = format!("mean IoU at n = 2, 4, 6, 8: {:.4} {:.4} {:.4} {:.4}", means[0], means[1], means[2], means[3]);
    if means.windows(2).all(|p| p[1] >= p[0]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    let mut degenerate = 0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let mut a = random_tensor(&[h, w], -3.0, 3.0, &mut rng);
        let mut b = random_tensor(&[h, w], -3.0, 3.0, &mut rng);
        for i in 0..h * w {
            match rng.random_range(0..10) {
                0 => {
                    a.data_mut()[i] = 0.0;
                    b.data_mut()[i] = 0.0;
                }
                1 => {
                    a.data_mut()[i] *= 1e-160;
                    b.data_mut()[i] *= 1e-160;
                }
                2 => {
                    a.data_mut()[i] *= 1e150;
                    b.data_mut()[i] *= 1e150;
                }
                _ => {}
            }
        }
        let (c, s) = normalize_orientation(&a, &b).map_err(|e| e.to_string())?;
        for i in 0..h * w {
            let (cv, sv) = (c.data()[i], s.data()[i]);
            worst = worst.max((cv * cv + sv * sv - 1.0).abs());
            if a.data()[i] == 0.0 && b.data()[i] == 0.0 {
                degenerate += 1;
                if (cv, sv) != (1.0, 0.0) {
                    return Err(format!("degenerate pixel normalized to ({cv}, {sv})"));
                }
            }
        }
    }
    if worst <= 1e-9 {
        Ok(format!("max |cos^2 + sin^2 - 1| {worst:.1e}; {degenerate} zero pixels gave (1, 0)"))
    } else {
        Err(format!("max |cos^2 + sin^2 - 1| {worst:.3e}"))
    }
}

// ---------------------------------------------------------------- 6

const SATURATED: f64 = 40.0;

fn criterion_6() -> Outcome {
    let spec = SynthSpec::default();
    let mut worst_ce: f64 = 0.0;
    let mut worst_align: f64 = 0.0;
    for i in 0..10 {
        let inst = render(&spec, i).unwrap();
        for word in &inst.words {
            let frame = round_trip_frame(&word.quads);
            let labels = generate_geometry_labels(&word.quads, &frame).unwrap();
            let mut pred = labels.maps.data.clone();
            for (px, &on) in pred.data_mut().chunks_exact_mut(6).zip(&labels.tcl) {
                px[fox::channel::TCL] = if on { SATURATED } else { -SATURATED };
            }
            let t = losses::fox_loss_forward(&pred, &labels, &LossWeights::default()).map_err(|e| e.to_string())?;
            let smooth = [t.scale, t.sin_theta, t.cos_theta, t.sin_phi, t.cos_phi];
            if smooth.iter().any(|&v| v != 0.0) {
                return Err(format!("smoothed-L1 terms at ground truth: {smooth:?}"));
            }
            worst_ce = worst_ce.max(t.tcl);

            let targets = roi::warp_targets(&word.polygon, 8, 64, 2).map_err(|e| e.to_string())?;
            worst_align = worst_align.max(losses::loss_align(&targets, &targets).map_err(|e| e.to_string())?);
        }
        let sample = Sample::from_instance("s", &inst);
        let (h, w) = (inst.image.height() as usize / 4, inst.image.width() as usize / 4);
        let mask = nasklab::pipeline::text_mask(&sample.polygons, h, w, 4).bits;
        let logits = Tensor::from_vec(
            &[h, w, 2],
            mask.iter().flat_map(|&m| if m { [-SATURATED, SATURATED] } else { [SATURATED, -SATURATED] }).collect(),
        )
        .unwrap();
        worst_ce = worst_ce.max(losses::loss_tis(&logits, &mask, &OhemConfig::default()).map_err(|e| e.to_string())?);
    }
    if worst_ce < 1e-6 && worst_align == 0.0 {
        Ok(format!("smoothed-L1 terms 0, max cross-entropy {worst_ce:.1e}, align loss 0"))
    } else {
        Err(format!("max cross-entropy {worst_ce:.3e}, align loss {worst_align:.3e}"))
    }
}

// ---------------------------------------------------------------- 7 and 8

fn dataset(spec: &SynthSpec, count: u64) -> Vec<Sample> {
    (0..count)
        .map(|i| Sample::from_instance(format!("{i:04}"), &render(spec, i).unwrap()))
        .collect()
}

fn hmean(model: &nasklab::pipeline::Model, data: &[Sample]) -> Result<MatchResult, String> {
    ablation::score(model, data, 0.5).map(|(r, _)| r).map_err(|e| e.to_string())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let data = dataset(&SynthSpec::default(), 20);
    let model = train(&data, &ModelConfig::default(), &Schedule::default(), None).map_err(|e| e.to_string())?.model;
    let r = hmean(&model, &data)?;
    within(Duration::from_secs(15 * 60), start.elapsed())?;
    let detail = format!("training-set R {:.3} P {:.3} H {:.3}", r.recall, r.precision, r.hmean);
    if r.hmean >= 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Held-out split for the stage ablation: curved words only.
fn stage_test_split() -> Vec<Sample> {
    let spec = SynthSpec {
        families: vec![CurveFamily::Arc, CurveFamily::Sine],
        seed: 1,
        ..SynthSpec::default()
    };
    dataset(&spec, 40)
}

fn criterion_8() -> Outcome {
    let train_set = dataset(&SynthSpec::default(), 60);
    let test_set = stage_test_split();
    let rows = ablation::run(
        ablation::Axis::Stage,
        &ModelConfig::default(),
        &Schedule::default(),
        &train_set,
        &test_set,
        0.5,
    )
    .map_err(|e| e.to_string())?;
    let h = |stage: Stage| rows.iter().find(|r| r.setting == stage.to_string()).map(|r| r.result.hmean).unwrap();
    let (both, first, second) = (h(Stage::Both), h(Stage::FirstOnly), h(Stage::SecondOnly));
    let detail = format!("H both {both:.3}, first-only {first:.3}, second-only {second:.3}");
    if both - first >= 0.05 && both - second >= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 9

fn fastest_of_three(x: &Tensor, p: &GscaParams) -> Duration {
    (0..3)
        .map(|_| {
            let t = Instant::now();
            gsca_forward(x, p).unwrap();
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn criterion_9() -> Outcome {
    let (h, w, c) = (8, 32, 48);
    let (f4, f8) = (attention_flops(h, w, c, 4), attention_flops(h, w, c, 8));
    if 2 * f8 != f4 {
        return Err(format!("FLOPs at G=4 {f4}, at G=8 {f8}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let x = random_tensor(&[h, w, c], -1.0, 1.0, &mut rng);
    let t2 = fastest_of_three(&x, &GscaParams::init(c, 2, 2.0, &mut rng));
    let t16 = fastest_of_three(&x, &GscaParams::init(c, 16, 2.0, &mut rng));
    let detail = format!("FLOPs G=4 {f4} = 2 x G=8 {f8}; wall clock G=2 {t2:.1?}, G=16 {t16:.1?}");
    if t16 < t2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("GeoAlign with identity field equals RoI Align", criterion_1),
        ("attention matches direct evaluation", criterion_2),
        ("gradients match finite differences", criterion_3),
        ("geometry encode/decode round trip", criterion_4),
        ("orientation normalization", criterion_5),
        ("losses vanish at ground truth", criterion_6),
        ("overfit on 20 images", criterion_7),
        ("two stages beat either stage alone", criterion_8),
        ("attention cost falls with more groups", criterion_9),
        ("round-trip IoU grows with n", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
