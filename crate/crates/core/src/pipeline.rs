//! End-to-end detector: backbone and attention, text/non-text segmentation,
//! proposal extraction, RoI pooling, geometry head and polygon decoding,
//! plus the two-stage training loop.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AffinityMode};
use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::eval::polygon_iou;
use crate::fox::{self, DecodeConfig, GeometryMaps, Quad};
use crate::geometry::{Point, TextPolygon};
use crate::losses::{FoxLossTerms, LossWeights, OhemConfig, TisLossMode};
use crate::npy;
use crate::params::{Adam, GraphParams, ParamStore};
use crate::raster::{self, Mask};
use crate::roi::{self, RoIBox, RoiFrame, SamplingGrid};
use crate::synth::Sample;
use crate::tensor::{FeatureMap, Tensor};

/// How proposals are pooled into fixed-size RoI features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Per-point affine warp predicted from a first uniform pass.
    #[default]
    GeoAlign,
    RoiAlign,
    RoiPool,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::GeoAlign, Pooling::RoiAlign, Pooling::RoiPool];
}

/// Which stages take part in detection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Both,
    /// Segmentation only; each proposal rectangle is the output polygon.
    FirstOnly,
    /// Geometry head only, applied to the whole image.
    SecondOnly,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Both, Stage::FirstOnly, Stage::SecondOnly];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    #[default]
    Gsca,
    None,
}

macro_rules! kebab_enum_text {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown value `{s}`"))),
                }
            }
        }
    };
}

kebab_enum_text!(Pooling, Pooling::GeoAlign => "geoalign", Pooling::RoiAlign => "roialign", Pooling::RoiPool => "roipool");
kebab_enum_text!(Stage, Stage::Both => "both", Stage::FirstOnly => "first-only", Stage::SecondOnly => "second-only");
kebab_enum_text!(AttentionKind, AttentionKind::Gsca => "gsca", AttentionKind::None => "none");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Widths of the four backbone blocks; the last one feeds the attention block.
    pub backbone_channels: Vec<usize>,
    pub downsample_factor: usize,
    pub groups: usize,
    /// Hidden width of the channel branch as a multiple of the channels.
    pub expansion: f64,
    pub affinity: AffinityMode,
    pub attention: AttentionKind,
    pub pooled_shape: (usize, usize),
    pub fox_output_shape: (usize, usize),
    /// Samples per bin side.
    pub k: usize,
    /// Text-map threshold.
    pub t_tr: f64,
    /// TCL threshold.
    pub t_tcl: f64,
    pub n_center_points: usize,
    /// Smallest proposal component, in map pixels.
    pub min_area: usize,
    /// Width of the hidden layers of the affine and geometry heads.
    pub head_channels: usize,
    pub pooling: Pooling,
    pub stage: Stage,
    pub loss: LossWeights,
    pub ohem: OhemConfig,
    pub tis_loss: TisLossMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![8, 16, 16, 8],
            downsample_factor: 4,
            groups: 4,
            expansion: 2.0,
            affinity: AffinityMode::Softmax,
            attention: AttentionKind::Gsca,
            pooled_shape: (8, 64),
            fox_output_shape: (32, 256),
            k: 2,
            t_tr: 0.5,
            t_tcl: 0.5,
            n_center_points: 8,
            min_area: 16,
            head_channels: 16,
            pooling: Pooling::GeoAlign,
            stage: Stage::Both,
            loss: LossWeights::default(),
            ohem: OhemConfig::default(),
            tis_loss: TisLossMode::Ohem,
        }
    }
}

/// Backbone strides; two stride-2 blocks give the fixed factor of 4.
const STRIDES: [usize; 4] = [1, 2, 2, 1];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_channels.len() != 4 || self.backbone_channels.contains(&0) {
            return bad("backbone_channels needs four positive widths".into());
        }
        if self.downsample_factor != STRIDES.iter().product::<usize>() {
            return bad(format!("downsample_factor must be {}", STRIDES.iter().product::<usize>()));
        }
        let c = self.backbone_channels[3];
        if self.attention == AttentionKind::Gsca && (self.groups == 0 || c % self.groups != 0) {
            return bad(format!("{c} channels cannot be split into {} groups", self.groups));
        }
        if !(self.expansion > 0.0) {
            return bad("expansion must be positive".into());
        }
        let (ph, pw) = self.pooled_shape;
        if ph == 0 || pw == 0 || self.fox_output_shape != (4 * ph, 4 * pw) {
            return bad("fox_output_shape must be four times pooled_shape".into());
        }
        if self.k == 0 || self.head_channels == 0 {
            return bad("k and head_channels must be positive".into());
        }
        for (name, t) in [("t_tr", self.t_tr), ("t_tcl", self.t_tcl)] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("{name} = {t} outside (0, 1)"));
            }
        }
        if self.n_center_points < 2 {
            return bad("n_center_points must be at least 2".into());
        }
        if self.min_area == 0 {
            return bad("min_area must be positive".into());
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[3]
    }

    fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            t_tcl: self.t_tcl,
            n_center_points: self.n_center_points,
            ..DecodeConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub polygon: TextPolygon,
    /// Mean text probability over the proposal, in `[0, 1]`.
    pub score: f64,
}

/// Text-segmentation outputs for one image.
#[derive(Clone, Debug)]
pub struct TisOutput {
    /// Attended feature map `M`, `(H / 4, W / 4, C)`.
    pub features: FeatureMap,
    /// Text probability, `(H / 4, W / 4)`.
    pub prob: Tensor,
    /// `(height, width)` after padding to a multiple of the downsample factor.
    pub padded: (usize, usize),
}

#[derive(Clone, Debug, Default)]
pub struct DetectOutput {
    pub detections: Vec<Detection>,
    /// Regions whose polygon could not be reconstructed.
    pub failures: usize,
}

/// A trained or freshly initialized detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const TIS_PREFIXES: [&str; 3] = ["backbone.", "gsca.", "tis."];

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            params.init_conv(&format!("backbone.{i}"), 3, 3, cin, c, &mut rng);
            cin = c;
        }
        let c = config.feature_channels();
        if config.attention == AttentionKind::Gsca {
            // own stream, so that models with and without attention share
            // every other initial weight
            let mut gsca_rng = ChaCha8Rng::seed_from_u64(seed);
            gsca_rng.set_stream(2);
            attention::GscaParams::init(c, config.groups, config.expansion, &mut gsca_rng).insert_into(&mut params, "gsca");
        }
        params.init_conv_zero("tis", 1, 1, c, 2);
        roi::init_affine_head(&mut params, "affine", c, config.head_channels, &mut rng);
        let hid = config.head_channels;
        params.init_conv("fox.c1", 3, 3, c, hid, &mut rng);
        params.init_conv("fox.c2", 3, 3, hid, hid, &mut rng);
        params.init_conv_zero("fox.out", 1, 1, hid, 6);
        Ok(Self { config, params })
    }

    /// Text probabilities and attended features of an `(H, W, 1)` image in `[0, 1]`.
    /// Sides that are not a multiple of the downsample factor are zero-padded.
    pub fn tis_forward(&self, image: &Tensor) -> Result<TisOutput> {
        let x = pad_image(image, self.config.downsample_factor)?;
        let padded = (x.shape()[0], x.shape()[1]);
        let mut g = Graph::new();
        let p = self.params.load(&mut g, false);
        let xv = g.constant(x);
        let (m, logits) = tis_graph(&mut g, &p, &self.config, xv)?;
        Ok(TisOutput {
            features: g.value(m).clone(),
            prob: text_probability(g.value(logits)),
            padded,
        })
    }

    /// Raw geometry-head output for a pooled feature of shape `pooled_shape x C`.
    pub fn fox_head_raw(&self, v: &FeatureMap) -> Result<Tensor> {
        let (h, w, c) = v.check_dims3("pooled feature")?;
        if (h, w) != self.config.pooled_shape || c != self.config.feature_channels() {
            return Err(invalid(format!(
                "pooled feature {:?} does not match {:?} x {}",
                v.shape(),
                self.config.pooled_shape,
                self.config.feature_channels()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.load(&mut g, false);
        let vv = g.constant(v.clone());
        let out = fox_graph(&mut g, &p, vv)?;
        Ok(g.value(out).clone())
    }

    /// Activated geometry maps, shape `fox_output_shape x 6`.
    pub fn fox_head_forward(&self, v: &FeatureMap) -> Result<GeometryMaps> {
        GeometryMaps::from_raw(&self.fox_head_raw(v)?)
    }

    /// Detections on an `(H, W, 1)` image, in image coordinates.
    pub fn detect(&self, image: &Tensor) -> Result<DetectOutput> {
        let cfg = &self.config;
        let (h, w, ch) = image.check_dims3("image")?;
        if ch != 1 {
            return Err(invalid(format!("expected a single-channel image, got {ch} channels")));
        }
        let ds = cfg.downsample_factor as f64;
        if cfg.stage == Stage::SecondOnly {
            return self.detect_full_image(image, h, w);
        }
        let tis = self.tis_forward(image)?;
        let comps = proposal_components(&tis.prob, cfg.t_tr, cfg.min_area)?;
        let mut out = DetectOutput::default();
        let mut cands = Vec::new();
        for (box_map, score) in comps {
            let roi = box_map.scaled(ds);
            if cfg.stage == Stage::FirstOnly {
                cands.push(Detection {
                    polygon: roi.to_polygon(),
                    score,
                });
                continue;
            }
            let mut g = Graph::new();
            let p = self.params.load(&mut g, false);
            let m = g.constant(tis.features.clone());
            let (v, grid) = pool_graph(&mut g, &p, cfg, m, &roi)?;
            let raw = fox_graph(&mut g, &p, v)?;
            let maps = GeometryMaps::from_raw(g.value(raw))?;
            let frame = RoiFrame::new(&SamplingGrid { points: grid }, cfg.fox_output_shape.0, cfg.fox_output_shape.1)?;
            let decoded = fox::decode(&maps, &frame, &cfg.decode_config())?;
            out.failures += decoded.failures;
            // one proposal holds one instance: keep its largest region
            if let Some(poly) = decoded.polygons.into_iter().max_by(|a, b| a.area().total_cmp(&b.area())) {
                cands.push(Detection { polygon: poly, score });
            }
        }
        out.detections = polygon_nms(cands, 0.5);
        Ok(out)
    }

    fn detect_full_image(&self, image: &Tensor, h: usize, w: usize) -> Result<DetectOutput> {
        let cfg = &self.config;
        let tis = self.tis_forward(image)?;
        let roi = full_image_box(h, w);
        let mut g = Graph::new();
        let p = self.params.load(&mut g, false);
        let m = g.constant(tis.features);
        let (v, grid) = pool_graph(&mut g, &p, cfg, m, &roi)?;
        let raw = fox_graph(&mut g, &p, v)?;
        let maps = GeometryMaps::from_raw(g.value(raw))?;
        let frame = RoiFrame::new(&SamplingGrid { points: grid }, cfg.fox_output_shape.0, cfg.fox_output_shape.1)?;
        let tcl = maps.tcl();
        let comps = fox::extract_tcl(&tcl, cfg.t_tcl)?;
        let decoded = fox::decode(&maps, &frame, &cfg.decode_config())?;
        // score each polygon by the mean TCL probability of its region
        let mut cands = Vec::new();
        let mut scores = comps
            .iter()
            .filter(|c| c.pixels.len() >= DecodeConfig::default().min_pixels)
            .map(|c| c.pixels.iter().map(|&(y, x)| tcl.data()[y * tcl.shape()[1] + x]).sum::<f64>() / c.pixels.len() as f64);
        for poly in decoded.polygons {
            cands.push(Detection {
                polygon: poly,
                score: scores.next().unwrap_or(0.5),
            });
        }
        Ok(DetectOutput {
            detections: polygon_nms(cands, 0.5),
            failures: decoded.failures,
        })
    }
}

fn full_image_box(h: usize, w: usize) -> RoIBox {
    RoIBox::from_bounds(0.0, 0.0, w as f64, h as f64)
}

/// Zero-pads an `(H, W, 1)` image so both sides are multiples of `factor`.
pub fn pad_image(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = image.check_dims3("image")?;
    if h == 0 || w == 0 {
        return Err(invalid("empty image"));
    }
    image.check_finite("image")?;
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    log::debug!("padding {h}x{w} image to {ph}x{pw}");
    Ok(Tensor::from_fn3(ph, pw, c, |y, x, ch| {
        if y < h && x < w {
            image.at3(y, x, ch)
        } else {
            0.0
        }
    }))
}

fn text_probability(logits: &Tensor) -> Tensor {
    let (h, w, _) = logits.dims3();
    let data = logits
        .data()
        .chunks_exact(2)
        .map(|l| crate::nn::sigmoid(l[1] - l[0]))
        .collect();
    Tensor::from_vec(&[h, w], data).expect("shape")
}

/// Backbone, optional attention and the two-way text head. Returns `(M, logits)`.
fn tis_graph(g: &mut Graph, p: &GraphParams, cfg: &ModelConfig, x: Var) -> Result<(Var, Var)> {
    let mut h = x;
    for (i, &s) in STRIDES.iter().enumerate() {
        let y = p.conv(g, &format!("backbone.{i}"), h, s)?;
        h = g.relu(y);
    }
    let m = match cfg.attention {
        AttentionKind::Gsca => attention::gsca_block(g, p, "gsca", h, cfg.groups, cfg.affinity)?,
        AttentionKind::None => h,
    };
    let logits = p.conv(g, "tis", m, 1)?;
    Ok((m, logits))
}

/// Pools one RoI (image coordinates) from `m`. Returns the pooled feature
/// and the sampling positions actually used.
fn pool_graph(g: &mut Graph, p: &GraphParams, cfg: &ModelConfig, m: Var, roi: &RoIBox) -> Result<(Var, Tensor)> {
    let (v, grid) = pool_graph_var(g, p, cfg, m, roi)?;
    let points = match grid {
        GridSource::Var(gv) => g.value(gv).clone(),
        GridSource::Fixed(t) => t,
    };
    Ok((v, points))
}

enum GridSource {
    Var(Var),
    Fixed(Tensor),
}

fn pool_graph_var(g: &mut Graph, p: &GraphParams, cfg: &ModelConfig, m: Var, roi: &RoIBox) -> Result<(Var, GridSource)> {
    roi.validate()?;
    let (ph, pw) = cfg.pooled_shape;
    let k = cfg.k;
    let scale = 1.0 / cfg.downsample_factor as f64;
    let base = roi::base_grid(roi, ph, pw, k)?.points;
    let pooling = if cfg.stage == Stage::SecondOnly {
        Pooling::RoiAlign
    } else {
        cfg.pooling
    };
    match pooling {
        Pooling::RoiPool => Ok((g.max_pool(m, &base, k, scale)?, GridSource::Fixed(base))),
        Pooling::RoiAlign => {
            let gc = g.constant(base.clone());
            Ok((g.sample_pool(m, gc, k, scale)?, GridSource::Fixed(base)))
        }
        Pooling::GeoAlign => {
            let gc = g.constant(base);
            let v0 = g.sample_pool(m, gc, k, scale)?;
            let field = roi::affine_head(g, p, "affine", v0, k)?;
            let grid = g.affine_grid(field, *roi)?;
            Ok((g.sample_pool(m, grid, k, scale)?, GridSource::Var(grid)))
        }
    }
}

/// Geometry head: conv, 2x upsampling, conv, 2x upsampling, 1x1 to six maps.
fn fox_graph(g: &mut Graph, p: &GraphParams, v: Var) -> Result<Var> {
    let (h, w, _) = g.value(v).check_dims3("pooled feature")?;
    let y = p.conv(g, "fox.c1", v, 1)?;
    let y = g.relu(y);
    let y = g.resize(y, 2 * h, 2 * w)?;
    let y = p.conv(g, "fox.c2", y, 1)?;
    let y = g.relu(y);
    let y = g.resize(y, 4 * h, 4 * w)?;
    p.conv(g, "fox.out", y, 1)
}

fn component_box(pixels: &[(usize, usize)]) -> Result<RoIBox> {
    let corners: Vec<Point> = pixels
        .iter()
        .flat_map(|&(y, x)| {
            let (x, y) = (x as f64, y as f64);
            [
                Point::new(x, y),
                Point::new(x + 1.0, y),
                Point::new(x + 1.0, y + 1.0),
                Point::new(x, y + 1.0),
            ]
        })
        .collect();
    RoIBox::enclosing(&corners)
}

fn prob_dims(prob: &Tensor) -> Result<(usize, usize)> {
    match prob.shape() {
        [h, w] | [h, w, 1] => Ok((*h, *w)),
        s => Err(invalid(format!("probability map of shape {s:?}"))),
    }
}

/// Thresholds the map, keeps 8-connected components of at least `min_area`
/// pixels and returns their minimum-area rectangles with their mean probability.
pub fn proposal_components(prob: &Tensor, t_tr: f64, min_area: usize) -> Result<Vec<(RoIBox, f64)>> {
    if !(t_tr > 0.0 && t_tr < 1.0) {
        return Err(invalid(format!("text threshold {t_tr} outside (0, 1)")));
    }
    let (h, w) = prob_dims(prob)?;
    let d = prob.data();
    let mask = Mask::from_fn(h, w, |y, x| d[y * w + x] > t_tr);
    let mut out = Vec::new();
    for comp in raster::connected_components(&mask) {
        if comp.len() < min_area.max(1) {
            continue;
        }
        let score = comp.iter().map(|&(y, x)| d[y * w + x]).sum::<f64>() / comp.len() as f64;
        out.push((component_box(&comp)?, score));
    }
    Ok(out)
}

/// Minimum-area rectangles (map pixel coordinates) of the text components.
pub fn extract_proposals(prob: &Tensor, t_tr: f64, min_area: usize) -> Result<Vec<RoIBox>> {
    Ok(proposal_components(prob, t_tr, min_area)?.into_iter().map(|(b, _)| b).collect())
}

/// Greedy non-maximum suppression on polygons, highest score first.
pub fn polygon_nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| polygon_iou(&k.polygon, &d.polygon).map_or(true, |iou| iou <= iou_thresh))
        {
            kept.push(d);
        }
    }
    kept
}

/// Optimizer settings of the two training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Epochs of segmentation-only warm-up.
    pub warmup_epochs: usize,
    /// Epochs of joint training.
    pub epochs: usize,
    pub lr_warmup: f64,
    pub lr: f64,
    /// Multiplies the joint-stage rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Random shift of training RoIs, in pixels.
    pub roi_jitter: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            epochs: 40,
            lr_warmup: 2e-3,
            lr: 1e-3,
            lr_decay: 0.9,
            decay_every: 10,
            roi_jitter: 1.5,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_warmup > 0.0 && self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("learning rates must be positive and the decay in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !(self.roi_jitter >= 0.0) {
            return Err(Error::Config("roi_jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Joint-stage learning rate in epoch `epoch` (counted from 0).
    pub fn joint_lr(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// `A` for warm-up, `B` for joint training.
    pub stage: char,
    pub epoch: usize,
    pub sample: String,
    pub lr: f64,
    pub l_tis: f64,
    pub l_align: f64,
    pub l_fox: f64,
    pub fox: FoxLossTerms,
    pub total: f64,
}

impl TrainRecord {
    pub const HEADER: &'static str =
        "step\tstage\tepoch\tsample\tlr\tl_tis\tl_align\tl_fox\ttcl\tscale\tsin_theta\tcos_theta\tsin_phi\tcos_phi\ttotal";

    pub fn tsv(&self) -> String {
        let f = &self.fox;
        format!(
            "{}\t{}\t{}\t{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step,
            self.stage,
            self.epoch,
            self.sample,
            self.lr,
            self.l_tis,
            self.l_align,
            self.l_fox,
            f.tcl,
            f.scale,
            f.sin_theta,
            f.cos_theta,
            f.sin_phi,
            f.cos_phi,
            self.total
        )
    }
}

pub struct Trained {
    pub model: Model,
    pub log: Vec<TrainRecord>,
}

/// Text mask of the polygons at map resolution.
pub fn text_mask(polys: &[TextPolygon], h: usize, w: usize, downsample: usize) -> Mask {
    let mut m = Mask::new(h, w);
    for p in polys {
        let f = raster::fill_polygon(&p.vertices, h, w, 1.0 / downsample as f64);
        for (b, &v) in m.bits.iter_mut().zip(&f.bits) {
            *b |= v;
        }
    }
    m
}

/// Training RoI of one word: the rectangle a perfect segmentation would
/// propose, shifted by up to `jitter` pixels.
fn training_roi(poly: &TextPolygon, mh: usize, mw: usize, ds: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Result<RoIBox> {
    let mask = raster::fill_polygon(&poly.vertices, mh, mw, 1.0 / ds as f64);
    let pixels: Vec<(usize, usize)> = (0..mh)
        .flat_map(|y| (0..mw).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .collect();
    let roi = if pixels.is_empty() {
        RoIBox::enclosing(&poly.vertices)?
    } else {
        component_box(&pixels)?.scaled(ds as f64)
    };
    if jitter > 0.0 {
        let d = Point::new(rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter));
        let s = 1.0 + rng.random_range(-0.05..=0.05);
        let r = roi.translated(d);
        return Ok(RoIBox::new(r.center, (r.size.0 * s, r.size.1 * s), r.angle));
    }
    Ok(roi)
}

struct StepLosses {
    total: Var,
    l_tis: f64,
    l_align: f64,
    l_fox: f64,
    fox: FoxLossTerms,
}

fn mean_terms(terms: &[FoxLossTerms]) -> FoxLossTerms {
    let n = terms.len().max(1) as f64;
    let mut m = FoxLossTerms::default();
    for t in terms {
        m.tcl += t.tcl / n;
        m.scale += t.scale / n;
        m.sin_theta += t.sin_theta / n;
        m.cos_theta += t.cos_theta / n;
        m.sin_phi += t.sin_phi / n;
        m.cos_phi += t.cos_phi / n;
        m.total += t.total / n;
    }
    m
}

fn build_step(
    g: &mut Graph,
    p: &GraphParams,
    cfg: &ModelConfig,
    sample: &Sample,
    joint: bool,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let x = pad_image(&sample.image_tensor(), cfg.downsample_factor)?;
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let ds = cfg.downsample_factor;
    let (mh, mw) = (h / ds, w / ds);
    let xv = g.constant(x);
    let (m, logits) = tis_graph(g, p, cfg, xv)?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut l_tis = 0.0;
    if cfg.stage != Stage::SecondOnly {
        let mask = text_mask(&sample.polygons, mh, mw, ds);
        let lt = g.tis_loss(logits, &mask.bits, &cfg.ohem, cfg.tis_loss)?;
        l_tis = g.value(lt).item();
        terms.push((lt, 1.0));
    }
    let mut aligns = Vec::new();
    let mut foxes = Vec::new();
    let mut fox_vals = Vec::new();
    if joint {
        let quads = sample.quads.as_ref().ok_or_else(|| {
            Error::Config(format!("sample `{}` has no character quads; the geometry head needs them", sample.name))
        })?;
        let (fh, fw) = cfg.fox_output_shape;
        if cfg.stage == Stage::SecondOnly {
            let roi = full_image_box(h, w);
            let (v, grid) = pool_graph(g, p, cfg, m, &roi)?;
            let words: Vec<&[Quad]> = quads.iter().filter(|q| q.len() >= 2).map(|q| q.as_slice()).collect();
            let frame = RoiFrame::new(&SamplingGrid { points: grid }, fh, fw)?;
            let labels = fox::generate_geometry_labels_multi(&words, &frame)?;
            let raw = fox_graph(g, p, v)?;
            let (lf, t) = g.fox_loss(raw, labels, cfg.loss)?;
            foxes.push(lf);
            fox_vals.push(t);
        } else {
            for (poly, word) in sample.polygons.iter().zip(quads) {
                if word.len() < 2 {
                    continue;
                }
                let roi = training_roi(poly, mh, mw, ds, jitter, rng)?;
                let (v, grid) = pool_graph_var(g, p, cfg, m, &roi)?;
                let points = match grid {
                    GridSource::Var(gv) => {
                        match roi::warp_targets(poly, cfg.pooled_shape.0, cfg.pooled_shape.1, cfg.k) {
                            Ok(t) => aligns.push(g.l1_mean(gv, t.points)?),
                            Err(e) => log::warn!("no warp target for a word of `{}`: {e}", sample.name),
                        }
                        g.value(gv).clone()
                    }
                    GridSource::Fixed(t) => t,
                };
                let frame = RoiFrame::new(&SamplingGrid { points }, fh, fw)?;
                let labels = fox::generate_geometry_labels(word, &frame)?;
                let raw = fox_graph(g, p, v)?;
                let (lf, t) = g.fox_loss(raw, labels, cfg.loss)?;
                foxes.push(lf);
                fox_vals.push(t);
            }
        }
    }
    let mut l_align = 0.0;
    if !aligns.is_empty() {
        let wgt = cfg.loss.alpha / aligns.len() as f64;
        for &a in &aligns {
            l_align += g.value(a).item() / aligns.len() as f64;
            terms.push((a, wgt));
        }
    }
    let fox = mean_terms(&fox_vals);
    if !foxes.is_empty() {
        let wgt = cfg.loss.beta / foxes.len() as f64;
        for &f in &foxes {
            terms.push((f, wgt));
        }
    }
    if terms.is_empty() {
        return Err(invalid(format!("sample `{}` gives no training signal", sample.name)));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(StepLosses {
        total,
        l_tis,
        l_align,
        l_fox: fox.total,
        fox,
    })
}

fn dump_divergence(dir: &Path, step: usize, sample: &Sample, record: &TrainRecord) -> Result<PathBuf> {
    let d = dir.join(format!("diverged-step{step}"));
    fs::create_dir_all(&d)?;
    npy::write_npy(&d.join("image.npy"), &sample.image_tensor())?;
    let polys: Vec<Vec<f64>> = sample.polygons.iter().map(|p| p.coords()).collect();
    let report = serde_json::json!({ "record": record, "polygons": polys });
    fs::write(d.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(d)
}

/// Paths written by [`train`] under its output directory.
pub const LOG_FILE: &str = "train_log.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Trains a model from scratch: segmentation warm-up, then joint training
/// of every module. With `out`, writes the per-step log, a checkpoint
/// after each stage and a dump of the offending sample if a loss turns
/// non-finite.
pub fn train(dataset: &[Sample], cfg: &ModelConfig, schedule: &Schedule, out: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut model = Model::new(cfg.clone(), schedule.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    rng.set_stream(1);
    let mut adam = Adam::default();
    let mut log = Vec::new();
    let log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut s = String::from(TrainRecord::HEADER);
            s.push('\n');
            fs::write(dir.join(LOG_FILE), &s)?;
            Some(dir.join(LOG_FILE))
        }
        None => None,
    };
    // segmentation-only and geometry-only models skip the stage they lack
    let (warmup, joint) = match cfg.stage {
        Stage::Both => (schedule.warmup_epochs, schedule.epochs),
        Stage::FirstOnly => (schedule.warmup_epochs + schedule.epochs, 0),
        Stage::SecondOnly => (0, schedule.warmup_epochs + schedule.epochs),
    };
    let mut step = 0;
    for (stage, epochs) in [('A', warmup), ('B', joint)] {
        for epoch in 0..epochs {
            let lr = if stage == 'A' { schedule.lr_warmup } else { schedule.joint_lr(epoch) };
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for i in order {
                let sample = &dataset[i];
                let mut g = Graph::new();
                let p = model.params.load(&mut g, true);
                let losses = build_step(&mut g, &p, cfg, sample, stage == 'B', schedule.roi_jitter, &mut rng)?;
                let total = g.value(losses.total).item();
                let record = TrainRecord {
                    step,
                    stage,
                    epoch,
                    sample: sample.name.clone(),
                    lr,
                    l_tis: losses.l_tis,
                    l_align: losses.l_align,
                    l_fox: losses.l_fox,
                    fox: losses.fox,
                    total,
                };
                if let Some(path) = &log_file {
                    let mut f = fs::OpenOptions::new().append(true).open(path)?;
                    std::io::Write::write_all(&mut f, format!("{}\n", record.tsv()).as_bytes())?;
                }
                if !total.is_finite() {
                    let dir = out.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
                    let dump = dump_divergence(&dir, step, sample, &record)?;
                    return Err(Error::Diverged {
                        step,
                        message: format!("loss {total} on sample `{}`; dump in {}", sample.name, dump.display()),
                    });
                }
                g.backward(losses.total)?;
                let mut grads = p.grads(&g);
                if stage == 'A' {
                    grads.retain(|name, _| TIS_PREFIXES.iter().any(|pre| name.starts_with(pre)));
                }
                adam.step(&mut model.params, &grads, lr)?;
                log.push(record);
                step += 1;
            }
            log::info!("stage {stage} epoch {epoch}: mean loss {:.4}", mean_total(&log, stage, epoch));
        }
        if let Some(dir) = out {
            if epochs > 0 {
                save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(Trained { model, log })
}

fn mean_total(log: &[TrainRecord], stage: char, epoch: usize) -> f64 {
    let v: Vec<f64> = log.iter().filter(|r| r.stage == stage && r.epoch == epoch).map(|r| r.total).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let model: Model = serde_json::from_str(&fs::read_to_string(path)?)?;
    model.config.validate()?;
    let fresh = Model::new(model.config.clone(), 0)?;
    for (name, t) in fresh.params.iter() {
        let got = model.params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!("checkpoint parameter `{name}` has shape {:?}", got.shape())));
        }
    }
    Ok(model)
}

/// Detections on every sample, with the elapsed wall-clock time.
pub fn detect_all(model: &Model, samples: &[Sample]) -> Result<(Vec<DetectOutput>, std::time::Duration)> {
    let start = std::time::Instant::now();
    let out = samples
        .iter()
        .map(|s| model.detect(&s.image_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, start.elapsed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render, SynthSpec};

    fn small_config() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            fox_output_shape: (32, 128),
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            groups: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("first-only".parse::<Stage>().unwrap(), Stage::FirstOnly);
        assert_eq!(Pooling::RoiPool.to_string(), "roipool");
        assert!("bogus".parse::<Pooling>().is_err());
    }

    #[test]
    fn feature_map_is_a_quarter_of_the_image() {
        let model = Model::new(small_config(), 1).unwrap();
        let out = model.tis_forward(&Tensor::zeros(&[128, 256, 1])).unwrap();
        assert_eq!(out.features.shape(), &[32, 64, 8]);
        assert_eq!(out.prob.shape(), &[32, 64]);
        assert!(out.prob.data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
        let odd = model.tis_forward(&Tensor::zeros(&[30, 50, 1])).unwrap();
        assert_eq!(odd.padded, (32, 52));
        assert_eq!(odd.features.shape(), &[8, 13, 8]);
    }

    #[test]
    fn fox_head_shapes_and_initial_output() {
        let model = Model::new(small_config(), 1).unwrap();
        let v = Tensor::full(&[8, 64, 8], 0.3);
        let maps = model.fox_head_forward(&v).unwrap();
        assert_eq!(maps.data.shape(), &[32, 256, 6]);
        assert!(maps.tcl().data().iter().all(|&p| p == 0.5));
        let (c, s) = fox::normalize_pair(maps.at(3, 3, fox::channel::COS_PHI), maps.at(3, 3, fox::channel::SIN_PHI));
        assert_eq!((c, s), (1.0, 0.0));
        assert!(model.fox_head_forward(&Tensor::zeros(&[8, 32, 8])).is_err());
    }

    #[test]
    fn proposals_of_a_block() {
        assert!(extract_proposals(&Tensor::zeros(&[20, 60]), 0.5, 16).unwrap().is_empty());
        let prob = Tensor::from_vec(
            &[20, 60],
            (0..1200).map(|i| if (5..15).contains(&(i / 60)) && (10..50).contains(&(i % 60)) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let boxes = extract_proposals(&prob, 0.5, 16).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert!(b.center.dist(Point::new(30.0, 10.0)) < 1e-9);
        assert!((b.size.0 - 40.0).abs() <= 1.0 && (b.size.1 - 10.0).abs() <= 1.0);
        assert!(crate::geometry::wrap_half_turn(b.angle * 2.0).abs() < 1e-9);
        assert!(extract_proposals(&prob, 1.0, 16).is_err());
    }

    #[test]
    fn two_blobs_give_two_boxes_and_small_ones_drop() {
        let prob = Tensor::from_vec(
            &[20, 60],
            (0..1200)
                .map(|i| {
                    let (y, x) = (i / 60, i % 60);
                    let a = (2..8).contains(&y) && (2..20).contains(&x);
                    let b = (12..18).contains(&y) && (30..55).contains(&x);
                    let tiny = y == 0 && x == 59;
                    if a || b || tiny { 0.9 } else { 0.1 }
                })
                .collect(),
        )
        .unwrap();
        let mut centers: Vec<(i64, i64)> = extract_proposals(&prob, 0.5, 16)
            .unwrap()
            .iter()
            .map(|b| (b.center.x.round() as i64, b.center.y.round() as i64))
            .collect();
        centers.sort();
        assert_eq!(centers, vec![(11, 5), (43, 15)]);
    }

    #[test]
    fn blank_image_gives_no_detections() {
        let model = Model::new(small_config(), 2).unwrap();
        let out = model.detect(&Tensor::zeros(&[64, 128, 1])).unwrap();
        assert!(out.detections.is_empty());
    }

    #[test]
    fn nms_drops_duplicates() {
        let sq = |x: f64| TextPolygon::from_coords(&[x, 0.0, x + 10.0, 0.0, x + 10.0, 10.0, x, 10.0]).unwrap();
        let dets = vec![
            Detection { polygon: sq(0.0), score: 0.6 },
            Detection { polygon: sq(1.0), score: 0.9 },
            Detection { polygon: sq(30.0), score: 0.5 },
        ];
        let kept = polygon_nms(dets, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let spec = SynthSpec::default();
        let data: Vec<Sample> = (0..2).map(|i| Sample::from_instance(format!("{i}"), &render(&spec, i).unwrap())).collect();
        let schedule = Schedule {
            warmup_epochs: 1,
            epochs: 1,
            ..Schedule::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = train(&data, &small_config(), &schedule, Some(dir.path())).unwrap();
        let b = train(&data, &small_config(), &schedule, None).unwrap();
        assert_eq!(a.log.len(), 4);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(text.lines().count(), 5);
        let back = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(back, a.model);
        assert!(a.log[2].l_fox > 0.0 && a.log[2].l_align > 0.0);
    }

    #[test]
    fn geometry_head_loss_descends_on_a_fixed_roi() {
        let spec = SynthSpec {
            families: vec![crate::synth::CurveFamily::Arc],
            words_per_image: (1, 1),
            seed: 3,
            ..SynthSpec::default()
        };
        let sample = Sample::from_instance("arc", &render(&spec, 0).unwrap());
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 0).unwrap();
        let m = model.tis_forward(&sample.image_tensor()).unwrap().features;
        let ds = cfg.downsample_factor;
        let (mh, mw) = (m.shape()[0], m.shape()[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let roi = training_roi(&sample.polygons[0], mh, mw, ds, 0.0, &mut rng).unwrap();
        let (ph, pw) = cfg.pooled_shape;
        let v = roi::roi_align(&m, &roi.scaled(1.0 / ds as f64), ph, pw, cfg.k).unwrap();
        let grid = roi::base_grid(&roi, ph, pw, cfg.k).unwrap();
        let (fh, fw) = cfg.fox_output_shape;
        let frame = RoiFrame::new(&grid, fh, fw).unwrap();
        let labels = fox::generate_geometry_labels(&sample.quads.as_ref().unwrap()[0], &frame).unwrap();

        let mut adam = Adam::default();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let p = model.params.load(&mut g, true);
            let vv = g.constant(v.clone());
            let raw = fox_graph(&mut g, &p, vv).unwrap();
            let (l, _) = g.fox_loss(raw, labels.clone(), cfg.loss).unwrap();
            losses.push(g.value(l).item());
            g.backward(l).unwrap();
            let mut grads = p.grads(&g);
            grads.retain(|name, _| name.starts_with("fox."));
            adam.step(&mut model.params, &grads, 1e-3).unwrap();
        }
        let blocks: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        for (i, pair) in blocks.windows(2).enumerate() {
            assert!(pair[1] < pair[0], "block {} rose: {blocks:?}", i + 1);
        }
    }

    #[test]
    fn training_needs_data() {
        assert!(train(&[], &small_config(), &Schedule::default(), None).is_err());
    }
}
