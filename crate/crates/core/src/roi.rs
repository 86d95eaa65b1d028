//! Fixed-size RoI feature extraction.
//!
//! A rotated [`RoIBox`] defines a box-local frame with normalized coordinates
//! `(u, v)` in `[-1, 1]`. The `(k Hp, k Wp)` sampling points sit at the cell
//! centers of that frame. Each point carries an affine transform
//! `[t1 .. t6]`, and the transformed local position is
//! `(t1 u + t2 v + t3, t4 u + t5 v + t6)`, still in normalized units.
//! That position is scaled by the half extents, rotated by the box angle
//! and translated to the box center. The identity transform reproduces
//! plain RoI Align.
//!
//! Samples are bilinear with zero padding outside the map. Each output bin
//! averages its `k x k` samples.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{self, Point, TextPolygon};
use crate::params::{GraphParams, ParamStore};
use crate::tensor::{FeatureMap, Tensor};

/// Rotated rectangle in pixel coordinates. The box's width runs along
/// `(cos angle, sin angle)` in image coordinates (y pointing down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoIBox {
    pub center: Point,
    /// `(width, height)`
    pub size: (f64, f64),
    pub angle: f64,
}

impl RoIBox {
    pub fn new(center: Point, size: (f64, f64), angle: f64) -> Self {
        Self { center, size, angle }
    }

    /// Axis-aligned box spanning `[x0, x1] x [y0, y1]`.
    pub fn from_bounds(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(Point::new(0.5 * (x0 + x1), 0.5 * (y0 + y1)), (x1 - x0, y1 - y0), 0.0)
    }

    /// Minimum-area rectangle of a point set.
    pub fn enclosing(points: &[Point]) -> Result<Self> {
        let (center, size, angle) = geometry::min_area_rect(points)?;
        Ok(Self::new(center, size, angle))
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.size;
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(invalid(format!("degenerate box size {w} x {h}")));
        }
        if !self.center.is_finite() || !self.angle.is_finite() {
            return Err(Error::NumericDomain("box center or angle is not finite".into()));
        }
        Ok(())
    }

    /// Checks that the box overlaps a map of `h x w` pixels (in map units, after `scale`).
    pub fn check_overlaps(&self, h: usize, w: usize, scale: f64) -> Result<()> {
        let (lo, hi) = geometry::bounds(&self.corners());
        if hi.x * scale <= 0.0 || hi.y * scale <= 0.0 || lo.x * scale >= w as f64 || lo.y * scale >= h as f64 {
            return Err(invalid("box lies outside the feature map"));
        }
        Ok(())
    }

    pub fn axes(&self) -> (Point, Point) {
        let (s, c) = self.angle.sin_cos();
        (Point::new(c, s), Point::new(-s, c))
    }

    /// Image position of normalized box-local coordinates `(u, v)`.
    pub fn local_to_image(&self, u: f64, v: f64) -> Point {
        let (ax, ay) = self.axes();
        self.center + ax * (u * self.size.0 / 2.0) + ay * (v * self.size.1 / 2.0)
    }

    pub fn image_to_local(&self, p: Point) -> (f64, f64) {
        let (ax, ay) = self.axes();
        let d = p - self.center;
        (d.dot(ax) * 2.0 / self.size.0, d.dot(ay) * 2.0 / self.size.1)
    }

    /// Corners in the order top-left, top-right, bottom-right, bottom-left of the box frame.
    pub fn corners(&self) -> [Point; 4] {
        [
            self.local_to_image(-1.0, -1.0),
            self.local_to_image(1.0, -1.0),
            self.local_to_image(1.0, 1.0),
            self.local_to_image(-1.0, 1.0),
        ]
    }

    pub fn to_polygon(&self) -> TextPolygon {
        TextPolygon {
            vertices: self.corners().to_vec(),
        }
    }

    pub fn translated(&self, d: Point) -> Self {
        Self::new(self.center + d, self.size, self.angle)
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self::new(self.center * f, (self.size.0 * f, self.size.1 * f), self.angle)
    }

    /// Same rectangle with the width axis turned a quarter turn.
    pub fn quarter_turned(&self) -> Self {
        Self::new(self.center, (self.size.1, self.size.0), self.angle + FRAC_PI_2)
    }
}

/// Per-sampling-point affine transforms, shape `(k Hp, k Wp, 6)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    pub params: Tensor,
}

pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl AffineField {
    pub fn identity(gh: usize, gw: usize) -> Self {
        Self::constant(gh, gw, IDENTITY_AFFINE)
    }

    pub fn constant(gh: usize, gw: usize, t: [f64; 6]) -> Self {
        Self {
            params: Tensor::from_fn3(gh, gw, 6, |_, _, c| t[c]),
        }
    }

    pub fn new(params: Tensor) -> Result<Self> {
        let (_, _, c) = params.check_dims3("affine field")?;
        if c != 6 {
            return Err(invalid(format!("affine field needs 6 channels, got {c}")));
        }
        params.check_finite("affine field")?;
        Ok(Self { params })
    }

    /// The translation-only field that moves the base grid of `roi` onto `targets`.
    pub fn fitting(roi: &RoIBox, targets: &SamplingGrid) -> Result<Self> {
        let (gh, gw, _) = targets.points.check_dims3("targets")?;
        let mut params = Tensor::zeros(&[gh, gw, 6]);
        for y in 0..gh {
            for x in 0..gw {
                let (u, v) = base_coords(x, y, gw, gh);
                let p = Point::new(targets.points.at3(y, x, 0), targets.points.at3(y, x, 1));
                let (lu, lv) = roi.image_to_local(p);
                let t = [1.0, 0.0, lu - u, 0.0, 1.0, lv - v];
                for (c, v) in t.into_iter().enumerate() {
                    params.set3(y, x, c, v);
                }
            }
        }
        Ok(Self { params })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.params.dims3();
        (h, w)
    }
}

/// Image-space sampling positions, shape `(k Hp, k Wp, 2)` holding `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub points: Tensor,
}

impl SamplingGrid {
    pub fn point(&self, y: usize, x: usize) -> Point {
        Point::new(self.points.at3(y, x, 0), self.points.at3(y, x, 1))
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.points.dims3();
        (h, w)
    }

    pub fn iter(&self) -> impl Iterator<Item = Point> + '_ {
        self.points.data().chunks_exact(2).map(|p| Point::new(p[0], p[1]))
    }
}

/// Normalized box-local coordinates of grid cell `(x, y)` in a `gh x gw` grid.
pub fn base_coords(x: usize, y: usize, gw: usize, gh: usize) -> (f64, f64) {
    (
        -1.0 + (2 * x + 1) as f64 / gw as f64,
        -1.0 + (2 * y + 1) as f64 / gh as f64,
    )
}

/// Warped sampling positions for `field` over `roi`.
pub fn affine_grid(field: &Tensor, roi: &RoIBox) -> Result<Tensor> {
    let (gh, gw, c) = field.check_dims3("affine field")?;
    if c != 6 {
        return Err(invalid(format!("affine field needs 6 channels, got {c}")));
    }
    roi.validate()?;
    let (hw, hh) = (roi.size.0 / 2.0, roi.size.1 / 2.0);
    let (sa, ca) = roi.angle.sin_cos();
    let mut out = Vec::with_capacity(gh * gw * 2);
    for y in 0..gh {
        for x in 0..gw {
            let (u, v) = base_coords(x, y, gw, gh);
            let t = &field.data()[(y * gw + x) * 6..][..6];
            let lx = (t[0] * u + t[1] * v + t[2]) * hw;
            let ly = (t[3] * u + t[4] * v + t[5]) * hh;
            out.push(roi.center.x + lx * ca - ly * sa);
            out.push(roi.center.y + lx * sa + ly * ca);
        }
    }
    let grid = Tensor::from_vec(&[gh, gw, 2], out)?;
    grid.check_finite("sampling grid")?;
    Ok(grid)
}

pub fn affine_grid_backward(field_shape: &[usize], roi: &RoIBox, grad: &Tensor) -> Tensor {
    let (gh, gw) = (field_shape[0], field_shape[1]);
    let (hw, hh) = (roi.size.0 / 2.0, roi.size.1 / 2.0);
    let (sa, ca) = roi.angle.sin_cos();
    let mut out = Vec::with_capacity(gh * gw * 6);
    for y in 0..gh {
        for x in 0..gw {
            let (u, v) = base_coords(x, y, gw, gh);
            let g = &grad.data()[(y * gw + x) * 2..][..2];
            let dlx = (g[0] * ca + g[1] * sa) * hw;
            let dly = (-g[0] * sa + g[1] * ca) * hh;
            out.extend_from_slice(&[dlx * u, dlx * v, dlx, dly * u, dly * v, dly]);
        }
    }
    Tensor::from_vec(field_shape, out).expect("shape")
}

/// Bilinear taps `(flat pixel index, weight)` for a map position; taps
/// outside the map are dropped (zero padding).
fn bilinear_taps(fx: f64, fy: f64, h: usize, w: usize) -> ([(usize, f64); 4], usize) {
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let mut taps = [(0, 0.0); 4];
    let mut n = 0;
    for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
        for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
                taps[n] = (yi as usize * w + xi as usize, wy * wx);
                n += 1;
            }
        }
    }
    (taps, n)
}

fn check_pool_args(map: &Tensor, grid: &Tensor, k: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, c) = map.check_dims3("feature map")?;
    let (gh, gw, two) = grid.check_dims3("sampling grid")?;
    if two != 2 || k == 0 || gh % k != 0 || gw % k != 0 {
        return Err(invalid(format!("grid {:?} does not tile into {k}x{k} bins", grid.shape())));
    }
    let _ = (h, w);
    Ok((gh / k, gw / k, c, gh, gw))
}

/// Mean of the `k x k` bilinear samples per bin. Grid positions are
/// multiplied by `scale` to reach map pixels, whose centers sit at `i + 0.5`.
pub fn sample_pool(map: &Tensor, grid: &Tensor, k: usize, scale: f64) -> Result<Tensor> {
    let (oh, ow, c, _, gw) = check_pool_args(map, grid, k)?;
    let (h, w, _) = map.dims3();
    let inv = 1.0 / (k * k) as f64;
    let md = map.data();
    let mut out = vec![0.0; oh * ow * c];
    for by in 0..oh {
        for bx in 0..ow {
            let o = &mut out[(by * ow + bx) * c..][..c];
            for sy in 0..k {
                for sx in 0..k {
                    let gi = ((by * k + sy) * gw + bx * k + sx) * 2;
                    let fx = grid.data()[gi] * scale - 0.5;
                    let fy = grid.data()[gi + 1] * scale - 0.5;
                    let (taps, n) = bilinear_taps(fx, fy, h, w);
                    for &(idx, wt) in &taps[..n] {
                        let wt = wt * inv;
                        for (acc, &v) in o.iter_mut().zip(&md[idx * c..][..c]) {
                            *acc += wt * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out)
}

/// Gradients of [`sample_pool`] with respect to the map and the grid.
pub fn sample_pool_backward(
    map: &Tensor,
    grid: &Tensor,
    k: usize,
    scale: f64,
    grad: &Tensor,
    need_map: bool,
    need_grid: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (h, w, c) = map.dims3();
    let (gh, gw, _) = grid.dims3();
    let ow = gw / k;
    let inv = 1.0 / (k * k) as f64;
    let md = map.data();
    let mut gm = if need_map { vec![0.0; md.len()] } else { Vec::new() };
    let mut gg = if need_grid { vec![0.0; gh * gw * 2] } else { Vec::new() };
    let at = |xi: f64, yi: f64, ch: usize| -> f64 {
        if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
            md[(yi as usize * w + xi as usize) * c + ch]
        } else {
            0.0
        }
    };
    for gy in 0..gh {
        for gx in 0..gw {
            let (by, bx) = (gy / k, gx / k);
            let go = &grad.data()[(by * ow + bx) * c..][..c];
            let gi = (gy * gw + gx) * 2;
            let fx = grid.data()[gi] * scale - 0.5;
            let fy = grid.data()[gi + 1] * scale - 0.5;
            if need_map {
                let (taps, n) = bilinear_taps(fx, fy, h, w);
                for &(idx, wt) in &taps[..n] {
                    let wt = wt * inv;
                    for (acc, &g) in gm[idx * c..][..c].iter_mut().zip(go) {
                        *acc += wt * g;
                    }
                }
            }
            if need_grid {
                let (x0, y0) = (fx.floor(), fy.floor());
                let (tx, ty) = (fx - x0, fy - y0);
                let (mut dx, mut dy) = (0.0, 0.0);
                for (ch, &g) in go.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let v00 = at(x0, y0, ch);
                    let v01 = at(x0 + 1.0, y0, ch);
                    let v10 = at(x0, y0 + 1.0, ch);
                    let v11 = at(x0 + 1.0, y0 + 1.0, ch);
                    dx += g * ((1.0 - ty) * (v01 - v00) + ty * (v11 - v10));
                    dy += g * ((1.0 - tx) * (v10 - v00) + tx * (v11 - v01));
                }
                gg[gi] = dx * inv * scale;
                gg[gi + 1] = dy * inv * scale;
            }
        }
    }
    (
        need_map.then(|| Tensor::from_vec(map.shape(), gm).expect("shape")),
        need_grid.then(|| Tensor::from_vec(grid.shape(), gg).expect("shape")),
    )
}

/// Quantized pooling: each sample snaps to its nearest map pixel and each bin
/// takes the per-channel maximum. Returns the source index of every output.
pub fn max_pool_samples(map: &Tensor, grid: &Tensor, k: usize, scale: f64) -> Result<(Tensor, Vec<Option<usize>>)> {
    let (oh, ow, c, _, gw) = check_pool_args(map, grid, k)?;
    let (h, w, _) = map.dims3();
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![None; oh * ow * c];
    for by in 0..oh {
        for bx in 0..ow {
            let base = (by * ow + bx) * c;
            for sy in 0..k {
                for sx in 0..k {
                    let gi = ((by * k + sy) * gw + bx * k + sx) * 2;
                    let xi = (grid.data()[gi] * scale - 0.5).round();
                    let yi = (grid.data()[gi + 1] * scale - 0.5).round();
                    if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                        continue;
                    }
                    let src = (yi as usize * w + xi as usize) * c;
                    for ch in 0..c {
                        let v = map.data()[src + ch];
                        let slot: &mut Option<usize> = &mut arg[base + ch];
                        if slot.is_none() || v > out[base + ch] {
                            out[base + ch] = v;
                            *slot = Some(src + ch);
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[oh, ow, c], out)?, arg))
}

fn check_output(out_h: usize, out_w: usize, k: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 || k == 0 {
        return Err(invalid(format!("output {out_h}x{out_w} with k = {k}")));
    }
    Ok(())
}

/// Uniform sampling grid of a box (identity field).
pub fn base_grid(roi: &RoIBox, out_h: usize, out_w: usize, k: usize) -> Result<SamplingGrid> {
    check_output(out_h, out_w, k)?;
    let field = AffineField::identity(k * out_h, k * out_w);
    Ok(SamplingGrid {
        points: affine_grid(&field.params, roi)?,
    })
}

/// Standard RoI Align with `k x k` samples per bin. The box is given in map pixels.
pub fn roi_align(m: &FeatureMap, roi: &RoIBox, out_h: usize, out_w: usize, k: usize) -> Result<FeatureMap> {
    check_output(out_h, out_w, k)?;
    geo_align(m, roi, &AffineField::identity(k * out_h, k * out_w), out_h, out_w, k)
}

/// RoI Align with every sampling point warped by its own affine transform.
pub fn geo_align(
    m: &FeatureMap,
    roi: &RoIBox,
    field: &AffineField,
    out_h: usize,
    out_w: usize,
    k: usize,
) -> Result<FeatureMap> {
    check_output(out_h, out_w, k)?;
    let (h, w, _) = m.check_dims3("feature map")?;
    m.check_finite("feature map")?;
    roi.validate()?;
    roi.check_overlaps(h, w, 1.0)?;
    if field.params.shape() != [k * out_h, k * out_w, 6] {
        return Err(invalid(format!(
            "field {:?} does not match a {}x{} grid",
            field.params.shape(),
            k * out_h,
            k * out_w
        )));
    }
    let grid = affine_grid(&field.params, roi)?;
    sample_pool(m, &grid, k, 1.0)
}

/// Quantized RoI pooling, the reference for the pooling ablation.
pub fn roi_pool(m: &FeatureMap, roi: &RoIBox, out_h: usize, out_w: usize, k: usize) -> Result<FeatureMap> {
    let (h, w, _) = m.check_dims3("feature map")?;
    roi.validate()?;
    roi.check_overlaps(h, w, 1.0)?;
    let grid = base_grid(roi, out_h, out_w, k)?;
    Ok(max_pool_samples(m, &grid.points, k, 1.0)?.0)
}

/// Ground-truth sampling positions inside a text polygon. Column `x` sits at
/// the same arc-length fraction of the top and bottom polylines; rows blend
/// linearly from top to bottom.
pub fn warp_targets(polygon: &TextPolygon, out_h: usize, out_w: usize, k: usize) -> Result<SamplingGrid> {
    check_output(out_h, out_w, k)?;
    if !geometry::is_simple(&polygon.vertices) {
        return Err(Error::InvalidAnnotation("self-intersecting polygon".into()));
    }
    let (top, bottom) = polygon.top_bottom()?;
    let (gh, gw) = (k * out_h, k * out_w);
    let tc = geometry::cumulative_lengths(&top);
    let bc = geometry::cumulative_lengths(&bottom);
    let (tl, bl) = (*tc.last().unwrap(), *bc.last().unwrap());
    if tl <= 0.0 || bl <= 0.0 {
        return Err(Error::InvalidAnnotation("degenerate top or bottom boundary".into()));
    }
    let mut pts = Tensor::zeros(&[gh, gw, 2]);
    for x in 0..gw {
        let a = (x as f64 + 0.5) / gw as f64;
        let t = geometry::point_at_length(&top, &tc, a * tl);
        let b = geometry::point_at_length(&bottom, &bc, a * bl);
        for y in 0..gh {
            let p = t.lerp(b, (y as f64 + 0.5) / gh as f64);
            pts.set3(y, x, 0, p.x);
            pts.set3(y, x, 1, p.y);
        }
    }
    Ok(SamplingGrid { points: pts })
}

/// Graph form of the affine head: two 3x3 convolutions with ReLU, bilinear
/// upsampling by `k`, and a per-point linear map to 6 outputs.
pub fn affine_head(g: &mut Graph, params: &GraphParams, prefix: &str, x: Var, k: usize) -> Result<Var> {
    let (h, w, _) = g.value(x).check_dims3("RoI feature")?;
    let y = params.conv(g, &format!("{prefix}.c1"), x, 1)?;
    let y = g.relu(y);
    let y = params.conv(g, &format!("{prefix}.c2"), y, 1)?;
    let y = g.relu(y);
    let y = g.resize(y, k * h, k * w)?;
    params.conv(g, &format!("{prefix}.out"), y, 1)
}

/// Adds affine-head parameters whose output is the identity field.
pub fn init_affine_head(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize, rng: &mut impl rand::Rng) {
    store.init_conv(&format!("{prefix}.c1"), 3, 3, channels, hidden, rng);
    store.init_conv(&format!("{prefix}.c2"), 3, 3, hidden, hidden, rng);
    store.init_conv_zero(&format!("{prefix}.out"), 1, 1, hidden, 6);
    store.insert(
        format!("{prefix}.out.b"),
        Tensor::from_vec(&[6], IDENTITY_AFFINE.to_vec()).expect("shape"),
    );
}

/// Stand-alone affine head with its own parameters.
#[derive(Clone, Debug)]
pub struct AffineHead {
    pub params: ParamStore,
    pub k: usize,
}

impl AffineHead {
    pub fn new(channels: usize, hidden: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        let mut params = ParamStore::new();
        init_affine_head(&mut params, "affine", channels, hidden, rng);
        Self { params, k }
    }

    /// Per-point transforms for a first-pass RoI feature.
    pub fn predict_affine_field(&self, roi_feature: &FeatureMap) -> Result<AffineField> {
        roi_feature.check_dims3("RoI feature")?;
        let mut g = Graph::new();
        let p = self.params.load(&mut g, false);
        let x = g.constant(roi_feature.clone());
        let out = affine_head(&mut g, &p, "affine", x, self.k)?;
        AffineField::new(g.value(out).clone())
    }
}

/// The map from RoI-output pixel coordinates to image coordinates induced by
/// a sampling grid: bilinear interpolation of the grid points, extended
/// linearly past the outermost points. RoI pixel `(c, r)` has its center at
/// `(c, r)`; the grid covers `[-0.5, out_w - 0.5] x [-0.5, out_h - 0.5]`.
#[derive(Clone, Debug)]
pub struct RoiFrame {
    grid: Tensor,
    out_h: usize,
    out_w: usize,
}

impl RoiFrame {
    pub fn new(grid: &SamplingGrid, out_h: usize, out_w: usize) -> Result<Self> {
        let (gh, gw, _) = grid.points.check_dims3("sampling grid")?;
        if gh < 2 || gw < 2 || out_h == 0 || out_w == 0 {
            return Err(invalid("a RoI frame needs a grid of at least 2x2 points"));
        }
        Ok(Self {
            grid: grid.points.clone(),
            out_h,
            out_w,
        })
    }

    /// Frame of an unwarped box.
    pub fn from_box(roi: &RoIBox, out_h: usize, out_w: usize) -> Result<Self> {
        let grid = base_grid(roi, out_h, out_w, 1)?;
        Self::new(&grid, out_h, out_w)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// The frame after one pass of a 3x3 mean filter over the grid points.
    /// Border points average over their in-grid neighbors only.
    pub fn smoothed(&self) -> Self {
        let (gh, gw, _) = self.grid.dims3();
        let grid = Tensor::from_fn3(gh, gw, 2, |y, x, c| {
            let (mut sum, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(gh) {
                for xx in x.saturating_sub(1)..(x + 2).min(gw) {
                    sum += self.grid.at3(yy, xx, c);
                    n += 1.0;
                }
            }
            sum / n
        });
        Self { grid, ..*self }
    }

    fn cell(&self, p: Point) -> (usize, usize, f64, f64, f64, f64) {
        let (gh, gw, _) = self.grid.dims3();
        let sx = gw as f64 / self.out_w as f64;
        let sy = gh as f64 / self.out_h as f64;
        let gx = (p.x + 0.5) * sx - 0.5;
        let gy = (p.y + 0.5) * sy - 0.5;
        let x0 = (gx.floor().max(0.0) as usize).min(gw - 2);
        let y0 = (gy.floor().max(0.0) as usize).min(gh - 2);
        (x0, y0, gx - x0 as f64, gy - y0 as f64, sx, sy)
    }

    fn g(&self, y: usize, x: usize) -> Point {
        Point::new(self.grid.at3(y, x, 0), self.grid.at3(y, x, 1))
    }

    /// The nearest RoI position covered by the grid.
    fn clamp_to_grid(&self, p: Point) -> Point {
        let (gh, gw, _) = self.grid.dims3();
        let sx = gw as f64 / self.out_w as f64;
        let sy = gh as f64 / self.out_h as f64;
        Point::new(
            p.x.clamp(0.5 / sx - 0.5, (gw as f64 - 0.5) / sx - 0.5),
            p.y.clamp(0.5 / sy - 0.5, (gh as f64 - 0.5) / sy - 0.5),
        )
    }

    /// Bilinear inside the grid; outside, linear from the nearest covered
    /// position so that a twisted border cell cannot blow up far away.
    pub fn to_image(&self, p: Point) -> Point {
        let q = self.clamp_to_grid(p);
        let (x0, y0, tx, ty, _, _) = self.cell(q);
        let top = self.g(y0, x0).lerp(self.g(y0, x0 + 1), tx);
        let bot = self.g(y0 + 1, x0).lerp(self.g(y0 + 1, x0 + 1), tx);
        let inside = top.lerp(bot, ty);
        if q == p {
            return inside;
        }
        let (a, b) = self.jacobian(q);
        inside + a * (p.x - q.x) + b * (p.y - q.y)
    }

    /// Columns of `d image / d roi` at `p`: `(d/dx, d/dy)`, constant
    /// outside the grid.
    pub fn jacobian(&self, p: Point) -> (Point, Point) {
        let (x0, y0, tx, ty, sx, sy) = self.cell(self.clamp_to_grid(p));
        let (g00, g01, g10, g11) = (self.g(y0, x0), self.g(y0, x0 + 1), self.g(y0 + 1, x0), self.g(y0 + 1, x0 + 1));
        let ddx = ((g01 - g00) * (1.0 - ty) + (g11 - g10) * ty) * sx;
        let ddy = ((g10 - g00) * (1.0 - tx) + (g11 - g01) * tx) * sy;
        (ddx, ddy)
    }

    /// Expresses an image-space vector at `p` in RoI pixel units.
    pub fn vector_to_roi(&self, p: Point, v: Point) -> Option<Point> {
        let (a, b) = self.jacobian(p);
        let det = a.cross(b);
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        Some(Point::new(v.cross(b) / det, a.cross(v) / det))
    }

    /// Image-space vector of an RoI-space vector at `p`.
    pub fn vector_to_image(&self, p: Point, v: Point) -> Point {
        let (a, b) = self.jacobian(p);
        a * v.x + b * v.y
    }
}
