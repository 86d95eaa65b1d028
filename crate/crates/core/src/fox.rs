//! Fiducial point expression: encoding word geometry into six per-pixel
//! maps and decoding predicted maps back into text polygons.
//!
//! Every character is a segment `(c, s, phi, theta)`: its center, half its
//! height, the direction from its bottom-edge midpoint to its top-edge
//! midpoint, and the direction towards the next character's center. Angles
//! are measured counter-clockwise from the x-axis with y pointing up, so in
//! pixel coordinates (y down) the direction of angle `a` is `(cos a, -sin a)`.
//!
//! Labels and decoding live in RoI-output pixel coordinates. A [`RoiFrame`]
//! carries positions and vectors between that frame and the image.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{self, Point, TextPolygon};
use crate::nn::sigmoid;
use crate::raster::{self, Mask};
use crate::roi::RoiFrame;
use crate::tensor::Tensor;

/// Channel roles of the six geometry maps.
pub mod channel {
    pub const SCALE: usize = 0;
    pub const TCL: usize = 1;
    pub const COS_THETA: usize = 2;
    pub const SIN_THETA: usize = 3;
    pub const COS_PHI: usize = 4;
    pub const SIN_PHI: usize = 5;
}

/// A character quadrilateral: top-left, top-right, bottom-right, bottom-left.
pub type Quad = [Point; 4];

/// Six geometry maps of shape `(h, w, 6)`: scale, TCL probability,
/// cos/sin theta, cos/sin phi.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryMaps {
    pub data: Tensor,
}

impl GeometryMaps {
    /// Activated maps from the raw head output (sigmoid on the TCL channel).
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let (_, _, c) = raw.check_dims3("geometry maps")?;
        if c != 6 {
            return Err(invalid(format!("geometry maps need 6 channels, got {c}")));
        }
        let mut data = raw.clone();
        for px in data.data_mut().chunks_exact_mut(6) {
            px[channel::TCL] = sigmoid(px[channel::TCL]);
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dims3();
        (h, w)
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data.at3(y, x, c)
    }

    pub fn tcl(&self) -> Tensor {
        self.data.channel(channel::TCL)
    }
}

/// Ground-truth maps plus the TCL mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryLabels {
    pub maps: GeometryMaps,
    pub tcl: Vec<bool>,
}

impl GeometryLabels {
    pub fn tcl_count(&self) -> usize {
        self.tcl.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterSegment {
    pub center: Point,
    pub scale: f64,
    pub char_orientation: f64,
    pub text_orientation: f64,
}

/// Angle of a pixel-space direction, y-up convention.
pub fn direction_angle(d: Point) -> f64 {
    (-d.y).atan2(d.x)
}

/// Pixel-space unit vector of an angle.
pub fn angle_direction(a: f64) -> Point {
    Point::new(a.cos(), -a.sin())
}

pub fn quad_center(q: &Quad) -> Point {
    q[0].midpoint(q[1]).midpoint(q[3].midpoint(q[2]))
}

/// Segments of a word's character quads in reading order.
pub fn character_segments(quads: &[Quad]) -> Result<Vec<CharacterSegment>> {
    if quads.len() < 2 {
        return Err(Error::InvalidInstance(format!(
            "a word needs at least 2 characters, got {}",
            quads.len()
        )));
    }
    let centers: Vec<Point> = quads.iter().map(quad_center).collect();
    let n = quads.len();
    (0..n)
        .map(|i| {
            let q = &quads[i];
            let up = q[0].midpoint(q[1]) - q[3].midpoint(q[2]);
            let next = if i + 1 < n {
                centers[i + 1] - centers[i]
            } else {
                centers[i] - centers[i - 1]
            };
            if up.norm() == 0.0 || next.norm() == 0.0 || !up.is_finite() {
                return Err(Error::InvalidInstance(format!("degenerate character {i}")));
            }
            Ok(CharacterSegment {
                center: centers[i],
                scale: up.norm() / 2.0,
                char_orientation: direction_angle(up),
                text_orientation: direction_angle(next),
            })
        })
        .collect()
}

/// Ordered center points: `c_start`, the sampled centers `c_1 .. c_n`, `c_end`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterPointList {
    pub start: Point,
    pub centers: Vec<Point>,
    pub end: Point,
}

impl CenterPointList {
    pub fn points(&self) -> Vec<Point> {
        let mut v = Vec::with_capacity(self.centers.len() + 2);
        v.push(self.start);
        v.extend_from_slice(&self.centers);
        v.push(self.end);
        v
    }
}

/// `2n` fiducials: top and bottom point of each center, alternating.
#[derive(Clone, Debug, PartialEq)]
pub struct FiducialPointSet {
    pub points: Vec<Point>,
}

impl FiducialPointSet {
    pub fn from_pairs(pairs: &[(Point, Point)]) -> Self {
        Self {
            points: pairs.iter().flat_map(|&(t, b)| [t, b]).collect(),
        }
    }

    /// Top points followed by bottom points in reverse.
    pub fn ring(&self) -> Vec<Point> {
        let tops = self.points.iter().step_by(2).copied();
        let bottoms: Vec<Point> = self.points.iter().skip(1).step_by(2).copied().collect();
        tops.chain(bottoms.into_iter().rev()).collect()
    }
}

/// Elementwise unit-length (cos, sin) pair; `(0, 0)` maps to `(1, 0)`.
pub fn normalize_pair(a: f64, b: f64) -> (f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 || !r.is_finite() {
        (1.0, 0.0)
    } else {
        (a / r, b / r)
    }
}

pub fn normalize_orientation(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("orientation maps {:?} and {:?}", a.shape(), b.shape())));
    }
    let (cos, sin): (Vec<f64>, Vec<f64>) = a.data().iter().zip(b.data()).map(|(&x, &y)| normalize_pair(x, y)).unzip();
    Ok((Tensor::from_vec(a.shape(), cos)?, Tensor::from_vec(a.shape(), sin)?))
}

/// One thresholded TCL region and its ordered centerline.
#[derive(Clone, Debug, PartialEq)]
pub struct TclComponent {
    /// `(y, x)` pixels of the region.
    pub pixels: Vec<(usize, usize)>,
    /// Centerline through pixel centers, `x` = column, `y` = row.
    pub centerline: Vec<Point>,
}

/// Thresholds a `(h, w)` or `(h, w, 1)` probability map, splits it into
/// 8-connected components and thins each to an ordered pixel path.
pub fn extract_tcl(f2: &Tensor, t_tcl: f64) -> Result<Vec<TclComponent>> {
    if !(t_tcl > 0.0 && t_tcl < 1.0) {
        return Err(invalid(format!("TCL threshold {t_tcl} outside (0, 1)")));
    }
    let (h, w) = match f2.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(invalid(format!("TCL map of shape {s:?}"))),
    };
    let mask = Mask {
        h,
        w,
        bits: f2.data().iter().map(|&p| p > t_tcl).collect(),
    };
    Ok(raster::connected_components(&mask)
        .into_iter()
        .map(|pixels| {
            let centerline = component_centerline(&pixels);
            TclComponent { pixels, centerline }
        })
        .collect())
}

fn component_centerline(pixels: &[(usize, usize)]) -> Vec<Point> {
    let (y0, x0) = pixels.iter().fold((usize::MAX, usize::MAX), |(a, b), &(y, x)| (a.min(y), b.min(x)));
    let (y1, x1) = pixels.iter().fold((0, 0), |(a, b), &(y, x)| (a.max(y), b.max(x)));
    // one pixel of background around the component
    let mut m = Mask::new(y1 - y0 + 3, x1 - x0 + 3);
    for &(y, x) in pixels {
        m.set(y - y0 + 1, x - x0 + 1, true);
    }
    let thin = raster::zhang_suen(&m);
    let mut skel: Vec<(usize, usize)> = Vec::new();
    for y in 0..thin.h {
        for x in 0..thin.w {
            if thin.get(y, x) {
                skel.push((y, x));
            }
        }
    }
    if skel.is_empty() {
        // thinning can erase tiny blobs entirely; keep the pixel nearest the centroid
        let n = pixels.len() as f64;
        let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let best = pixels
            .iter()
            .min_by(|a, b| {
                let da = (a.0 as f64 - cy).powi(2) + (a.1 as f64 - cx).powi(2);
                let db = (b.0 as f64 - cy).powi(2) + (b.1 as f64 - cx).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        return vec![Point::new(best.1 as f64, best.0 as f64)];
    }
    raster::longest_path(&skel)
        .into_iter()
        .map(|(y, x)| Point::new((x + x0) as f64 - 1.0, (y + y0) as f64 - 1.0))
        .collect()
}

/// `n` centers at equal arc-length spacing including both ends of the
/// polyline; `c_start` and `c_end` are those ends.
pub fn sample_center_points(polyline: &[Point], n: usize) -> Result<CenterPointList> {
    if n < 2 {
        return Err(invalid(format!("need at least 2 center points, got {n}")));
    }
    if polyline.len() < 2 || geometry::polyline_length(polyline) <= 0.0 {
        return Err(invalid("centerline has zero length"));
    }
    let centers = geometry::resample_polyline(polyline, n)?;
    Ok(CenterPointList {
        start: centers[0],
        end: centers[n - 1],
        centers,
    })
}

/// Top and bottom fiducial of a character centered at `c`.
pub fn fiducial_points(c: Point, s: f64, phi: f64) -> (Point, Point) {
    let d = Point::new(s * phi.cos(), -s * phi.sin());
    (c + d, c - d)
}

/// Douglas-Peucker tolerance for decoded rings, in RoI pixels.
pub const DP_EPSILON: f64 = 1.0;

fn simplified_ring(fps: &FiducialPointSet, eps: f64) -> Result<Vec<Point>> {
    if fps.points.len() < 4 || fps.points.len() % 2 != 0 {
        return Err(invalid(format!("{} fiducials; need an even count of at least 4", fps.points.len())));
    }
    let ring = geometry::simplify_ring(&fps.ring(), eps);
    if !geometry::is_simple(&ring) || geometry::signed_area(&ring).abs() <= 1e-9 {
        return Err(Error::ReconstructionFailure("fiducial ring is self-intersecting".into()));
    }
    Ok(ring)
}

/// Orders the fiducials into a ring and simplifies it.
pub fn polygon_from_fiducials(fps: &FiducialPointSet) -> Result<TextPolygon> {
    TextPolygon::new(simplified_ring(fps, DP_EPSILON)?)
}

/// A word's centerline in the image: left-edge midpoint of the first
/// character, every character center, right-edge midpoint of the last.
struct WordLine {
    line: Vec<Point>,
    cum: Vec<f64>,
    segs: Vec<CharacterSegment>,
    /// arc position of every character center
    char_pos: Vec<f64>,
}

impl WordLine {
    fn new(quads: &[Quad]) -> Result<Self> {
        let segs = character_segments(quads)?;
        let first = &quads[0];
        let last = &quads[quads.len() - 1];
        let mut line = vec![first[0].midpoint(first[3])];
        line.extend(segs.iter().map(|s| s.center));
        line.push(last[1].midpoint(last[2]));
        let cum = geometry::cumulative_lengths(&line);
        let char_pos = cum[1..cum.len() - 1].to_vec();
        Ok(Self {
            line,
            cum,
            segs,
            char_pos,
        })
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn nearest_char(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, &p) in self.char_pos.iter().enumerate() {
            if (p - t).abs() < (self.char_pos[best] - t).abs() {
                best = i;
            }
        }
        best
    }

    /// TCL membership of an image point and the character it belongs to,
    /// with its distance to the centerline.
    fn classify(&self, p: Point) -> Option<(usize, f64)> {
        let (d, t, _) = geometry::project_onto_polyline(p, &self.line, &self.cum);
        let first = self.segs[0].scale;
        let last = self.segs[self.segs.len() - 1].scale;
        if t < TCL_END_SHRINK * first || t > self.length() - TCL_END_SHRINK * last {
            return None;
        }
        let j = self.nearest_char(t);
        (d <= TCL_HALF_WIDTH * self.segs[j].scale).then_some((j, d))
    }
}

/// TCL half-width as a multiple of the character scale (width 0.3 x height).
pub const TCL_HALF_WIDTH: f64 = 0.3;
/// The TCL ends are pulled in by this multiple of the end character's scale.
pub const TCL_END_SHRINK: f64 = 0.5;

/// Geometry labels of one word in the frame of a RoI of `out_h x out_w` pixels.
pub fn generate_geometry_labels(quads: &[Quad], frame: &RoiFrame) -> Result<GeometryLabels> {
    generate_geometry_labels_multi(&[quads], frame)
}

/// Labels for several words sharing one frame; a pixel claimed by two words
/// goes to the nearer centerline.
pub fn generate_geometry_labels_multi(words: &[&[Quad]], frame: &RoiFrame) -> Result<GeometryLabels> {
    let lines = words.iter().map(|q| WordLine::new(q)).collect::<Result<Vec<_>>>()?;
    let (h, w) = frame.shape();
    let mut data = Tensor::zeros(&[h, w, 6]);
    let mut tcl = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let q = Point::new(x as f64, y as f64);
            let p = frame.to_image(q);
            let hit = lines
                .iter()
                .filter_map(|l| l.classify(p).map(|(j, d)| (l, j, d)))
                .min_by(|a, b| a.2.total_cmp(&b.2));
            let Some((line, j, _)) = hit else { continue };
            let seg = &line.segs[j];
            let half = angle_direction(seg.char_orientation) * seg.scale;
            let (Some(v), Some(d)) = (
                frame.vector_to_roi(q, half),
                frame.vector_to_roi(q, angle_direction(seg.text_orientation)),
            ) else {
                continue;
            };
            if v.norm() == 0.0 || d.norm() == 0.0 {
                continue;
            }
            let phi = direction_angle(v);
            let theta = direction_angle(d);
            let vals = [v.norm(), 1.0, theta.cos(), theta.sin(), phi.cos(), phi.sin()];
            for (c, val) in vals.into_iter().enumerate() {
                data.set3(y, x, c, val);
            }
            tcl[y * w + x] = true;
        }
    }
    Ok(GeometryLabels {
        maps: GeometryMaps { data },
        tcl,
    })
}

/// Decoded word ends may reach this fraction of the RoI size past its border.
const END_MARGIN: f64 = 0.05;
/// Predicted up directions more than 75 degrees off the centerline normal
/// are replaced by the normal.
const MIN_UP_COSINE: f64 = 0.26;
/// Decoded character heights are capped at this multiple of the word's median.
const MAX_HEIGHT_RATIO: f64 = 2.0;
/// Smoothing passes tried on the RoI frame before giving up on a ring.
const MAX_SMOOTHING_PASSES: usize = 16;

/// Settings of the geometry decoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub t_tcl: f64,
    pub n_center_points: usize,
    /// Simplification tolerance, in RoI pixels.
    pub dp_epsilon: f64,
    /// Components smaller than this many pixels are ignored.
    pub min_pixels: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            t_tcl: 0.6,
            n_center_points: 8,
            dp_epsilon: DP_EPSILON,
            min_pixels: 3,
        }
    }
}

/// Decoded polygons (image coordinates) and the number of regions that
/// could not be turned into a valid polygon.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    pub polygons: Vec<TextPolygon>,
    pub failures: usize,
}

struct PixelAttrs {
    scale: f64,
    phi: (f64, f64),
}

fn attrs_near(maps: &GeometryMaps, path: &[Point], idx: usize) -> PixelAttrs {
    // average the raw channels over a short stretch of the path
    let lo = idx.saturating_sub(2);
    let hi = (idx + 2).min(path.len() - 1);
    let (mut s, mut c, mut si) = (0.0, 0.0, 0.0);
    for p in &path[lo..=hi] {
        let (y, x) = (p.y as usize, p.x as usize);
        s += maps.at(y, x, channel::SCALE);
        c += maps.at(y, x, channel::COS_PHI);
        si += maps.at(y, x, channel::SIN_PHI);
    }
    let n = (hi - lo + 1) as f64;
    PixelAttrs {
        scale: (s / n).max(0.0),
        phi: normalize_pair(c / n, si / n),
    }
}

fn text_direction(maps: &GeometryMaps, path: &[Point]) -> Point {
    let (mut c, mut s) = (0.0, 0.0);
    for p in path {
        let (y, x) = (p.y as usize, p.x as usize);
        let (cn, sn) = normalize_pair(maps.at(y, x, channel::COS_THETA), maps.at(y, x, channel::SIN_THETA));
        c += cn;
        s += sn;
    }
    let (c, s) = normalize_pair(c, s);
    Point::new(c, -s)
}

/// Walks from `from` along `dir` while staying inside the component and
/// returns the outermost position reached (half a pixel past the last
/// inside pixel center).
fn walk_to_boundary(region: &HashSet<(usize, usize)>, from: Point, dir: Point) -> Point {
    let mut last_inside = from;
    let step = 0.25;
    for i in 1..4000 {
        let p = from + dir * (step * i as f64);
        let (y, x) = (p.y.round(), p.x.round());
        if y < 0.0 || x < 0.0 || !region.contains(&(y as usize, x as usize)) {
            break;
        }
        last_inside = p;
    }
    last_inside + dir * 0.5
}

fn unit(v: Point) -> Option<Point> {
    let n = v.norm();
    (n > 1e-12).then(|| v * (1.0 / n))
}

fn decode_component(maps: &GeometryMaps, frame: &RoiFrame, comp: &TclComponent, cfg: &DecodeConfig) -> Result<TextPolygon> {
    let mut path = comp.centerline.clone();
    let theta_dir = text_direction(maps, &path);
    if path.len() >= 2 && (path[path.len() - 1] - path[0]).dot(theta_dir) < 0.0 {
        path.reverse();
    }
    let region: HashSet<(usize, usize)> = comp.pixels.iter().copied().collect();
    // thinning bends the last few skeleton pixels towards the corners of the
    // end caps; drop them and take the end tangents over a longer stretch
    let trim = (path.len() / 5).min(3);
    let path: Vec<Point> = path[trim..path.len() - trim].to_vec();
    // end tangents from the predicted text direction near each end, which
    // follows the word where the thinned path does not
    let look = 6.min(path.len() - 1);
    let toward = |from: Point, to: Point| unit(from - to);
    let t_start = unit(text_direction(maps, &path[..=look]) * -1.0)
        .or_else(|| toward(path[0], path[look]))
        .unwrap_or(theta_dir * -1.0);
    let t_end = unit(text_direction(maps, &path[path.len() - 1 - look..]))
        .or_else(|| toward(path[path.len() - 1], path[path.len() - 1 - look]))
        .unwrap_or(theta_dir);
    let extend = |anchor: Point, idx: usize, dir: Point| -> Point {
        let edge = walk_to_boundary(&region, anchor, dir);
        let a = attrs_near(maps, &path, idx);
        let half = Point::new(a.phi.0, -a.phi.1) * a.scale;
        let s_img = frame.vector_to_image(edge, half).norm();
        let per_unit = frame.vector_to_image(edge, dir).norm();
        let ext = if per_unit > 1e-12 { TCL_END_SHRINK * s_img / per_unit } else { 0.0 };
        edge + dir * ext
    };
    // keep the extended ends within a small margin of the RoI
    let (h, w) = maps.dims();
    let clamp = |p: Point| {
        let (mx, my) = (END_MARGIN * w as f64, END_MARGIN * h as f64);
        Point::new(
            p.x.clamp(-0.5 - mx, w as f64 - 0.5 + mx),
            p.y.clamp(-0.5 - my, h as f64 - 0.5 + my),
        )
    };
    let start = clamp(extend(path[0], 0, t_start));
    let end = clamp(extend(path[path.len() - 1], path.len() - 1, t_end));
    let mut line = Vec::with_capacity(path.len() + 2);
    line.push(start);
    line.extend_from_slice(&path);
    line.push(end);
    let centers = sample_center_points(&line, cfg.n_center_points)
        .map_err(|e| Error::ReconstructionFailure(e.to_string()))?;
    let cs = &centers.centers;
    let halves: Vec<Point> = (0..cs.len())
        .map(|i| {
            let c = cs[i];
            let idx = (0..path.len())
                .min_by(|&a, &b| path[a].dist(c).total_cmp(&path[b].dist(c)))
                .unwrap();
            let a = attrs_near(maps, &path, idx);
            let half = Point::new(a.phi.0, -a.phi.1) * a.scale;
            // a character's up direction never points across the centerline;
            // angles and lengths are compared in the image, since the RoI
            // frame may stretch one axis far more than the other
            let tangent = unit(cs[(i + 1).min(cs.len() - 1)] - cs[i.saturating_sub(1)]).unwrap_or(theta_dir);
            let h_img = frame.vector_to_image(c, half);
            match unit(frame.vector_to_image(c, tangent)) {
                Some(t_img) => {
                    let normal = Point::new(t_img.y, -t_img.x);
                    match unit(h_img) {
                        Some(u) if u.dot(normal) >= MIN_UP_COSINE => half,
                        _ => frame.vector_to_roi(c, normal * h_img.norm()).unwrap_or(half),
                    }
                }
                None => half,
            }
        })
        .collect();
    // one character cannot be far taller than the rest of its word; an
    // outlier usually comes from a nearly singular stretch of the frame
    let mut heights: Vec<f64> = cs.iter().zip(&halves).map(|(&c, &h)| frame.vector_to_image(c, h).norm()).collect();
    let mut sorted = heights.clone();
    sorted.sort_by(f64::total_cmp);
    let cap = MAX_HEIGHT_RATIO * sorted[sorted.len() / 2];
    let halves: Vec<Point> = halves
        .iter()
        .zip(heights.iter_mut())
        .map(|(&h, len)| {
            if *len > cap {
                let h = h * (cap / *len);
                *len = cap;
                h
            } else {
                h
            }
        })
        .collect();
    let pairs: Vec<(Point, Point)> = cs.iter().zip(&halves).map(|(&c, &h)| (c + h, c - h)).collect();
    let fps = FiducialPointSet::from_pairs(&pairs);
    // a well-warped word is nearly straight in RoI coordinates, so the
    // fiducials are mapped to the image before simplification; the
    // tolerance keeps its size of one RoI pixel
    let mut smooth = frame.clone();
    for pass in 0..=MAX_SMOOTHING_PASSES {
        if pass > 0 {
            smooth = smooth.smoothed();
        }
        let image_fps = FiducialPointSet {
            points: fps.points.iter().map(|&p| smooth.to_image(p)).collect(),
        };
        let eps = cfg.dp_epsilon * roi_pixel_size(&smooth, &fps.points);
        if let Ok(poly) = simplified_ring(&image_fps, eps).and_then(TextPolygon::new) {
            if poly.validate().is_ok() {
                return Ok(poly);
            }
        }
    }
    // last resort: give up the predicted lean and offset the centerline
    // along its own normal in the image
    let centers: Vec<Point> = cs.iter().map(|&c| frame.to_image(c)).collect();
    let pairs: Vec<(Point, Point)> = (0..centers.len())
        .map(|i| {
            let t = unit(centers[(i + 1).min(centers.len() - 1)] - centers[i.saturating_sub(1)]).unwrap_or(Point::new(1.0, 0.0));
            let up = Point::new(t.y, -t.x) * heights[i];
            (centers[i] + up, centers[i] - up)
        })
        .collect();
    let eps = cfg.dp_epsilon * roi_pixel_size(frame, cs);
    if let Ok(poly) = simplified_ring(&FiducialPointSet::from_pairs(&pairs), eps).and_then(TextPolygon::new) {
        if poly.validate().is_ok() {
            return Ok(poly);
        }
    }
    Err(Error::ReconstructionFailure("fiducial ring folds over in the image".into()))
}

/// Mean side length in the image of one RoI pixel at the given RoI points.
fn roi_pixel_size(frame: &RoiFrame, points: &[Point]) -> f64 {
    let sum: f64 = points
        .iter()
        .map(|&p| {
            let (a, b) = frame.jacobian(p);
            a.cross(b).abs().sqrt()
        })
        .sum();
    sum / points.len().max(1) as f64
}

/// Decodes activated geometry maps of one RoI into image-space polygons.
pub fn decode(maps: &GeometryMaps, frame: &RoiFrame, cfg: &DecodeConfig) -> Result<Decoded> {
    if maps.dims() != frame.shape() {
        return Err(invalid(format!("maps {:?} do not match frame {:?}", maps.dims(), frame.shape())));
    }
    let mut out = Decoded::default();
    for comp in extract_tcl(&maps.tcl(), cfg.t_tcl)? {
        if comp.pixels.len() < cfg.min_pixels {
            continue;
        }
        match decode_component(maps, frame, &comp, cfg) {
            Ok(p) => out.polygons.push(p),
            Err(e) => {
                log::debug!("dropping TCL region of {} pixels: {e}", comp.pixels.len());
                out.failures += 1;
            }
        }
    }
    Ok(out)
}
