//! Planar geometry: points, polylines, polygons, simplification and
//! minimum-area rectangles.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        self + (o - self) * t
    }

    pub fn midpoint(self, o: Point) -> Point {
        Point::new(0.5 * (self.x + o.x), 0.5 * (self.y + o.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Ordered vertex ring in image coordinates (implicitly closed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPolygon {
    pub vertices: Vec<Point>,
}

impl TextPolygon {
    /// Accepts any ring of at least three finite vertices; see [`TextPolygon::validate`].
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(invalid(format!("a polygon needs 3 vertices, got {}", vertices.len())));
        }
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericDomain("polygon vertex is not finite".into()));
        }
        Ok(Self { vertices })
    }

    pub fn from_coords(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(invalid("odd number of polygon coordinates"));
        }
        Self::new(coords.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect())
    }

    pub fn coords(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    /// Simple with positive area.
    pub fn validate(&self) -> Result<()> {
        if self.area() <= 1e-12 {
            return Err(invalid("polygon has zero area"));
        }
        if !is_simple(&self.vertices) {
            return Err(invalid("polygon is self-intersecting"));
        }
        Ok(())
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(p, &self.vertices)
    }

    /// Splits the ring into its top polyline and its bottom polyline, both
    /// running in reading direction. The ring must hold an even number of
    /// vertices: the top points followed by the bottom points reversed.
    pub fn top_bottom(&self) -> Result<(Vec<Point>, Vec<Point>)> {
        let n = self.vertices.len();
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidAnnotation(format!(
                "{n} vertices cannot be split into top and bottom polylines"
            )));
        }
        let top = self.vertices[..n / 2].to_vec();
        let bottom = self.vertices[n / 2..].iter().rev().copied().collect();
        Ok((top, bottom))
    }

    pub fn bounds(&self) -> (Point, Point) {
        bounds(&self.vertices)
    }
}

pub fn bounds(points: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

/// Shoelace area; positive for counter-clockwise rings in a y-up frame.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n).map(|i| ring[i].cross(ring[(i + 1) % n])).sum::<f64>() * 0.5
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

/// Closed-segment intersection test.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let eps = 1e-12;
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps)) && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps)) {
        return true;
    }
    (d1.abs() <= eps && on_segment(c, d, a))
        || (d2.abs() <= eps && on_segment(c, d, b))
        || (d3.abs() <= eps && on_segment(a, b, c))
        || (d4.abs() <= eps && on_segment(a, b, d))
}

/// True when no two non-adjacent edges of the ring touch and no vertex repeats.
pub fn is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        if ring[i].dist(ring[(i + 1) % n]) <= 1e-12 {
            return false;
        }
    }
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    // adjacent edges folding back onto each other
    for i in 0..n {
        let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
        if orient(a, b, c).abs() <= 1e-12 && (a - b).dot(c - b) > 0.0 {
            return false;
        }
    }
    true
}

/// Distance from `p` to segment `ab` and the segment parameter of the foot point.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    };
    (p.dist(a + ab * t), t)
}

/// Even-odd containment; points on the boundary count as inside.
pub fn point_in_polygon(p: Point, ring: &[Point]) -> bool {
    let n = ring.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if point_segment_distance(p, a, b).0 <= 1e-9 {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn polyline_length(line: &[Point]) -> f64 {
    line.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Cumulative arc length at every vertex.
pub fn cumulative_lengths(line: &[Point]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(line.len());
    let mut s = 0.0;
    acc.push(0.0);
    for w in line.windows(2) {
        s += w[0].dist(w[1]);
        acc.push(s);
    }
    acc
}

/// Point at arc length `s` (clamped to the polyline).
pub fn point_at_length(line: &[Point], cum: &[f64], s: f64) -> Point {
    let total = *cum.last().unwrap_or(&0.0);
    let s = s.clamp(0.0, total);
    let i = match cum.iter().position(|&c| c >= s) {
        Some(0) | None => return if s <= 0.0 { line[0] } else { *line.last().unwrap() },
        Some(i) => i,
    };
    let seg = cum[i] - cum[i - 1];
    let t = if seg > 0.0 { (s - cum[i - 1]) / seg } else { 0.0 };
    line[i - 1].lerp(line[i], t)
}

/// Point at arc-length fraction `t` in [0, 1].
pub fn point_at_fraction(line: &[Point], t: f64) -> Point {
    let cum = cumulative_lengths(line);
    let total = *cum.last().unwrap();
    point_at_length(line, &cum, t * total)
}

/// `n >= 2` points at equal arc-length spacing, endpoints included.
pub fn resample_polyline(line: &[Point], n: usize) -> Result<Vec<Point>> {
    let cum = cumulative_lengths(line);
    let total = *cum.last().unwrap_or(&0.0);
    if n < 2 || total <= 0.0 {
        return Err(invalid("cannot resample a degenerate polyline"));
    }
    Ok((0..n)
        .map(|i| point_at_length(line, &cum, total * i as f64 / (n - 1) as f64))
        .collect())
}

/// Nearest point on a polyline: `(distance, arc length of the foot, segment index)`.
pub fn project_onto_polyline(p: Point, line: &[Point], cum: &[f64]) -> (f64, f64, usize) {
    let mut best = (f64::INFINITY, 0.0, 0);
    for (i, w) in line.windows(2).enumerate() {
        let (d, t) = point_segment_distance(p, w[0], w[1]);
        if d < best.0 {
            best = (d, cum[i] + t * (cum[i + 1] - cum[i]), i);
        }
    }
    best
}

fn dp_chain(points: &[Point], eps: f64, keep: &mut [bool], lo: usize, hi: usize) {
    if hi <= lo + 1 {
        return;
    }
    let (a, b) = (points[lo], points[hi]);
    let mut worst = (0.0, lo);
    for (i, &p) in points.iter().enumerate().take(hi).skip(lo + 1) {
        let d = point_segment_distance(p, a, b).0;
        if d > worst.0 {
            worst = (d, i);
        }
    }
    if worst.0 > eps {
        keep[worst.1] = true;
        dp_chain(points, eps, keep, lo, worst.1);
        dp_chain(points, eps, keep, worst.1, hi);
    }
}

/// Douglas-Peucker simplification of an open polyline.
pub fn simplify_polyline(points: &[Point], eps: f64) -> Vec<Point> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    dp_chain(points, eps, &mut keep, 0, points.len() - 1);
    points.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect()
}

/// Douglas-Peucker simplification of a closed ring. The ring is split at its
/// first vertex and the vertex farthest from it; both chains are simplified.
pub fn simplify_ring(ring: &[Point], eps: f64) -> Vec<Point> {
    let n = ring.len();
    if n <= 3 {
        return ring.to_vec();
    }
    let far = (1..n)
        .max_by(|&i, &j| ring[0].dist(ring[i]).total_cmp(&ring[0].dist(ring[j])))
        .unwrap();
    let mut closed: Vec<Point> = ring.to_vec();
    closed.push(ring[0]);
    let mut keep = vec![false; n + 1];
    keep[0] = true;
    keep[far] = true;
    keep[n] = true;
    dp_chain(&closed, eps, &mut keep, 0, far);
    dp_chain(&closed, eps, &mut keep, far, n);
    let out: Vec<Point> = (0..n).filter(|&i| keep[i]).map(|i| ring[i]).collect();
    if out.len() < 3 {
        ring.to_vec()
    } else {
        out
    }
}

/// Andrew's monotone chain; counter-clockwise in a y-up frame, no collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle found by rotating calipers over the hull
/// edges: `(center, (width, height), angle)`. The width runs along the
/// direction `(cos angle, sin angle)` and is the longer side; the angle lies
/// in `(-pi/2, pi/2]`.
pub fn min_area_rect(points: &[Point]) -> Result<(Point, (f64, f64), f64)> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(invalid("minimum-area rectangle needs a non-degenerate point set"));
    }
    let mut best: Option<(f64, Point, f64, f64, f64)> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()] - hull[i];
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let u = e * (1.0 / len);
        let v = Point::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let a = p.dot(u);
            let b = p.dot(v);
            umin = umin.min(a);
            umax = umax.max(a);
            vmin = vmin.min(b);
            vmax = vmax.max(b);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().is_none_or(|b| area < b.0 - 1e-9) {
            let center = u * (0.5 * (umin + umax)) + v * (0.5 * (vmin + vmax));
            best = Some((area, center, umax - umin, vmax - vmin, u.y.atan2(u.x)));
        }
    }
    let (_, center, mut w, mut h, mut angle) = best.unwrap();
    if h > w {
        std::mem::swap(&mut w, &mut h);
        angle += std::f64::consts::FRAC_PI_2;
    }
    angle = wrap_half_turn(angle);
    Ok((center, (w, h), angle))
}

/// Wraps an undirected axis angle into `(-pi/2, pi/2]`.
pub fn wrap_half_turn(mut a: f64) -> f64 {
    use std::f64::consts::PI;
    while a > PI / 2.0 + 1e-12 {
        a -= PI;
    }
    while a <= -PI / 2.0 + 1e-12 {
        a += PI;
    }
    a
}
