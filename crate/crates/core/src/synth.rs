//! Deterministic synthetic curved-text images with word polygons and
//! per-character quads, plus the on-disk dataset format.
//!
//! A dataset directory holds `images/NNNN.png` (8-bit gray), `gt/NNNN.txt`
//! (one polygon per line, `x1,y1,...,xm,ym`) and `chars/NNNN.txt` (one line
//! per word: its character quads concatenated, corners ordered top-left,
//! top-right, bottom-right, bottom-left). Coordinates are written with the
//! shortest decimal form that parses back to the same `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fox::{character_segments, CharacterSegment, Quad};
use crate::geometry::{self, Point, TextPolygon};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveFamily {
    Line,
    Arc,
    Sine,
}

impl CurveFamily {
    pub const ALL: [CurveFamily; 3] = [CurveFamily::Line, CurveFamily::Arc, CurveFamily::Sine];
}

/// Generator settings. Ranges are inclusive `(low, high)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub families: Vec<CurveFamily>,
    pub char_count: (usize, usize),
    /// Character height in pixels.
    pub char_height: (f64, f64),
    /// Per-character lean of the up direction away from the curve normal (radians).
    pub shear: (f64, f64),
    /// Rotation of the whole word (radians).
    pub rotation: (f64, f64),
    /// Arc radius as a multiple of the character height.
    pub arc_radius: (f64, f64),
    /// Sine amplitude as a multiple of the character height.
    pub sine_amplitude: (f64, f64),
    pub words_per_image: (usize, usize),
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            families: CurveFamily::ALL.to_vec(),
            char_count: (4, 7),
            char_height: (10.0, 16.0),
            shear: (-0.3, 0.3),
            rotation: (-0.3, 0.3),
            arc_radius: (2.0, 3.5),
            sine_amplitude: (0.7, 1.1),
            words_per_image: (1, 2),
            image_size: (64, 128),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("synthesis spec: {what}")));
        if self.families.is_empty() {
            return bad("no curve family");
        }
        if self.char_count.0 < 2 || self.char_count.0 > self.char_count.1 {
            return bad("char_count must be a range starting at 2 or more");
        }
        if !(self.char_height.0 > 0.0 && self.char_height.0 <= self.char_height.1) {
            return bad("char_height must be a positive range");
        }
        for (name, r) in [
            ("shear", self.shear),
            ("rotation", self.rotation),
            ("arc_radius", self.arc_radius),
            ("sine_amplitude", self.sine_amplitude),
        ] {
            if !(r.0 <= r.1) || !r.0.is_finite() || !r.1.is_finite() {
                return bad(&format!("{name} is not a finite range"));
            }
        }
        if self.arc_radius.0 < 1.5 {
            return bad("arc_radius below 1.5 character heights folds characters");
        }
        if self.shear.0.abs().max(self.shear.1.abs()) > 0.6 {
            return bad("shear beyond 0.6 rad makes neighbouring characters overlap");
        }
        if self.words_per_image.0 == 0 || self.words_per_image.0 > self.words_per_image.1 {
            return bad("words_per_image must be a range starting at 1 or more");
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return bad("image is smaller than 16 x 16");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWord {
    pub family: CurveFamily,
    pub polygon: TextPolygon,
    pub quads: Vec<Quad>,
    pub segments: Vec<CharacterSegment>,
    /// Shear drawn for each character.
    pub shears: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthInstance {
    pub image: GrayImage,
    pub words: Vec<SynthWord>,
}

/// Character width and spacing as multiples of the height.
const CHAR_WIDTH: f64 = 0.6;
const CHAR_PITCH: f64 = 0.95;
/// Minimum clearance between words and from the image border, in pixels.
const WORD_MARGIN: f64 = 12.0;
const BORDER_MARGIN: f64 = 2.0;

/// Word polygon of a quad sequence: top edges left to right, then bottom edges right to left.
pub fn word_polygon(quads: &[Quad]) -> TextPolygon {
    let mut v: Vec<Point> = quads.iter().flat_map(|q| [q[0], q[1]]).collect();
    v.extend(quads.iter().rev().flat_map(|q| [q[2], q[3]]));
    TextPolygon { vertices: v }
}

/// Dense centerline of length `len` in a local frame, centered on the origin.
fn centerline(family: CurveFamily, len: f64, h: f64, rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<Point> {
    let n = 400;
    let pts: Vec<Point> = match family {
        CurveFamily::Line => (0..=n).map(|i| Point::new(len * i as f64 / n as f64, 0.0)).collect(),
        CurveFamily::Arc => {
            let r = h * rng.random_range(spec.arc_radius.0..=spec.arc_radius.1);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let span = len / r;
            // ends bend down (sign > 0) or up, in image coordinates
            (0..=n)
                .map(|i| {
                    let a = -span / 2.0 + span * i as f64 / n as f64;
                    Point::new(r * a.sin(), sign * r * (1.0 - a.cos()))
                })
                .collect()
        }
        CurveFamily::Sine => {
            let amp = h * rng.random_range(spec.sine_amplitude.0..=spec.sine_amplitude.1);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            // one period over the word, sampled finely and cut at arc length `len`
            let wavelength = len * 0.9;
            let k = std::f64::consts::TAU / wavelength;
            let fine: Vec<Point> = (0..=4 * n)
                .map(|i| {
                    let x = 2.0 * len * i as f64 / (4 * n) as f64;
                    Point::new(x, amp * (k * x + phase).sin())
                })
                .collect();
            let cum = geometry::cumulative_lengths(&fine);
            (0..=n).map(|i| geometry::point_at_length(&fine, &cum, len * i as f64 / n as f64)).collect()
        }
    };
    let (lo, hi) = geometry::bounds(&pts);
    let mid = lo.midpoint(hi);
    pts.into_iter().map(|p| p - mid).collect()
}

fn make_word(spec: &SynthSpec, rng: &mut ChaCha8Rng, h: f64) -> SynthWord {
    let family = spec.families[rng.random_range(0..spec.families.len())];
    let n = rng.random_range(spec.char_count.0..=spec.char_count.1);
    let len = (n as f64 - 1.0) * CHAR_PITCH * h + CHAR_WIDTH * h;
    let line = centerline(family, len, h, rng, spec);
    let cum = geometry::cumulative_lengths(&line);
    let rot = rng.random_range(spec.rotation.0..=spec.rotation.1);
    let (sr, cr) = rot.sin_cos();
    // rotation by `rot` counter-clockwise on screen (y down)
    let rotate = |p: Point| Point::new(p.x * cr + p.y * sr, -p.x * sr + p.y * cr);
    let mut quads = Vec::with_capacity(n);
    let mut shears = Vec::with_capacity(n);
    for i in 0..n {
        let s = CHAR_WIDTH * h / 2.0 + i as f64 * CHAR_PITCH * h;
        let c = geometry::point_at_length(&line, &cum, s);
        let a = geometry::point_at_length(&line, &cum, (s - 0.5).max(0.0));
        let b = geometry::point_at_length(&line, &cum, (s + 0.5).min(len));
        let t = (b - a) * (1.0 / (b - a).norm());
        let normal_up = Point::new(t.y, -t.x);
        let psi = rng.random_range(spec.shear.0..=spec.shear.1);
        let up = normal_up * psi.cos() + t * psi.sin();
        let (hw, hh) = (CHAR_WIDTH * h / 2.0, h / 2.0);
        let quad = [c - t * hw + up * hh, c + t * hw + up * hh, c + t * hw - up * hh, c - t * hw - up * hh];
        quads.push(quad.map(rotate));
        shears.push(psi);
    }
    let segments = character_segments(&quads).expect("generated words have at least two characters");
    SynthWord {
        family,
        polygon: word_polygon(&quads),
        quads,
        segments,
        shears,
    }
}

fn translate_word(w: &mut SynthWord, d: Point) {
    for q in &mut w.quads {
        for p in q.iter_mut() {
            *p = *p + d;
        }
    }
    for v in &mut w.polygon.vertices {
        *v = *v + d;
    }
    for s in &mut w.segments {
        s.center = s.center + d;
    }
}

fn boxes_clear(a: (Point, Point), b: (Point, Point), margin: f64) -> bool {
    a.1.x + margin <= b.0.x || b.1.x + margin <= a.0.x || a.1.y + margin <= b.0.y || b.1.y + margin <= a.0.y
}

/// Places a word inside the image, shrinking it when it does not fit.
fn place_word(spec: &SynthSpec, rng: &mut ChaCha8Rng, placed: &[(Point, Point)], first: bool) -> Result<Option<SynthWord>> {
    let (ih, iw) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let mut h = rng.random_range(spec.char_height.0..=spec.char_height.1);
    for _ in 0..12 {
        let mut word = make_word(spec, rng, h);
        if !geometry::is_simple(&word.polygon.vertices) {
            continue;
        }
        let (lo, hi) = word.polygon.bounds();
        let (ww, wh) = (hi.x - lo.x, hi.y - lo.y);
        if ww > iw - 2.0 * BORDER_MARGIN || wh > ih - 2.0 * BORDER_MARGIN {
            h *= 0.85;
            continue;
        }
        for _ in 0..40 {
            let x = rng.random_range(BORDER_MARGIN..=iw - BORDER_MARGIN - ww);
            let y = rng.random_range(BORDER_MARGIN..=ih - BORDER_MARGIN - wh);
            let d = Point::new(x - lo.x, y - lo.y);
            let bounds = (lo + d, hi + d);
            if placed.iter().all(|&b| boxes_clear(b, bounds, WORD_MARGIN)) {
                translate_word(&mut word, d);
                return Ok(Some(word));
            }
        }
        if !first {
            return Ok(None);
        }
    }
    if first {
        Err(Error::Render("word does not fit the image after shrinking".into()))
    } else {
        Ok(None)
    }
}

/// Local coordinates of `p` in the parallelogram spanned by a character quad,
/// in `[-1, 1]^2` inside.
fn quad_local(q: &Quad, p: Point) -> (f64, f64) {
    let c = q.iter().fold(Point::default(), |a, &b| a + b) * 0.25;
    let ax = (q[1] - q[0]) * 0.5;
    let ay = (q[3] - q[0]) * 0.5;
    let d = p - c;
    let det = ax.cross(ay);
    (d.cross(ay) / det, ax.cross(d) / det)
}

fn render_image(spec: &SynthSpec, rng: &mut ChaCha8Rng, words: &[SynthWord]) -> GrayImage {
    let (h, w) = spec.image_size;
    let bg = rng.random_range(15.0..60.0);
    let mut acc = vec![0.0f64; h * w];
    for word in words {
        let ink = rng.random_range(170.0..240.0);
        for q in &word.quads {
            let (lo, hi) = geometry::bounds(q);
            let (x0, x1) = ((lo.x.floor().max(0.0)) as usize, (hi.x.ceil() as usize).min(w));
            let (y0, y1) = ((lo.y.floor().max(0.0)) as usize, (hi.y.ceil() as usize).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut cover = 0.0;
                    for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                        let (a, b) = quad_local(q, Point::new(x as f64 + sx, y as f64 + sy));
                        // rounded corners
                        if a.powi(4) + b.powi(4) <= 1.0 {
                            cover += 0.25;
                        }
                    }
                    let i = y * w + x;
                    acc[i] = acc[i].max(cover * ink);
                }
            }
        }
    }
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let noise = rng.random_range(-12.0..12.0);
            let v = acc[y * w + x].max(bg) + noise;
            img.put_pixel(x as u32, y as u32, Luma([v.round().clamp(0.0, 255.0) as u8]));
        }
    }
    img
}

/// Deterministic sample `index` of the generator.
pub fn render(spec: &SynthSpec, index: u64) -> Result<SynthInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let count = rng.random_range(spec.words_per_image.0..=spec.words_per_image.1);
    let mut words: Vec<SynthWord> = Vec::new();
    let mut placed = Vec::new();
    for i in 0..count {
        if let Some(w) = place_word(spec, &mut rng, &placed, i == 0)? {
            placed.push(w.polygon.bounds());
            words.push(w);
        }
    }
    let image = render_image(spec, &mut rng, &words);
    Ok(SynthInstance { image, words })
}

/// One image with its annotations as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: GrayImage,
    pub polygons: Vec<TextPolygon>,
    /// Character quads per word, when a `chars/` sidecar exists.
    pub quads: Option<Vec<Vec<Quad>>>,
}

impl Sample {
    pub fn from_instance(name: impl Into<String>, inst: &SynthInstance) -> Self {
        Self {
            name: name.into(),
            image: inst.image.clone(),
            polygons: inst.words.iter().map(|w| w.polygon.clone()).collect(),
            quads: Some(inst.words.iter().map(|w| w.quads.clone()).collect()),
        }
    }

    /// Image as a `(h, w, 1)` tensor scaled to `[0, 1]`.
    pub fn image_tensor(&self) -> Tensor {
        image_to_tensor(&self.image)
    }
}

pub fn image_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_vec(
        &[h as usize, w as usize, 1],
        img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    )
    .expect("shape")
}

/// Loads any supported raster as a grayscale tensor.
pub fn read_image(path: &Path) -> Result<Tensor> {
    Ok(image_to_tensor(&image::open(path)?.to_luma8()))
}

pub fn format_coords(coords: &[f64]) -> String {
    coords.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_coords(path: &Path, lineno: usize, line: &str) -> Result<Vec<f64>> {
    line.split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("bad coordinate `{t}`: {e}"),
            })
        })
        .collect()
}

/// Reads a polygon annotation file; blank lines are skipped.
pub fn read_polygons(path: &Path) -> Result<Vec<TextPolygon>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let coords = parse_coords(path, i + 1, line)?;
        let poly = TextPolygon::from_coords(&coords).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(poly);
    }
    Ok(out)
}

pub fn write_polygons(path: &Path, polys: &[TextPolygon]) -> Result<()> {
    let mut s = String::new();
    for p in polys {
        s.push_str(&format_coords(&p.coords()));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_quads(path: &Path) -> Result<Vec<Vec<Quad>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c = parse_coords(path, i + 1, line)?;
        if c.is_empty() || c.len() % 8 != 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("{} coordinates do not form whole quads", c.len()),
            });
        }
        out.push(
            c.chunks_exact(8)
                .map(|q| {
                    [
                        Point::new(q[0], q[1]),
                        Point::new(q[2], q[3]),
                        Point::new(q[4], q[5]),
                        Point::new(q[6], q[7]),
                    ]
                })
                .collect(),
        );
    }
    Ok(out)
}

fn write_quads(path: &Path, words: &[Vec<Quad>]) -> Result<()> {
    let mut s = String::new();
    for w in words {
        let coords: Vec<f64> = w.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
        s.push_str(&format_coords(&coords));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn sample_name(i: usize) -> String {
    format!("{i:04}")
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    for sub in ["images", "gt", "chars"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    s.image.save(dir.join("images").join(format!("{}.png", s.name)))?;
    write_polygons(&dir.join("gt").join(format!("{}.txt", s.name)), &s.polygons)?;
    if let Some(q) = &s.quads {
        write_quads(&dir.join("chars").join(format!("{}.txt", s.name)), q)?;
    }
    Ok(())
}

/// Renders `count` samples into `dir` and records the spec as `spec.toml`.
pub fn write_dataset(spec: &SynthSpec, count: usize, dir: &Path) -> Result<()> {
    spec.validate()?;
    for sub in ["images", "gt", "chars"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let toml = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("spec.toml"), toml)?;
    for i in 0..count {
        let inst = render(spec, i as u64)?;
        write_sample(dir, &Sample::from_instance(sample_name(i), &inst))?;
    }
    Ok(())
}

/// Loads every `images/*.png` with its `gt/` annotations and optional `chars/` quads.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let img_dir = dir.join("images");
    let mut names: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&img_dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push((stem.to_string(), path));
            }
        }
    }
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for (name, path) in names {
        let image = image::open(&path)?.to_luma8();
        let gt = dir.join("gt").join(format!("{name}.txt"));
        let polygons = if gt.exists() { read_polygons(&gt)? } else { Vec::new() };
        let chars = dir.join("chars").join(format!("{name}.txt"));
        let quads = if chars.exists() { Some(read_quads(&chars)?) } else { None };
        out.push(Sample {
            name,
            image,
            polygons,
            quads,
        });
    }
    Ok(out)
}

/// Resamples a top/bottom polygon to `per_side` points on each boundary by
/// arc length (the 14-point CTW layout for `per_side = 7`).
pub fn resample_polygon(poly: &TextPolygon, per_side: usize) -> Result<TextPolygon> {
    let (top, bottom) = poly.top_bottom()?;
    let t = geometry::resample_polyline(&top, per_side)?;
    let b = geometry::resample_polyline(&bottom, per_side)?;
    TextPolygon::new(t.into_iter().chain(b.into_iter().rev()).collect())
}

pub fn to_ctw14(poly: &TextPolygon) -> Result<TextPolygon> {
    resample_polygon(poly, 7)
}
