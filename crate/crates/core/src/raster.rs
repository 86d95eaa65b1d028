//! Binary-mask utilities: connected components, thinning, path extraction
//! and polygon rasterization.

use std::collections::VecDeque;

use crate::geometry::{point_in_polygon, Point};

/// A binary `h x w` mask stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(y, x));
            }
        }
        Self { h, w, bits }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    /// Out-of-range coordinates read as unset.
    pub fn get_i(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.bits[y as usize * self.w + x as usize]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// 8-connected components as lists of `(y, x)` pixels, in raster order of
/// their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let mut label = vec![usize::MAX; mask.h * mask.w];
    let mut comps = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / mask.w, i % mask.w);
            pixels.push((y, x));
            for (dy, dx) in NEIGHBORS8 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if mask.get_i(ny, nx) {
                    let j = ny as usize * mask.w + nx as usize;
                    if label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        comps.push(pixels);
    }
    comps
}

/// Zhang-Suen thinning of a mask.
pub fn zhang_suen(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..m.h {
                for x in 0..m.w {
                    if !m.get(y, x) {
                        continue;
                    }
                    let (yi, xi) = (y as isize, x as isize);
                    // P2..P9 clockwise from north
                    let p = [
                        m.get_i(yi - 1, xi),
                        m.get_i(yi - 1, xi + 1),
                        m.get_i(yi, xi + 1),
                        m.get_i(yi + 1, xi + 1),
                        m.get_i(yi + 1, xi),
                        m.get_i(yi + 1, xi - 1),
                        m.get_i(yi, xi - 1),
                        m.get_i(yi - 1, xi - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let ok = if pass == 0 {
                        !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
                    } else {
                        !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
                    };
                    if ok {
                        remove.push((y, x));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                m.set(y, x, false);
            }
        }
        if !changed {
            return m;
        }
    }
}

fn bfs_farthest(pixels: &[(usize, usize)], index: &std::collections::HashMap<(usize, usize), usize>, start: usize) -> (usize, Vec<usize>) {
    let mut parent = vec![usize::MAX; pixels.len()];
    let mut dist = vec![usize::MAX; pixels.len()];
    dist[start] = 0;
    parent[start] = start;
    let mut queue = VecDeque::from([start]);
    let mut last = start;
    while let Some(i) = queue.pop_front() {
        last = i;
        let (y, x) = pixels[i];
        for (dy, dx) in NEIGHBORS8 {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 {
                continue;
            }
            if let Some(&j) = index.get(&(ny as usize, nx as usize)) {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    parent[j] = i;
                    queue.push_back(j);
                }
            }
        }
    }
    (last, parent)
}

/// Longest shortest path through a pixel set (double breadth-first search),
/// as an ordered list of `(y, x)` pixels.
pub fn longest_path(pixels: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if pixels.is_empty() {
        return Vec::new();
    }
    let index: std::collections::HashMap<(usize, usize), usize> =
        pixels.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let (a, _) = bfs_farthest(pixels, &index, 0);
    let (b, parent) = bfs_farthest(pixels, &index, a);
    let mut path = vec![pixels[b]];
    let mut cur = b;
    while cur != a {
        cur = parent[cur];
        path.push(pixels[cur]);
    }
    path
}

/// Pixels whose centers `(x + 0.5, y + 0.5) / scale` fall inside the polygon.
pub fn fill_polygon(ring: &[Point], h: usize, w: usize, scale: f64) -> Mask {
    let (lo, hi) = crate::geometry::bounds(ring);
    let y0 = ((lo.y * scale).floor().max(0.0)) as usize;
    let y1 = ((hi.y * scale).ceil().max(0.0) as usize).min(h);
    let x0 = ((lo.x * scale).floor().max(0.0)) as usize;
    let x1 = ((hi.x * scale).ceil().max(0.0) as usize).min(w);
    let mut m = Mask::new(h, w);
    for y in y0..y1 {
        for x in x0..x1 {
            let p = Point::new((x as f64 + 0.5) / scale, (y as f64 + 0.5) / scale);
            if point_in_polygon(p, ring) {
                m.set(y, x, true);
            }
        }
    }
    m
}
