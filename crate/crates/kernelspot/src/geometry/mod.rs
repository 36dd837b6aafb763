//! Polygon geometry: simple polygons, inward offsetting (shrink), pixel-center
//! rasterization and raster IoU.
//!
//! Coordinates are in pixel units, x right, y down. Pixel `(r, c)` owns the
//! unit cell `[c, c+1) x [r, r+1)` and is sampled at its center
//! `(c + 0.5, r + 0.5)`.

mod annot;

pub use annot::{
    format_annotation_line, parse_annotation_line, parse_annotations, read_annotations,
    write_annotations, TextAnnotation,
};

use crate::error::{Error, Result};
use crate::tensor::TensorMap;

pub type Point = (f64, f64);

/// Beyond this miter ratio a shrink join falls back to a bevel.
const MITER_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// A simple polygon from at least 3 vertices. Consecutive duplicates and
    /// (near-)zero total area are rejected; either would break offsetting.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::invalid(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::invalid("polygon vertices must be finite"));
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            if a == b {
                return Err(Error::invalid(format!(
                    "consecutive duplicate vertex at index {i}"
                )));
            }
        }
        if signed_area(&vertices).abs() < 1e-12 {
            return Err(Error::invalid("polygon area is zero"));
        }
        Ok(Polygon { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| dist(self.vertices[i], self.vertices[(i + 1) % n]))
            .sum()
    }

    /// Inward offset by `margin`: every edge moves toward the interior by the
    /// same distance. Joins are mitered up to ratio [`MITER_LIMIT`], beveled
    /// beyond it. A self-intersecting offset ring is split into simple loops
    /// and the largest valid loop survives; `None` means the polygon vanished.
    pub fn shrink(&self, margin: f64) -> Result<Option<Polygon>> {
        if !margin.is_finite() || margin < 0.0 {
            return Err(Error::invalid(format!("shrink margin must be >= 0, got {margin}")));
        }
        if margin == 0.0 {
            return Ok(Some(self.clone()));
        }

        let ring = self.offset_ring(margin);
        let ring = dedupe_ring(&ring);
        if ring.len() < 3 {
            return Ok(None);
        }
        let split = insert_self_intersections(&ring);
        let loops = split_into_simple_loops(&split);

        // A genuine offset vertex sits inside the source polygon at depth
        // >= margin; phantom loops from over-shrinking fail this even when
        // their orientation looks plausible.
        let depth_floor = margin - (1e-6f64).max(margin * 1e-6);
        let mut best: Option<Vec<Point>> = None;
        let mut best_area = 0.0;
        for lp in loops {
            let lp = dedupe_ring(&lp);
            if lp.len() < 3 {
                continue;
            }
            let area = signed_area(&lp).abs();
            if area < 1e-9 {
                continue;
            }
            let valid = lp.iter().all(|&p| {
                point_in_polygon(p, &self.vertices) && self.boundary_distance(p) >= depth_floor
            });
            if valid && area > best_area {
                best_area = area;
                best = Some(lp);
            }
        }
        match best {
            Some(v) => Ok(Polygon::new(v).ok()),
            None => Ok(None),
        }
    }

    /// Binary mask of pixels whose centers fall inside the polygon
    /// (even-odd rule). Panics if the canvas is empty.
    pub fn rasterize(&self, h: usize, w: usize) -> TensorMap {
        assert!(h > 0 && w > 0, "raster canvas must be non-empty");
        let mut out = TensorMap::zeros(&[1, h, w]);
        let n = self.vertices.len();
        let mut xs: Vec<f64> = Vec::with_capacity(8);
        for r in 0..h {
            let yc = r as f64 + 0.5;
            xs.clear();
            for i in 0..n {
                let (x1, y1) = self.vertices[i];
                let (x2, y2) = self.vertices[(i + 1) % n];
                // Half-open span in y makes shared vertices count once.
                if (y1 <= yc) != (y2 <= yc) {
                    xs.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
                }
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut k = 0;
            while k + 1 < xs.len() {
                // Fill centers in [xs[k], xs[k+1]): smallest c with c+0.5 >= a.
                let c0 = ((xs[k] - 0.5).ceil().max(0.0)) as usize;
                let c1f = (xs[k + 1] - 0.5).ceil();
                let c1 = if c1f < 0.0 { 0 } else { (c1f as usize).min(w) };
                for c in c0..c1 {
                    out.set3(0, r, c, 1.0);
                }
                k += 2;
            }
        }
        out
    }

    fn boundary_distance(&self, p: Point) -> f64 {
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let d = point_segment_distance(p, self.vertices[i], self.vertices[(i + 1) % n]);
            if d < best {
                best = d;
            }
        }
        best
    }

    /// Raw mitered/beveled offset ring, before any cleanup.
    fn offset_ring(&self, margin: f64) -> Vec<Point> {
        let v = &self.vertices;
        let n = v.len();
        let inward = if self.signed_area() > 0.0 { 1.0 } else { -1.0 };
        let mut dirs = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = (dx * dx + dy * dy).sqrt();
            let d = (dx / len, dy / len);
            dirs.push(d);
            // Interior lies left of each edge when the shoelace sum is
            // positive; flip for the opposite winding.
            normals.push((-d.1 * inward, d.0 * inward));
        }
        let mut ring = Vec::with_capacity(n + 4);
        for i in 0..n {
            let ep = (i + n - 1) % n;
            let p = v[i];
            let (np, nn) = (normals[ep], normals[i]);
            let (dp, dn) = (dirs[ep], dirs[i]);
            let bevel_a = (p.0 + margin * np.0, p.1 + margin * np.1);
            let bevel_b = (p.0 + margin * nn.0, p.1 + margin * nn.1);
            let cross = dp.0 * dn.1 - dp.1 * dn.0;
            if cross.abs() < 1e-12 {
                // Collinear continuation collapses to one point; a spike
                // (reversal) keeps both bevel points.
                if dist(bevel_a, bevel_b) < 1e-9 {
                    ring.push(bevel_a);
                } else {
                    ring.push(bevel_a);
                    ring.push(bevel_b);
                }
                continue;
            }
            let a0 = v[ep];
            let ax = a0.0 + margin * np.0;
            let ay = a0.1 + margin * np.1;
            let t = ((bevel_b.0 - ax) * dn.1 - (bevel_b.1 - ay) * dn.0) / cross;
            let miter = (ax + t * dp.0, ay + t * dp.1);
            if dist(miter, p) <= MITER_LIMIT * margin {
                ring.push(miter);
            } else {
                ring.push(bevel_a);
                ring.push(bevel_b);
            }
        }
        ring
    }
}

/// Raster IoU of two polygons on a shared canvas. An empty union yields 0.
pub fn polygon_iou(a: &Polygon, b: &Polygon, h: usize, w: usize) -> f64 {
    let ra = a.rasterize(h, w);
    let rb = b.rasterize(h, w);
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in ra.data().iter().zip(rb.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        s += a.0 * b.1 - b.0 * a.1;
    }
    s / 2.0
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0);
    dist(p, (a.0 + t * abx, a.1 + t * aby))
}

/// Even-odd point-in-polygon with a half-open rule on y.
pub(crate) fn point_in_polygon(p: Point, v: &[Point]) -> bool {
    let n = v.len();
    let mut inside = false;
    for i in 0..n {
        let (x1, y1) = v[i];
        let (x2, y2) = v[(i + 1) % n];
        if (y1 <= p.1) != (y2 <= p.1) {
            let xint = x1 + (p.1 - y1) * (x2 - x1) / (y2 - y1);
            if xint > p.0 {
                inside = !inside;
            }
        }
    }
    inside
}

fn dedupe_ring(ring: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(ring.len());
    for &p in ring {
        if out.last().map_or(true, |&q| dist(p, q) > 1e-9) {
            out.push(p);
        }
    }
    while out.len() > 1 && dist(out[0], *out.last().unwrap()) <= 1e-9 {
        out.pop();
    }
    out
}

/// Splits ring segments at pairwise proper intersections so that crossings
/// become shared (quantized) points the loop walk below can key on.
fn insert_self_intersections(ring: &[Point]) -> Vec<Point> {
    let n = ring.len();
    let mut cuts: Vec<Vec<(f64, Point)>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if let Some((t, u, p)) = segment_intersection(a, b, c, d) {
                let interior = |x: f64| x > 1e-9 && x < 1.0 - 1e-9;
                if interior(t) {
                    cuts[i].push((t, p));
                }
                if interior(u) {
                    cuts[j].push((u, p));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        out.push(ring[i]);
        cuts[i].sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for &(_, p) in cuts[i].iter() {
            out.push(p);
        }
    }
    out
}

fn segment_intersection(a: Point, b: Point, c: Point, d: Point) -> Option<(f64, f64, Point)> {
    let r = (b.0 - a.0, b.1 - a.1);
    let s = (d.0 - c.0, d.1 - c.1);
    let denom = r.0 * s.1 - r.1 * s.0;
    if denom.abs() < 1e-12 {
        return None;
    }
    let qp = (c.0 - a.0, c.1 - a.1);
    let t = (qp.0 * s.1 - qp.1 * s.0) / denom;
    let u = (qp.0 * r.1 - qp.1 * r.0) / denom;
    if (-1e-9..=1.0 + 1e-9).contains(&t) && (-1e-9..=1.0 + 1e-9).contains(&u) {
        Some((t, u, (a.0 + t * r.0, a.1 + t * r.1)))
    } else {
        None
    }
}

/// Walks the (cyclic) ring and pops a simple loop every time a point repeats.
fn split_into_simple_loops(ring: &[Point]) -> Vec<Vec<Point>> {
    use std::collections::HashMap;
    const Q: f64 = 1e-6;
    let key = |p: Point| ((p.0 / Q).round() as i64, (p.1 / Q).round() as i64);

    let mut loops = Vec::new();
    let mut path: Vec<Point> = Vec::new();
    let mut pos: HashMap<(i64, i64), usize> = HashMap::new();
    for &p in ring {
        let k = key(p);
        if let Some(&i) = pos.get(&k) {
            for q in &path[i + 1..] {
                pos.remove(&key(*q));
            }
            loops.push(path[i..].to_vec());
            path.truncate(i + 1);
        } else {
            pos.insert(k, path.len());
            path.push(p);
        }
    }
    if path.len() >= 3 {
        loops.push(path);
    }
    loops
}
