//! Pixel aggregation: binarize the dense maps, label kernel components,
//! then grow each kernel over the text region, claiming neighbors whose
//! embedding sits within a distance threshold of the kernel's frozen
//! mean. Single-FIFO breadth-first order seeded by (kernel id, raster
//! index) makes conflicts deterministic: of two kernels reaching a pixel
//! in the same ring, the smaller id wins.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::geometry::Polygon;
use crate::labelgen::InstanceLabelMap;
use crate::tensor::TensorMap;

#[derive(Clone, Debug)]
pub struct PAConfig {
    pub tex_threshold: f32,
    pub ker_threshold: f32,
    /// Embedding distance gate for claiming a text pixel.
    pub dist_threshold: f64,
    pub min_kernel_area: usize,
    pub min_instance_area: usize,
    pub min_confidence: f64,
}

impl Default for PAConfig {
    fn default() -> Self {
        Self {
            tex_threshold: 0.5,
            ker_threshold: 0.5,
            dist_threshold: 3.0,
            min_kernel_area: 5,
            min_instance_area: 10,
            min_confidence: 0.5,
        }
    }
}

impl PAConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tex_threshold", self.tex_threshold),
            ("ker_threshold", self.ker_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!(
                    "{name} must lie strictly inside (0,1), got {v}"
                )));
            }
        }
        if !(self.dist_threshold > 0.0) {
            return Err(Error::invalid("dist_threshold must be positive"));
        }
        Ok(())
    }
}

/// One detected text region on the stride-4 grid.
#[derive(Clone, Debug)]
pub struct TextInstance {
    pub id: u32,
    /// Member pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
    /// Outer boundary in stride-4 coordinates.
    pub contour: Polygon,
    /// The same boundary scaled back to image coordinates.
    pub contour_scaled: Polygon,
    /// Mean text probability over the member pixels.
    pub confidence: f64,
}

pub struct PaResult {
    pub instances: Vec<TextInstance>,
    /// Final instance ids per pixel, 0 for background.
    pub label_map: InstanceLabelMap,
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// 4-connected labeling in raster discovery order (ids from 1);
/// components below `min_area` are dropped and ids re-compacted.
pub fn connected_components(mask: &TensorMap, min_area: usize) -> Result<InstanceLabelMap> {
    if mask.rank() != 3 || mask.dims()[0] != 1 {
        return Err(Error::shape("connected_components expects [1,H,W]"));
    }
    let (h, w) = (mask.dims()[1], mask.dims()[2]);
    let mut labels = InstanceLabelMap::new(h, w);
    let mut areas: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if mask.at3(0, r0, c0) <= 0.5 || labels.get(r0, c0) != 0 {
                continue;
            }
            let id = areas.len() as u32 + 1;
            let mut area = 0usize;
            labels.set(r0, c0, id);
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                area += 1;
                for (dr, dc) in NEIGHBORS {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.at3(0, nr, nc) > 0.5 && labels.get(nr, nc) == 0 {
                        labels.set(nr, nc, id);
                        queue.push_back((nr, nc));
                    }
                }
            }
            areas.push(area);
        }
    }
    // Re-compact: surviving components keep their discovery order.
    let mut remap = vec![0u32; areas.len() + 1];
    let mut next = 0u32;
    for (i, &a) in areas.iter().enumerate() {
        if a >= min_area {
            next += 1;
            remap[i + 1] = next;
        }
    }
    if next as usize != areas.len() {
        for r in 0..h {
            for c in 0..w {
                let v = labels.get(r, c);
                labels.set(r, c, remap[v as usize]);
            }
        }
    }
    Ok(labels)
}

/// Full post-processing: kernel labeling, gated breadth-first growth,
/// area/confidence filtering, contour extraction.
pub fn aggregate(
    p_tex: &TensorMap,
    p_ker: &TensorMap,
    emb: &TensorMap,
    cfg: &PAConfig,
) -> Result<PaResult> {
    cfg.validate()?;
    if p_tex.rank() != 3 || p_tex.dims()[0] != 1 || p_tex.dims() != p_ker.dims() {
        return Err(Error::shape("aggregate expects p_tex/p_ker as [1,H,W]"));
    }
    let (h, w) = (p_tex.dims()[1], p_tex.dims()[2]);
    if emb.rank() != 3 || emb.dims()[1] != h || emb.dims()[2] != w {
        return Err(Error::shape(format!(
            "embedding dims {:?} do not match {h}x{w} maps",
            emb.dims()
        )));
    }
    let d = emb.dims()[0];
    let region: Vec<bool> = (0..h * w)
        .map(|i| p_tex.data()[i] >= cfg.tex_threshold)
        .collect();
    // A kernel pixel outside the text region is inconsistent; clamp the
    // kernel mask into the region before labeling.
    let kernel_mask = TensorMap::new(
        vec![1, h, w],
        (0..h * w)
            .map(|i| f32::from(p_ker.data()[i] >= cfg.ker_threshold && region[i]))
            .collect(),
    )
    .unwrap();
    let kernels = connected_components(&kernel_mask, cfg.min_kernel_area)?;
    let n = kernels.max_label() as usize;
    if n == 0 {
        return Ok(PaResult {
            instances: Vec::new(),
            label_map: InstanceLabelMap::new(h, w),
        });
    }

    // Frozen kernel mean embeddings.
    let mut means = vec![vec![0f64; d]; n + 1];
    let mut counts = vec![0usize; n + 1];
    for r in 0..h {
        for c in 0..w {
            let id = kernels.get(r, c) as usize;
            if id > 0 {
                counts[id] += 1;
                for ch in 0..d {
                    means[id][ch] += emb.at3(ch, r, c) as f64;
                }
            }
        }
    }
    for id in 1..=n {
        for m in &mut means[id] {
            *m /= counts[id] as f64;
        }
    }

    // Multi-source growth; seeds enqueued grouped by kernel id so each
    // ring stays grouped and same-ring conflicts go to the smaller id.
    let mut assign = InstanceLabelMap::new(h, w);
    let mut queue = VecDeque::new();
    for id in 1..=n as u32 {
        for (r, c) in kernels.pixels_of(id) {
            assign.set(r, c, id);
            queue.push_back((r, c));
        }
    }
    let d2 = cfg.dist_threshold * cfg.dist_threshold;
    while let Some((r, c)) = queue.pop_front() {
        let id = assign.get(r, c);
        let mean = &means[id as usize];
        for (dr, dc) in NEIGHBORS {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if !region[nr * w + nc] || assign.get(nr, nc) != 0 {
                continue;
            }
            let dist2: f64 = (0..d)
                .map(|ch| {
                    let diff = emb.at3(ch, nr, nc) as f64 - mean[ch];
                    diff * diff
                })
                .sum();
            if dist2 < d2 {
                assign.set(nr, nc, id);
                queue.push_back((nr, nc));
            }
        }
    }

    // Collect, filter, re-compact.
    let mut pixel_sets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
    for r in 0..h {
        for c in 0..w {
            let id = assign.get(r, c);
            if id > 0 {
                pixel_sets[id as usize].push((r, c));
            }
        }
    }
    let mut instances = Vec::new();
    let mut label_map = InstanceLabelMap::new(h, w);
    for set in pixel_sets.into_iter().skip(1) {
        if set.len() < cfg.min_instance_area {
            continue;
        }
        let confidence = set
            .iter()
            .map(|&(r, c)| p_tex.at3(0, r, c) as f64)
            .sum::<f64>()
            / set.len() as f64;
        if confidence < cfg.min_confidence {
            continue;
        }
        let id = instances.len() as u32 + 1;
        for &(r, c) in &set {
            label_map.set(r, c, id);
        }
        let contour = extract_contour(&set, 1.0)?;
        let contour_scaled = extract_contour(&set, 4.0)?;
        instances.push(TextInstance {
            id,
            pixels: set,
            contour,
            contour_scaled,
            confidence,
        });
    }
    Ok(PaResult {
        instances,
        label_map,
    })
}

/// Outer boundary of a pixel set as a polygon over cell corners, scaled
/// by `scale`. Each pixel contributes its four directed cell edges;
/// edges interior to the set cancel, and the survivors are walked into
/// closed loops. At a checkerboard pinch the walk turns across the
/// diagonal so the outer boundary stays one loop. The largest loop by
/// area is returned after collinear vertices are merged.
pub fn extract_contour(pixels: &[(usize, usize)], scale: f64) -> Result<Polygon> {
    if pixels.is_empty() {
        return Err(Error::invalid("cannot trace an empty pixel set"));
    }
    type Pt = (i64, i64);
    let mut edges: HashMap<(Pt, Pt), ()> = HashMap::new();
    let mut add = |from: Pt, to: Pt| {
        if edges.remove(&(to, from)).is_none() {
            edges.insert((from, to), ());
        }
    };
    for &(r, c) in pixels {
        let (x, y) = (c as i64, r as i64);
        add((x, y), (x + 1, y));
        add((x + 1, y), (x + 1, y + 1));
        add((x + 1, y + 1), (x, y + 1));
        add((x, y + 1), (x, y));
    }
    let mut adj: BTreeMap<Pt, Vec<Pt>> = BTreeMap::new();
    for &(from, to) in edges.keys() {
        adj.entry(from).or_default().push(to);
    }
    for outs in adj.values_mut() {
        outs.sort_unstable();
    }

    let mut best: Option<(f64, Vec<Pt>)> = None;
    while let Some((&start, _)) = adj.iter().find(|(_, outs)| !outs.is_empty()) {
        let mut path = vec![start];
        let mut cur = start;
        let mut dir: Option<Pt> = None;
        loop {
            let outs = adj.get_mut(&cur).expect("walk left the boundary graph");
            let pick = if outs.len() == 1 {
                0
            } else {
                // Pinch vertex: take the leftmost turn (cross-product
                // minimum in screen coordinates) to cross the diagonal.
                let d = dir.expect("first vertex of a loop cannot branch");
                let mut best_i = 0;
                let mut best_cross = i64::MAX;
                for (i, &to) in outs.iter().enumerate() {
                    let e = (to.0 - cur.0, to.1 - cur.1);
                    let cross = d.0 * e.1 - d.1 * e.0;
                    if cross < best_cross {
                        best_cross = cross;
                        best_i = i;
                    }
                }
                best_i
            };
            let next = outs.remove(pick);
            dir = Some((next.0 - cur.0, next.1 - cur.1));
            cur = next;
            if cur == start {
                break;
            }
            path.push(cur);
        }
        // Merge collinear runs (all edges are axis-aligned, so collinear
        // means same direction as the previous edge).
        let m = path.len();
        let mut kept: Vec<Pt> = Vec::new();
        for i in 0..m {
            let prev = path[(i + m - 1) % m];
            let next = path[(i + 1) % m];
            let a = (path[i].0 - prev.0, path[i].1 - prev.1);
            let b = (next.0 - path[i].0, next.1 - path[i].1);
            if a.0 * b.1 - a.1 * b.0 != 0 {
                kept.push(path[i]);
            }
        }
        let area = {
            let mut s = 0f64;
            for i in 0..kept.len() {
                let (x1, y1) = kept[i];
                let (x2, y2) = kept[(i + 1) % kept.len()];
                s += (x1 * y2 - x2 * y1) as f64;
            }
            s.abs() / 2.0
        };
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, kept));
        }
    }
    let (_, verts) = best.expect("nonempty pixel set always yields a loop");
    Polygon::new(
        verts
            .into_iter()
            .map(|(x, y)| (x as f64 * scale, y as f64 * scale))
            .collect(),
    )
}
