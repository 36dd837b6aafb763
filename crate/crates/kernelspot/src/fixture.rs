//! Seeded synthetic scenes and idealized prediction maps for tests,
//! benchmarks and the fixture subcommand. Idealized maps are built so
//! post-processing provably recovers the ground-truth instances: the
//! smoothed region binarizes back to g_tex exactly and per-instance
//! embeddings are constant vectors separated by more than the distance
//! gate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Polygon, TextAnnotation};
use crate::labelgen::{InstanceLabelMap, LabelSet};
use crate::tensor::TensorMap;

const WORD_SYMBOLS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..=8);
    (0..len)
        .map(|_| WORD_SYMBOLS[rng.random_range(0..WORD_SYMBOLS.len())] as char)
        .collect()
}

/// `n` non-overlapping text shapes (axis-aligned rectangles, convex
/// quadrilaterals and curved strips, cycling) with random transcriptions.
/// Placement uses a shuffled grid, so shapes never collide and the same
/// seed always yields the same scene.
pub fn random_scene(h: usize, w: usize, n: usize, seed: u64) -> Result<Vec<TextAnnotation>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let rows = (n as f64).sqrt().ceil() as usize;
    let cols = n.div_ceil(rows);
    let (cell_h, cell_w) = (h / rows, w / cols);
    const MARGIN: usize = 12;
    // Room for the minimum shape (24 x 48) plus the placement margin.
    if cell_h < 24 + 2 * MARGIN || cell_w < 48 + 2 * MARGIN {
        return Err(Error::invalid(format!(
            "canvas {h}x{w} is too small for {n} instances"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    cells.shuffle(&mut rng);

    let mut out = Vec::new();
    for (i, &(cr, cc)) in cells.iter().take(n).enumerate() {
        let max_h = (cell_h - 2 * MARGIN).min(96);
        let max_w = (cell_w - 2 * MARGIN).min(192);
        let sh = rng.random_range(24..=max_h) as f64;
        let sw = rng.random_range(48..=max_w) as f64;
        let y0 = (cr * cell_h + MARGIN) as f64
            + rng.random_range(0.0..(cell_h - 2 * MARGIN) as f64 - sh + 1.0);
        let x0 = (cc * cell_w + MARGIN) as f64
            + rng.random_range(0.0..(cell_w - 2 * MARGIN) as f64 - sw + 1.0);
        let polygon = match i % 3 {
            0 => Polygon::new(vec![
                (x0, y0),
                (x0 + sw, y0),
                (x0 + sw, y0 + sh),
                (x0, y0 + sh),
            ])?,
            1 => {
                // Convex quad: pull each rectangle corner toward the
                // center by a random fraction.
                let (cx, cy) = (x0 + sw / 2.0, y0 + sh / 2.0);
                let corners = [
                    (x0, y0),
                    (x0 + sw, y0),
                    (x0 + sw, y0 + sh),
                    (x0, y0 + sh),
                ];
                Polygon::new(
                    corners
                        .iter()
                        .map(|&(x, y)| {
                            let t = rng.random_range(0.0..0.25);
                            (x + t * (cx - x), y + t * (cy - y))
                        })
                        .collect(),
                )?
            }
            _ => {
                // Curved strip: a constant-thickness band whose center
                // line follows a sine arc.
                let segs = 6;
                let amp = (sh * 0.2).min(8.0);
                let phase = rng.random_range(0.0..std::f64::consts::PI);
                let thick = sh - 2.0 * amp;
                let mut top = Vec::new();
                let mut bot = Vec::new();
                for j in 0..=segs {
                    let t = j as f64 / segs as f64;
                    let x = x0 + t * sw;
                    let yc = y0 + amp + amp * (phase + t * 2.2).sin();
                    top.push((x, yc));
                    bot.push((x, yc + thick));
                }
                bot.reverse();
                top.extend(bot);
                Polygon::new(top)?
            }
        };
        out.push(TextAnnotation::new(polygon, random_word(&mut rng)));
    }
    Ok(out)
}

/// The same annotations with every coordinate multiplied by `factor`
/// (e.g. 0.25 to move image-resolution boxes onto the stride-4 grid).
pub fn scale_annotations(anns: &[TextAnnotation], factor: f64) -> Result<Vec<TextAnnotation>> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("scale factor must be positive, got {factor}")));
    }
    anns.iter()
        .map(|a| {
            let pts = a
                .polygon
                .vertices()
                .iter()
                .map(|&(x, y)| (x * factor, y * factor))
                .collect();
            Ok(TextAnnotation::new(Polygon::new(pts)?, a.transcription.clone()))
        })
        .collect()
}

/// Renders a scene into a plain `[3, H, W]` image: bright text shapes
/// on a dark background with faint seeded noise per channel.
pub fn render_image(anns: &[TextAnnotation], h: usize, w: usize, seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = TensorMap::zeros(&[3, h, w]);
    let mut inside = vec![false; h * w];
    for a in anns {
        for (flag, &v) in inside.iter_mut().zip(a.polygon.rasterize(h, w).data()) {
            *flag |= v > 0.5;
        }
    }
    for ch in 0..3 {
        for (i, &on) in inside.iter().enumerate() {
            let base = if on { 0.85 } else { 0.12 };
            img.data_mut()[ch * h * w + i] = base + rng.random_range(-0.04..0.04);
        }
    }
    img
}

/// 3x3 box blur with zero padding (mean over the full 9-cell window).
fn box_blur3(mask: &TensorMap) -> TensorMap {
    let (h, w) = (mask.dims()[1], mask.dims()[2]);
    let mut out = TensorMap::zeros(&[1, h, w]);
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0f32;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                        sum += mask.at3(0, nr as usize, nc as usize);
                    }
                }
            }
            out.set3(0, r, c, sum / 9.0);
        }
    }
    out
}

/// Per-instance constant embedding: instance `i` points along axis
/// `(i-1) % D` with magnitude `4 * (1 + (i-1)/D)`, so any two instances
/// are more than 4 apart (beyond the default distance gate of 3).
fn instance_embedding(id: u32, emb_dim: usize) -> (usize, f32) {
    let i = (id - 1) as usize;
    (i % emb_dim, 4.0 * (1.0 + (i / emb_dim) as f32))
}

/// Idealized prediction maps from ground-truth labels:
/// `p_tex = 0.5 * g_tex + 0.5 * blur3(g_tex)` (binarizes back to g_tex
/// exactly at threshold 0.5), `p_ker = g_ker`, and constant separated
/// per-instance embeddings.
pub fn idealized_predictions(
    labels: &LabelSet,
    emb_dim: usize,
) -> Result<(TensorMap, TensorMap, TensorMap)> {
    if emb_dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let (h, w) = (labels.g_tex.dims()[1], labels.g_tex.dims()[2]);
    let blur = box_blur3(&labels.g_tex);
    let p_tex = TensorMap::new(
        vec![1, h, w],
        labels
            .g_tex
            .data()
            .iter()
            .zip(blur.data())
            .map(|(g, b)| 0.5 * g + 0.5 * b)
            .collect(),
    )?;
    let mut emb = TensorMap::zeros(&[emb_dim, h, w]);
    for r in 0..h {
        for c in 0..w {
            let id = labels.instances.get(r, c);
            if id > 0 {
                let (axis, mag) = instance_embedding(id, emb_dim);
                emb.set3(axis, r, c, mag);
            }
        }
    }
    Ok((p_tex, labels.g_ker.clone(), emb))
}

/// Two boxes two pixels apart with the gap bridged by a weak text
/// region: the embedding gate separates them while a region-only flood
/// fill sees one component. Maps are stride-4 sized.
pub struct AdjacentPair {
    pub p_tex: TensorMap,
    pub p_ker: TensorMap,
    pub emb: TensorMap,
}

pub fn adjacent_pair_fixture() -> AdjacentPair {
    let (h, w) = (24, 48);
    let mut p_tex = TensorMap::zeros(&[1, h, w]);
    let mut p_ker = TensorMap::zeros(&[1, h, w]);
    let mut emb = TensorMap::zeros(&[4, h, w]);
    // Box A columns 4..20, box B columns 22..38, gap columns 20..22.
    for r in 6..18 {
        for c in 4..20 {
            p_tex.set3(0, r, c, 1.0);
            emb.set3(0, r, c, 4.0);
        }
        for c in 22..38 {
            p_tex.set3(0, r, c, 1.0);
            emb.set3(1, r, c, 4.0);
        }
        for c in 20..22 {
            // Bridge pixels: region-positive but far (distance 4) from
            // both kernel means in embedding space.
            p_tex.set3(0, r, c, 0.6);
        }
    }
    for r in 8..16 {
        for c in 6..18 {
            p_ker.set3(0, r, c, 1.0);
        }
        for c in 24..36 {
            p_ker.set3(0, r, c, 1.0);
        }
    }
    AdjacentPair { p_tex, p_ker, emb }
}

/// A random 32x32 post-processing input: 2 to 4 overlapping boxes with
/// kernels one pixel inset, embeddings biased per box on top of noise so
/// the distance gate has real work to do.
pub fn random_pa_fixture(seed: u64) -> (TensorMap, TensorMap, TensorMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (32, 32);
    let mut p_tex = TensorMap::zeros(&[1, h, w]);
    let mut p_ker = TensorMap::zeros(&[1, h, w]);
    let mut emb = TensorMap::new(
        vec![4, h, w],
        (0..4 * h * w).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )
    .expect("fixture embedding shape");
    let n_boxes = rng.random_range(2..=4);
    for i in 0..n_boxes {
        let r0 = rng.random_range(0..h - 8);
        let c0 = rng.random_range(0..w - 10);
        let rh = rng.random_range(4..=8);
        let cw = rng.random_range(6..=10);
        for r in r0..r0 + rh {
            for c in c0..c0 + cw {
                p_tex.set3(0, r, c, 1.0);
                emb.set3(i % 4, r, c, emb.at3(i % 4, r, c) + rng.random_range(0.0..4.0));
            }
        }
        for r in r0 + 1..r0 + rh - 1 {
            for c in c0 + 1..c0 + cw - 1 {
                p_ker.set3(0, r, c, 1.0);
            }
        }
    }
    (p_tex, p_ker, emb)
}

/// Reference post-processing, sharing no code with the production path:
/// thresholds, its own connected components, frozen kernel means, then
/// literal synchronous full-image passes until a fixed point. Each pass
/// assigns every unassigned region pixel to the smallest neighboring
/// instance id whose kernel mean is strictly within the distance gate.
/// Instances below the area or confidence floors are erased and the ids
/// re-compacted, mirroring the production filters.
pub fn pa_fixpoint_reference(
    p_tex: &TensorMap,
    p_ker: &TensorMap,
    emb: &TensorMap,
    cfg: &crate::pa::PAConfig,
) -> Result<InstanceLabelMap> {
    cfg.validate()?;
    let dims = p_tex.dims();
    if dims.len() != 3 || dims[0] != 1 || p_ker.dims() != dims {
        return Err(Error::shape("reference expects matching [1, H, W] score maps"));
    }
    let (h, w) = (dims[1], dims[2]);
    if emb.dims().len() != 3 || emb.dims()[1] != h || emb.dims()[2] != w {
        return Err(Error::shape("embedding map does not cover the score maps"));
    }
    let d = emb.dims()[0];
    let region: Vec<bool> = p_tex.data().iter().map(|&v| v >= cfg.tex_threshold).collect();
    let kmask: Vec<bool> = p_ker
        .data()
        .iter()
        .zip(&region)
        .map(|(&k, &r)| k >= cfg.ker_threshold && r)
        .collect();

    // Kernel components: BFS in raster order, 4-connected, then small
    // components dropped and ids re-compacted in order.
    let mut kernels = InstanceLabelMap::new(h, w);
    let mut sizes: Vec<usize> = vec![0];
    for start in 0..h * w {
        if !kmask[start] || kernels.labels()[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        kernels.set(start / w, start % w, id);
        let mut queue = std::collections::VecDeque::from([start]);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            for (nr, nc) in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
                if nr < h && nc < w && kmask[nr * w + nc] && kernels.labels()[nr * w + nc] == 0 {
                    kernels.set(nr, nc, id);
                    queue.push_back(nr * w + nc);
                }
            }
        }
        sizes.push(size);
    }
    let mut remap = vec![0u32; sizes.len()];
    let mut next = 0u32;
    for (old, &size) in sizes.iter().enumerate().skip(1) {
        if size >= cfg.min_kernel_area {
            next += 1;
            remap[old] = next;
        }
    }
    let mut assign = InstanceLabelMap::new(h, w);
    for i in 0..h * w {
        assign.set(i / w, i % w, remap[kernels.labels()[i] as usize]);
    }
    let n = next as usize;

    let mut means = vec![vec![0f64; d]; n + 1];
    let mut counts = vec![0usize; n + 1];
    for i in 0..h * w {
        let id = assign.labels()[i] as usize;
        if id > 0 {
            counts[id] += 1;
            for ch in 0..d {
                means[id][ch] += emb.at3(ch, i / w, i % w) as f64;
            }
        }
    }
    for id in 1..=n {
        for m in &mut means[id] {
            *m /= counts[id] as f64;
        }
    }

    loop {
        let snapshot = assign.clone();
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if !region[r * w + c] || snapshot.get(r, c) != 0 {
                    continue;
                }
                let mut winner = u32::MAX;
                for (nr, nc) in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
                    if nr >= h || nc >= w {
                        continue;
                    }
                    let id = snapshot.get(nr, nc);
                    if id == 0 || id >= winner {
                        continue;
                    }
                    let d2: f64 = means[id as usize]
                        .iter()
                        .enumerate()
                        .map(|(ch, m)| {
                            let diff = emb.at3(ch, r, c) as f64 - m;
                            diff * diff
                        })
                        .sum();
                    if d2.sqrt() < cfg.dist_threshold {
                        winner = id;
                    }
                }
                if winner != u32::MAX {
                    assign.set(r, c, winner);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Survivor filters, mirroring the production thresholds.
    let mut areas = vec![0usize; n + 1];
    let mut conf = vec![0f64; n + 1];
    for i in 0..h * w {
        let id = assign.labels()[i] as usize;
        if id > 0 {
            areas[id] += 1;
            conf[id] += p_tex.data()[i] as f64;
        }
    }
    let mut final_remap = vec![0u32; n + 1];
    let mut kept = 0u32;
    for id in 1..=n {
        if areas[id] >= cfg.min_instance_area && conf[id] / areas[id] as f64 >= cfg.min_confidence {
            kept += 1;
            final_remap[id] = kept;
        }
    }
    let mut out = InstanceLabelMap::new(h, w);
    for i in 0..h * w {
        out.set(i / w, i % w, final_remap[assign.labels()[i] as usize]);
    }
    Ok(out)
}
