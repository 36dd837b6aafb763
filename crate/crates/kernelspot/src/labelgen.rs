//! Ground-truth label generation: each annotation becomes a full-extent text
//! region plus a shrunk central kernel, painted into id maps at map
//! resolution.
//!
//! The kernel margin scales with shape size: `margin = area * (1 - rate^2) /
//! perimeter`, so a rate of 1 keeps the kernel equal to the region and
//! smaller rates carve away a perimeter-proportional band.

use crate::error::{Error, Result};
use crate::geometry::{Polygon, TextAnnotation};
use crate::tensor::TensorMap;

/// Dense per-pixel instance ids; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabelMap {
    h: usize,
    w: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0, "label map must be non-empty");
        InstanceLabelMap {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u32) {
        self.labels[r * self.w + c] = v;
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixels carrying `label`, in raster order.
    pub fn pixels_of(&self, label: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) == label {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Float-encoded ids as `[1, H, W]`, exact for ids below 2^24.
    pub fn to_tensor(&self) -> TensorMap {
        let data = self.labels.iter().map(|&v| v as f32).collect();
        TensorMap::new(vec![1, self.h, self.w], data).expect("dims match buffer")
    }

    pub fn from_tensor(t: &TensorMap) -> Result<Self> {
        let (h, w) = match t.dims() {
            [1, h, w] => (*h, *w),
            d => {
                return Err(Error::shape(format!(
                    "instance map expects [1, H, W], got {d:?}"
                )))
            }
        };
        let mut labels = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v > 16_777_216.0 {
                return Err(Error::parse(format!("non-id value {v} in instance map")));
            }
            labels.push(v as u32);
        }
        Ok(InstanceLabelMap { h, w, labels })
    }

    /// 1.0 where the id is nonzero.
    pub fn binarize(&self) -> TensorMap {
        let data = self
            .labels
            .iter()
            .map(|&v| if v != 0 { 1.0 } else { 0.0 })
            .collect();
        TensorMap::new(vec![1, self.h, self.w], data).expect("dims match buffer")
    }
}

/// Everything the detection losses consume for one image.
#[derive(Debug, Clone)]
pub struct LabelSet {
    /// Binary text-region mask `[1, H, W]`.
    pub g_tex: TensorMap,
    /// Binary kernel mask `[1, H, W]`; subset of `g_tex` pixel-wise.
    pub g_ker: TensorMap,
    /// Per-pixel instance ids over full text extents.
    pub instances: InstanceLabelMap,
    /// Per-pixel instance ids over kernels only.
    pub kernel_instances: InstanceLabelMap,
    /// Binary DO-NOT-CARE mask `[1, H, W]`.
    pub ignore_mask: TensorMap,
}

/// Inward offset distance that shrinks `p` to roughly `rate^2` of its area.
pub fn shrink_margin(p: &Polygon, rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(Error::invalid(format!(
            "shrink rate must be in [0, 1], got {rate}"
        )));
    }
    Ok(p.area() * (1.0 - rate * rate) / p.perimeter())
}

/// Rasterizes annotations into region/kernel id maps plus the ignore mask.
///
/// Non-ignore annotations get ids 1, 2, ... in list order; overlaps resolve
/// to the later annotation. Kernels that shrink to nothing fall back to the
/// unshrunk polygon, and kernel pixels are clipped to their own instance's
/// region pixels, which keeps `g_ker <= g_tex` structural.
pub fn generate_labels(
    annotations: &[TextAnnotation],
    h: usize,
    w: usize,
    shrink_rate: f64,
) -> Result<LabelSet> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("label canvas must be non-empty"));
    }
    let mut instances = InstanceLabelMap::new(h, w);
    let mut kernel_instances = InstanceLabelMap::new(h, w);
    let mut ignore_mask = TensorMap::zeros(&[1, h, w]);

    let mut next_id = 0u32;
    for ann in annotations {
        if ann.ignore() {
            let raster = ann.polygon.rasterize(h, w);
            for (dst, &src) in ignore_mask.data_mut().iter_mut().zip(raster.data()) {
                if src > 0.5 {
                    *dst = 1.0;
                }
            }
            continue;
        }
        next_id += 1;
        let raster = ann.polygon.rasterize(h, w);
        let margin = shrink_margin(&ann.polygon, shrink_rate)?;
        let kernel_poly = ann
            .polygon
            .shrink(margin)?
            .unwrap_or_else(|| ann.polygon.clone());
        let kraster = kernel_poly.rasterize(h, w);
        for r in 0..h {
            for c in 0..w {
                if raster.at3(0, r, c) > 0.5 {
                    instances.set(r, c, next_id);
                    if kraster.at3(0, r, c) > 0.5 {
                        kernel_instances.set(r, c, next_id);
                    } else if kernel_instances.get(r, c) != 0 {
                        // The region overwrite hides whatever kernel pixel a
                        // previous annotation painted here.
                        kernel_instances.set(r, c, 0);
                    }
                }
            }
        }
    }

    Ok(LabelSet {
        g_tex: instances.binarize(),
        g_ker: kernel_instances.binarize(),
        instances,
        kernel_instances,
        ignore_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_in_polygon;

    fn square_ann(x0: f64, y0: f64, side: f64, text: &str) -> TextAnnotation {
        let poly = Polygon::new(vec![
            (x0, y0),
            (x0 + side, y0),
            (x0 + side, y0 + side),
            (x0, y0 + side),
        ])
        .unwrap();
        TextAnnotation::new(poly, text)
    }

    #[test]
    fn margin_formula_on_reference_square() {
        let sq = square_ann(0.0, 0.0, 100.0, "x").polygon;
        assert!((shrink_margin(&sq, 0.7).unwrap() - 12.75).abs() < 1e-9);
        assert!((shrink_margin(&sq, 0.5).unwrap() - 18.75).abs() < 1e-9);
        assert_eq!(shrink_margin(&sq, 1.0).unwrap(), 0.0);
        assert!(shrink_margin(&sq, 1.2).is_err());
        assert!(shrink_margin(&sq, -0.1).is_err());
    }

    #[test]
    fn kernel_equals_region_at_rate_one() {
        let labels = generate_labels(&[square_ann(2.0, 2.0, 9.0, "t")], 16, 16, 1.0).unwrap();
        assert_eq!(labels.g_ker.data(), labels.g_tex.data());
        assert_eq!(
            labels.instances.labels(),
            labels.kernel_instances.labels()
        );
    }

    #[test]
    fn kernel_sits_strictly_inside_region() {
        let labels =
            generate_labels(&[square_ann(10.0, 10.0, 60.0, "word")], 80, 80, 0.7).unwrap();
        let ker: usize = labels.g_ker.data().iter().map(|&v| v as usize).sum();
        let tex: usize = labels.g_tex.data().iter().map(|&v| v as usize).sum();
        assert!(ker > 0 && ker < tex);
        for (k, t) in labels.g_ker.data().iter().zip(labels.g_tex.data()) {
            assert!(k <= t);
        }
        // margin = 3600 * 0.51 / 240 = 7.65, so the kernel raster is the
        // centered square [17.65, 62.35]^2.
        let inner = Polygon::new(vec![
            (17.65, 17.65),
            (62.35, 17.65),
            (62.35, 62.35),
            (17.65, 62.35),
        ])
        .unwrap();
        assert_eq!(labels.g_ker.data(), inner.rasterize(80, 80).data());
    }

    #[test]
    fn ids_follow_annotation_order_and_later_wins() {
        let anns = vec![
            square_ann(0.0, 0.0, 10.0, "first"),
            square_ann(6.0, 0.0, 10.0, "second"),
        ];
        let labels = generate_labels(&anns, 16, 20, 1.0).unwrap();
        assert_eq!(labels.instances.get(1, 1), 1);
        assert_eq!(labels.instances.get(1, 14), 2);
        // Overlap band belongs to the later annotation.
        assert_eq!(labels.instances.get(5, 7), 2);
        assert_eq!(labels.instances.max_label(), 2);
    }

    #[test]
    fn labels_match_point_in_polygon_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mut anns = Vec::new();
            for k in 0..3 {
                let x0 = rng.random_range(0.0..20.0);
                let y0 = rng.random_range(0.0..20.0);
                let s = rng.random_range(4.0..10.0);
                anns.push(square_ann(x0, y0, s, &format!("t{k}")));
            }
            let labels = generate_labels(&anns, 32, 32, 1.0).unwrap();
            for r in 0..32 {
                for c in 0..32 {
                    let center = (c as f64 + 0.5, r as f64 + 0.5);
                    let mut want = 0u32;
                    for (i, ann) in anns.iter().enumerate() {
                        if point_in_polygon(center, ann.polygon.vertices()) {
                            want = i as u32 + 1;
                        }
                    }
                    assert_eq!(labels.instances.get(r, c), want, "pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn ignore_annotations_fill_only_the_ignore_mask() {
        let anns = vec![
            square_ann(0.0, 0.0, 6.0, "keep"),
            square_ann(8.0, 8.0, 6.0, "###"),
        ];
        let labels = generate_labels(&anns, 16, 16, 0.7).unwrap();
        assert_eq!(labels.instances.get(10, 10), 0);
        assert_eq!(labels.ignore_mask.at3(0, 10, 10), 1.0);
        assert_eq!(labels.ignore_mask.at3(0, 2, 2), 0.0);
        assert_eq!(labels.instances.max_label(), 1);
    }

    #[test]
    fn empty_annotation_list_gives_blank_labels() {
        let labels = generate_labels(&[], 8, 8, 0.7).unwrap();
        assert!(labels.g_tex.data().iter().all(|&v| v == 0.0));
        assert!(labels.ignore_mask.data().iter().all(|&v| v == 0.0));
        assert_eq!(labels.instances.max_label(), 0);
    }

    #[test]
    fn instance_map_round_trips_through_tensor() {
        let mut m = InstanceLabelMap::new(3, 4);
        m.set(1, 2, 7);
        m.set(2, 3, 1);
        let t = m.to_tensor();
        assert_eq!(InstanceLabelMap::from_tensor(&t).unwrap(), m);
        let bad = TensorMap::new(vec![1, 1, 2], vec![0.5, 1.0]).unwrap();
        assert!(InstanceLabelMap::from_tensor(&bad).is_err());
        let neg = TensorMap::new(vec![1, 1, 2], vec![-1.0, 1.0]).unwrap();
        assert!(InstanceLabelMap::from_tensor(&neg).is_err());
    }
}
