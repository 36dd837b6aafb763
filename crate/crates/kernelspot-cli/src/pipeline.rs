//! Forward pipeline orchestration. One call runs backbone, feature
//! enhancement, detection head, pixel aggregation and (optionally)
//! recognition, and reports wall-clock time for the standard four-way
//! stage breakdown.

use std::path::Path;
use std::time::Instant;

use kernelspot::nn::{
    detection_head, detection_specs, enhance_and_fuse, toy_backbone, DetOutputs, LayerSpec,
    WeightStore,
};
use kernelspot::pa::{aggregate, PaResult};
use kernelspot::recognition::{decode, masked_roi, rec_specs, reduce_features, Charset};
use kernelspot::{Result, TensorMap};

use crate::config::RunConfig;
use crate::detfile::Detection;

#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimes {
    pub backbone_ms: f64,
    pub enhance_ms: f64,
    /// Detection head plus pixel aggregation.
    pub det_pa_ms: f64,
    /// Portion of `det_pa_ms` spent inside pixel aggregation.
    pub pa_only_ms: f64,
    pub rec_ms: f64,
}

impl StageTimes {
    pub fn total_ms(&self) -> f64 {
        self.backbone_ms + self.enhance_ms + self.det_pa_ms + self.rec_ms
    }
}

pub struct PipelineOutput {
    pub det: DetOutputs,
    pub pa: PaResult,
    pub detections: Vec<Detection>,
    pub times: StageTimes,
}

/// Every tensor the full spotting network needs.
pub fn full_weight_specs(cfg: &RunConfig, charset: &Charset) -> Vec<LayerSpec> {
    let mut specs = detection_specs(&cfg.model);
    specs.extend(rec_specs(&cfg.rec(), charset.size()));
    specs
}

/// Where the network parameters come from.
pub enum WeightSource {
    Seeded(u64),
    Zeroed,
    Dir(std::path::PathBuf),
}

pub fn build_weights(
    source: &WeightSource,
    cfg: &RunConfig,
    charset: &Charset,
    det_only: bool,
) -> Result<WeightStore> {
    let full = full_weight_specs(cfg, charset);
    match source {
        WeightSource::Seeded(seed) => Ok(WeightStore::seeded(&full, *seed)),
        WeightSource::Zeroed => Ok(WeightStore::zeroed(&full)),
        WeightSource::Dir(dir) => {
            let ws = WeightStore::load_dir(Path::new(dir))?;
            let has_rec = ws.names().any(|n| n.starts_with("rec."));
            if det_only && !has_rec {
                ws.validate(&detection_specs(&cfg.model))?;
            } else {
                ws.validate(&full)?;
            }
            Ok(ws)
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run_pipeline(
    image: &TensorMap,
    ws: &WeightStore,
    cfg: &RunConfig,
    charset: &Charset,
    det_only: bool,
) -> Result<PipelineOutput> {
    let t = Instant::now();
    let pyr = toy_backbone(image, ws, &cfg.model)?;
    let backbone_ms = ms(t);

    let t = Instant::now();
    let fused = enhance_and_fuse(&pyr, ws, &cfg.model)?;
    let enhance_ms = ms(t);

    let t = Instant::now();
    let det = detection_head(&fused, ws, &cfg.model)?;
    let t_pa = Instant::now();
    let pa = aggregate(&det.p_tex, &det.p_ker, &det.emb, &cfg.pa)?;
    let pa_only_ms = ms(t_pa);
    let det_pa_ms = ms(t);

    let t = Instant::now();
    let mut detections = Vec::new();
    if det_only {
        for inst in &pa.instances {
            detections.push(Detection {
                polygon: inst.contour_scaled.clone(),
                text: String::new(),
                confidence: inst.confidence,
            });
        }
    } else {
        let rec_cfg = cfg.rec();
        let reduced = reduce_features(&fused, ws, &rec_cfg)?;
        let (h, w) = (pa.label_map.h(), pa.label_map.w());
        for inst in &pa.instances {
            let mut mask = TensorMap::zeros(&[1, h, w]);
            for &(r, c) in &inst.pixels {
                mask.set3(0, r, c, 1.0);
            }
            let roi = masked_roi(&reduced, &mask, inst.id)?;
            let (decoded, _logits) = decode(&roi, ws, &rec_cfg, charset, None)?;
            detections.push(Detection {
                polygon: inst.contour_scaled.clone(),
                text: charset.decode(&decoded.ids),
                confidence: inst.confidence,
            });
        }
    }
    let rec_ms = ms(t);

    Ok(PipelineOutput {
        det,
        pa,
        detections,
        times: StageTimes {
            backbone_ms,
            enhance_ms,
            det_pa_ms,
            pa_only_ms,
            rec_ms,
        },
    })
}

/// Mean, median and 99th percentile (nearest rank) of a sample set.
pub fn stats_ms(samples: &[f64]) -> (f64, f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let pick = |q: f64| s[(q * (s.len() - 1) as f64).round() as usize];
    (mean, pick(0.5), pick(0.99))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kernelspot::fixture::{random_scene, render_image};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.set("model.backbone_channels", "4,8,12,16").unwrap();
        cfg.set("model.enhanced_channels", "8").unwrap();
        cfg.set("model.n_stk", "1").unwrap();
        cfg.set("rec.embed_dim", "8").unwrap();
        cfg.set("rec.heads", "2").unwrap();
        cfg.set("rec.max_steps", "4").unwrap();
        cfg
    }

    #[test]
    fn pipeline_is_deterministic_and_det_only_blanks_text() {
        let cfg = small_cfg();
        let charset = cfg.charset().unwrap();
        let anns = random_scene(96, 96, 1, 5).unwrap();
        let image = render_image(&anns, 96, 96, 5);
        let ws = build_weights(&WeightSource::Seeded(11), &cfg, &charset, false).unwrap();

        let a = run_pipeline(&image, &ws, &cfg, &charset, false).unwrap();
        let b = run_pipeline(&image, &ws, &cfg, &charset, false).unwrap();
        assert_eq!(a.det.p_tex.data(), b.det.p_tex.data());
        assert_eq!(a.detections.len(), b.detections.len());
        for (x, y) in a.detections.iter().zip(&b.detections) {
            assert_eq!(x, y);
        }

        let d = run_pipeline(&image, &ws, &cfg, &charset, true).unwrap();
        assert_eq!(d.detections.len(), d.pa.instances.len());
        assert!(d.detections.iter().all(|det| det.text.is_empty()));
        assert!(d.times.pa_only_ms <= d.times.det_pa_ms);
    }

    #[test]
    fn weight_sources_cover_seeded_zeroed_and_directories() {
        let cfg = small_cfg();
        let charset = cfg.charset().unwrap();
        let ws = build_weights(&WeightSource::Zeroed, &cfg, &charset, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ws.save_dir(dir.path()).unwrap();
        let loaded = build_weights(
            &WeightSource::Dir(dir.path().to_path_buf()),
            &cfg,
            &charset,
            false,
        )
        .unwrap();
        assert_eq!(loaded.len(), ws.len());
        // Detection-only weight directories validate without rec tensors.
        let det_dir = tempfile::tempdir().unwrap();
        let det_ws = WeightStore::zeroed(&detection_specs(&cfg.model));
        det_ws.save_dir(det_dir.path()).unwrap();
        let src = WeightSource::Dir(det_dir.path().to_path_buf());
        assert!(build_weights(&src, &cfg, &charset, true).is_ok());
        assert!(build_weights(&src, &cfg, &charset, false).is_err());
    }

    #[test]
    fn stats_pick_the_right_ranks() {
        let samples: Vec<f64> = (1..=101).map(|v| v as f64).collect();
        let (mean, p50, p99) = stats_ms(&samples);
        assert!((mean - 51.0).abs() < 1e-12);
        assert_eq!(p50, 51.0, "true median of 1..=101");
        assert_eq!(p99, 100.0, "nearest rank at q=0.99");
        assert_eq!(stats_ms(&[7.0]), (7.0, 7.0, 7.0));
    }
}
