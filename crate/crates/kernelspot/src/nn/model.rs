//! Detection-side network blocks: toy backbone, cascaded feature
//! enhancement, and the dense prediction head.

use crate::error::{Error, Result};
use crate::tensor::TensorMap;

use super::ops::{batch_norm, conv2d, separable_conv, BN_EPS};
use super::weights::{bn_specs, sep_conv_specs, LayerSpec, ParamKind, WeightStore};
use super::ModelConfig;

/// Four feature maps at strides 4, 8, 16, 32, all with the same channel
/// count and an exact 2x spatial chain.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub levels: [TensorMap; 4],
}

impl FeaturePyramid {
    pub fn channels(&self) -> usize {
        self.levels[0].dims()[0]
    }

    fn check(&self) -> Result<()> {
        let c = self.channels();
        for (i, l) in self.levels.iter().enumerate() {
            if l.rank() != 3 || l.dims()[0] != c {
                return Err(Error::shape(format!(
                    "pyramid level {i} has dims {:?}, expected {c} channels",
                    l.dims()
                )));
            }
            if i > 0 {
                let (ph, pw) = (self.levels[i - 1].dims()[1], self.levels[i - 1].dims()[2]);
                if l.dims()[1] * 2 != ph || l.dims()[2] * 2 != pw {
                    return Err(Error::shape(format!(
                        "pyramid level {i} is {}x{}, expected exactly half of {ph}x{pw}",
                        l.dims()[1],
                        l.dims()[2]
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn backbone_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let bc = cfg.backbone_channels;
    let mut v = sep_conv_specs("backbone.stem", 3, bc[0]);
    let stage_io = [(bc[0], bc[0]), (bc[0], bc[1]), (bc[1], bc[2]), (bc[2], bc[3])];
    for (i, (c_in, c_out)) in stage_io.into_iter().enumerate() {
        v.extend(sep_conv_specs(&format!("backbone.stage{}", i + 1), c_in, c_out));
    }
    for i in 0..4 {
        v.push(LayerSpec::new(
            format!("reduce{i}.w"),
            &[cfg.enhanced_channels, bc[i], 1, 1],
            ParamKind::Uniform,
        ));
        v.push(LayerSpec::new(
            format!("reduce{i}.b"),
            &[cfg.enhanced_channels],
            ParamKind::Uniform,
        ));
    }
    v
}

pub fn fpem_specs(cfg: &ModelConfig, k: usize) -> Vec<LayerSpec> {
    let c = cfg.enhanced_channels;
    let mut v = Vec::new();
    for i in [2usize, 1, 0] {
        v.extend(sep_conv_specs(&format!("fpem{k}.up{i}"), c, c));
    }
    for i in [1usize, 2, 3] {
        v.extend(sep_conv_specs(&format!("fpem{k}.down{i}"), c, c));
        v.extend(sep_conv_specs(&format!("fpem{k}.join{i}"), c, c));
    }
    v
}

pub fn head_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut v = vec![LayerSpec::new(
        "head.conv.w",
        &[cfg.enhanced_channels, cfg.fused_channels(), 3, 3],
        ParamKind::Uniform,
    )];
    v.extend(bn_specs("head.conv", cfg.enhanced_channels));
    v.push(LayerSpec::new(
        "head.out.w",
        &[cfg.det_out_channels(), cfg.enhanced_channels, 1, 1],
        ParamKind::Uniform,
    ));
    v.push(LayerSpec::new(
        "head.out.b",
        &[cfg.det_out_channels()],
        ParamKind::Uniform,
    ));
    v
}

/// Every parameter the detection path needs, in declaration order.
pub fn detection_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut v = backbone_specs(cfg);
    for k in 0..cfg.n_stk {
        v.extend(fpem_specs(cfg, k));
    }
    v.extend(head_specs(cfg));
    v
}

/// Five stride-2 separable convolutions (stem + 4 stages), then 1x1
/// reductions so every level carries `enhanced_channels`.
///
/// The input must be [3,H,W] with H and W divisible by 32; anything else
/// is an error that names the padded size that would work.
pub fn toy_backbone(image: &TensorMap, ws: &WeightStore, cfg: &ModelConfig) -> Result<FeaturePyramid> {
    cfg.validate()?;
    if image.rank() != 3 || image.dims()[0] != 3 {
        return Err(Error::shape(format!(
            "backbone expects [3,H,W], got {:?}",
            image.dims()
        )));
    }
    let (h, w) = (image.dims()[1], image.dims()[2]);
    if h % 32 != 0 || w % 32 != 0 {
        let up = |n: usize| n.div_ceil(32) * 32;
        return Err(Error::invalid(format!(
            "image size {h}x{w} is not divisible by 32; pad to {}x{}",
            up(h),
            up(w)
        )));
    }
    let run = |x: &TensorMap, prefix: &str| -> Result<TensorMap> {
        let b = ws.sep_block(prefix)?;
        separable_conv(x, b.dw, b.pw, b.bn, 2)
    };
    let stem = run(image, "backbone.stem")?;
    let s1 = run(&stem, "backbone.stage1")?;
    let s2 = run(&s1, "backbone.stage2")?;
    let s3 = run(&s2, "backbone.stage3")?;
    let s4 = run(&s3, "backbone.stage4")?;
    let reduce = |x: &TensorMap, i: usize| -> Result<TensorMap> {
        conv2d(
            x,
            ws.get(&format!("reduce{i}.w"))?,
            Some(ws.get(&format!("reduce{i}.b"))?),
            1,
            0,
        )
    };
    Ok(FeaturePyramid {
        levels: [reduce(&s1, 0)?, reduce(&s2, 1)?, reduce(&s3, 2)?, reduce(&s4, 3)?],
    })
}

/// One enhancement pass: an up-scale sweep from coarse to fine, then a
/// down-scale sweep back, with a residual add of the original input at
/// every level. With all-zero weights this is the identity.
pub fn fpem(pyr: &FeaturePyramid, ws: &WeightStore, prefix: &str) -> Result<FeaturePyramid> {
    pyr.check()?;
    let sep = |name: String, x: &TensorMap, stride: usize| -> Result<TensorMap> {
        let b = ws.sep_block(&name)?;
        separable_conv(x, b.dw, b.pw, b.bn, stride)
    };
    let up_to = |x: &TensorMap, like: &TensorMap| -> Result<TensorMap> {
        x.bilinear_resize(like.dims()[1], like.dims()[2])
    };

    // Coarse-to-fine: each level absorbs the enhanced level below it.
    let mut up: [Option<TensorMap>; 4] = [None, None, None, None];
    up[3] = Some(pyr.levels[3].clone());
    for i in (0..3).rev() {
        let lifted = up_to(up[i + 1].as_ref().unwrap(), &pyr.levels[i])?;
        let merged = pyr.levels[i].add(&lifted)?;
        up[i] = Some(sep(format!("{prefix}.up{i}"), &merged, 1)?);
    }

    // Fine-to-coarse: stride-2 descent joined with the up-sweep result.
    let mut down: [Option<TensorMap>; 4] = [None, None, None, None];
    down[0] = up[0].clone();
    for i in 1..4 {
        let descended = sep(format!("{prefix}.down{i}"), down[i - 1].as_ref().unwrap(), 2)?;
        if descended.dims() != up[i].as_ref().unwrap().dims() {
            return Err(Error::shape(format!(
                "down pass level {i}: got {:?}, expected {:?}",
                descended.dims(),
                up[i].as_ref().unwrap().dims()
            )));
        }
        let merged = descended.add(up[i].as_ref().unwrap())?;
        down[i] = Some(sep(format!("{prefix}.join{i}"), &merged, 1)?);
    }

    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        levels.push(pyr.levels[i].add(down[i].as_ref().unwrap())?);
    }
    Ok(FeaturePyramid {
        levels: levels.try_into().map_err(|_| Error::shape("pyramid build"))?,
    })
}

/// Runs `n_stk` enhancement passes, then upsamples every level to the
/// stride-4 grid and concatenates channels: [4*C, H/4, W/4].
pub fn enhance_and_fuse(
    pyr: &FeaturePyramid,
    ws: &WeightStore,
    cfg: &ModelConfig,
) -> Result<TensorMap> {
    pyr.check()?;
    if pyr.channels() != cfg.enhanced_channels {
        return Err(Error::shape(format!(
            "pyramid has {} channels, config says {}",
            pyr.channels(),
            cfg.enhanced_channels
        )));
    }
    let mut cur = FeaturePyramid {
        levels: pyr.levels.clone(),
    };
    for k in 0..cfg.n_stk {
        cur = fpem(&cur, ws, &format!("fpem{k}"))?;
    }
    let (h, w) = (cur.levels[0].dims()[1], cur.levels[0].dims()[2]);
    let l1 = cur.levels[1].bilinear_resize(h, w)?;
    let l2 = cur.levels[2].bilinear_resize(h, w)?;
    let l3 = cur.levels[3].bilinear_resize(h, w)?;
    TensorMap::concat_channels(&[&cur.levels[0], &l1, &l2, &l3])
}

/// Dense detection maps on the stride-4 grid.
pub struct DetOutputs {
    /// Text-region probability, [1,H,W], strictly inside (0,1).
    pub p_tex: TensorMap,
    /// Kernel probability, [1,H,W], strictly inside (0,1).
    pub p_ker: TensorMap,
    /// Raw per-pixel similarity vectors, [emb_dim,H,W].
    pub emb: TensorMap,
}

/// 3x3 conv + BN + ReLU, then a 1x1 projection to 2 + emb_dim channels.
/// The first two channels pass through a sigmoid.
pub fn detection_head(f_f: &TensorMap, ws: &WeightStore, cfg: &ModelConfig) -> Result<DetOutputs> {
    if f_f.rank() != 3 || f_f.dims()[0] != cfg.fused_channels() {
        return Err(Error::shape(format!(
            "detection head expects [{},H,W], got {:?}",
            cfg.fused_channels(),
            f_f.dims()
        )));
    }
    let mid = conv2d(f_f, ws.get("head.conv.w")?, None, 1, 1)?;
    let bn = ws.bn_block("head.conv")?;
    let mid = batch_norm(&mid, bn.gamma, bn.beta, bn.mean, bn.var, BN_EPS)?.relu();
    let out = conv2d(&mid, ws.get("head.out.w")?, Some(ws.get("head.out.b")?), 1, 0)?;
    let (h, w) = (out.dims()[1], out.dims()[2]);
    let take = |a: usize, b: usize| -> TensorMap {
        TensorMap::new(
            vec![b - a, h, w],
            out.data()[a * h * w..b * h * w].to_vec(),
        )
        .unwrap()
    };
    Ok(DetOutputs {
        p_tex: take(0, 1).sigmoid(),
        p_ker: take(1, 2).sigmoid(),
        emb: take(2, 2 + cfg.emb_dim),
    })
}
