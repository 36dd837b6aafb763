//! Forward-only network: ops, named weights, and the detection blocks.

pub mod model;
pub mod ops;
pub mod weights;

pub use model::{
    backbone_specs, detection_head, detection_specs, enhance_and_fuse, fpem, fpem_specs,
    head_specs, toy_backbone, DetOutputs, FeaturePyramid,
};
pub use ops::{batch_norm, conv2d, depthwise_conv2d, separable_conv, BnParams, BN_EPS};
pub use weights::{bn_specs, sep_conv_specs, LayerSpec, ParamKind, WeightStore};

use crate::error::{Error, Result};

/// Channel widths and stacking depth for the detection model. The
/// spatial contract is fixed: input divisible by 32, dense outputs on
/// the stride-4 grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Output channels of the four backbone stages (strides 4 to 32).
    pub backbone_channels: [usize; 4],
    /// Channel count every pyramid level is reduced to before enhancement.
    pub enhanced_channels: usize,
    /// Number of stacked enhancement passes.
    pub n_stk: usize,
    /// Per-pixel similarity vector length.
    pub emb_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [32, 64, 128, 256],
            enhanced_channels: 128,
            n_stk: 2,
            emb_dim: 4,
        }
    }
}

impl ModelConfig {
    /// Channels after concatenating the four upsampled pyramid levels.
    pub fn fused_channels(&self) -> usize {
        4 * self.enhanced_channels
    }

    /// Head output channels: text + kernel + similarity vector.
    pub fn det_out_channels(&self) -> usize {
        2 + self.emb_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.contains(&0) || self.enhanced_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.emb_dim == 0 {
            return Err(Error::invalid("emb_dim must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_channel_counts() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.fused_channels(), 512);
        assert_eq!(cfg.det_out_channels(), 6);
        cfg.validate().unwrap();
        let bad = ModelConfig {
            emb_dim: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
