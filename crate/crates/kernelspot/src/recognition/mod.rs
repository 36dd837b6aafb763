//! Recognition head: masked RoI feature extraction and an attention-based
//! sequence decoder. The fused detection features are reduced to the
//! decoder width by a learned 1x1 convolution, cropped and masked per
//! instance, resized to a fixed 8x32 patch, and read out by a two-layer
//! LSTM with multi-head attention.

mod decoder;

pub use decoder::{
    decode, multi_head_attention, rec_specs, start, AttentionOutput, AttentionWeights,
    DecodedText, StopReason,
};

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{conv2d, WeightStore};
use crate::tensor::TensorMap;

pub const ROI_H: usize = 8;
pub const ROI_W: usize = 32;

/// Decoder sizing. The embedding width doubles as each LSTM's hidden
/// size, so the final classifier sees `2 * embed_dim` features.
#[derive(Clone, Debug)]
pub struct RecConfig {
    /// Channels of the fused detection map ahead of the 1x1 reduction.
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub max_steps: usize,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            feature_channels: 512,
            embed_dim: 128,
            heads: 8,
            max_steps: 32,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::invalid("recognition sizes must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Symbol table: payload symbols first, then EOS, SOS and PAD.
#[derive(Clone, Debug)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    /// Lowercase letters then digits; ids 0..=25 and 26..=35.
    pub fn latin() -> Self {
        Self::from_symbols(('a'..='z').chain('0'..='9').collect()).unwrap()
    }

    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::invalid("charset needs at least one symbol"));
        }
        let mut index = HashMap::new();
        for (i, &s) in symbols.iter().enumerate() {
            if index.insert(s, i).is_some() {
                return Err(Error::invalid(format!("duplicate charset symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// One symbol per line; blank lines are skipped. Lets larger
    /// vocabularies replace the built-in latin set.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut symbols = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut chars = line.chars();
            let c = chars.next().unwrap();
            if chars.next().is_some() {
                return Err(Error::parse(format!(
                    "charset line {}: expected a single symbol, got {line:?}",
                    i + 1
                )));
            }
            symbols.push(c);
        }
        Self::from_symbols(symbols)
    }

    /// Total vocabulary including the three specials.
    pub fn size(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn eos(&self) -> usize {
        self.symbols.len()
    }

    pub fn sos(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    /// Case-folded symbol ids; any unmapped character is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for c in text.chars().flat_map(char::to_lowercase) {
            match self.index.get(&c) {
                Some(&i) => ids.push(i),
                None => {
                    return Err(Error::invalid(format!(
                        "character {c:?} is not in the charset"
                    )))
                }
            }
        }
        Ok(ids)
    }

    /// Text up to the first EOS; specials and out-of-range ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos() {
                break;
            }
            if let Some(c) = self.symbol(id) {
                out.push(c);
            }
        }
        out
    }
}

/// Fixed-size masked feature patch for one instance.
#[derive(Clone, Debug)]
pub struct RoiPatch {
    /// `[C, 8, 32]`.
    pub features: TensorMap,
    pub instance_id: u32,
}

/// Reduce the fused detection map to the decoder width with the learned
/// 1x1 convolution `rec.reduce`.
pub fn reduce_features(f_f: &TensorMap, ws: &WeightStore, cfg: &RecConfig) -> Result<TensorMap> {
    cfg.validate()?;
    if f_f.rank() != 3 || f_f.dims()[0] != cfg.feature_channels {
        return Err(Error::shape(format!(
            "expected fused features [{}, H, W], got {:?}",
            cfg.feature_channels,
            f_f.dims()
        )));
    }
    conv2d(
        f_f,
        ws.get("rec.reduce.w")?,
        Some(ws.get("rec.reduce.b")?),
        1,
        0,
    )
}

/// Crop the feature map to the mask's bounding rectangle, zero the
/// features outside the mask, and bilinearly resize to 8x32. Masking
/// happens before resizing, so excluded sources cannot bleed into the
/// patch through interpolation.
pub fn masked_roi(f: &TensorMap, mask: &TensorMap, instance_id: u32) -> Result<RoiPatch> {
    if f.rank() != 3 {
        return Err(Error::shape("masked_roi expects features [C, H, W]"));
    }
    let (c_n, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2]);
    if mask.dims() != [1, h, w] {
        return Err(Error::shape(format!(
            "mask dims {:?} do not match feature map {h}x{w}",
            mask.dims()
        )));
    }
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for r in 0..h {
        for c in 0..w {
            if mask.at3(0, r, c) > 0.5 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::invalid(format!(
            "instance {instance_id}: mask has no pixels, cannot extract a patch"
        )));
    }
    let (rh, rw) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut patch = TensorMap::zeros(&[c_n, rh, rw]);
    for ch in 0..c_n {
        for r in 0..rh {
            for c in 0..rw {
                if mask.at3(0, r0 + r, c0 + c) > 0.5 {
                    patch.set3(ch, r, c, f.at3(ch, r0 + r, c0 + c));
                }
            }
        }
    }
    Ok(RoiPatch {
        features: patch.bilinear_resize(ROI_H, ROI_W)?,
        instance_id,
    })
}
