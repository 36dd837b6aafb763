//! Minimal dense numeric array substrate shared by the whole pipeline.
//!
//! A [`TensorMap`] is a row-major `f32` buffer with explicit dims (last dim
//! fastest). Feature maps use `[C, H, W]`, logit blocks `[T, V]`. Values are
//! finite after every operation given finite inputs.

mod ptm;

pub use ptm::{read_ptm, read_ptm_file, write_ptm, write_ptm_file};
pub(crate) use ptm::temp_sibling as ptm_temp_sibling;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorMap {
    /// Builds a tensor from dims and a flat buffer. Dims must be non-empty,
    /// strictly positive, and their product must equal `data.len()`.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {len} values, buffer holds {}",
                data.len()
            )));
        }
        Ok(TensorMap { dims, data })
    }

    /// All-zero tensor. Panics if `dims` is empty or contains a zero.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    /// Constant-valued tensor. Panics if `dims` is empty or contains a zero.
    pub fn filled(dims: &[usize], v: f32) -> Self {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "dims must be non-empty and positive, got {dims:?}"
        );
        let len = dims.iter().product();
        TensorMap {
            dims: dims.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of `[c, h, w]` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.idx3(c, h, w)]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: f32) {
        let i = self.idx3(c, h, w);
        self.data[i] = v;
    }

    /// Flat offset of `[r, c]` in a rank-2 tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        r * self.dims[1] + c
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        self.data[self.idx2(r, c)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> TensorMap {
        TensorMap {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> TensorMap {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> TensorMap {
        self.map(|v| (1.0 / (1.0 + (-v as f64).exp())) as f32)
    }

    /// Elementwise sum; dims must match exactly.
    pub fn add(&self, other: &TensorMap) -> Result<TensorMap> {
        self.zip(other, |a, b| a + b)
    }

    /// Elementwise product; dims must match exactly.
    pub fn mul(&self, other: &TensorMap) -> Result<TensorMap> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &TensorMap, f: impl Fn(f32, f32) -> f32) -> Result<TensorMap> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(TensorMap {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Bilinear resize of a `[C, H, W]` tensor to `[C, out_h, out_w]`.
    ///
    /// Sample centers sit at `(i + 0.5) * in/out - 0.5`, clamped to the valid
    /// range, so corner pixels are not pinned and the operation is exact for
    /// identity sizes and for constant maps.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<TensorMap> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "bilinear_resize expects [C, H, W], got {:?}",
                self.dims
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize target must be non-empty"));
        }
        let (c_n, h, w) = (self.dims[0], self.dims[1], self.dims[2]);
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let mut out = TensorMap::zeros(&[c_n, out_h, out_w]);
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for c in 0..c_n {
                    let v00 = self.at3(c, y0, x0) as f64;
                    let v01 = self.at3(c, y0, x1) as f64;
                    let v10 = self.at3(c, y1, x0) as f64;
                    let v11 = self.at3(c, y1, x1) as f64;
                    // Lerp form keeps constants exact: c + w*(c - c) == c.
                    let top = v00 + wx * (v01 - v00);
                    let bot = v10 + wx * (v11 - v10);
                    out.set3(c, oy, ox, (top + wy * (bot - top)) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Row-wise stable softmax of a `[R, C]` tensor.
    pub fn softmax_rows(&self) -> Result<TensorMap> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "softmax_rows expects [R, C], got {:?}",
                self.dims
            )));
        }
        let (rows, cols) = (self.dims[0], self.dims[1]);
        let mut out = TensorMap::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; cols];
            for (c, &v) in row.iter().enumerate() {
                let e = ((v as f64) - m).exp();
                exps[c] = e;
                denom += e;
            }
            for c in 0..cols {
                out.data[r * cols + c] = (exps[c] / denom) as f32;
            }
        }
        Ok(out)
    }

    /// Stacks rank-3 tensors along the channel axis; spatial dims must agree.
    pub fn concat_channels(parts: &[&TensorMap]) -> Result<TensorMap> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels needs at least one input"));
        }
        let (h, w) = match parts[0].dims() {
            [_, h, w] => (*h, *w),
            d => return Err(Error::shape(format!("concat_channels expects [C, H, W], got {d:?}"))),
        };
        let mut total_c = 0;
        for p in parts {
            match p.dims() {
                [c, ph, pw] if *ph == h && *pw == w => total_c += c,
                d => {
                    return Err(Error::shape(format!(
                        "concat_channels spatial mismatch: {d:?} vs [{h}, {w}]"
                    )))
                }
            }
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        TensorMap::new(vec![total_c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct per-pixel interpolation, written from the sampling definition.
    fn resize_oracle(src: &TensorMap, out_h: usize, out_w: usize) -> TensorMap {
        let (c_n, h, w) = (src.dims()[0], src.dims()[1], src.dims()[2]);
        let mut out = TensorMap::zeros(&[c_n, out_h, out_w]);
        for c in 0..c_n {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let fy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5)
                        .clamp(0.0, h as f64 - 1.0);
                    let fx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5)
                        .clamp(0.0, w as f64 - 1.0);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                    let v = src.at3(c, y0, x0) as f64 * (1.0 - dy) * (1.0 - dx)
                        + src.at3(c, y0, x1) as f64 * (1.0 - dy) * dx
                        + src.at3(c, y1, x0) as f64 * dy * (1.0 - dx)
                        + src.at3(c, y1, x1) as f64 * dy * dx;
                    out.set3(c, oy, ox, v as f32);
                }
            }
        }
        out
    }

    fn seeded_tensor(dims: &[usize], seed: u64) -> TensorMap {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = dims.iter().product();
        let data = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        TensorMap::new(dims.to_vec(), data).unwrap()
    }

    #[test]
    fn new_rejects_bad_dims() {
        assert!(TensorMap::new(vec![], vec![]).is_err());
        assert!(TensorMap::new(vec![2, 0], vec![]).is_err());
        assert!(TensorMap::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorMap::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_oracle() {
        let src = TensorMap::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let got = src.bilinear_resize(4, 4).unwrap();
        let want = resize_oracle(&src, 4, 4);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6, "got {a}, want {b}");
        }
        // Corners replicate under the clamped half-pixel convention.
        assert_eq!(got.at3(0, 0, 0), 0.0);
        assert_eq!(got.at3(0, 3, 3), 3.0);
    }

    #[test]
    fn random_resizes_match_oracle() {
        let src = seeded_tensor(&[3, 7, 5], 11);
        for &(oh, ow) in &[(7, 5), (14, 10), (3, 9), (1, 1), (13, 2)] {
            let got = src.bilinear_resize(oh, ow).unwrap();
            let want = resize_oracle(&src, oh, ow);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identity_resize_is_bitwise_equal() {
        let src = seeded_tensor(&[2, 6, 9], 5);
        let out = src.bilinear_resize(6, 9).unwrap();
        assert_eq!(src.data(), out.data());
    }

    #[test]
    fn constant_map_survives_down_then_up_exactly() {
        let src = TensorMap::filled(&[1, 8, 8], 0.3);
        let down = src.bilinear_resize(3, 5).unwrap();
        let up = down.bilinear_resize(8, 8).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn resize_stays_within_source_range() {
        let src = seeded_tensor(&[2, 9, 4], 77);
        let lo = src.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = src.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let out = src.bilinear_resize(17, 13).unwrap();
        for &v in out.data() {
            assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn resize_rejects_empty_target() {
        let src = TensorMap::zeros(&[1, 4, 4]);
        assert!(src.bilinear_resize(0, 3).is_err());
        assert!(src.bilinear_resize(3, 0).is_err());
    }

    #[test]
    fn softmax_two_logits() {
        let t = TensorMap::new(vec![1, 2], vec![0.0, 3.0f32.ln()]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert!((s.at2(0, 0) - 0.25).abs() < 1e-6);
        assert!((s.at2(0, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_extremes() {
        let t = TensorMap::new(
            vec![3, 4],
            vec![
                1e4, 1e4, 1e4, 1e4, //
                -1e4, 0.0, 1e4, 3.0, //
                -3.0, -2.0, -1.0, 0.0,
            ],
        )
        .unwrap();
        let s = t.softmax_rows().unwrap();
        for r in 0..3 {
            let sum: f64 = (0..4).map(|c| s.at2(r, c) as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!((0..4).all(|c| s.at2(r, c).is_finite()));
        }
    }

    #[test]
    fn elementwise_ops_validate_shape() {
        let a = TensorMap::filled(&[2, 2], 1.0);
        let b = TensorMap::filled(&[2, 3], 1.0);
        assert!(a.add(&b).is_err());
        let c = TensorMap::filled(&[2, 2], 2.0);
        assert_eq!(a.add(&c).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
        assert_eq!(a.mul(&c).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_channels_stacks_in_order() {
        let a = TensorMap::filled(&[1, 2, 2], 1.0);
        let b = TensorMap::filled(&[2, 2, 2], 2.0);
        let c = TensorMap::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[3, 2, 2]);
        assert_eq!(&c.data()[0..4], &[1.0; 4]);
        assert_eq!(&c.data()[4..12], &[2.0; 8]);
        let bad = TensorMap::filled(&[1, 3, 2], 0.0);
        assert!(TensorMap::concat_channels(&[&a, &bad]).is_err());
    }
}
