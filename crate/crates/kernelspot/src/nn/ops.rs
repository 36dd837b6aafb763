//! Convolution and normalization primitives. Forward-only, CPU, f32.

use crate::error::{Error, Result};
use crate::tensor::TensorMap;

/// Standard cross-correlation with zero padding.
///
/// Output size is `(H + 2*pad - kh)/stride + 1` and must be exactly
/// integral; sizes that would need rounding are an error here (the
/// depthwise path below is the one that rounds).
pub fn conv2d(
    x: &TensorMap,
    weight: &TensorMap,
    bias: Option<&TensorMap>,
    stride: usize,
    pad: usize,
) -> Result<TensorMap> {
    if x.rank() != 3 || weight.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects x [C,H,W] and weight [Cout,Cin,kh,kw], got {:?} and {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (c_out, wc_in, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [c_out] {
            return Err(Error::shape(format!(
                "conv2d bias dims {:?}, expected [{c_out}]",
                b.dims()
            )));
        }
    }
    let (out_h, out_w) = (
        strict_out_size(h, pad, kh, stride, "height")?,
        strict_out_size(w, pad, kw, stride, "width")?,
    );

    let mut out = TensorMap::zeros(&[c_out, out_h, out_w]);
    if let Some(b) = bias {
        for co in 0..c_out {
            let v = b.data()[co];
            out.data_mut()[co * out_h * out_w..(co + 1) * out_h * out_w].fill(v);
        }
    }
    if stride == 1 {
        conv_accumulate_shifted(x, weight, pad, &mut out);
    } else {
        conv_accumulate_gather(x, weight, stride, pad, &mut out);
    }
    Ok(out)
}

/// Per-channel 2D convolution with the usual convnet size convention:
/// `floor((H + 2*pad - kh)/stride) + 1`. Stride 2 therefore halves even
/// dims exactly and rounds odd dims up.
pub fn depthwise_conv2d(
    x: &TensorMap,
    weight: &TensorMap,
    stride: usize,
    pad: usize,
) -> Result<TensorMap> {
    if x.rank() != 3 || weight.rank() != 3 {
        return Err(Error::shape(format!(
            "depthwise_conv2d expects x [C,H,W] and weight [C,kh,kw], got {:?} and {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("depthwise stride must be >= 1"));
    }
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (wc, kh, kw) = (weight.dims()[0], weight.dims()[1], weight.dims()[2]);
    if wc != c {
        return Err(Error::shape(format!(
            "depthwise channel mismatch: input has {c}, weight has {wc}"
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape("depthwise kernel larger than padded input"));
    }
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    let mut out = TensorMap::zeros(&[c, out_h, out_w]);
    let xd = x.data();
    let wd = weight.data();
    for ch in 0..c {
        for oy in 0..out_h {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..out_w {
                let ix0 = (ox * stride) as isize - pad as isize;
                let mut acc = 0.0f32;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xd[(ch * h + iy as usize) * w..][..w];
                    let wrow = &wd[(ch * kh + ky) * kw..][..kw];
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += xrow[ix as usize] * wrow[kx];
                        }
                    }
                }
                out.set3(ch, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Inference-mode normalization: `gamma*(x - mean)/sqrt(var + eps) + beta`
/// per channel.
pub fn batch_norm(
    x: &TensorMap,
    gamma: &TensorMap,
    beta: &TensorMap,
    mean: &TensorMap,
    var: &TensorMap,
    eps: f32,
) -> Result<TensorMap> {
    if x.rank() != 3 {
        return Err(Error::shape("batch_norm expects [C,H,W]"));
    }
    let c = x.dims()[0];
    for (name, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if t.dims() != [c] {
            return Err(Error::shape(format!(
                "batch_norm {name} dims {:?}, expected [{c}]",
                t.dims()
            )));
        }
    }
    if var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("batch_norm variance must be >= 0"));
    }
    let hw = x.dims()[1] * x.dims()[2];
    let mut out = x.clone();
    for ch in 0..c {
        let scale = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
        let shift = beta.data()[ch] - mean.data()[ch] * scale;
        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
            *v = *v * scale + shift;
        }
    }
    Ok(out)
}

/// Per-channel normalization parameters, usually fetched by name prefix.
#[derive(Clone, Copy)]
pub struct BnParams<'a> {
    pub gamma: &'a TensorMap,
    pub beta: &'a TensorMap,
    pub mean: &'a TensorMap,
    pub var: &'a TensorMap,
}

pub const BN_EPS: f32 = 1e-5;

/// 3x3 depthwise (pad 1, given stride) + 1x1 pointwise + BN + ReLU.
pub fn separable_conv(
    x: &TensorMap,
    dw_weight: &TensorMap,
    pw_weight: &TensorMap,
    bn: BnParams,
    stride: usize,
) -> Result<TensorMap> {
    if dw_weight.rank() != 3 || dw_weight.dims()[1] != 3 || dw_weight.dims()[2] != 3 {
        return Err(Error::shape(format!(
            "separable_conv depthwise weight must be [C,3,3], got {:?}",
            dw_weight.dims()
        )));
    }
    let mid = depthwise_conv2d(x, dw_weight, stride, 1)?;
    let mixed = conv2d(&mid, pw_weight, None, 1, 0)?;
    Ok(batch_norm(&mixed, bn.gamma, bn.beta, bn.mean, bn.var, BN_EPS)?.relu())
}

fn strict_out_size(n: usize, pad: usize, k: usize, stride: usize, axis: &str) -> Result<usize> {
    if n + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv2d kernel larger than padded input along {axis}"
        )));
    }
    let span = n + 2 * pad - k;
    if span % stride != 0 {
        return Err(Error::shape(format!(
            "conv2d output size along {axis} is not integral: ({n} + 2*{pad} - {k})/{stride} + 1"
        )));
    }
    Ok(span / stride + 1)
}

/// Stride-1 convolution as a sum of shifted-row axpys; the inner loops stay
/// contiguous so they vectorize.
fn conv_accumulate_shifted(x: &TensorMap, weight: &TensorMap, pad: usize, out: &mut TensorMap) {
    let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (c_out, _, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    let (out_h, out_w) = (out.dims()[1], out.dims()[2]);
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((co * c_in + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // oy + ky - pad must land in [0, h): clip both ends.
                    let oy0 = pad.saturating_sub(ky);
                    let oy1 = (h + pad - ky).min(out_h);
                    let ox0 = pad.saturating_sub(kx);
                    let ox1 = (w + pad - kx).min(out_w);
                    if oy0 >= oy1 || ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy + ky - pad;
                        let ix = ox0 + kx - pad;
                        let src = &xd[(ci * h + iy) * w + ix..][..ox1 - ox0];
                        let dst = &mut od[(co * out_h + oy) * out_w + ox0..][..ox1 - ox0];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_accumulate_gather(
    x: &TensorMap,
    weight: &TensorMap,
    stride: usize,
    pad: usize,
    out: &mut TensorMap,
) {
    let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (c_out, _, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    let (out_h, out_w) = (out.dims()[1], out.dims()[2]);
    let xd = x.data();
    let wd = weight.data();
    for co in 0..c_out {
        for oy in 0..out_h {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..out_w {
                let ix0 = (ox * stride) as isize - pad as isize;
                let mut acc = 0.0f32;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xd[(ci * h + iy as usize) * w..][..w];
                        let wrow = &wd[((co * c_in + ci) * kh + ky) * kw..][..kw];
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += xrow[ix as usize] * wrow[kx];
                            }
                        }
                    }
                }
                let i = out.idx3(co, oy, ox);
                out.data_mut()[i] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rnd(dims: &[usize], seed: u64) -> TensorMap {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = dims.iter().product();
        TensorMap::new(
            dims.to_vec(),
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Definition-level convolution: quadruple loop, no tricks.
    fn conv_oracle(
        x: &TensorMap,
        w: &TensorMap,
        bias: Option<&TensorMap>,
        stride: usize,
        pad: usize,
    ) -> TensorMap {
        let (c_in, h, ww) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (c_out, _, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (ww + 2 * pad - kw) / stride + 1;
        let mut out = TensorMap::zeros(&[c_out, out_h, out_w]);
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < ww {
                                    acc += x.at3(ci, iy as usize, ix as usize)
                                        * w.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.set3(co, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_counts_overlap() {
        let x = TensorMap::filled(&[1, 5, 5], 1.0);
        let w = TensorMap::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.dims(), &[1, 5, 5]);
        assert_eq!(y.at3(0, 2, 2), 9.0);
        assert_eq!(y.at3(0, 0, 2), 6.0);
        assert_eq!(y.at3(0, 2, 0), 6.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 4, 4), 4.0);
    }

    #[test]
    fn identity_1x1_kernel_passes_through() {
        let x = rnd(&[2, 4, 5], 3);
        let mut w = TensorMap::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0; // out0 <- in0
        w.data_mut()[3] = 1.0; // out1 <- in1
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_with_bias_give_constant_map() {
        let x = rnd(&[3, 4, 4], 9);
        let w = TensorMap::zeros(&[2, 3, 3, 3]);
        let b = TensorMap::new(vec![2], vec![0.5, -1.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.5));
        assert!(y.data()[16..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn conv_matches_oracle_on_random_cases() {
        for (seed, (cin, cout, h, w, k, s, p)) in [
            (1u64, (3, 4, 6, 7, 3, 1, 1)),
            (2, (2, 2, 5, 5, 3, 2, 1)),
            (3, (4, 1, 8, 6, 1, 1, 0)),
            (4, (1, 3, 7, 9, 5, 2, 2)),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v.0 + i as u64 * 10, v.1))
        {
            let x = rnd(&[cin, h, w], seed);
            let wt = rnd(&[cout, cin, k, k], seed + 1);
            let b = rnd(&[cout], seed + 2);
            let got = conv2d(&x, &wt, Some(&b), s, p).unwrap();
            let want = conv_oracle(&x, &wt, Some(&b), s, p);
            assert_eq!(got.dims(), want.dims());
            for (a, bb) in got.data().iter().zip(want.data()) {
                assert!((a - bb).abs() < 1e-4, "{a} vs {bb}");
            }
        }
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = TensorMap::zeros(&[1, 6, 6]);
        let w = TensorMap::zeros(&[1, 1, 3, 3]);
        // (6 + 2 - 3) = 5 does not divide by stride 2.
        assert!(conv2d(&x, &w, None, 2, 1).is_err());
        assert!(conv2d(&x, &w, None, 1, 1).is_ok());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = TensorMap::zeros(&[3, 4, 4]);
        let w = TensorMap::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let x = rnd(&[3, 6, 5], 21);
        let w = rnd(&[3, 3, 3], 22);
        for stride in [1, 2] {
            let got = depthwise_conv2d(&x, &w, stride, 1).unwrap();
            for ch in 0..3 {
                let xc = TensorMap::new(vec![1, 6, 5], x.data()[ch * 30..(ch + 1) * 30].to_vec())
                    .unwrap();
                let wc =
                    TensorMap::new(vec![1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec())
                        .unwrap();
                let want = conv_oracle(&xc, &wc, None, stride, 1);
                for oy in 0..got.dims()[1] {
                    for ox in 0..got.dims()[2] {
                        assert!((got.at3(ch, oy, ox) - want.at3(0, oy, ox)).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_stride2_halves_even_and_rounds_odd() {
        let w4 = TensorMap::zeros(&[1, 3, 3]);
        let even = depthwise_conv2d(&TensorMap::zeros(&[1, 8, 8]), &w4, 2, 1).unwrap();
        assert_eq!(even.dims(), &[1, 4, 4]);
        let odd = depthwise_conv2d(&TensorMap::zeros(&[1, 7, 9]), &w4, 2, 1).unwrap();
        assert_eq!(odd.dims(), &[1, 4, 5]);
    }

    #[test]
    fn batch_norm_hand_example() {
        let eps = BN_EPS;
        let x = TensorMap::filled(&[1, 2, 2], 5.0);
        let y = batch_norm(
            &x,
            &TensorMap::filled(&[1], 2.0),
            &TensorMap::filled(&[1], 1.0),
            &TensorMap::filled(&[1], 3.0),
            &TensorMap::filled(&[1], 4.0 - eps),
            eps,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn batch_norm_identity_and_zero_configs() {
        let x = rnd(&[2, 3, 3], 40);
        let ones = TensorMap::filled(&[2], 1.0);
        let zeros = TensorMap::filled(&[2], 0.0);
        let var = TensorMap::filled(&[2], 1.0 - BN_EPS);
        let id = batch_norm(&x, &ones, &zeros, &zeros, &var, BN_EPS).unwrap();
        for (a, b) in id.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let z = batch_norm(&x, &zeros, &zeros, &zeros, &ones, BN_EPS).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let neg = TensorMap::filled(&[2], -0.5);
        assert!(batch_norm(&x, &ones, &zeros, &zeros, &neg, BN_EPS).is_err());
    }

    #[test]
    fn separable_conv_identity_configuration_is_relu() {
        let x = rnd(&[2, 5, 5], 50);
        let mut dw = TensorMap::zeros(&[2, 3, 3]);
        dw.data_mut()[4] = 1.0; // center tap, channel 0
        dw.data_mut()[13] = 1.0; // center tap, channel 1
        let mut pw = TensorMap::zeros(&[2, 2, 1, 1]);
        pw.data_mut()[0] = 1.0;
        pw.data_mut()[3] = 1.0;
        let ones = TensorMap::filled(&[2], 1.0);
        let zeros = TensorMap::filled(&[2], 0.0);
        let var = TensorMap::filled(&[2], 1.0 - BN_EPS);
        let bn = BnParams {
            gamma: &ones,
            beta: &zeros,
            mean: &zeros,
            var: &var,
        };
        let y = separable_conv(&x, &dw, &pw, bn, 1).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b.max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn separable_conv_zero_config_blocks_everything() {
        let x = rnd(&[3, 6, 6], 60);
        let dw = TensorMap::zeros(&[3, 3, 3]);
        let pw = TensorMap::zeros(&[4, 3, 1, 1]);
        let zeros = TensorMap::filled(&[4], 0.0);
        let var = TensorMap::filled(&[4], 1.0);
        let bn = BnParams {
            gamma: &zeros,
            beta: &zeros,
            mean: &zeros,
            var: &var,
        };
        let y = separable_conv(&x, &dw, &pw, bn, 2).unwrap();
        assert_eq!(y.dims(), &[4, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
