//! Attention decoder: scaled dot-product multi-head attention over the
//! flattened RoI positions, a starter vector from attending with the SOS
//! embedding, and a two-layer LSTM that emits one symbol per step until
//! EOS or the step cap.

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ParamKind, WeightStore};
use crate::tensor::TensorMap;

use super::{Charset, RecConfig, RoiPatch, ROI_H, ROI_W};

/// Parameter layout of the recognition head for a vocabulary of `vocab`
/// symbols (specials included). Hidden sizes all equal `cfg.embed_dim`.
pub fn rec_specs(cfg: &RecConfig, vocab: usize) -> Vec<LayerSpec> {
    let e = cfg.embed_dim;
    let mut specs = vec![
        LayerSpec::new(
            "rec.reduce.w",
            &[e, cfg.feature_channels, 1, 1],
            ParamKind::Uniform,
        ),
        LayerSpec::new("rec.reduce.b", &[e], ParamKind::Uniform),
        LayerSpec::new("rec.embed", &[vocab, e], ParamKind::Uniform),
    ];
    for att in ["rec.att1", "rec.att2"] {
        for mat in ["wq", "wk", "wv", "wo"] {
            specs.push(LayerSpec::new(format!("{att}.{mat}"), &[e, e], ParamKind::Uniform));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            specs.push(LayerSpec::new(format!("{att}.{bias}"), &[e], ParamKind::Uniform));
        }
    }
    for lstm in ["rec.lstm1", "rec.lstm2"] {
        specs.push(LayerSpec::new(format!("{lstm}.w_ih"), &[4 * e, e], ParamKind::Uniform));
        specs.push(LayerSpec::new(format!("{lstm}.w_hh"), &[4 * e, e], ParamKind::Uniform));
        specs.push(LayerSpec::new(format!("{lstm}.b"), &[4 * e], ParamKind::LstmBiasInput));
    }
    specs.push(LayerSpec::new("rec.fc.w", &[vocab, 2 * e], ParamKind::Uniform));
    specs.push(LayerSpec::new("rec.fc.b", &[vocab], ParamKind::Uniform));
    specs
}

/// Projection weights of one attention layer: `[E, E]` matrices with
/// `[E]` biases for query, key, value and output.
pub struct AttentionWeights<'a> {
    pub wq: &'a TensorMap,
    pub bq: &'a TensorMap,
    pub wk: &'a TensorMap,
    pub bk: &'a TensorMap,
    pub wv: &'a TensorMap,
    pub bv: &'a TensorMap,
    pub wo: &'a TensorMap,
    pub bo: &'a TensorMap,
}

impl<'a> AttentionWeights<'a> {
    pub fn from_store(ws: &'a WeightStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: ws.get(&format!("{prefix}.wq"))?,
            bq: ws.get(&format!("{prefix}.bq"))?,
            wk: ws.get(&format!("{prefix}.wk"))?,
            bk: ws.get(&format!("{prefix}.bk"))?,
            wv: ws.get(&format!("{prefix}.wv"))?,
            bv: ws.get(&format!("{prefix}.bv"))?,
            wo: ws.get(&format!("{prefix}.wo"))?,
            bo: ws.get(&format!("{prefix}.bo"))?,
        })
    }

    fn check(&self, e: usize) -> Result<()> {
        for (name, m) in [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)] {
            if m.dims() != [e, e] {
                return Err(Error::shape(format!(
                    "attention {name} must be [{e}, {e}], got {:?}",
                    m.dims()
                )));
            }
        }
        for (name, b) in [("bq", self.bq), ("bk", self.bk), ("bv", self.bv), ("bo", self.bo)] {
            if b.dims() != [e] {
                return Err(Error::shape(format!(
                    "attention {name} must be [{e}], got {:?}",
                    b.dims()
                )));
            }
        }
        Ok(())
    }
}

pub struct AttentionOutput {
    /// Fused readout after the output projection, length E.
    pub vector: Vec<f32>,
    /// Attention weights averaged over heads, length L; sums to 1.
    pub attention: Vec<f32>,
}

/// `y = W x + b` with 64-bit accumulation; `w` is `[rows, cols]`.
fn affine(w: &TensorMap, b: Option<&TensorMap>, x: &[f32]) -> Vec<f32> {
    let (rows, cols) = (w.dims()[0], w.dims()[1]);
    debug_assert_eq!(cols, x.len());
    let wd = w.data();
    let mut y = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &wd[r * cols..(r + 1) * cols];
        let mut acc: f64 = b.map_or(0.0, |b| b.data()[r] as f64);
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv as f64 * *xv as f64;
        }
        y.push(acc as f32);
    }
    y
}

/// Key/value projections of one RoI, computed once and shared by every
/// decode step that attends over it.
struct AttentionContext {
    l: usize,
    e: usize,
    heads: usize,
    /// `[L, E]` row-major projected keys and values.
    k: Vec<f32>,
    v: Vec<f32>,
}

impl AttentionContext {
    fn new(kv: &TensorMap, w: &AttentionWeights, heads: usize) -> Result<Self> {
        if kv.rank() != 2 {
            return Err(Error::shape("attention memory must be [L, E]"));
        }
        let (l, e) = (kv.dims()[0], kv.dims()[1]);
        if l == 0 {
            return Err(Error::invalid("attention memory must be nonempty"));
        }
        if heads == 0 || e % heads != 0 {
            return Err(Error::invalid(format!(
                "embedding width {e} is not divisible by {heads} heads"
            )));
        }
        w.check(e)?;
        let mut k = Vec::with_capacity(l * e);
        let mut v = Vec::with_capacity(l * e);
        for pos in 0..l {
            let row = &kv.data()[pos * e..(pos + 1) * e];
            k.extend(affine(w.wk, Some(w.bk), row));
            v.extend(affine(w.wv, Some(w.bv), row));
        }
        Ok(Self { l, e, heads, k, v })
    }

    fn attend(&self, query: &[f32], w: &AttentionWeights) -> Result<AttentionOutput> {
        if query.len() != self.e {
            return Err(Error::shape(format!(
                "query length {} does not match width {}",
                query.len(),
                self.e
            )));
        }
        let q = affine(w.wq, Some(w.bq), query);
        let dh = self.e / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut fused = vec![0f32; self.e];
        let mut avg = vec![0f64; self.l];
        let mut scores = vec![0f64; self.l];
        for h in 0..self.heads {
            let o = h * dh;
            for pos in 0..self.l {
                let krow = &self.k[pos * self.e + o..pos * self.e + o + dh];
                let mut dot = 0f64;
                for (qv, kv) in q[o..o + dh].iter().zip(krow) {
                    dot += *qv as f64 * *kv as f64;
                }
                scores[pos] = dot * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0f64;
            for s in &mut scores {
                *s = (*s - max).exp();
                denom += *s;
            }
            for (pos, s) in scores.iter().enumerate() {
                let a = s / denom;
                avg[pos] += a;
                let vrow = &self.v[pos * self.e + o..pos * self.e + o + dh];
                for (dst, vv) in fused[o..o + dh].iter_mut().zip(vrow) {
                    *dst += (a * *vv as f64) as f32;
                }
            }
        }
        Ok(AttentionOutput {
            vector: affine(w.wo, Some(w.bo), &fused),
            attention: avg
                .into_iter()
                .map(|a| (a / self.heads as f64) as f32)
                .collect(),
        })
    }
}

/// Scaled dot-product attention of one query over `kv` rows, returning
/// the output-projected readout and the head-averaged weights.
pub fn multi_head_attention(
    query: &[f32],
    kv: &TensorMap,
    w: &AttentionWeights,
    heads: usize,
) -> Result<AttentionOutput> {
    AttentionContext::new(kv, w, heads)?.attend(query, w)
}

struct LstmWeights<'a> {
    w_ih: &'a TensorMap,
    w_hh: &'a TensorMap,
    b: &'a TensorMap,
}

impl<'a> LstmWeights<'a> {
    fn from_store(ws: &'a WeightStore, prefix: &str, e: usize) -> Result<Self> {
        let lw = Self {
            w_ih: ws.get(&format!("{prefix}.w_ih"))?,
            w_hh: ws.get(&format!("{prefix}.w_hh"))?,
            b: ws.get(&format!("{prefix}.b"))?,
        };
        if lw.w_ih.dims() != [4 * e, e] || lw.w_hh.dims() != [4 * e, e] || lw.b.dims() != [4 * e] {
            return Err(Error::shape(format!(
                "{prefix} weights do not match hidden size {e}"
            )));
        }
        Ok(lw)
    }
}

struct LstmState {
    h: Vec<f32>,
    c: Vec<f32>,
}

impl LstmState {
    fn zeros(h: usize) -> Self {
        Self {
            h: vec![0.0; h],
            c: vec![0.0; h],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One cell update. Gate order in the stacked weights: input, forget,
/// candidate, output.
fn lstm_step(w: &LstmWeights, x: &[f32], state: &mut LstmState) {
    let n = state.h.len();
    let mut gates = affine(w.w_ih, Some(w.b), x);
    let rec = affine(w.w_hh, None, &state.h);
    for (g, r) in gates.iter_mut().zip(&rec) {
        *g += r;
    }
    for j in 0..n {
        let i = sigmoid(gates[j] as f64);
        let f = sigmoid(gates[n + j] as f64);
        let cand = (gates[2 * n + j] as f64).tanh();
        let o = sigmoid(gates[3 * n + j] as f64);
        let c = f * state.c[j] as f64 + i * cand;
        state.c[j] = c as f32;
        state.h[j] = (o * c.tanh()) as f32;
    }
}

/// Flatten `[E, 8, 32]` RoI features into attention memory `[256, E]`;
/// row `y * 32 + x` holds the channel vector at `(y, x)`.
fn flatten_roi(roi: &RoiPatch, cfg: &RecConfig) -> Result<TensorMap> {
    let dims = roi.features.dims();
    if dims.len() != 3 || dims[1] != ROI_H || dims[2] != ROI_W {
        return Err(Error::shape(format!(
            "RoI patch must be [C, {ROI_H}, {ROI_W}], got {dims:?}"
        )));
    }
    if dims[0] != cfg.embed_dim {
        return Err(Error::shape(format!(
            "decoder expects the reduced {}-channel RoI, got {} channels",
            cfg.embed_dim, dims[0]
        )));
    }
    let e = cfg.embed_dim;
    let l = ROI_H * ROI_W;
    let mut data = vec![0f32; l * e];
    for ch in 0..e {
        for y in 0..ROI_H {
            for x in 0..ROI_W {
                data[(y * ROI_W + x) * e + ch] = roi.features.at3(ch, y, x);
            }
        }
    }
    TensorMap::new(vec![l, e], data)
}

fn embed_row<'a>(embed: &'a TensorMap, id: usize, vocab: usize, e: usize) -> Result<&'a [f32]> {
    if id >= vocab {
        return Err(Error::invalid(format!(
            "symbol id {id} is outside the {vocab}-symbol vocabulary"
        )));
    }
    Ok(&embed.data()[id * e..(id + 1) * e])
}

/// Starter vector: the SOS embedding attends over the flattened RoI.
pub fn start(
    roi: &RoiPatch,
    ws: &WeightStore,
    cfg: &RecConfig,
    charset: &Charset,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let kv = flatten_roi(roi, cfg)?;
    let att1 = AttentionWeights::from_store(ws, "rec.att1")?;
    let embed = ws.get("rec.embed")?;
    check_embed(embed, charset, cfg)?;
    let q = embed_row(embed, charset.sos(), charset.size(), cfg.embed_dim)?;
    Ok(multi_head_attention(q, &kv, &att1, cfg.heads)?.vector)
}

fn check_embed(embed: &TensorMap, charset: &Charset, cfg: &RecConfig) -> Result<()> {
    if embed.dims() != [charset.size(), cfg.embed_dim] {
        return Err(Error::shape(format!(
            "embedding table {:?} does not match vocabulary {} x width {}",
            embed.dims(),
            charset.size(),
            cfg.embed_dim
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    Truncated,
}

/// Greedy (or teacher-forced) decoding result.
#[derive(Clone, Debug)]
pub struct DecodedText {
    /// Emitted symbol ids; ends with EOS when `stop` is `Eos`.
    pub ids: Vec<usize>,
    /// One head-averaged attention row per step, each of length 256.
    pub attention: Vec<Vec<f32>>,
    pub stop: StopReason,
}

/// Run the decoder over one RoI. Greedy mode feeds each argmax back in
/// and stops at EOS or `max_steps`. With `teacher` symbols the inputs
/// are the ground-truth sequence instead and exactly `len + 1` rows of
/// logits come back (the final row is the EOS position), capped at
/// `max_steps`. SOS and PAD never appear in `ids`: their logits are
/// masked to -inf before the argmax.
pub fn decode(
    roi: &RoiPatch,
    ws: &WeightStore,
    cfg: &RecConfig,
    charset: &Charset,
    teacher: Option<&[usize]>,
) -> Result<(DecodedText, TensorMap)> {
    cfg.validate()?;
    let vocab = charset.size();
    let kv = flatten_roi(roi, cfg)?;
    let att1 = AttentionWeights::from_store(ws, "rec.att1")?;
    let att2 = AttentionWeights::from_store(ws, "rec.att2")?;
    let ctx = AttentionContext::new(&kv, &att2, cfg.heads)?;
    let embed = ws.get("rec.embed")?;
    check_embed(embed, charset, cfg)?;
    let lstm1 = LstmWeights::from_store(ws, "rec.lstm1", cfg.embed_dim)?;
    let lstm2 = LstmWeights::from_store(ws, "rec.lstm2", cfg.embed_dim)?;
    let fc_w = ws.get("rec.fc.w")?;
    let fc_b = ws.get("rec.fc.b")?;
    if fc_w.dims() != [vocab, 2 * cfg.embed_dim] || fc_b.dims() != [vocab] {
        return Err(Error::shape(format!(
            "classifier must be [{vocab}, {}] with [{vocab}] bias",
            2 * cfg.embed_dim
        )));
    }
    if let Some(t) = teacher {
        for &id in t {
            if id >= vocab {
                return Err(Error::invalid(format!(
                    "teacher symbol {id} is outside the {vocab}-symbol vocabulary"
                )));
            }
        }
    }

    let q_sos = embed_row(embed, charset.sos(), vocab, cfg.embed_dim)?;
    let f_s = multi_head_attention(q_sos, &kv, &att1, cfg.heads)?.vector;
    let mut s1 = LstmState::zeros(cfg.embed_dim);
    let mut s2 = LstmState::zeros(cfg.embed_dim);

    let steps_cap = match teacher {
        Some(t) => (t.len() + 1).min(cfg.max_steps),
        None => cfg.max_steps,
    };
    let mut ids = Vec::new();
    let mut attention = Vec::new();
    let mut logits_flat = Vec::with_capacity(steps_cap * vocab);
    let mut stop = StopReason::Truncated;
    let mut prev = 0usize;
    for t in 0..steps_cap {
        let x: Vec<f32> = if t == 0 {
            f_s.clone()
        } else {
            let sym = match teacher {
                Some(tt) => tt[t - 1],
                None => prev,
            };
            embed_row(embed, sym, vocab, cfg.embed_dim)?.to_vec()
        };
        lstm_step(&lstm1, &x, &mut s1);
        lstm_step(&lstm2, &s1.h, &mut s2);
        let att = ctx.attend(&s2.h, &att2)?;
        let mut joint = s2.h.clone();
        joint.extend_from_slice(&att.vector);
        let logits = affine(fc_w, Some(fc_b), &joint);
        let mut best = charset.eos();
        let mut best_v = f32::NEG_INFINITY;
        for (v, &lv) in logits.iter().enumerate() {
            if v == charset.sos() || v == charset.pad() {
                continue;
            }
            if lv > best_v {
                best_v = lv;
                best = v;
            }
        }
        logits_flat.extend_from_slice(&logits);
        attention.push(att.attention);
        ids.push(best);
        prev = best;
        if teacher.is_none() && best == charset.eos() {
            stop = StopReason::Eos;
            break;
        }
        if teacher.is_some() && t == steps_cap - 1 && best == charset.eos() {
            stop = StopReason::Eos;
        }
    }
    let t_steps = ids.len();
    Ok((
        DecodedText {
            ids,
            attention,
            stop,
        },
        TensorMap::new(vec![t_steps, vocab], logits_flat)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::rec_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> RecConfig {
        RecConfig {
            feature_channels: 8,
            embed_dim: 16,
            heads: 4,
            max_steps: 6,
        }
    }

    fn seeded_store(cfg: &RecConfig, vocab: usize, seed: u64) -> WeightStore {
        WeightStore::seeded(&rec_specs(cfg, vocab), seed)
    }

    fn random_roi(cfg: &RecConfig, seed: u64) -> RoiPatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RoiPatch {
            features: TensorMap::new(
                vec![cfg.embed_dim, ROI_H, ROI_W],
                (0..cfg.embed_dim * ROI_H * ROI_W)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap(),
            instance_id: 0,
        }
    }

    fn identity_weights(e: usize) -> WeightStore {
        let mut ws = WeightStore::new();
        let mut data = vec![0f32; e * e];
        for i in 0..e {
            data[i * e + i] = 1.0;
        }
        let eye = TensorMap::new(vec![e, e], data).unwrap();
        for m in ["wq", "wk", "wv", "wo"] {
            ws.insert(format!("rec.att1.{m}"), eye.clone());
        }
        for b in ["bq", "bk", "bv", "bo"] {
            ws.insert(format!("rec.att1.{b}"), TensorMap::zeros(&[e]));
        }
        ws
    }

    #[test]
    fn single_position_attention_ignores_query() {
        let e = 4;
        let ws = identity_weights(e);
        let w = AttentionWeights::from_store(&ws, "rec.att1").unwrap();
        let kv = TensorMap::new(vec![1, e], vec![0.3, -0.7, 2.0, 0.1]).unwrap();
        let a = multi_head_attention(&[9.0, -3.0, 0.5, 2.0], &kv, &w, 2).unwrap();
        let b = multi_head_attention(&[0.0; 4], &kv, &w, 2).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.vector, vec![0.3, -0.7, 2.0, 0.1]);
        assert_eq!(a.attention, vec![1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let e = 4;
        let ws = identity_weights(e);
        let w = AttentionWeights::from_store(&ws, "rec.att1").unwrap();
        let row = [0.5f32, 1.5, -1.0, 0.25];
        let l = 5;
        let kv = TensorMap::new(vec![l, e], row.repeat(l)).unwrap();
        let out = multi_head_attention(&[1.0, 2.0, 3.0, 4.0], &kv, &w, 2).unwrap();
        for a in &out.attention {
            assert!((a - 1.0 / l as f32).abs() < 1e-6);
        }
        for (got, want) in out.vector.iter().zip(row) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn two_head_attention_matches_hand_arithmetic() {
        // E=4, 2 heads of width 2, identity projections, L=2.
        // Head 1 sees q=[1,0] against keys [1,0] and [0,1]:
        //   scores (1/sqrt(2), 0) -> softmax (a, 1-a).
        // Head 2 sees q=[0,0]: uniform over two zero value rows.
        let e = 4;
        let ws = identity_weights(e);
        let w = AttentionWeights::from_store(&ws, "rec.att1").unwrap();
        let kv =
            TensorMap::new(vec![2, e], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = multi_head_attention(&[1.0, 0.0, 0.0, 0.0], &kv, &w, 2).unwrap();
        let s = 1.0f64 / 2.0f64.sqrt();
        let a = s.exp() / (s.exp() + 1.0);
        assert!((out.vector[0] as f64 - a).abs() < 1e-6);
        assert!((out.vector[1] as f64 - (1.0 - a)).abs() < 1e-6);
        assert_eq!(&out.vector[2..], &[0.0, 0.0]);
        // Averaged attention mixes head 1's (a, 1-a) with head 2's
        // uniform (0.5, 0.5).
        assert!((out.attention[0] as f64 - (a + 0.5) / 2.0).abs() < 1e-6);
        assert!((out.attention[1] as f64 - (1.5 - a) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let ws = identity_weights(4);
        let w = AttentionWeights::from_store(&ws, "rec.att1").unwrap();
        let kv = TensorMap::zeros(&[2, 4]);
        assert!(multi_head_attention(&[0.0; 4], &kv, &w, 3).is_err());
        assert!(multi_head_attention(&[0.0; 4], &kv, &w, 4).is_ok());
    }

    #[test]
    fn starter_on_zero_roi_is_projected_value_bias() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let ws = seeded_store(&cfg, cs.size(), 11);
        let roi = RoiPatch {
            features: TensorMap::zeros(&[cfg.embed_dim, ROI_H, ROI_W]),
            instance_id: 0,
        };
        let f_s = start(&roi, &ws, &cfg, &cs).unwrap();
        // Zero features project to the value bias everywhere, attention
        // convex-combines identical rows, so f_s = Wo bv + bo.
        let bv: Vec<f32> = ws.get("rec.att1.bv").unwrap().data().to_vec();
        let want = affine(
            ws.get("rec.att1.wo").unwrap(),
            Some(ws.get("rec.att1.bo").unwrap()),
            &bv,
        );
        for (g, w) in f_s.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn starter_on_constant_roi_ignores_query_projection() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let ws_a = seeded_store(&cfg, cs.size(), 3);
        let mut ws_b = ws_a.clone();
        ws_b.insert(
            "rec.att1.wq",
            TensorMap::filled(&[cfg.embed_dim, cfg.embed_dim], 0.37),
        );
        let roi = RoiPatch {
            features: TensorMap::filled(&[cfg.embed_dim, ROI_H, ROI_W], 0.8),
            instance_id: 0,
        };
        let a = start(&roi, &ws_a, &cfg, &cs).unwrap();
        let b = start(&roi, &ws_b, &cfg, &cs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    /// Zero weights except a fixed classifier bias: whatever the LSTM
    /// does, the argmax is dictated by `fc.b`.
    fn forced_store(cfg: &RecConfig, vocab: usize, favored: usize) -> WeightStore {
        let mut ws = WeightStore::zeroed(&rec_specs(cfg, vocab));
        let mut b = vec![0f32; vocab];
        b[favored] = 5.0;
        ws.insert("rec.fc.b", TensorMap::new(vec![vocab], b).unwrap());
        ws
    }

    #[test]
    fn forced_eos_stops_after_one_step() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let ws = forced_store(&cfg, cs.size(), cs.eos());
        let (text, logits) = decode(&random_roi(&cfg, 1), &ws, &cfg, &cs, None).unwrap();
        assert_eq!(text.ids, vec![cs.eos()]);
        assert_eq!(text.stop, StopReason::Eos);
        assert_eq!(logits.dims(), [1, cs.size()]);
        assert_eq!(text.attention.len(), 1);
    }

    #[test]
    fn forced_symbol_runs_to_the_step_cap() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let a = cs.encode("a").unwrap()[0];
        let ws = forced_store(&cfg, cs.size(), a);
        let (text, logits) = decode(&random_roi(&cfg, 2), &ws, &cfg, &cs, None).unwrap();
        assert_eq!(text.ids, vec![a; cfg.max_steps]);
        assert_eq!(text.stop, StopReason::Truncated);
        assert_eq!(logits.dims(), [cfg.max_steps, cs.size()]);
    }

    #[test]
    fn sos_and_pad_are_never_emitted() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let mut ws = seeded_store(&cfg, cs.size(), 17);
        // Rig the classifier so the unmasked argmax would be SOS or PAD
        // at every step.
        let mut b = ws.get("rec.fc.b").unwrap().data().to_vec();
        b[cs.sos()] += 10.0;
        b[cs.pad()] += 9.5;
        ws.insert("rec.fc.b", TensorMap::new(vec![cs.size()], b).unwrap());
        let (text, logits) = decode(&random_roi(&cfg, 3), &ws, &cfg, &cs, None).unwrap();
        assert!(!text.ids.is_empty());
        for &id in &text.ids {
            assert_ne!(id, cs.sos());
            assert_ne!(id, cs.pad());
        }
        // The rigged rows really were the raw argmax.
        let row = &logits.data()[..cs.size()];
        let unmasked = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(unmasked, cs.sos());
    }

    #[test]
    fn teacher_forcing_is_causal_bit_for_bit() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let ws = seeded_store(&cfg, cs.size(), 29);
        let roi = random_roi(&cfg, 4);
        let t1 = [0usize, 1, 2];
        let t2 = [0usize, 1, 7];
        let (_, l1) = decode(&roi, &ws, &cfg, &cs, Some(&t1)).unwrap();
        let (_, l2) = decode(&roi, &ws, &cfg, &cs, Some(&t2)).unwrap();
        assert_eq!(l1.dims(), [4, cs.size()]);
        let v = cs.size();
        // Rows 0..=2 precede the changed input; row 3 consumes it.
        for t in 0..3 {
            let r1 = &l1.data()[t * v..(t + 1) * v];
            let r2 = &l2.data()[t * v..(t + 1) * v];
            assert!(
                r1.iter().zip(r2).all(|(a, b)| a.to_bits() == b.to_bits()),
                "row {t} changed"
            );
        }
        let r1 = &l1.data()[3 * v..4 * v];
        let r2 = &l2.data()[3 * v..4 * v];
        assert!(r1.iter().zip(r2).any(|(a, b)| a.to_bits() != b.to_bits()));
    }

    #[test]
    fn teacher_logits_feed_the_recognition_loss() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let ws = seeded_store(&cfg, cs.size(), 5);
        let target = cs.encode("cat").unwrap();
        let (_, logits) = decode(&random_roi(&cfg, 6), &ws, &cfg, &cs, Some(&target)).unwrap();
        let mut full = target.clone();
        full.push(cs.eos());
        let loss = rec_loss(&logits, &full).unwrap();
        assert!(loss.value.is_finite() && loss.value > 0.0);
    }

    #[test]
    fn decoding_is_deterministic_and_attention_rows_normalized() {
        let cfg = small_cfg();
        let cs = Charset::latin();
        let ws = seeded_store(&cfg, cs.size(), 41);
        let roi = random_roi(&cfg, 8);
        let (ta, la) = decode(&roi, &ws, &cfg, &cs, None).unwrap();
        let (tb, lb) = decode(&roi, &ws, &cfg, &cs, None).unwrap();
        assert_eq!(ta.ids, tb.ids);
        assert!(la
            .data()
            .iter()
            .zip(lb.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(ta.ids.len() <= cfg.max_steps);
        for row in &ta.attention {
            assert_eq!(row.len(), ROI_H * ROI_W);
            let sum: f64 = row.iter().map(|&a| a as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-5, "attention row sums to {sum}");
        }
    }
}
