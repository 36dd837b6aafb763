//! Training objectives as pure functions with analytic gradients.
//!
//! Values accumulate in f64 and gradients are returned as f32 tensors
//! matching their input dims. Every gradient here is validated against
//! central finite differences (see [`fd`]).

pub mod fd;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labelgen::{InstanceLabelMap, LabelSet};
use crate::tensor::TensorMap;

/// A scalar loss plus named gradients w.r.t. the prediction inputs.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: BTreeMap<String, TensorMap>,
}

impl LossValue {
    fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn grad(&self, name: &str) -> Option<&TensorMap> {
        self.grads.get(name)
    }
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    /// Weight of the kernel dice term.
    pub alpha: f64,
    /// Weight of the two embedding terms.
    pub beta: f64,
    /// Pull margin: text pixels closer than this to their kernel mean
    /// contribute nothing.
    pub delta_agg: f64,
    /// Push margin between kernel means and against background pixels.
    pub delta_dis: f64,
    /// Hard-negative quota as a multiple of the positive count.
    pub ohem_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.25,
            delta_agg: 0.5,
            delta_dis: 3.0,
            ohem_ratio: 3.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta_agg", self.delta_agg),
            ("delta_dis", self.delta_dis),
            ("ohem_ratio", self.ohem_ratio),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "loss config {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

const DICE_EPS: f64 = 1e-6;

/// Soft overlap loss `1 - (2 Σ p g + eps)/(Σ p² + Σ g² + eps)` over the
/// pixels where `valid` is set. An all-zero valid mask yields exactly 0
/// because the epsilon appears in both numerator and denominator.
pub fn dice_loss(p: &TensorMap, g: &TensorMap, valid: &TensorMap) -> Result<LossValue> {
    if p.dims() != g.dims() || p.dims() != valid.dims() {
        return Err(Error::shape(format!(
            "dice_loss dims differ: p {:?}, g {:?}, valid {:?}",
            p.dims(),
            g.dims(),
            valid.dims()
        )));
    }
    let mut num = DICE_EPS;
    let mut den = DICE_EPS;
    for i in 0..p.len() {
        if valid.data()[i] > 0.5 {
            let (pv, gv) = (p.data()[i] as f64, g.data()[i] as f64);
            num += 2.0 * pv * gv;
            den += pv * pv + gv * gv;
        }
    }
    let mut lv = LossValue::new(1.0 - num / den);
    let mut grad = vec![0f32; p.len()];
    for i in 0..p.len() {
        if valid.data()[i] > 0.5 {
            let (pv, gv) = (p.data()[i] as f64, g.data()[i] as f64);
            grad[i] = ((2.0 * num * pv - 2.0 * gv * den) / (den * den)) as f32;
        }
    }
    lv.grads
        .insert("p".into(), TensorMap::new(p.dims().to_vec(), grad).unwrap());
    Ok(lv)
}

/// Keeps every non-ignored positive pixel plus the `ratio * positives`
/// highest-scoring negatives. Ties are broken by lowest flat index so
/// the mask is deterministic; with no positives all negatives stay in.
pub fn ohem_mask(
    p_tex: &TensorMap,
    g_tex: &TensorMap,
    ignore: &TensorMap,
    ratio: f64,
) -> Result<TensorMap> {
    if p_tex.dims() != g_tex.dims() || p_tex.dims() != ignore.dims() {
        return Err(Error::shape("ohem_mask inputs must share dims"));
    }
    let mut mask = vec![0f32; p_tex.len()];
    let mut negatives: Vec<(usize, f32)> = Vec::new();
    let mut n_pos = 0usize;
    for i in 0..p_tex.len() {
        if ignore.data()[i] > 0.5 {
            continue;
        }
        if g_tex.data()[i] > 0.5 {
            mask[i] = 1.0;
            n_pos += 1;
        } else {
            negatives.push((i, p_tex.data()[i]));
        }
    }
    let quota = if n_pos == 0 {
        negatives.len()
    } else {
        ((ratio * n_pos as f64).floor() as usize).min(negatives.len())
    };
    negatives.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("probabilities are never NaN")
            .then(a.0.cmp(&b.0))
    });
    for &(i, _) in &negatives[..quota] {
        mask[i] = 1.0;
    }
    Ok(TensorMap::new(p_tex.dims().to_vec(), mask).unwrap())
}

/// Per-instance geometry shared by the two embedding losses: text
/// pixels, kernel pixels, and the kernel's mean embedding.
pub(crate) struct InstanceEmb {
    pub text: Vec<(usize, usize)>,
    pub kernel: Vec<(usize, usize)>,
    pub mean: Vec<f64>,
}

pub(crate) fn collect_instances(
    emb: &TensorMap,
    instances: &InstanceLabelMap,
    kernels: &InstanceLabelMap,
) -> Result<Vec<InstanceEmb>> {
    if emb.rank() != 3 {
        return Err(Error::shape("embedding map must be [D,H,W]"));
    }
    let (h, w) = (emb.dims()[1], emb.dims()[2]);
    if instances.h() != h || instances.w() != w || kernels.h() != h || kernels.w() != w {
        return Err(Error::shape(format!(
            "label maps {}x{} do not match embedding {h}x{w}",
            instances.h(),
            instances.w()
        )));
    }
    let d = emb.dims()[0];
    let top = instances.max_label().max(kernels.max_label());
    let mut out = Vec::new();
    for id in 1..=top {
        let text = instances.pixels_of(id);
        let kernel = kernels.pixels_of(id);
        // An instance whose kernel vanished cannot define a mean; it is
        // left out of the count entirely.
        if kernel.is_empty() || text.is_empty() {
            continue;
        }
        let mut mean = vec![0f64; d];
        for &(r, c) in &kernel {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += emb.at3(ch, r, c) as f64;
            }
        }
        for m in &mut mean {
            *m /= kernel.len() as f64;
        }
        out.push(InstanceEmb { text, kernel, mean });
    }
    Ok(out)
}

/// Euclidean distance from one pixel's embedding to a mean vector.
pub(crate) fn emb_pixel_distance(emb: &TensorMap, r: usize, c: usize, mean: &[f64]) -> f64 {
    emb_diff(emb, r, c, mean).1
}

fn emb_diff(emb: &TensorMap, r: usize, c: usize, mean: &[f64]) -> (Vec<f64>, f64) {
    let diff: Vec<f64> = mean
        .iter()
        .enumerate()
        .map(|(ch, m)| emb.at3(ch, r, c) as f64 - m)
        .collect();
    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    (diff, dist)
}

fn narrow_grad(dims: &[usize], grad: Vec<f64>) -> TensorMap {
    TensorMap::new(dims.to_vec(), grad.into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Pulls each text pixel toward its instance's kernel mean embedding:
/// mean over instances of the mean over text pixels of
/// `ln(relu(dist - delta_agg)² + 1)`.
pub fn agg_loss(
    emb: &TensorMap,
    instances: &InstanceLabelMap,
    kernels: &InstanceLabelMap,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let insts = collect_instances(emb, instances, kernels)?;
    let (h, w) = (emb.dims()[1], emb.dims()[2]);
    let (hw, d) = (h * w, emb.dims()[0]);
    let n = insts.len();
    let mut lv = LossValue::new(0.0);
    let mut grad = vec![0f64; emb.len()];
    if n > 0 {
        let mut total = 0.0;
        for inst in &insts {
            let t_n = inst.text.len() as f64;
            let mut inst_sum = 0.0;
            // Gradient flowing into the kernel mean, distributed to the
            // kernel pixels afterwards.
            let mut mean_grad = vec![0f64; d];
            for &(r, c) in &inst.text {
                let (diff, dist) = emb_diff(emb, r, c, &inst.mean);
                let excess = dist - cfg.delta_agg;
                if excess > 0.0 {
                    inst_sum += (excess * excess + 1.0).ln();
                    let coeff =
                        2.0 * excess / (excess * excess + 1.0) / dist / (n as f64 * t_n);
                    for ch in 0..d {
                        let g = coeff * diff[ch];
                        grad[ch * hw + r * w + c] += g;
                        mean_grad[ch] -= g;
                    }
                }
            }
            let share = 1.0 / inst.kernel.len() as f64;
            for &(r, c) in &inst.kernel {
                for ch in 0..d {
                    grad[ch * hw + r * w + c] += mean_grad[ch] * share;
                }
            }
            total += inst_sum / t_n;
        }
        lv.value = total / n as f64;
    }
    lv.grads.insert("emb".into(), narrow_grad(emb.dims(), grad));
    Ok(lv)
}

/// Pushes kernel means apart and away from background pixels:
/// `(1/N²) Σ_i [ bg(i) + Σ_{j≠i} ln(relu(delta_dis - ‖G_i - G_j‖)² + 1) ]`
/// where `bg(i)` averages the same penalty over every non-ignored pixel
/// with `g_tex = 0`.
pub fn dis_loss(
    emb: &TensorMap,
    instances: &InstanceLabelMap,
    kernels: &InstanceLabelMap,
    g_tex: &TensorMap,
    ignore: &TensorMap,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let insts = collect_instances(emb, instances, kernels)?;
    let (h, w) = (emb.dims()[1], emb.dims()[2]);
    let (hw, d) = (h * w, emb.dims()[0]);
    if g_tex.dims() != [1, h, w] || ignore.dims() != [1, h, w] {
        return Err(Error::shape("dis_loss masks must be [1,H,W]"));
    }
    let n = insts.len();
    let mut lv = LossValue::new(0.0);
    let mut grad = vec![0f64; emb.len()];
    if n > 0 {
        let background: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| g_tex.at3(0, r, c) <= 0.5 && ignore.at3(0, r, c) <= 0.5)
            .collect();
        let inv_n2 = 1.0 / (n * n) as f64;
        let mut total = 0.0;
        let mut mean_grads = vec![vec![0f64; d]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let diff: Vec<f64> = (0..d)
                    .map(|ch| insts[i].mean[ch] - insts[j].mean[ch])
                    .collect();
                let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                let gap = cfg.delta_dis - dist;
                if gap > 0.0 {
                    total += (gap * gap + 1.0).ln();
                    if dist > 0.0 {
                        // Only G_i's side; the (j,i) iteration covers G_j.
                        let coeff = -2.0 * gap / (gap * gap + 1.0) / dist * inv_n2;
                        for ch in 0..d {
                            mean_grads[i][ch] += coeff * diff[ch];
                            mean_grads[j][ch] -= coeff * diff[ch];
                        }
                    }
                }
            }
            if !background.is_empty() {
                let inv_b = 1.0 / background.len() as f64;
                for &(r, c) in &background {
                    let (diff, dist) = emb_diff(emb, r, c, &insts[i].mean);
                    let gap = cfg.delta_dis - dist;
                    if gap > 0.0 {
                        total += (gap * gap + 1.0).ln() * inv_b;
                        if dist > 0.0 {
                            let coeff =
                                -2.0 * gap / (gap * gap + 1.0) / dist * inv_b * inv_n2;
                            for ch in 0..d {
                                grad[ch * hw + r * w + c] += coeff * diff[ch];
                                mean_grads[i][ch] -= coeff * diff[ch];
                            }
                        }
                    }
                }
            }
        }
        for (inst, mg) in insts.iter().zip(&mean_grads) {
            let share = 1.0 / inst.kernel.len() as f64;
            for &(r, c) in &inst.kernel {
                for ch in 0..d {
                    grad[ch * hw + r * w + c] += mg[ch] * share;
                }
            }
        }
        lv.value = total * inv_n2;
    }
    lv.grads.insert("emb".into(), narrow_grad(emb.dims(), grad));
    Ok(lv)
}

/// Full detection objective: hard-mined text dice + `alpha` * kernel dice
/// (scored only on ground-truth text pixels) + `beta` * (pull + push).
/// The mined mask is treated as constant for gradient purposes.
pub fn det_loss(
    p_tex: &TensorMap,
    p_ker: &TensorMap,
    emb: &TensorMap,
    labels: &LabelSet,
    cfg: &LossConfig,
) -> Result<LossValue> {
    if p_tex.dims() != labels.g_tex.dims() || p_ker.dims() != labels.g_ker.dims() {
        return Err(Error::shape("det_loss prediction dims do not match labels"));
    }
    let selected = ohem_mask(p_tex, &labels.g_tex, &labels.ignore_mask, cfg.ohem_ratio)?;
    let l_tex = dice_loss(p_tex, &labels.g_tex, &selected)?;
    let l_ker = dice_loss(p_ker, &labels.g_ker, &labels.g_tex)?;
    let l_agg = agg_loss(emb, &labels.instances, &labels.kernel_instances, cfg)?;
    let l_dis = dis_loss(
        emb,
        &labels.instances,
        &labels.kernel_instances,
        &labels.g_tex,
        &labels.ignore_mask,
        cfg,
    )?;
    let mut lv = LossValue::new(
        l_tex.value + cfg.alpha * l_ker.value + cfg.beta * (l_agg.value + l_dis.value),
    );
    let alpha = cfg.alpha as f32;
    let beta = cfg.beta as f32;
    lv.grads.insert("p_tex".into(), l_tex.grads["p"].clone());
    lv.grads
        .insert("p_ker".into(), l_ker.grads["p"].map(|v| v * alpha));
    let emb_grad = l_agg.grads["emb"]
        .add(&l_dis.grads["emb"])?
        .map(|v| v * beta);
    lv.grads.insert("emb".into(), emb_grad);
    Ok(lv)
}

/// Mean cross-entropy between `softmax(logits[t])` and `target[t]` over
/// the target positions (the trailing EOS included). Rows past the
/// target get zero gradient.
pub fn rec_loss(logits: &TensorMap, target: &[usize]) -> Result<LossValue> {
    if logits.rank() != 2 {
        return Err(Error::shape("rec_loss logits must be [T,V]"));
    }
    let (t_steps, v) = (logits.dims()[0], logits.dims()[1]);
    if target.is_empty() {
        return Err(Error::invalid("rec_loss target must contain at least EOS"));
    }
    if target.len() > t_steps {
        return Err(Error::invalid(format!(
            "rec_loss target has {} symbols but logits only {t_steps} steps",
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&id| id >= v) {
        return Err(Error::invalid(format!(
            "rec_loss target id {bad} outside vocabulary of {v}"
        )));
    }
    let inv_len = 1.0 / target.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0f64; logits.len()];
    for (t, &tgt) in target.iter().enumerate() {
        let row: Vec<f64> = (0..v).map(|j| logits.at2(t, j) as f64).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += logsum - row[tgt];
        for j in 0..v {
            let soft = (row[j] - logsum).exp();
            grad[t * v + j] = (soft - if j == tgt { 1.0 } else { 0.0 }) * inv_len;
        }
    }
    let mut lv = LossValue::new(total * inv_len);
    lv.grads
        .insert("logits".into(), narrow_grad(logits.dims(), grad));
    Ok(lv)
}
