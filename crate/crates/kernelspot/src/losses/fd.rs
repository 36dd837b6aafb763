//! Central-difference verification of analytic gradients.
//!
//! Each probe owns a fixture, exposes its inputs as flat coordinate
//! spaces, and reports a per-coordinate "kink margin": the largest
//! perturbation guaranteed not to cross a hinge boundary (ReLU edges in
//! the embedding losses, selection flips in hard-example mining).
//! Coordinates whose margin is within two epsilons of a kink are skipped
//! rather than allowed to flake.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::labelgen::{InstanceLabelMap, LabelSet};
use crate::tensor::TensorMap;

use super::{
    agg_loss, collect_instances, det_loss, dice_loss, dis_loss, emb_pixel_distance, ohem_mask,
    rec_loss, LossConfig, LossValue,
};

pub trait LossProbe {
    fn name(&self) -> &'static str;
    /// Input names with their flat coordinate counts.
    fn inputs(&self) -> Vec<(&'static str, usize)>;
    fn base(&self) -> LossValue;
    /// Loss value with one coordinate of one input shifted by `delta`.
    fn value_perturbed(&self, input: &str, idx: usize, delta: f64) -> f64;
    /// Safe perturbation radius before any non-smooth boundary.
    fn kink_margin(&self, _input: &str, _idx: usize) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone)]
pub struct FdOutcome {
    pub probe: String,
    pub checked: usize,
    pub skipped_near_kink: usize,
    pub max_rel_err: f64,
}

impl FdOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

/// Compares analytic gradients against `(f(x+e) - f(x-e)) / 2e` on at
/// least `min_coords` randomly chosen coordinates per input (all of
/// them when the input is small). Relative error uses a 1e-4 floor so
/// near-zero gradients are compared absolutely.
pub fn finite_diff_check(
    probe: &dyn LossProbe,
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> FdOutcome {
    let base = probe.base();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FdOutcome {
        probe: probe.name().to_string(),
        checked: 0,
        skipped_near_kink: 0,
        max_rel_err: 0.0,
    };
    for (input, len) in probe.inputs() {
        let grad = base
            .grads
            .get(input)
            .unwrap_or_else(|| panic!("probe {} has no gradient for {input}", probe.name()));
        assert_eq!(grad.len(), len, "gradient length mismatch for {input}");
        let picks: Vec<usize> = if len <= min_coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, min_coords).into_vec()
        };
        for idx in picks {
            if probe.kink_margin(input, idx) <= 2.0 * eps {
                out.skipped_near_kink += 1;
                continue;
            }
            let plus = probe.value_perturbed(input, idx, eps);
            let minus = probe.value_perturbed(input, idx, -eps);
            let fd = (plus - minus) / (2.0 * eps);
            let an = grad.data()[idx] as f64;
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
            }
            out.checked += 1;
        }
    }
    out
}

fn perturbed(t: &TensorMap, idx: usize, delta: f64) -> TensorMap {
    let mut c = t.clone();
    c.data_mut()[idx] = (t.data()[idx] as f64 + delta) as f32;
    c
}

fn rnd(dims: &[usize], lo: f32, hi: f32, seed: u64) -> TensorMap {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = dims.iter().product();
    TensorMap::new(
        dims.to_vec(),
        (0..len).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Per-pixel safe radius for the pull loss: distance (halved, since a
/// coordinate can move both a pixel and its kernel mean) from each
/// active term to its ReLU edge, folded over every term a coordinate
/// influences.
fn agg_margins(
    emb: &TensorMap,
    instances: &InstanceLabelMap,
    kernels: &InstanceLabelMap,
    cfg: &LossConfig,
) -> Vec<f64> {
    let (h, w) = (emb.dims()[1], emb.dims()[2]);
    let mut margins = vec![f64::INFINITY; h * w];
    let insts = collect_instances(emb, instances, kernels).unwrap();
    for inst in &insts {
        let mut inst_min = f64::INFINITY;
        for &(r, c) in &inst.text {
            let dist = emb_pixel_distance(emb, r, c, &inst.mean);
            let m = (dist - cfg.delta_agg).abs() / 2.0;
            inst_min = inst_min.min(m);
            let cell = &mut margins[r * w + c];
            *cell = cell.min(m);
        }
        for &(r, c) in &inst.kernel {
            let cell = &mut margins[r * w + c];
            *cell = cell.min(inst_min);
        }
    }
    margins
}

/// Same idea for the push loss: kernel-mean pair terms and background
/// terms, including the distance-zero direction singularity.
fn dis_margins(
    emb: &TensorMap,
    instances: &InstanceLabelMap,
    kernels: &InstanceLabelMap,
    g_tex: &TensorMap,
    ignore: &TensorMap,
    cfg: &LossConfig,
) -> Vec<f64> {
    let (h, w) = (emb.dims()[1], emb.dims()[2]);
    let mut margins = vec![f64::INFINITY; h * w];
    let insts = collect_instances(emb, instances, kernels).unwrap();
    let n = insts.len();
    let mut inst_min = vec![f64::INFINITY; n];
    for i in 0..n {
        for (j, other) in insts.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = insts[i]
                .mean
                .iter()
                .zip(&other.mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            inst_min[i] = inst_min[i].min((cfg.delta_dis - d).abs().min(d) / 2.0);
        }
    }
    for r in 0..h {
        for c in 0..w {
            if g_tex.at3(0, r, c) <= 0.5 && ignore.at3(0, r, c) <= 0.5 {
                let mut px_min = f64::INFINITY;
                for (i, inst) in insts.iter().enumerate() {
                    let d = emb_pixel_distance(emb, r, c, &inst.mean);
                    let m = (cfg.delta_dis - d).abs().min(d) / 2.0;
                    px_min = px_min.min(m);
                    inst_min[i] = inst_min[i].min(m);
                }
                margins[r * w + c] = margins[r * w + c].min(px_min);
            }
        }
    }
    for (i, inst) in insts.iter().enumerate() {
        for &(r, c) in &inst.kernel {
            let cell = &mut margins[r * w + c];
            *cell = cell.min(inst_min[i]);
        }
    }
    margins
}

/// Distance of each non-ignored negative to the mined-selection
/// boundary; positives and ignored pixels can't flip, so they are
/// unbounded.
fn ohem_margins(p_tex: &TensorMap, g_tex: &TensorMap, ignore: &TensorMap, ratio: f64) -> Vec<f64> {
    let mask = ohem_mask(p_tex, g_tex, ignore, ratio).unwrap();
    let mut sel_min = f64::INFINITY;
    let mut unsel_max = f64::NEG_INFINITY;
    for i in 0..p_tex.len() {
        if g_tex.data()[i] > 0.5 || ignore.data()[i] > 0.5 {
            continue;
        }
        let s = p_tex.data()[i] as f64;
        if mask.data()[i] > 0.5 {
            sel_min = sel_min.min(s);
        } else {
            unsel_max = unsel_max.max(s);
        }
    }
    (0..p_tex.len())
        .map(|i| {
            if g_tex.data()[i] > 0.5 || ignore.data()[i] > 0.5 {
                f64::INFINITY
            } else if mask.data()[i] > 0.5 {
                (p_tex.data()[i] as f64 - unsel_max).max(0.0) / 2.0
            } else {
                (sel_min - p_tex.data()[i] as f64).max(0.0) / 2.0
            }
        })
        .collect()
}

/// A 16x16 dice fixture with a partly-invalid mask.
pub struct DiceProbe {
    p: TensorMap,
    g: TensorMap,
    valid: TensorMap,
}

impl DiceProbe {
    pub fn random(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = TensorMap::new(
            vec![1, 16, 16],
            (0..256).map(|_| f32::from(rng.random_bool(0.4))).collect(),
        )
        .unwrap();
        let valid = TensorMap::new(
            vec![1, 16, 16],
            (0..256).map(|_| f32::from(rng.random_bool(0.85))).collect(),
        )
        .unwrap();
        Self {
            p: rnd(&[1, 16, 16], 0.05, 0.95, seed.wrapping_add(1)),
            g,
            valid,
        }
    }
}

impl LossProbe for DiceProbe {
    fn name(&self) -> &'static str {
        "dice_loss"
    }
    fn inputs(&self) -> Vec<(&'static str, usize)> {
        vec![("p", self.p.len())]
    }
    fn base(&self) -> LossValue {
        dice_loss(&self.p, &self.g, &self.valid).unwrap()
    }
    fn value_perturbed(&self, _input: &str, idx: usize, delta: f64) -> f64 {
        dice_loss(&perturbed(&self.p, idx, delta), &self.g, &self.valid)
            .unwrap()
            .value
    }
}

fn two_instance_maps(h: usize, w: usize) -> (InstanceLabelMap, InstanceLabelMap) {
    let mut inst = InstanceLabelMap::new(h, w);
    let mut ker = InstanceLabelMap::new(h, w);
    for r in 2..7 {
        for c in 2..14 {
            inst.set(r, c, 1);
        }
    }
    for r in 3..6 {
        for c in 4..12 {
            ker.set(r, c, 1);
        }
    }
    for r in 9..14 {
        for c in 2..14 {
            inst.set(r, c, 2);
        }
    }
    for r in 10..13 {
        for c in 4..12 {
            ker.set(r, c, 2);
        }
    }
    (inst, ker)
}

/// Two-instance 16x16 pull-loss fixture, embedding dim 4.
pub struct AggProbe {
    emb: TensorMap,
    instances: InstanceLabelMap,
    kernels: InstanceLabelMap,
    cfg: LossConfig,
    margins: Vec<f64>,
}

impl AggProbe {
    pub fn random(seed: u64) -> Self {
        let (instances, kernels) = two_instance_maps(16, 16);
        let emb = rnd(&[4, 16, 16], -1.0, 1.0, seed);
        let cfg = LossConfig::default();
        let margins = agg_margins(&emb, &instances, &kernels, &cfg);
        Self {
            emb,
            instances,
            kernels,
            cfg,
            margins,
        }
    }
}

impl LossProbe for AggProbe {
    fn name(&self) -> &'static str {
        "agg_loss"
    }
    fn inputs(&self) -> Vec<(&'static str, usize)> {
        vec![("emb", self.emb.len())]
    }
    fn base(&self) -> LossValue {
        agg_loss(&self.emb, &self.instances, &self.kernels, &self.cfg).unwrap()
    }
    fn value_perturbed(&self, _input: &str, idx: usize, delta: f64) -> f64 {
        agg_loss(
            &perturbed(&self.emb, idx, delta),
            &self.instances,
            &self.kernels,
            &self.cfg,
        )
        .unwrap()
        .value
    }
    fn kink_margin(&self, _input: &str, idx: usize) -> f64 {
        self.margins[idx % (16 * 16)]
    }
}

/// Same fixture shape for the push loss, with a background and an
/// ignored strip.
pub struct DisProbe {
    emb: TensorMap,
    instances: InstanceLabelMap,
    kernels: InstanceLabelMap,
    g_tex: TensorMap,
    ignore: TensorMap,
    cfg: LossConfig,
    margins: Vec<f64>,
}

impl DisProbe {
    pub fn random(seed: u64) -> Self {
        let (instances, kernels) = two_instance_maps(16, 16);
        let emb = rnd(&[4, 16, 16], -1.0, 1.0, seed);
        let g_tex = instances.binarize();
        let mut ignore = TensorMap::zeros(&[1, 16, 16]);
        for c in 0..16 {
            ignore.set3(0, 15, c, 1.0);
        }
        let cfg = LossConfig::default();
        let margins = dis_margins(&emb, &instances, &kernels, &g_tex, &ignore, &cfg);
        Self {
            emb,
            instances,
            kernels,
            g_tex,
            ignore,
            cfg,
            margins,
        }
    }
}

impl LossProbe for DisProbe {
    fn name(&self) -> &'static str {
        "dis_loss"
    }
    fn inputs(&self) -> Vec<(&'static str, usize)> {
        vec![("emb", self.emb.len())]
    }
    fn base(&self) -> LossValue {
        dis_loss(
            &self.emb,
            &self.instances,
            &self.kernels,
            &self.g_tex,
            &self.ignore,
            &self.cfg,
        )
        .unwrap()
    }
    fn value_perturbed(&self, _input: &str, idx: usize, delta: f64) -> f64 {
        dis_loss(
            &perturbed(&self.emb, idx, delta),
            &self.instances,
            &self.kernels,
            &self.g_tex,
            &self.ignore,
            &self.cfg,
        )
        .unwrap()
        .value
    }
    fn kink_margin(&self, _input: &str, idx: usize) -> f64 {
        self.margins[idx % (16 * 16)]
    }
}

/// Full detection objective over all three prediction maps.
pub struct DetProbe {
    p_tex: TensorMap,
    p_ker: TensorMap,
    emb: TensorMap,
    labels: LabelSet,
    cfg: LossConfig,
    tex_margins: Vec<f64>,
    emb_margins: Vec<f64>,
}

impl DetProbe {
    pub fn random(seed: u64) -> Self {
        let (instances, kernels) = two_instance_maps(16, 16);
        let g_tex = instances.binarize();
        let g_ker = kernels.binarize();
        let mut ignore = TensorMap::zeros(&[1, 16, 16]);
        for c in 0..16 {
            ignore.set3(0, 0, c, 1.0);
        }
        let labels = LabelSet {
            g_tex,
            g_ker,
            instances,
            kernel_instances: kernels,
            ignore_mask: ignore,
        };
        let p_tex = rnd(&[1, 16, 16], 0.05, 0.95, seed);
        let p_ker = rnd(&[1, 16, 16], 0.05, 0.95, seed.wrapping_add(1));
        let emb = rnd(&[4, 16, 16], -1.0, 1.0, seed.wrapping_add(2));
        let cfg = LossConfig::default();
        let tex_margins =
            ohem_margins(&p_tex, &labels.g_tex, &labels.ignore_mask, cfg.ohem_ratio);
        let agg = agg_margins(&emb, &labels.instances, &labels.kernel_instances, &cfg);
        let dis = dis_margins(
            &emb,
            &labels.instances,
            &labels.kernel_instances,
            &labels.g_tex,
            &labels.ignore_mask,
            &cfg,
        );
        let emb_margins = agg.iter().zip(&dis).map(|(a, b)| a.min(*b)).collect();
        Self {
            p_tex,
            p_ker,
            emb,
            labels,
            cfg,
            tex_margins,
            emb_margins,
        }
    }

    fn eval(&self, p_tex: &TensorMap, p_ker: &TensorMap, emb: &TensorMap) -> f64 {
        det_loss(p_tex, p_ker, emb, &self.labels, &self.cfg)
            .unwrap()
            .value
    }
}

impl LossProbe for DetProbe {
    fn name(&self) -> &'static str {
        "det_loss"
    }
    fn inputs(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("p_tex", self.p_tex.len()),
            ("p_ker", self.p_ker.len()),
            ("emb", self.emb.len()),
        ]
    }
    fn base(&self) -> LossValue {
        det_loss(&self.p_tex, &self.p_ker, &self.emb, &self.labels, &self.cfg).unwrap()
    }
    fn value_perturbed(&self, input: &str, idx: usize, delta: f64) -> f64 {
        match input {
            "p_tex" => self.eval(&perturbed(&self.p_tex, idx, delta), &self.p_ker, &self.emb),
            "p_ker" => self.eval(&self.p_tex, &perturbed(&self.p_ker, idx, delta), &self.emb),
            "emb" => self.eval(&self.p_tex, &self.p_ker, &perturbed(&self.emb, idx, delta)),
            other => panic!("unknown input {other}"),
        }
    }
    fn kink_margin(&self, input: &str, idx: usize) -> f64 {
        match input {
            "p_tex" => self.tex_margins[idx],
            "p_ker" => f64::INFINITY,
            "emb" => self.emb_margins[idx % (16 * 16)],
            other => panic!("unknown input {other}"),
        }
    }
}

/// Recognition cross-entropy on a [6,39] logit block, three supervised
/// positions.
pub struct RecProbe {
    logits: TensorMap,
    target: Vec<usize>,
}

impl RecProbe {
    pub fn random(seed: u64) -> Self {
        Self {
            logits: rnd(&[6, 39], -2.0, 2.0, seed),
            target: vec![7, 21, 36],
        }
    }
}

impl LossProbe for RecProbe {
    fn name(&self) -> &'static str {
        "rec_loss"
    }
    fn inputs(&self) -> Vec<(&'static str, usize)> {
        vec![("logits", self.logits.len())]
    }
    fn base(&self) -> LossValue {
        rec_loss(&self.logits, &self.target).unwrap()
    }
    fn value_perturbed(&self, _input: &str, idx: usize, delta: f64) -> f64 {
        rec_loss(&perturbed(&self.logits, idx, delta), &self.target)
            .unwrap()
            .value
    }
}

/// The fixtures the `grad-check` command runs.
pub fn standard_suite(seed: u64) -> Vec<Box<dyn LossProbe>> {
    vec![
        Box::new(DiceProbe::random(seed)),
        Box::new(AggProbe::random(seed.wrapping_add(100))),
        Box::new(DisProbe::random(seed.wrapping_add(200))),
        Box::new(DetProbe::random(seed.wrapping_add(300))),
        Box::new(RecProbe::random(seed.wrapping_add(400))),
    ]
}
