//! Detection and end-to-end evaluation: rasterized-IoU matching with
//! greedy one-to-one assignment, precision/recall/F-measure, Levenshtein
//! edit distance and a per-image averaged edit distance.

use crate::error::{Error, Result};
use crate::geometry::{Polygon, TextAnnotation};
use crate::pa::TextInstance;

/// A prediction in evaluation form: an image-resolution polygon plus the
/// decoded transcription (empty when only detection is evaluated).
#[derive(Clone, Debug)]
pub struct EvalPred {
    pub polygon: Polygon,
    pub text: String,
}

impl EvalPred {
    pub fn new(polygon: Polygon, text: impl Into<String>) -> Self {
        Self {
            polygon,
            text: text.into(),
        }
    }

    /// Pairs a detected instance's image-space contour with its text.
    pub fn from_instance(inst: &TextInstance, text: impl Into<String>) -> Self {
        Self::new(inst.contour_scaled.clone(), text)
    }
}

/// One matched gt/pred pair.
#[derive(Clone, Debug)]
pub struct MatchPair {
    pub gt: usize,
    pub pred: usize,
    pub iou: f64,
    /// Transcriptions equal after trimming and case folding.
    pub text_match: bool,
}

/// Matching outcome for one image. `counted_gts` and `counted_preds`
/// exclude ignored ground truth and don't-care predictions, so reports
/// from several images can be pooled by summing the three counts.
#[derive(Clone, Debug)]
pub struct MatchReport {
    pub pairs: Vec<MatchPair>,
    pub true_positives: usize,
    pub counted_gts: usize,
    pub counted_preds: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

fn scores(tp: usize, counted_preds: usize, counted_gts: usize) -> (f64, f64, f64) {
    let p = if counted_preds == 0 {
        0.0
    } else {
        tp as f64 / counted_preds as f64
    };
    let r = if counted_gts == 0 {
        0.0
    } else {
        tp as f64 / counted_gts as f64
    };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Precision/recall/F over several per-image reports, pooling the raw
/// counts rather than averaging the ratios.
pub fn pooled_scores(reports: &[MatchReport]) -> (f64, f64, f64) {
    let tp = reports.iter().map(|r| r.true_positives).sum();
    let np = reports.iter().map(|r| r.counted_preds).sum();
    let ng = reports.iter().map(|r| r.counted_gts).sum();
    scores(tp, np, ng)
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

struct Masks {
    gt: Vec<Vec<f32>>,
    pred: Vec<Vec<f32>>,
    pred_area: Vec<usize>,
}

fn rasterize_all(
    gts: &[TextAnnotation],
    preds: &[EvalPred],
    canvas: (usize, usize),
) -> Result<Masks> {
    let (h, w) = canvas;
    if h == 0 || w == 0 {
        return Err(Error::invalid("evaluation canvas must be non-empty"));
    }
    let gt: Vec<Vec<f32>> = gts
        .iter()
        .map(|g| g.polygon.rasterize(h, w).data().to_vec())
        .collect();
    let pred: Vec<Vec<f32>> = preds
        .iter()
        .map(|p| p.polygon.rasterize(h, w).data().to_vec())
        .collect();
    let pred_area = pred
        .iter()
        .map(|m| m.iter().filter(|&&v| v > 0.5).count())
        .collect();
    Ok(Masks { gt, pred, pred_area })
}

fn intersection(a: &[f32], b: &[f32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x > 0.5 && **y > 0.5).count()
}

fn iou(a: &[f32], b: &[f32]) -> f64 {
    let inter = intersection(a, b);
    let union = a.iter().zip(b).filter(|(x, y)| **x > 0.5 || **y > 0.5).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn match_impl(
    gts: &[TextAnnotation],
    preds: &[EvalPred],
    canvas: (usize, usize),
    iou_thr: f64,
    case_sensitive: bool,
    require_text: bool,
) -> Result<(MatchReport, Vec<bool>)> {
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(Error::invalid(format!(
            "IoU threshold must be in [0, 1], got {iou_thr}"
        )));
    }
    let masks = rasterize_all(gts, preds, canvas)?;

    // Predictions mostly covered by an ignored gt are don't-cares: they
    // leave the precision denominator and cannot match anything.
    let mut dont_care = vec![false; preds.len()];
    for (pi, parea) in masks.pred_area.iter().enumerate() {
        if *parea == 0 {
            continue;
        }
        for (gi, g) in gts.iter().enumerate() {
            if g.ignore()
                && intersection(&masks.gt[gi], &masks.pred[pi]) as f64 > 0.5 * *parea as f64
            {
                dont_care[pi] = true;
                break;
            }
        }
    }

    // All candidate pairs above threshold, best IoU first; ties broken
    // by (gt, pred) index so the result is order-deterministic.
    let mut candidates = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        if g.ignore() {
            continue;
        }
        for pi in 0..preds.len() {
            if dont_care[pi] {
                continue;
            }
            let v = iou(&masks.gt[gi], &masks.pred[pi]);
            if v >= iou_thr {
                candidates.push((v, gi, pi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut pairs = Vec::new();
    let mut tp = 0usize;
    for (v, gi, pi) in candidates {
        if gt_used[gi] || pred_used[pi] {
            continue;
        }
        gt_used[gi] = true;
        pred_used[pi] = true;
        let text_match = if case_sensitive {
            gts[gi].transcription.trim() == preds[pi].text.trim()
        } else {
            normalize(&gts[gi].transcription) == normalize(&preds[pi].text)
        };
        if !require_text || text_match {
            tp += 1;
        }
        pairs.push(MatchPair {
            gt: gi,
            pred: pi,
            iou: v,
            text_match,
        });
    }

    let counted_gts = gts.iter().filter(|g| !g.ignore()).count();
    let counted_preds = dont_care.iter().filter(|d| !**d).count();
    let (precision, recall, f_measure) = scores(tp, counted_preds, counted_gts);
    Ok((
        MatchReport {
            pairs,
            true_positives: tp,
            counted_gts,
            counted_preds,
            precision,
            recall,
            f_measure,
        },
        dont_care,
    ))
}

/// Detection-only matching: greedy one-to-one assignment in descending
/// IoU order; a pair with IoU >= `iou_thr` is a true positive.
pub fn match_detections(
    gts: &[TextAnnotation],
    preds: &[EvalPred],
    canvas: (usize, usize),
    iou_thr: f64,
) -> Result<MatchReport> {
    Ok(match_impl(gts, preds, canvas, iou_thr, false, false)?.0)
}

/// End-to-end matching: a matched pair counts as a true positive only
/// if the transcriptions also agree (trimmed; case-folded unless
/// `case_sensitive`).
pub fn e2e_f_measure(
    gts: &[TextAnnotation],
    preds: &[EvalPred],
    canvas: (usize, usize),
    iou_thr: f64,
    case_sensitive: bool,
) -> Result<MatchReport> {
    Ok(match_impl(gts, preds, canvas, iou_thr, case_sensitive, true)?.0)
}

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev + usize::from(ca != cb);
            prev = row[j + 1];
            row[j + 1] = sub.min(prev + 1).min(row[j] + 1);
        }
    }
    row[b.len()]
}

/// Total edit distance for one image under detection matching: matched
/// pairs contribute their transcription distance, unmatched counted gts
/// and preds contribute their full lengths. Texts are trimmed and
/// case-folded first.
pub fn image_edit_distance(
    gts: &[TextAnnotation],
    preds: &[EvalPred],
    canvas: (usize, usize),
    iou_thr: f64,
) -> Result<usize> {
    let (report, dont_care) = match_impl(gts, preds, canvas, iou_thr, false, false)?;
    let mut total = 0usize;
    let mut gt_matched = vec![false; gts.len()];
    let mut pred_matched = vec![false; preds.len()];
    for pair in &report.pairs {
        gt_matched[pair.gt] = true;
        pred_matched[pair.pred] = true;
        total += edit_distance(
            &normalize(&gts[pair.gt].transcription),
            &normalize(&preds[pair.pred].text),
        );
    }
    for (gi, g) in gts.iter().enumerate() {
        if !g.ignore() && !gt_matched[gi] {
            total += normalize(&g.transcription).chars().count();
        }
    }
    for (pi, p) in preds.iter().enumerate() {
        if !pred_matched[pi] && !dont_care[pi] {
            total += normalize(&p.text).chars().count();
        }
    }
    Ok(total)
}

/// Mean per-image total edit distance over `(gts, preds, canvas)`
/// triples; an empty iterator yields 0.
pub fn aed<'a, I>(images: I, iou_thr: f64) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [TextAnnotation], &'a [EvalPred], (usize, usize))>,
{
    let mut total = 0f64;
    let mut n = 0usize;
    for (gts, preds, canvas) in images {
        total += image_edit_distance(gts, preds, canvas, iou_thr)? as f64;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
