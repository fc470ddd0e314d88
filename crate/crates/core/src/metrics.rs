//! Detection and association metrics: VOC AP at IoU 0.5, log-average miss
//! rate, log-average miss-matching rate, conditional accuracy and joint AP.

use crate::association::ImagePrediction;
use crate::geometry::{iou_raw, BBox, Frame};
use crate::representation::{ImageAnnotation, PartSchema};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

pub const MATCH_IOU: f64 = 0.5;

/// Miss rates below this are clamped before taking logs.
const MR_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction for unknown image {0:?}")]
    UnknownImage(String),
    #[error("part index {index} out of range in image {image:?}")]
    BadAssociation { image: String, index: usize },
}

/// FPPI sample points `10^(-2 + k/4)`, `k = 0..8`.
pub fn fppi_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-2.0 + k as f64 / 4.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices by descending score (stable).
    pub order: Vec<usize>,
    pub det_to_gt: Vec<Option<usize>>,
    pub gt_to_det: Vec<Option<usize>>,
    pub iou_threshold: f64,
}

/// One-to-one greedy matching: detections in descending score order each take
/// the highest-IoU unmatched ground truth of the same image and label.
pub fn match_detections(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut by_image: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry((g.image, g.label)).or_default().push(i);
    }
    let mut det_to_gt = vec![None; dets.len()];
    let mut gt_to_det = vec![None; gts.len()];
    for &d in &order {
        let Some(cands) = by_image.get(&(dets[d].image, dets[d].label)) else { continue };
        let mut best: Option<(f64, usize)> = None;
        for &g in cands {
            if gt_to_det[g].is_some() {
                continue;
            }
            let v = iou_raw(&dets[d].bbox, &gts[g].bbox);
            if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            det_to_gt[d] = Some(g);
            gt_to_det[g] = Some(d);
        }
    }
    MatchResult { order, det_to_gt, gt_to_det, iou_threshold }
}

/// All-point interpolated AP from a ranked TP/FP sequence.
/// With no ground truth the AP is 1 for an empty ranking and 0 otherwise.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

pub fn voc_ap(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> f64 {
    let m = match_detections(dets, gts, iou_threshold);
    let tp: Vec<bool> = m.order.iter().map(|&d| m.det_to_gt[d].is_some()).collect();
    ap_from_ranked(&tp, gts.len())
}

/// `(fppi, miss rate)` after each ranked detection.
pub fn miss_rate_curve(tp: &[bool], n_gt: usize, image_count: usize) -> Vec<(f64, f64)> {
    let images = image_count.max(1) as f64;
    let (mut ctp, mut cfp) = (0usize, 0usize);
    tp.iter()
        .map(|&t| {
            if t {
                ctp += 1;
            } else {
                cfp += 1;
            }
            let mr = if n_gt == 0 { 0.0 } else { 1.0 - ctp as f64 / n_gt as f64 };
            (cfp as f64 / images, mr)
        })
        .collect()
}

/// For each FPPI sample, the index of the last operating point at or below it;
/// the first operating point when the curve starts above the sample.
pub fn operating_points(curve: &[(f64, f64)]) -> Vec<Option<usize>> {
    fppi_grid()
        .into_iter()
        .map(|r| {
            if curve.is_empty() {
                None
            } else {
                Some(curve.iter().rposition(|(f, _)| *f <= r).unwrap_or(0))
            }
        })
        .collect()
}

/// Geometric mean of the rates (floored at 1e-10), as a percentage.
pub fn log_average(rates: &[f64]) -> f64 {
    let n = rates.len() as f64;
    100.0 * (rates.iter().map(|r| r.max(MR_FLOOR).ln()).sum::<f64>() / n).exp()
}

pub fn mr2(dets: &[ScoredBox], gts: &[GtBox], image_count: usize) -> f64 {
    let m = match_detections(dets, gts, MATCH_IOU);
    let tp: Vec<bool> = m.order.iter().map(|&d| m.det_to_gt[d].is_some()).collect();
    let curve = miss_rate_curve(&tp, gts.len(), image_count);
    let rates: Vec<f64> = operating_points(&curve)
        .into_iter()
        .map(|p| p.map_or(if gts.is_empty() { 0.0 } else { 1.0 }, |i| curve[i].1))
        .collect();
    log_average(&rates)
}

/// A body detection together with the part box it was associated with per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocBody {
    pub det: ScoredBox,
    pub parts: Vec<Option<BBox>>,
}

/// A ground-truth body with its visible part boxes per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPair {
    pub body: GtBox,
    pub parts: Vec<Option<BBox>>,
}

/// A part detection together with the body box it was associated with.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocPart {
    pub det: ScoredBox,
    pub body: Option<BBox>,
}

/// A ground-truth part and its body (None for parts without an annotated body).
#[derive(Debug, Clone, PartialEq)]
pub struct GtPart {
    pub part: GtBox,
    pub body: Option<BBox>,
}

/// Log-average miss-matching rate over the body detector's FPPI operating
/// points. At each point, matched ground-truth bodies with a visible part
/// count as miss-matched when the detection's associated part is absent or
/// overlaps the ground-truth part by less than IoU 0.5. An operating point
/// with nothing to check scores 1; a dataset without visible parts scores 0.
pub fn mmr2(bodies: &[AssocBody], gt_pairs: &[GtPair], image_count: usize) -> f64 {
    let dets: Vec<ScoredBox> = bodies.iter().map(|b| b.det.clone()).collect();
    let gts: Vec<GtBox> = gt_pairs.iter().map(|p| p.body.clone()).collect();
    let m = match_detections(&dets, &gts, MATCH_IOU);
    let tp: Vec<bool> = m.order.iter().map(|&d| m.det_to_gt[d].is_some()).collect();
    let curve = miss_rate_curve(&tp, gts.len(), image_count);
    let pairs = gt_pairs.iter().flat_map(|p| &p.parts).filter(|p| p.is_some()).count();
    if pairs == 0 {
        return 0.0;
    }
    let rates: Vec<f64> = operating_points(&curve)
        .into_iter()
        .map(|p| {
            let Some(last) = p else { return 1.0 };
            let (mut considered, mut missed) = (0usize, 0usize);
            for &d in &m.order[..=last] {
                let Some(g) = m.det_to_gt[d] else { continue };
                for (slot, gt_part) in gt_pairs[g].parts.iter().enumerate() {
                    let Some(gt_part) = gt_part else { continue };
                    considered += 1;
                    let ok = bodies[d].parts.get(slot).copied().flatten().is_some_and(|p| iou_raw(&p, gt_part) >= MATCH_IOU);
                    if !ok {
                        missed += 1;
                    }
                }
            }
            if considered == 0 {
                1.0
            } else {
                missed as f64 / considered as f64
            }
        })
        .collect();
    log_average(&rates)
}

fn part_outcomes(parts: &[AssocPart], gt_parts: &[GtPart]) -> (MatchResult, Vec<Option<bool>>) {
    let dets: Vec<ScoredBox> = parts.iter().map(|p| p.det.clone()).collect();
    let gts: Vec<GtBox> = gt_parts.iter().map(|p| p.part.clone()).collect();
    let m = match_detections(&dets, &gts, MATCH_IOU);
    // None: matched a part without an annotated body (not scored)
    let paired: Vec<Option<bool>> = (0..parts.len())
        .map(|d| match m.det_to_gt[d] {
            None => Some(false),
            Some(g) => gt_parts[g]
                .body
                .map(|gb| parts[d].body.is_some_and(|b| iou_raw(&b, &gb) >= MATCH_IOU)),
        })
        .collect();
    (m, paired)
}

/// Percentage of correctly detected parts whose associated body matches the
/// part's ground-truth body. 100 when there are no bodied parts to find.
pub fn conditional_accuracy(parts: &[AssocPart], gt_parts: &[GtPart]) -> f64 {
    let (m, paired) = part_outcomes(parts, gt_parts);
    let (mut matched, mut correct) = (0usize, 0usize);
    for d in 0..parts.len() {
        if m.det_to_gt[d].is_some() {
            if let Some(ok) = paired[d] {
                matched += 1;
                correct += ok as usize;
            }
        }
    }
    if matched == 0 {
        if gt_parts.iter().any(|g| g.body.is_some()) { 0.0 } else { 100.0 }
    } else {
        100.0 * correct as f64 / matched as f64
    }
}

/// AP over part detections where a true positive needs both a matching part
/// box and a matching associated body.
pub fn joint_ap(parts: &[AssocPart], gt_parts: &[GtPart]) -> f64 {
    let (m, paired) = part_outcomes(parts, gt_parts);
    let n_gt = gt_parts.iter().filter(|g| g.body.is_some()).count();
    let tp: Vec<bool> = m.order.iter().filter_map(|&d| paired[d]).collect();
    ap_from_ranked(&tp, n_gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AssociationQuality {
    pub precision: f64,
    pub recall: f64,
    pub predicted: usize,
    pub correct: usize,
    pub ground_truth: usize,
}

/// Precision/recall of predicted (body, slot, part) links against ground truth:
/// a link is correct when the body matches a ground-truth body and the part
/// box overlaps that body's part in the same slot by IoU >= 0.5.
pub fn association_quality(bodies: &[AssocBody], gt_pairs: &[GtPair]) -> AssociationQuality {
    let dets: Vec<ScoredBox> = bodies.iter().map(|b| b.det.clone()).collect();
    let gts: Vec<GtBox> = gt_pairs.iter().map(|p| p.body.clone()).collect();
    let m = match_detections(&dets, &gts, MATCH_IOU);
    let mut q = AssociationQuality {
        ground_truth: gt_pairs.iter().flat_map(|p| &p.parts).filter(|p| p.is_some()).count(),
        ..Default::default()
    };
    for (d, b) in bodies.iter().enumerate() {
        for (slot, p) in b.parts.iter().enumerate() {
            let Some(p) = p else { continue };
            q.predicted += 1;
            let ok = m.det_to_gt[d]
                .and_then(|g| gt_pairs[g].parts.get(slot).copied().flatten())
                .is_some_and(|gp| iou_raw(p, &gp) >= MATCH_IOU);
            q.correct += ok as usize;
        }
    }
    q.precision = match (q.predicted, q.ground_truth) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (n, _) => q.correct as f64 / n as f64,
    };
    q.recall = if q.ground_truth == 0 { 1.0 } else { q.correct as f64 / q.ground_truth as f64 };
    q
}

/// Expected link precision when each visible part picks uniformly among the
/// ground-truth bodies that contain it by more than `inner_iou`.
pub fn chance_association(anns: &[ImageAnnotation], k: usize, inner_iou: f64) -> f64 {
    let mut odds = Vec::new();
    for ann in anns {
        for body in &ann.bodies {
            for slot in 0..k {
                let Some(p) = body.visible_part(slot) else { continue };
                let n = ann
                    .bodies
                    .iter()
                    .filter(|b| crate::geometry::inner_overlap_raw(&p, &b.body_box()) > inner_iou)
                    .count()
                    .max(1);
                odds.push(1.0 / n as f64);
            }
        }
    }
    if odds.is_empty() {
        1.0
    } else {
        odds.iter().sum::<f64>() / odds.len() as f64
    }
}

/// Everything one evaluation run produces, plus the inputs needed for curves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalInputs {
    pub body_dets: Vec<ScoredBox>,
    pub body_gts: Vec<GtBox>,
    pub part_dets: Vec<ScoredBox>,
    pub part_gts: Vec<GtBox>,
    pub assoc_bodies: Vec<AssocBody>,
    pub gt_pairs: Vec<GtPair>,
    pub assoc_parts: Vec<AssocPart>,
    pub gt_parts: Vec<GtPart>,
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_body: f64,
    pub ap_part: f64,
    pub mr2_body: f64,
    pub mr2_part: f64,
    pub mmr2: f64,
    pub cond_accuracy: f64,
    pub joint_ap: f64,
    pub association: AssociationQuality,
    pub image_count: usize,
    pub fppi_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalInputs {
    /// Flattens annotations and predictions; images are paired by id and a
    /// missing prediction counts as an empty one.
    pub fn collect(
        anns: &[ImageAnnotation],
        preds: &[ImagePrediction],
        schema: &PartSchema,
    ) -> Result<Self, MetricsError> {
        let index: HashMap<&str, usize> = anns.iter().enumerate().map(|(i, a)| (a.id.as_str(), i)).collect();
        let mut pred_for: Vec<Option<&ImagePrediction>> = vec![None; anns.len()];
        for p in preds {
            let &i = index.get(p.id.as_str()).ok_or_else(|| MetricsError::UnknownImage(p.id.clone()))?;
            pred_for[i] = Some(p);
        }
        let px = |b: [f64; 4]| BBox::from_array(b, Frame::ImagePixels);
        let mut out = EvalInputs { image_count: anns.len(), ..Default::default() };
        for (img, ann) in anns.iter().enumerate() {
            for body in &ann.bodies {
                let gt = GtBox { image: img, bbox: body.body_box(), label: 0 };
                let parts: Vec<Option<BBox>> = (0..schema.k).map(|s| body.visible_part(s)).collect();
                for (slot, p) in parts.iter().enumerate() {
                    if let Some(p) = p {
                        let g = GtBox { image: img, bbox: *p, label: slot };
                        out.part_gts.push(g.clone());
                        out.gt_parts.push(GtPart { part: g, body: Some(body.body_box()) });
                    }
                }
                out.body_gts.push(gt.clone());
                out.gt_pairs.push(GtPair { body: gt, parts });
            }
            for o in &ann.orphan_parts {
                let g = GtBox { image: img, bbox: o.part_box(), label: o.slot };
                out.part_gts.push(g.clone());
                out.gt_parts.push(GtPart { part: g, body: None });
            }

            let Some(pred) = pred_for[img] else { continue };
            let mut owner: Vec<Option<BBox>> = vec![None; pred.parts.len()];
            for b in &pred.bodies {
                let det = ScoredBox { image: img, bbox: px(b.bbox), score: b.score, label: 0 };
                let mut linked = Vec::with_capacity(schema.k);
                for slot in 0..schema.k {
                    let a = b.assoc.get(slot).copied().flatten();
                    if let Some(pi) = a {
                        let part = pred
                            .parts
                            .get(pi)
                            .ok_or_else(|| MetricsError::BadAssociation { image: pred.id.clone(), index: pi })?;
                        owner[pi].get_or_insert(px(b.bbox));
                        linked.push(Some(px(part.bbox)));
                    } else {
                        linked.push(None);
                    }
                }
                out.body_dets.push(det.clone());
                out.assoc_bodies.push(AssocBody { det, parts: linked });
            }
            for (pi, p) in pred.parts.iter().enumerate() {
                let det = ScoredBox { image: img, bbox: px(p.bbox), score: p.score, label: p.slot };
                out.part_dets.push(det.clone());
                out.assoc_parts.push(AssocPart { det, body: owner[pi] });
            }
        }
        Ok(out)
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            ap_body: voc_ap(&self.body_dets, &self.body_gts, MATCH_IOU),
            ap_part: voc_ap(&self.part_dets, &self.part_gts, MATCH_IOU),
            mr2_body: mr2(&self.body_dets, &self.body_gts, self.image_count),
            mr2_part: mr2(&self.part_dets, &self.part_gts, self.image_count),
            mmr2: mmr2(&self.assoc_bodies, &self.gt_pairs, self.image_count),
            cond_accuracy: conditional_accuracy(&self.assoc_parts, &self.gt_parts),
            joint_ap: joint_ap(&self.assoc_parts, &self.gt_parts),
            association: association_quality(&self.assoc_bodies, &self.gt_pairs),
            image_count: self.image_count,
            fppi_grid: fppi_grid(),
            config: None,
        }
    }

    /// CSV rows `kind,recall,precision` for body and part detections.
    pub fn pr_curve_csv(&self) -> String {
        let mut s = String::from("kind,recall,precision\n");
        for (kind, dets, gts) in [("body", &self.body_dets, &self.body_gts), ("part", &self.part_dets, &self.part_gts)] {
            let m = match_detections(dets, gts, MATCH_IOU);
            let (mut tp, mut n) = (0usize, 0usize);
            for &d in &m.order {
                n += 1;
                tp += m.det_to_gt[d].is_some() as usize;
                let r = if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 };
                let _ = writeln!(s, "{kind},{r},{}", tp as f64 / n as f64);
            }
        }
        s
    }

    /// CSV rows `kind,fppi,miss_rate`.
    pub fn fppi_curve_csv(&self) -> String {
        let mut s = String::from("kind,fppi,miss_rate\n");
        for (kind, dets, gts) in [("body", &self.body_dets, &self.body_gts), ("part", &self.part_dets, &self.part_gts)] {
            let m = match_detections(dets, gts, MATCH_IOU);
            let tp: Vec<bool> = m.order.iter().map(|&d| m.det_to_gt[d].is_some()).collect();
            for (f, mr) in miss_rate_curve(&tp, gts.len(), self.image_count) {
                let _ = writeln!(s, "{kind},{f},{mr}");
            }
        }
        s
    }
}

pub fn evaluate(
    anns: &[ImageAnnotation],
    preds: &[ImagePrediction],
    schema: &PartSchema,
) -> Result<EvalReport, MetricsError> {
    Ok(EvalInputs::collect(anns, preds, schema)?.report())
}
