//! Inference decoding: score every anchor slot, suppress duplicates per kind,
//! map to image pixels and attach parts to bodies through the regressed
//! offsets.

use crate::geometry::{inner_overlap_raw, iou_raw, BBox};
use crate::representation::{
    channel, decode_box, decode_offsets, sigmoid, GridSpec, ObjectKind, PartSchema, RawGridSet, RepresentationError,
};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub body_conf: f64,
    pub body_iou: f64,
    pub part_conf: f64,
    pub part_iou: f64,
    pub inner_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { body_conf: 0.05, body_iou: 0.6, part_conf: 0.1, part_iou: 0.3, inner_iou: 0.6 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        let v = [self.body_conf, self.body_iou, self.part_conf, self.part_iou, self.inner_iou];
        if v.iter().all(|t| (0.0..=1.0).contains(t)) {
            Ok(())
        } else {
            Err("thresholds must lie in [0, 1]".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub kind: ObjectKind,
    pub slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyDetection {
    pub det: Detection,
    /// Predicted part centers in image pixels, one per slot.
    pub offset_points: Vec<[f64; 2]>,
    /// Index into the part detections for each slot.
    pub associated: Vec<Option<usize>>,
}

fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    order
}

/// Greedy suppression. Returns kept indices in keep order.
pub fn nms(dets: &[Detection], conf: f64, iou_threshold: f64) -> Vec<usize> {
    let order: Vec<usize> = by_score_desc(dets).into_iter().filter(|&i| dets[i].score >= conf).collect();
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        keep.push(i);
        for (later, &j) in order.iter().enumerate().skip(pos + 1) {
            if !suppressed[later] && iou_raw(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[later] = true;
            }
        }
    }
    keep
}

/// Cell-relative grid box to image pixels.
pub fn rescale_box(b: &BBox, cell: (usize, usize), stride: f64) -> BBox {
    BBox::pixels(stride * (b.cx + cell.0 as f64), stride * (b.cy + cell.1 as f64), stride * b.w, stride * b.h)
}

/// Cell-relative grid offset to an image-pixel point.
pub fn rescale_point(d: [f64; 2], cell: (usize, usize), stride: f64) -> [f64; 2] {
    [stride * (d[0] + cell.0 as f64), stride * (d[1] + cell.1 as f64)]
}

pub(crate) fn point_distance(p: [f64; 2], q: [f64; 2]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    (dx * dx + dy * dy).sqrt()
}

/// Per-slot table of part indices assigned to each body. Candidate pairs are
/// accepted by ascending offset-to-center distance when the part lies inside
/// the body by more than `inner_iou`; each body slot and each part is used at
/// most once.
pub fn match_parts(bodies: &[BodyDetection], parts: &[Detection], inner_iou: f64) -> Vec<Vec<Option<usize>>> {
    let k = bodies.first().map_or(0, |b| b.offset_points.len());
    let mut table = vec![vec![None; k]; bodies.len()];
    for slot in 0..k {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, p) in parts.iter().enumerate().filter(|(_, p)| p.slot == Some(slot)) {
            for (bi, b) in bodies.iter().enumerate() {
                if inner_overlap_raw(&p.bbox, &b.det.bbox) > inner_iou {
                    candidates.push((point_distance(b.offset_points[slot], p.bbox.center()), bi, pi));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut part_used = vec![false; parts.len()];
        for (_, bi, pi) in candidates {
            if table[bi][slot].is_none() && !part_used[pi] {
                table[bi][slot] = Some(pi);
                part_used[pi] = true;
            }
        }
    }
    table
}

pub fn associate(mut bodies: Vec<BodyDetection>, parts: &[Detection], inner_iou: f64) -> Vec<BodyDetection> {
    let table = match_parts(&bodies, parts, inner_iou);
    for (b, row) in bodies.iter_mut().zip(table) {
        b.associated = row;
    }
    bodies
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferenceOutput {
    pub bodies: Vec<BodyDetection>,
    pub parts: Vec<Detection>,
}

/// Decode, score, suppress, rescale and associate. Output order is
/// deterministic: survivors in descending score order.
pub fn run_inference(
    grids: &RawGridSet,
    spec: &GridSpec,
    schema: &PartSchema,
    th: &Thresholds,
) -> Result<InferenceOutput, RepresentationError> {
    grids.check_matches(spec, schema)?;
    let mut bodies: Vec<BodyDetection> = Vec::new();
    let mut parts: Vec<Detection> = Vec::new();
    let min_conf = th.body_conf.min(th.part_conf);
    let off = channel::offsets(schema.k);

    for (level, g) in grids.grids.iter().enumerate() {
        let stride = g.stride as f64;
        for a in 0..g.anchors {
            let anchor = spec.levels[level].anchors[a];
            for y in 0..g.h {
                for x in 0..g.w {
                    let obj = sigmoid(g.get(a, channel::OBJ, y, x));
                    if obj < min_conf {
                        continue;
                    }
                    let (class, cls_p) = (0..schema.num_classes())
                        .map(|c| (c, sigmoid(g.get(a, channel::CLS + c, y, x))))
                        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                    let score = obj * cls_p;
                    let raw = [
                        g.get(a, channel::BOX, y, x),
                        g.get(a, channel::BOX + 1, y, x),
                        g.get(a, channel::BOX + 2, y, x),
                        g.get(a, channel::BOX + 3, y, x),
                    ];
                    if class == 0 {
                        if score < th.body_conf {
                            continue;
                        }
                        let bbox = rescale_box(&decode_box(raw, anchor, stride), (x, y), stride);
                        let raw_off: Vec<f64> = (0..2 * schema.k).map(|c| g.get(a, off + c, y, x)).collect();
                        let offset_points = decode_offsets(&raw_off, anchor, stride)
                            .into_iter()
                            .map(|d| rescale_point(d, (x, y), stride))
                            .collect();
                        bodies.push(BodyDetection {
                            det: Detection { bbox, score, kind: ObjectKind::Body, slot: None },
                            offset_points,
                            associated: vec![None; schema.k],
                        });
                    } else {
                        if score < th.part_conf {
                            continue;
                        }
                        let bbox = rescale_box(&decode_box(raw, anchor, stride), (x, y), stride);
                        parts.push(Detection { bbox, score, kind: ObjectKind::Part, slot: Some(class - 1) });
                    }
                }
            }
        }
    }

    let body_dets: Vec<Detection> = bodies.iter().map(|b| b.det.clone()).collect();
    let kept_bodies: Vec<BodyDetection> =
        nms(&body_dets, th.body_conf, th.body_iou).into_iter().map(|i| bodies[i].clone()).collect();
    let kept_parts: Vec<Detection> =
        nms(&parts, th.part_conf, th.part_iou).into_iter().map(|i| parts[i].clone()).collect();
    let bodies = associate(kept_bodies, &kept_parts, th.inner_iou);
    Ok(InferenceOutput { bodies, parts: kept_parts })
}

/// Prediction dump, one entry per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub images: Vec<ImagePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePrediction {
    pub id: String,
    pub bodies: Vec<BodyPrediction>,
    pub parts: Vec<PartPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyPrediction {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub offsets: Vec<[f64; 2]>,
    pub assoc: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartPrediction {
    pub slot: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

impl ImagePrediction {
    pub fn from_output(id: impl Into<String>, out: &InferenceOutput) -> Self {
        Self {
            id: id.into(),
            bodies: out
                .bodies
                .iter()
                .map(|b| BodyPrediction {
                    bbox: b.det.bbox.to_array(),
                    score: b.det.score,
                    offsets: b.offset_points.clone(),
                    assoc: b.associated.clone(),
                })
                .collect(),
            parts: out
                .parts
                .iter()
                .map(|p| PartPrediction { slot: p.slot.unwrap_or(0), bbox: p.bbox.to_array(), score: p.score })
                .collect(),
        }
    }
}
