//! Target assignment: turns an annotation into positive anchor-cell targets.

use super::{normalize_offsets, GridSpec, ImageAnnotation, PartSchema, RepresentationError, SlotIndex};
use crate::geometry::BBox;
use serde::{Deserialize, Serialize};

/// An anchor matches an object only when every side ratio is below this.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Body,
    Part,
}

/// A ground-truth object in image pixels. Bodies and parts are both objects.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub kind: ObjectKind,
    pub bbox: BBox,
    pub class: usize,
    pub slot: Option<usize>,
    /// Object index of the owning body (parts only).
    pub body: Option<usize>,
    /// Object index of each visible part (bodies only).
    pub parts: Vec<Option<usize>>,
}

/// One positive target. Objectness multiplier is 1 for every emitted target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub level: usize,
    pub stride: u32,
    pub anchor: usize,
    /// `(x, y)` cell coordinates.
    pub cell: (usize, usize),
    /// Cell-relative grid-unit box.
    pub target_box: BBox,
    /// Sigmoid-space offset targets; zero where the slot is masked.
    pub offset_targets: Vec<[f64; 2]>,
    pub offset_visible: Vec<bool>,
    pub class: usize,
    pub kind: ObjectKind,
    pub object: usize,
}

impl TargetAssignment {
    pub fn slot_index(&self) -> SlotIndex {
        SlotIndex { level: self.level, anchor: self.anchor, y: self.cell.1, x: self.cell.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetSet {
    pub objects: Vec<GtObject>,
    pub targets: Vec<TargetAssignment>,
    /// Body-to-part offset slots masked because the offset was not representable.
    pub dropped_body_offsets: usize,
    /// Part-to-body offset slots masked for the same reason.
    pub dropped_part_offsets: usize,
}

impl TargetSet {
    pub fn positives_at(&self, level: usize) -> usize {
        self.targets.iter().filter(|t| t.level == level).count()
    }

    pub fn for_object(&self, object: usize) -> impl Iterator<Item = &TargetAssignment> {
        self.targets.iter().filter(move |t| t.object == object)
    }
}

/// Center cell plus the horizontal and vertical neighbor on the side of the
/// fractional center (none on an axis whose fraction is exactly 0.5).
pub fn select_cells(g: [f64; 2], cols: usize, rows: usize) -> Vec<(usize, usize)> {
    let cx = (g[0].floor().max(0.0) as usize).min(cols - 1);
    let cy = (g[1].floor().max(0.0) as usize).min(rows - 1);
    let fx = g[0] - cx as f64;
    let fy = g[1] - cy as f64;
    let mut cells = vec![(cx, cy)];
    if fx < 0.5 && cx > 0 {
        cells.push((cx - 1, cy));
    } else if fx > 0.5 && cx + 1 < cols {
        cells.push((cx + 1, cy));
    }
    if fy < 0.5 && cy > 0 {
        cells.push((cx, cy - 1));
    } else if fy > 0.5 && cy + 1 < rows {
        cells.push((cx, cy + 1));
    }
    cells
}

fn anchor_matches(b: &BBox, aw: f64, ah: f64) -> bool {
    let r = [b.w / aw, aw / b.w, b.h / ah, ah / b.h];
    r.iter().all(|v| v.is_finite()) && r.iter().cloned().fold(0.0, f64::max) < ANCHOR_RATIO_LIMIT
}

fn collect_objects(ann: &ImageAnnotation, schema: &PartSchema) -> Vec<GtObject> {
    let mut objects: Vec<GtObject> = ann
        .bodies
        .iter()
        .map(|b| GtObject {
            kind: ObjectKind::Body,
            bbox: b.body_box(),
            class: 0,
            slot: None,
            body: None,
            parts: vec![None; schema.k],
        })
        .collect();
    for (bi, body) in ann.bodies.iter().enumerate() {
        for slot in 0..schema.k {
            if let Some(pb) = body.visible_part(slot) {
                let idx = objects.len();
                objects[bi].parts[slot] = Some(idx);
                objects.push(GtObject {
                    kind: ObjectKind::Part,
                    bbox: pb,
                    class: slot + 1,
                    slot: Some(slot),
                    body: Some(bi),
                    parts: Vec::new(),
                });
            }
        }
    }
    for orphan in &ann.orphan_parts {
        objects.push(GtObject {
            kind: ObjectKind::Part,
            bbox: orphan.part_box(),
            class: orphan.slot + 1,
            slot: Some(orphan.slot),
            body: None,
            parts: Vec::new(),
        });
    }
    objects
}

/// Builds every positive target for one image. Objects are ordered bodies
/// first, then visible parts by body and slot, then orphan parts.
pub fn assign_targets(
    ann: &ImageAnnotation,
    spec: &GridSpec,
    schema: &PartSchema,
) -> Result<TargetSet, RepresentationError> {
    spec.validate()?;
    schema.validate()?;
    ann.validate(schema)?;
    if ann.width != spec.image_w || ann.height != spec.image_h {
        return Err(RepresentationError::Annotation {
            image: ann.id.clone(),
            reason: format!(
                "image is {}x{} but the grid expects {}x{}",
                ann.width, ann.height, spec.image_w, spec.image_h
            ),
        });
    }

    let objects = collect_objects(ann, schema);
    let mut set = TargetSet { objects, ..Default::default() };

    for (level, grid) in spec.levels.iter().enumerate() {
        let s = grid.stride as f64;
        let (cols, rows) = spec.cells(level);
        for (oi, obj) in set.objects.iter().enumerate() {
            let g = [obj.bbox.cx / s, obj.bbox.cy / s];
            // offset destinations in pixels, one per slot
            let dest: Vec<Option<[f64; 2]>> = match obj.kind {
                ObjectKind::Body => obj.parts.iter().map(|p| p.map(|pi| set.objects[pi].bbox.center())).collect(),
                ObjectKind::Part => (0..schema.k)
                    .map(|slot| match (obj.slot, obj.body) {
                        (Some(own), Some(bi)) if own == slot => Some(set.objects[bi].bbox.center()),
                        _ => None,
                    })
                    .collect(),
            };
            for (ai, anchor) in grid.anchors.iter().enumerate() {
                if !anchor_matches(&obj.bbox, anchor.w, anchor.h) {
                    continue;
                }
                for (x, y) in select_cells(g, cols, rows) {
                    let mut offset_targets = vec![[0.0; 2]; schema.k];
                    let mut offset_visible = vec![false; schema.k];
                    for (slot, d) in dest.iter().enumerate() {
                        let Some(p) = d else { continue };
                        let rel = [p[0] / s - x as f64, p[1] / s - y as f64];
                        match normalize_offsets(rel, *anchor, s) {
                            Some(t) => {
                                offset_targets[slot] = t;
                                offset_visible[slot] = true;
                            }
                            None if obj.kind == ObjectKind::Body => set.dropped_body_offsets += 1,
                            None => set.dropped_part_offsets += 1,
                        }
                    }
                    set.targets.push(TargetAssignment {
                        level,
                        stride: grid.stride,
                        anchor: ai,
                        cell: (x, y),
                        target_box: BBox::grid(g[0] - x as f64, g[1] - y as f64, obj.bbox.w / s, obj.bbox.h / s),
                        offset_targets,
                        offset_visible,
                        class: obj.class,
                        kind: obj.kind,
                        object: oi,
                    });
                }
            }
        }
    }
    Ok(set)
}
