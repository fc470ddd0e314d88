//! Annotation JSON: one file per dataset, image-pixel center-form boxes.

use super::{PartSchema, RepresentationError};
use crate::geometry::{BBox, Frame};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaDecl {
    pub k: usize,
    pub parts: Vec<String>,
}

impl SchemaDecl {
    pub fn to_schema(&self) -> Result<PartSchema, RepresentationError> {
        let schema = PartSchema { k: self.k, part_names: self.parts.clone(), visibility_required: true };
        schema.validate()?;
        Ok(schema)
    }
}

impl From<&PartSchema> for SchemaDecl {
    fn from(s: &PartSchema) -> Self {
        Self { k: s.k, parts: s.part_names.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub schema: SchemaDecl,
    pub images: Vec<ImageAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotation {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub bodies: Vec<BodyRecord>,
    #[serde(default)]
    pub orphan_parts: Vec<OrphanPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default)]
    pub parts: Vec<PartRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartRecord {
    pub slot: usize,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    pub visible: u8,
}

/// A part whose body is not annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrphanPart {
    pub slot: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl BodyRecord {
    pub fn body_box(&self) -> BBox {
        BBox::from_array(self.bbox, Frame::ImagePixels)
    }

    /// Box of the visible part in `slot`, if any.
    pub fn visible_part(&self, slot: usize) -> Option<BBox> {
        self.parts
            .iter()
            .find(|p| p.slot == slot && p.visible == 1)
            .and_then(|p| p.bbox)
            .map(|b| BBox::from_array(b, Frame::ImagePixels))
    }
}

impl OrphanPart {
    pub fn part_box(&self) -> BBox {
        BBox::from_array(self.bbox, Frame::ImagePixels)
    }
}

impl ImageAnnotation {
    pub fn empty(id: impl Into<String>, width: u32, height: u32) -> Self {
        Self { id: id.into(), width, height, bodies: Vec::new(), orphan_parts: Vec::new() }
    }

    pub fn validate(&self, schema: &PartSchema) -> Result<(), RepresentationError> {
        let fail = |reason: String| Err(RepresentationError::Annotation { image: self.id.clone(), reason });
        let check_box = |what: &str, b: &[f64; 4]| -> Result<(), RepresentationError> {
            let [cx, cy, w, h] = *b;
            let inside = cx >= 0.0 && cy >= 0.0 && cx <= self.width as f64 && cy <= self.height as f64;
            if !(w > 0.0 && h > 0.0) || !inside || !b.iter().all(|v| v.is_finite()) {
                return Err(RepresentationError::Annotation {
                    image: self.id.clone(),
                    reason: format!("{what} box {b:?} is degenerate or centered outside the image"),
                });
            }
            Ok(())
        };
        for (i, body) in self.bodies.iter().enumerate() {
            check_box(&format!("body {i}"), &body.bbox)?;
            let mut seen = vec![false; schema.k];
            for p in &body.parts {
                if p.slot >= schema.k {
                    return fail(format!("body {i} has part slot {} but k = {}", p.slot, schema.k));
                }
                if std::mem::replace(&mut seen[p.slot], true) {
                    return fail(format!("body {i} repeats part slot {}", p.slot));
                }
                match (p.visible, &p.bbox) {
                    (1, Some(b)) => check_box(&format!("body {i} part {}", p.slot), b)?,
                    (1, None) => return fail(format!("body {i} part {} is visible without a box", p.slot)),
                    (0, None) => {}
                    (0, Some(_)) => return fail(format!("body {i} part {} is invisible but has a box", p.slot)),
                    (v, _) => return fail(format!("body {i} part {} has visibility {v}", p.slot)),
                }
            }
        }
        for (i, p) in self.orphan_parts.iter().enumerate() {
            if p.slot >= schema.k {
                return fail(format!("orphan part {i} has slot {} but k = {}", p.slot, schema.k));
            }
            check_box(&format!("orphan part {i}"), &p.bbox)?;
        }
        Ok(())
    }

    /// Clips every box to the image rectangle, dropping boxes left with no area.
    pub fn clip_to_image(&mut self) {
        let (iw, ih) = (self.width as f64, self.height as f64);
        let clip = |b: [f64; 4]| -> Option<[f64; 4]> {
            let x1 = (b[0] - b[2] / 2.0).clamp(0.0, iw);
            let y1 = (b[1] - b[3] / 2.0).clamp(0.0, ih);
            let x2 = (b[0] + b[2] / 2.0).clamp(0.0, iw);
            let y2 = (b[1] + b[3] / 2.0).clamp(0.0, ih);
            (x2 > x1 && y2 > y1).then(|| [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1])
        };
        self.bodies.retain_mut(|body| match clip(body.bbox) {
            Some(b) => {
                body.bbox = b;
                for p in &mut body.parts {
                    if let Some(pb) = p.bbox {
                        p.bbox = clip(pb);
                        if p.bbox.is_none() {
                            p.visible = 0;
                        }
                    }
                }
                true
            }
            None => false,
        });
        self.orphan_parts.retain_mut(|p| match clip(p.bbox) {
            Some(b) => {
                p.bbox = b;
                true
            }
            None => false,
        });
    }

    pub fn visible_part_count(&self) -> usize {
        self.bodies.iter().flat_map(|b| &b.parts).filter(|p| p.visible == 1).count() + self.orphan_parts.len()
    }
}

impl Dataset {
    pub fn validate(&self) -> Result<PartSchema, RepresentationError> {
        let schema = self.schema.to_schema()?;
        for img in &self.images {
            img.validate(&schema)?;
        }
        Ok(schema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "schema": {"k": 1, "parts": ["face"]},
        "images": [{
            "id": "0", "width": 64, "height": 64,
            "bodies": [
                {"box": [20, 30, 16, 40], "parts": [{"slot": 0, "box": [20, 15, 6, 6], "visible": 1}]},
                {"box": [45, 30, 16, 40], "parts": [{"slot": 0, "visible": 0}]}
            ],
            "orphan_parts": [{"slot": 0, "box": [60, 5, 4, 4]}]
        }]
    }"#;

    #[test]
    fn parses_and_validates_schema_json() {
        let ds: Dataset = serde_json::from_str(SAMPLE).unwrap();
        let schema = ds.validate().unwrap();
        assert_eq!(schema.k, 1);
        let img = &ds.images[0];
        assert!(img.bodies[0].visible_part(0).is_some());
        assert!(img.bodies[1].visible_part(0).is_none());
        assert_eq!(img.visible_part_count(), 2);
        let back: Dataset = serde_json::from_str(&serde_json::to_string(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_inconsistent_visibility() {
        let mut ds: Dataset = serde_json::from_str(SAMPLE).unwrap();
        ds.images[0].bodies[1].parts[0].bbox = Some([45.0, 15.0, 5.0, 5.0]);
        assert!(ds.validate().is_err());
        ds.images[0].bodies[1].parts[0] = PartRecord { slot: 0, bbox: None, visible: 1 };
        assert!(ds.validate().is_err());
        ds.images[0].bodies[1].parts[0] = PartRecord { slot: 3, bbox: None, visible: 0 };
        assert!(ds.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = SAMPLE.replace("\"orphan_parts\"", "\"orphans\"");
        assert!(serde_json::from_str::<Dataset>(&bad).is_err());
    }

    #[test]
    fn clipping_keeps_boxes_inside() {
        let mut img = ImageAnnotation::empty("c", 32, 32);
        img.bodies.push(BodyRecord { bbox: [30.0, 16.0, 10.0, 10.0], parts: vec![] });
        img.bodies.push(BodyRecord { bbox: [50.0, 16.0, 4.0, 4.0], parts: vec![] });
        img.clip_to_image();
        assert_eq!(img.bodies.len(), 1);
        assert_eq!(img.bodies[0].bbox, [28.5, 16.0, 7.0, 10.0]);
    }
}
