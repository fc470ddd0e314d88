//! Browser bindings. Every export takes and returns a JSON string; failures
//! come back as `{"error": "..."}`.

use bpjdet_core::association::{associate, run_inference, BodyDetection, Detection, ImagePrediction, Thresholds};
use bpjdet_core::metrics::evaluate;
use bpjdet_core::representation::{decode_box, decode_offsets, Anchor, GridSpec, ObjectKind, DEFAULT_STRIDES};
use bpjdet_core::synthscene::{generate_scene, perturb_grids, render_perfect_grids, SceneConfig};
use bpjdet_core::BBox;
use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("bad request: {e}"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodeRequest {
    raw_box: [f64; 4],
    #[serde(default)]
    raw_offsets: Vec<f64>,
    anchor: [f64; 2],
    stride: f64,
}

/// Decodes one anchor slot: box and offsets in grid units, plus the open
/// bounds each value must respect.
#[wasm_bindgen]
pub fn decode_slot(request: &str) -> String {
    respond((|| {
        let r: DecodeRequest = parse(request)?;
        if !(r.stride > 0.0 && r.anchor[0] > 0.0 && r.anchor[1] > 0.0) {
            return Err("stride and anchor must be positive".into());
        }
        if r.raw_offsets.len() % 2 != 0 {
            return Err("raw_offsets needs an even length".into());
        }
        let anchor = Anchor::new(r.anchor[0], r.anchor[1]);
        let b = decode_box(r.raw_box, anchor, r.stride);
        let offsets = decode_offsets(&r.raw_offsets, anchor, r.stride);
        let (bw, bh) = (anchor.w / r.stride, anchor.h / r.stride);
        Ok(json!({
            "box": [b.cx, b.cy, b.w, b.h],
            "offsets": offsets,
            "bounds": {
                "center": [-0.5, 1.5],
                "size": [4.0 * bw, 4.0 * bh],
                "offset": [2.0 * bw, 2.0 * bh],
            },
        }))
    })())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRequest {
    seed: u64,
    #[serde(default)]
    hands: bool,
    #[serde(default)]
    crowded: bool,
    #[serde(default)]
    noise: f64,
    #[serde(default)]
    thresholds: Option<Thresholds>,
}

/// Generates a scene, renders perfect grids, adds noise, decodes and scores.
#[wasm_bindgen]
pub fn run_scene(request: &str) -> String {
    respond((|| {
        let r: SceneRequest = parse(request)?;
        let mut cfg = if r.hands { SceneConfig::hands(r.seed) } else { SceneConfig::faces(r.seed) };
        if r.crowded {
            cfg = cfg.crowded();
        }
        let th = r.thresholds.unwrap_or_default();
        th.validate()?;
        let spec = GridSpec::with_default_anchors(cfg.image_w, cfg.image_h, &DEFAULT_STRIDES).map_err(|e| e.to_string())?;
        let schema = cfg.schema().map_err(|e| e.to_string())?;
        let ann = generate_scene(&cfg, &spec).map_err(|e| e.to_string())?;
        let grids = render_perfect_grids(&ann, &spec, &schema).map_err(|e| e.to_string())?;
        let grids = perturb_grids(&grids, r.noise, r.seed).map_err(|e| e.to_string())?;
        let out = run_inference(&grids, &spec, &schema, &th).map_err(|e| e.to_string())?;
        let pred = ImagePrediction::from_output(ann.id.clone(), &out);
        let report = evaluate(std::slice::from_ref(&ann), std::slice::from_ref(&pred), &schema).map_err(|e| e.to_string())?;
        Ok(json!({
            "parts": schema.part_names,
            "annotation": ann,
            "prediction": pred,
            "report": report,
        }))
    })())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BodyIn {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    offsets: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartIn {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    slot: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AssociateRequest {
    bodies: Vec<BodyIn>,
    parts: Vec<PartIn>,
    #[serde(default = "default_inner")]
    inner_iou: f64,
}

fn default_inner() -> f64 {
    Thresholds::default().inner_iou
}

/// Links parts to bodies by nearest predicted offset point; returns one
/// part index (or null) per body and slot. Boxes are `[cx, cy, w, h]`.
#[wasm_bindgen]
pub fn associate_parts(request: &str) -> String {
    respond((|| {
        let r: AssociateRequest = parse(request)?;
        if !(0.0..=1.0).contains(&r.inner_iou) {
            return Err("inner_iou must lie in [0, 1]".into());
        }
        let k = r.bodies.first().map_or(0, |b| b.offsets.len());
        if r.bodies.iter().any(|b| b.offsets.len() != k) {
            return Err("every body needs the same number of offsets".into());
        }
        if r.parts.iter().any(|p| p.slot >= k.max(1)) {
            return Err("part slot out of range".into());
        }
        let valid = |b: &[f64; 4]| b.iter().all(|v| v.is_finite()) && b[2] >= 0.0 && b[3] >= 0.0;
        if !r.bodies.iter().all(|b| valid(&b.bbox)) || !r.parts.iter().all(|p| valid(&p.bbox)) {
            return Err("boxes need finite values and non-negative sizes".into());
        }
        let bodies: Vec<BodyDetection> = r
            .bodies
            .iter()
            .map(|b| BodyDetection {
                det: Detection { bbox: BBox::pixels(b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]), score: b.score, kind: ObjectKind::Body, slot: None },
                offset_points: b.offsets.clone(),
                associated: vec![None; k],
            })
            .collect();
        let parts: Vec<Detection> = r
            .parts
            .iter()
            .map(|p| Detection {
                bbox: BBox::pixels(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3]),
                score: p.score,
                kind: ObjectKind::Part,
                slot: Some(p.slot),
            })
            .collect();
        let table: Vec<Vec<Option<usize>>> = associate(bodies, &parts, r.inner_iou).into_iter().map(|b| b.associated).collect();
        Ok(json!({ "associations": table }))
    })())
}
