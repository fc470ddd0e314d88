//! Seeded synthetic scenes, perfect grid rendering, noise and brute-force
//! reference implementations of suppression and association.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with a `u64`, so
//! scenes are identical across platforms.

use crate::association::{point_distance, BodyDetection, Detection};
use crate::geometry::{inner_overlap_raw, iou_raw, BBox, Frame};
use crate::representation::{
    assign_targets, channel, encode_box, logit, BodyRecord, GridSpec, ImageAnnotation, OrphanPart, PartRecord,
    PartSchema, RawGridSet, RepresentationError, TargetSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Logit magnitude used for confident positives and negatives.
pub const SATURATED_LOGIT: f64 = 20.0;

/// Minimum containment of a visible part in its own body.
const PART_INNER_MIN: f64 = 0.7;
/// Orphan parts stay at most this far inside any body.
const ORPHAN_INNER_MAX: f64 = 0.3;
/// Any two parts overlap by less than this.
const PART_IOU_MAX: f64 = 0.25;
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("no representable scene after {attempts} attempts (seed {seed})")]
    Exhausted { seed: u64, attempts: usize },
    #[error(transparent)]
    Representation(#[from] RepresentationError),
}

/// Placement of one part slot relative to its body. Offsets and jitter are
/// fractions of the body width/height; size is a fraction of body width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartRule {
    pub name: String,
    pub center: [f64; 2],
    pub jitter: [f64; 2],
    pub size: [f64; 2],
    /// Height over width.
    pub aspect: [f64; 2],
    pub visible_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub image_w: u32,
    pub image_h: u32,
    /// Inclusive range.
    pub bodies: [usize; 2],
    pub body_width: [f64; 2],
    /// Height over width.
    pub body_aspect: [f64; 2],
    /// Max pairwise IoU between bodies.
    pub crowding: f64,
    pub parts: Vec<PartRule>,
    /// Inclusive range of parts with no annotated body.
    #[serde(default)]
    pub orphan_parts: [usize; 2],
    #[serde(default)]
    pub noise_sigma: f64,
    /// Reject scenes where two objects target the same grid slot. Shared
    /// slots put a floor under the box loss, so training scenes set this.
    #[serde(default)]
    pub exclusive_slots: bool,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_attempts() -> usize {
    500
}

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<(), SceneError> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] > lo) {
        return Err(SceneError::Config(format!("{name} range {r:?} is empty or out of bounds")));
    }
    Ok(())
}

impl SceneConfig {
    /// One face per body, 320x320.
    pub fn faces(seed: u64) -> Self {
        Self {
            seed,
            image_w: 320,
            image_h: 320,
            bodies: [1, 6],
            body_width: [28.0, 60.0],
            body_aspect: [2.0, 2.8],
            crowding: 0.5,
            parts: vec![PartRule {
                name: "face".into(),
                center: [0.0, -0.36],
                jitter: [0.08, 0.03],
                size: [0.3, 0.45],
                aspect: [1.0, 1.25],
                visible_prob: 0.8,
            }],
            orphan_parts: [0, 1],
            noise_sigma: 0.0,
            exclusive_slots: false,
            max_attempts: default_attempts(),
        }
    }

    /// Left and right hands near the lateral thirds of each body.
    pub fn hands(seed: u64) -> Self {
        let hand = |name: &str, x: f64| PartRule {
            name: name.into(),
            center: [x, 0.05],
            jitter: [0.05, 0.12],
            size: [0.22, 0.32],
            aspect: [0.9, 1.2],
            visible_prob: 0.75,
        };
        Self { parts: vec![hand("left_hand", -0.33), hand("right_hand", 0.33)], ..Self::faces(seed) }
    }

    pub fn crowded(mut self) -> Self {
        self.bodies = [15, 20];
        self.orphan_parts = [0, 0];
        self
    }

    pub fn schema(&self) -> Result<PartSchema, RepresentationError> {
        let names: Vec<&str> = self.parts.iter().map(|p| p.name.as_str()).collect();
        PartSchema::new(&names)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(SceneError::Config("image size must be positive".into()));
        }
        if self.bodies[0] > self.bodies[1] || self.orphan_parts[0] > self.orphan_parts[1] {
            return Err(SceneError::Config("count ranges must be non-empty".into()));
        }
        check_range("body_width", self.body_width, 0.0)?;
        check_range("body_aspect", self.body_aspect, 0.0)?;
        if !(self.crowding >= 0.0 && self.crowding <= 1.0) {
            return Err(SceneError::Config(format!("crowding {} is not in [0, 1]", self.crowding)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SceneError::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.max_attempts == 0 {
            return Err(SceneError::Config("max_attempts must be >= 1".into()));
        }
        for p in &self.parts {
            check_range(&format!("{} size", p.name), p.size, 0.0)?;
            check_range(&format!("{} aspect", p.name), p.aspect, 0.0)?;
            if !(0.0..=1.0).contains(&p.visible_prob) {
                return Err(SceneError::Config(format!("{} visible_prob is not in [0, 1]", p.name)));
            }
            if p.jitter.iter().any(|j| !(*j >= 0.0)) || p.center.iter().any(|c| !c.is_finite()) {
                return Err(SceneError::Config(format!("{} placement is invalid", p.name)));
            }
        }
        self.schema()?;
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn inside(b: &BBox, w: f64, h: f64) -> bool {
    let [x1, y1, x2, y2] = b.corners();
    x1 >= 1.0 && y1 >= 1.0 && x2 <= w - 1.0 && y2 <= h - 1.0
}

fn place_bodies(cfg: &SceneConfig, rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<BBox>> {
    let (iw, ih) = (cfg.image_w as f64, cfg.image_h as f64);
    let mut bodies: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let w = uniform(rng, cfg.body_width);
            let h = w * uniform(rng, cfg.body_aspect);
            if w + 2.0 >= iw || h + 2.0 >= ih {
                return None;
            }
            let cx = rng.random_range(w / 2.0 + 1.0..iw - w / 2.0 - 1.0);
            let cy = rng.random_range(h / 2.0 + 1.0..ih - h / 2.0 - 1.0);
            let b = BBox::from_array(round_box(&BBox::pixels(cx, cy, w, h)), Frame::ImagePixels);
            bodies.iter().all(|o| iou_raw(&b, o) <= cfg.crowding).then_some(b)
        })?;
        bodies.push(placed);
    }
    Some(bodies)
}

fn sample_part(rule: &PartRule, body: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let jx = rng.random_range(-1.0..=1.0) * rule.jitter[0];
    let jy = rng.random_range(-1.0..=1.0) * rule.jitter[1];
    let w = body.w * uniform(rng, rule.size);
    let h = w * uniform(rng, rule.aspect);
    BBox::pixels(body.cx + (rule.center[0] + jx) * body.w, body.cy + (rule.center[1] + jy) * body.h, w, h)
}

fn round_box(b: &BBox) -> [f64; 4] {
    // two decimals keep JSON compact and exact on re-read
    b.to_array().map(|v| (v * 100.0).round() / 100.0)
}

fn draft_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng, id: &str) -> Option<ImageAnnotation> {
    let (iw, ih) = (cfg.image_w as f64, cfg.image_h as f64);
    let n = rng.random_range(cfg.bodies[0]..=cfg.bodies[1]);
    let bodies = place_bodies(cfg, rng, n)?;
    let mut ann = ImageAnnotation::empty(id, cfg.image_w, cfg.image_h);
    let mut all_parts: Vec<BBox> = Vec::new();
    for body in &bodies {
        let body_rec = *body;
        let mut parts = Vec::with_capacity(cfg.parts.len());
        for (slot, rule) in cfg.parts.iter().enumerate() {
            let want = rng.random_bool(rule.visible_prob);
            let found = want
                .then(|| {
                    (0..PLACEMENT_TRIES).find_map(|_| {
                        let p = BBox::from_array(round_box(&sample_part(rule, body, rng)), Frame::ImagePixels);
                        let ok = inside(&p, iw, ih)
                            && inner_overlap_raw(&p, &body_rec) >= PART_INNER_MIN
                            && all_parts.iter().all(|o| iou_raw(&p, o) < PART_IOU_MAX);
                        ok.then_some(p)
                    })
                })
                .flatten();
            match found {
                Some(p) => {
                    all_parts.push(p);
                    parts.push(PartRecord { slot, bbox: Some(p.to_array()), visible: 1 });
                }
                None => parts.push(PartRecord { slot, bbox: None, visible: 0 }),
            }
        }
        ann.bodies.push(BodyRecord { bbox: body_rec.to_array(), parts });
    }
    if !cfg.parts.is_empty() {
        let n_orphans = rng.random_range(cfg.orphan_parts[0]..=cfg.orphan_parts[1]);
        for _ in 0..n_orphans {
            let slot = rng.random_range(0..cfg.parts.len());
            let rule = &cfg.parts[slot];
            let orphan = (0..PLACEMENT_TRIES).find_map(|_| {
                let w = uniform(rng, cfg.body_width) * uniform(rng, rule.size);
                let h = w * uniform(rng, rule.aspect);
                let cx = rng.random_range(0.0..iw);
                let cy = rng.random_range(0.0..ih);
                let p = BBox::from_array(round_box(&BBox::pixels(cx, cy, w, h)), Frame::ImagePixels);
                let ok = inside(&p, iw, ih)
                    && ann.bodies.iter().all(|b| inner_overlap_raw(&p, &b.body_box()) <= ORPHAN_INNER_MAX)
                    && all_parts.iter().all(|o| iou_raw(&p, o) < PART_IOU_MAX);
                ok.then_some(p)
            })?;
            all_parts.push(orphan);
            ann.orphan_parts.push(OrphanPart { slot, bbox: orphan.to_array() });
        }
    }
    Some(ann)
}

/// A scene is usable when every body offset is representable and every
/// object owns at least one grid slot in the perfect rendering.
fn representable(
    ann: &ImageAnnotation,
    spec: &GridSpec,
    schema: &PartSchema,
    exclusive: bool,
) -> Result<bool, RepresentationError> {
    let set = assign_targets(ann, spec, schema)?;
    if set.dropped_body_offsets > 0 {
        return Ok(false);
    }
    if exclusive {
        let mut owner = HashMap::new();
        for t in &set.targets {
            if *owner.entry(t.slot_index()).or_insert(t.object) != t.object {
                return Ok(false);
            }
        }
    }
    let (_, wins) = render(&set, spec, schema)?;
    Ok(wins.iter().all(|&w| w > 0))
}

/// Deterministic scene for `cfg.seed`. The id is the seed in decimal.
pub fn generate_scene(cfg: &SceneConfig, spec: &GridSpec) -> Result<ImageAnnotation, SceneError> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    if spec.image_w != cfg.image_w || spec.image_h != cfg.image_h {
        return Err(SceneError::Config(format!(
            "scene is {}x{} but the grid expects {}x{}",
            cfg.image_w, cfg.image_h, spec.image_w, spec.image_h
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let id = cfg.seed.to_string();
    for _ in 0..cfg.max_attempts {
        if let Some(ann) = draft_scene(cfg, &mut rng, &id) {
            if representable(&ann, spec, &schema, cfg.exclusive_slots)? {
                return Ok(ann);
            }
        }
    }
    Err(SceneError::Exhausted { seed: cfg.seed, attempts: cfg.max_attempts })
}

/// `count` scenes with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn generate_scenes(cfg: &SceneConfig, spec: &GridSpec, count: usize) -> Result<Vec<ImageAnnotation>, SceneError> {
    let one = |i: usize| generate_scene(&SceneConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() }, spec);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(one).collect()
    }
}

fn render(set: &TargetSet, spec: &GridSpec, schema: &PartSchema) -> Result<(RawGridSet, Vec<usize>), RepresentationError> {
    let mut g = RawGridSet::filled(spec, schema, 0.0);
    for s in g.slots().collect::<Vec<_>>() {
        g.set(s.channel(channel::OBJ), -SATURATED_LOGIT);
        for c in 0..schema.num_classes() {
            g.set(s.channel(channel::CLS + c), -SATURATED_LOGIT);
        }
    }
    let mut owner = HashMap::new();
    let mut wins = vec![0usize; set.objects.len()];
    for t in &set.targets {
        let s = t.slot_index();
        if owner.contains_key(&s) {
            continue;
        }
        owner.insert(s, t.object);
        wins[t.object] += 1;
        let anchor = spec.levels[t.level].anchors[t.anchor];
        let raw = encode_box(&t.target_box, anchor, t.stride as f64)?;
        for (i, r) in raw.iter().enumerate() {
            g.set(s.channel(channel::BOX + i), *r);
        }
        g.set(s.channel(channel::OBJ), SATURATED_LOGIT);
        g.set(s.channel(channel::CLS + t.class), SATURATED_LOGIT);
        let base = channel::offsets(schema.k);
        for (j, vis) in t.offset_visible.iter().enumerate() {
            if *vis {
                g.set(s.channel(base + 2 * j), logit(t.offset_targets[j][0]));
                g.set(s.channel(base + 2 * j + 1), logit(t.offset_targets[j][1]));
            }
        }
    }
    Ok((g, wins))
}

/// Grids that decode exactly to `ann`: assigned slots get saturated positive
/// objectness and class logits plus encoded box and offsets; when several
/// targets share a slot the first one wins. Everything else is a saturated
/// negative.
pub fn render_perfect_grids(
    ann: &ImageAnnotation,
    spec: &GridSpec,
    schema: &PartSchema,
) -> Result<RawGridSet, RepresentationError> {
    let set = assign_targets(ann, spec, schema)?;
    Ok(render(&set, spec, schema)?.0)
}

/// Adds N(0, sigma) to every raw entry.
pub fn perturb_grids(grids: &RawGridSet, sigma: f64, seed: u64) -> Result<RawGridSet, SceneError> {
    if !(sigma >= 0.0) {
        return Err(SceneError::Config(format!("noise sigma {sigma} must be >= 0")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| SceneError::Config(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = grids.clone();
    for g in &mut out.grids {
        for v in &mut g.data {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Reference suppression: repeatedly take the best remaining detection
/// (lowest index on ties) and drop everything overlapping it.
pub fn oracle_nms(dets: &[Detection], conf: f64, iou_threshold: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= conf).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for (pos, &i) in remaining.iter().enumerate() {
            let b = remaining[best];
            if dets[i].score > dets[b].score || (dets[i].score == dets[b].score && i < b) {
                best = pos;
            }
        }
        let top = remaining.swap_remove(best);
        keep.push(top);
        remaining.retain(|&j| iou_raw(&dets[top].bbox, &dets[j].bbox) <= iou_threshold);
    }
    keep
}

/// Reference association over every (body, slot, part) triple at once.
pub fn oracle_associate(bodies: &[BodyDetection], parts: &[Detection], inner_iou: f64) -> Vec<Vec<Option<usize>>> {
    let k = bodies.first().map_or(0, |b| b.offset_points.len());
    let mut triples: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (bi, b) in bodies.iter().enumerate() {
        for slot in 0..k {
            for (pi, p) in parts.iter().enumerate() {
                if p.slot == Some(slot) && inner_overlap_raw(&p.bbox, &b.det.bbox) > inner_iou {
                    triples.push((point_distance(b.offset_points[slot], p.bbox.center()), bi, pi, slot));
                }
            }
        }
    }
    triples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut table = vec![vec![None; k]; bodies.len()];
    let mut used = vec![false; parts.len()];
    for (_, bi, pi, slot) in triples {
        if table[bi][slot].is_none() && !used[pi] {
            table[bi][slot] = Some(pi);
            used[pi] = true;
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{associate, match_parts, nms, run_inference, Thresholds};
    use crate::representation::{ObjectKind, DEFAULT_STRIDES};

    fn spec() -> GridSpec {
        GridSpec::with_default_anchors(320, 320, &DEFAULT_STRIDES).unwrap()
    }

    #[test]
    fn presets_validate() {
        SceneConfig::faces(0).validate().unwrap();
        SceneConfig::hands(0).validate().unwrap();
        assert_eq!(SceneConfig::hands(0).schema().unwrap().k, 2);
        let mut bad = SceneConfig::faces(0);
        bad.bodies = [3, 2];
        assert!(bad.validate().is_err());
        bad = SceneConfig::faces(0);
        bad.parts[0].visible_prob = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&SceneConfig::hands(7), &spec()).unwrap();
        let b = generate_scene(&SceneConfig::hands(7), &spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneConfig::hands(8), &spec()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_body_count() {
        let cfg = SceneConfig { bodies: [5, 5], ..SceneConfig::faces(3) };
        assert_eq!(generate_scene(&cfg, &spec()).unwrap().bodies.len(), 5);
    }

    #[test]
    fn scenes_respect_their_bounds() {
        let spec = spec();
        for seed in 0..40 {
            let cfg = if seed % 2 == 0 { SceneConfig::faces(seed) } else { SceneConfig::hands(seed) };
            let schema = cfg.schema().unwrap();
            let ann = generate_scene(&cfg, &spec).unwrap();
            ann.validate(&schema).unwrap();
            for (i, a) in ann.bodies.iter().enumerate() {
                for b in &ann.bodies[i + 1..] {
                    assert!(iou_raw(&a.body_box(), &b.body_box()) <= cfg.crowding);
                }
                for s in 0..schema.k {
                    if let Some(p) = a.visible_part(s) {
                        assert!(inner_overlap_raw(&p, &a.body_box()) > 0.6);
                    }
                }
            }
            assert_eq!(assign_targets(&ann, &spec, &schema).unwrap().dropped_body_offsets, 0);
        }
    }

    #[test]
    fn empty_scene_renders_all_negative() {
        let spec = spec();
        let schema = PartSchema::faces();
        let g = render_perfect_grids(&ImageAnnotation::empty("e", 320, 320), &spec, &schema).unwrap();
        let out = run_inference(&g, &spec, &schema, &Thresholds::default()).unwrap();
        assert!(out.bodies.is_empty() && out.parts.is_empty());
    }

    #[test]
    fn single_pair_roundtrips() {
        let spec = spec();
        let schema = PartSchema::faces();
        let mut ann = ImageAnnotation::empty("one", 320, 320);
        ann.bodies.push(BodyRecord {
            bbox: [150.0, 160.0, 50.0, 120.0],
            parts: vec![PartRecord { slot: 0, bbox: Some([150.0, 118.0, 18.0, 20.0]), visible: 1 }],
        });
        let g = render_perfect_grids(&ann, &spec, &schema).unwrap();
        let out = run_inference(&g, &spec, &schema, &Thresholds::default()).unwrap();
        assert_eq!((out.bodies.len(), out.parts.len()), (1, 1));
        assert_eq!(out.bodies[0].associated, vec![Some(0)]);
        let b = out.bodies[0].det.bbox;
        assert!((b.cx - 150.0).abs() < 1e-6 && (b.h - 120.0).abs() < 1e-6);
    }

    #[test]
    fn zero_noise_is_identity_and_noise_is_seeded() {
        let spec = spec();
        let schema = PartSchema::faces();
        let g = RawGridSet::filled(&spec, &schema, 0.5);
        assert_eq!(perturb_grids(&g, 0.0, 1).unwrap(), g);
        assert_eq!(perturb_grids(&g, 0.1, 1).unwrap(), perturb_grids(&g, 0.1, 1).unwrap());
        assert_ne!(perturb_grids(&g, 0.1, 1).unwrap(), perturb_grids(&g, 0.1, 2).unwrap());
        assert!(perturb_grids(&g, -1.0, 1).is_err());
    }

    fn random_dets(rng: &mut ChaCha8Rng, n: usize, kind: ObjectKind, k: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| Detection {
                bbox: BBox::pixels(
                    rng.random_range(0.0..100.0),
                    rng.random_range(0.0..100.0),
                    rng.random_range(5.0..60.0),
                    rng.random_range(5.0..60.0),
                ),
                score: rng.random_range(0..8) as f64 / 8.0,
                kind,
                slot: (kind == ObjectKind::Part).then(|| rng.random_range(0..k.max(1))),
            })
            .collect()
    }

    #[test]
    fn oracles_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(0..30);
            let dets = random_dets(&mut rng, n, ObjectKind::Body, 1);
            assert_eq!(nms(&dets, 0.1, 0.5), oracle_nms(&dets, 0.1, 0.5));

            let k = rng.random_range(1..3);
            let bodies: Vec<BodyDetection> = random_dets(&mut rng, 6, ObjectKind::Body, k)
                .into_iter()
                .map(|det| BodyDetection {
                    offset_points: (0..k).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect(),
                    associated: vec![None; k],
                    det,
                })
                .collect();
            let parts = random_dets(&mut rng, 10, ObjectKind::Part, k);
            let got = associate(bodies.clone(), &parts, 0.3);
            let table: Vec<_> = got.iter().map(|b| b.associated.clone()).collect();
            assert_eq!(table, oracle_associate(&bodies, &parts, 0.3));
            assert_eq!(table, match_parts(&bodies, &parts, 0.3));
        }
    }
}
