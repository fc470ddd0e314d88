use bpjdet_core::association::{associate, nms, run_inference, BodyDetection, Detection, ImagePrediction, Thresholds};
use bpjdet_core::io::{read_grids, write_grids};
use bpjdet_core::losses::{loss_total, LossWeights};
use bpjdet_core::metrics::{evaluate, mr2, voc_ap, GtBox, ScoredBox};
use bpjdet_core::representation::{assign_targets, GridSpec, ObjectKind, DEFAULT_STRIDES};
use bpjdet_core::synthscene::{generate_scene, oracle_associate, oracle_nms, perturb_grids, render_perfect_grids, SceneConfig};
use bpjdet_core::trainer::{overfit, stability_bound, TrainConfig};
use bpjdet_core::BBox;
use proptest::prelude::*;

fn spec320() -> GridSpec {
    GridSpec::with_default_anchors(320, 320, &DEFAULT_STRIDES).unwrap()
}

fn det(kind: ObjectKind) -> impl Strategy<Value = Detection> {
    (0u8..100, 0u8..100, 4u8..40, 4u8..40, 0u8..=4, 0usize..2).prop_map(move |(x, y, w, h, s, slot)| Detection {
        bbox: BBox::pixels(x as f64, y as f64, w as f64, h as f64),
        score: s as f64 / 4.0,
        kind,
        slot: (kind == ObjectKind::Part).then_some(slot),
    })
}

fn body() -> impl Strategy<Value = BodyDetection> {
    (det(ObjectKind::Body), prop::collection::vec((0u8..100, 0u8..100), 2)).prop_map(|(det, pts)| BodyDetection {
        det,
        offset_points: pts.into_iter().map(|(x, y)| [x as f64, y as f64]).collect(),
        associated: vec![None; 2],
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_matches_oracle(dets in prop::collection::vec(det(ObjectKind::Body), 0..30), conf in 0.0..0.6f64, iou in 0.1..0.9f64) {
        prop_assert_eq!(nms(&dets, conf, iou), oracle_nms(&dets, conf, iou));
    }

    #[test]
    fn associate_matches_oracle(
        bodies in prop::collection::vec(body(), 0..8),
        parts in prop::collection::vec(det(ObjectKind::Part), 0..16),
        inner in 0.0..0.9f64,
    ) {
        let got: Vec<_> = associate(bodies.clone(), &parts, inner).into_iter().map(|b| b.associated).collect();
        prop_assert_eq!(got, oracle_associate(&bodies, &parts, inner));
    }

    #[test]
    fn each_part_links_to_at_most_one_body(
        bodies in prop::collection::vec(body(), 0..8),
        parts in prop::collection::vec(det(ObjectKind::Part), 0..16),
    ) {
        let out = associate(bodies, &parts, 0.3);
        let mut seen = vec![false; parts.len()];
        for b in &out {
            for (slot, a) in b.associated.iter().enumerate() {
                if let Some(i) = *a {
                    prop_assert!(!seen[i]);
                    prop_assert_eq!(parts[i].slot, Some(slot));
                    seen[i] = true;
                }
            }
        }
    }

    #[test]
    fn perfect_render_roundtrips(seed in 0u64..10_000, hands in any::<bool>()) {
        let spec = spec320();
        let cfg = if hands { SceneConfig::hands(seed) } else { SceneConfig::faces(seed) };
        let schema = cfg.schema().unwrap();
        let ann = generate_scene(&cfg, &spec).unwrap();
        let g = render_perfect_grids(&ann, &spec, &schema).unwrap();
        let out = run_inference(&g, &spec, &schema, &Thresholds::default()).unwrap();
        let pred = ImagePrediction::from_output(ann.id.clone(), &out);
        let r = evaluate(std::slice::from_ref(&ann), &[pred], &schema).unwrap();
        prop_assert!((r.ap_body - 1.0).abs() < 1e-9);
        prop_assert!(r.mmr2 < 1e-6);
        prop_assert_eq!(r.cond_accuracy, 100.0);
    }

    #[test]
    fn grid_file_roundtrips(seed in any::<u64>(), sigma in 0.0..3.0f64) {
        let spec = GridSpec::with_default_anchors(64, 64, &DEFAULT_STRIDES).unwrap();
        let cfg = SceneConfig { image_w: 64, image_h: 64, ..SceneConfig::hands(0) };
        let schema = cfg.schema().unwrap();
        let g = perturb_grids(&bpjdet_core::representation::RawGridSet::filled(&spec, &schema, 0.0), sigma, seed).unwrap();
        let mut buf = Vec::new();
        write_grids(&mut buf, &g, schema.k).unwrap();
        let (back, k) = read_grids(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(k, schema.k);
        for (a, b) in g.grids.iter().zip(&back.grids) {
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn ap_and_mr_ignore_monotone_rescaling(scores in prop::collection::vec(0.01..1.0f64, 1..12), power in 0.2..5.0f64) {
        let dets: Vec<ScoredBox> = scores.iter().enumerate().map(|(i, &s)| ScoredBox {
            image: i % 3,
            bbox: BBox::pixels((i % 4) as f64 * 30.0, 0.0, 10.0, 10.0),
            score: s,
            label: 0,
        }).collect();
        let gts: Vec<GtBox> = (0..3).map(|i| GtBox { image: i, bbox: BBox::pixels(0.0, 0.0, 10.0, 10.0), label: 0 }).collect();
        let squashed: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: d.score.powf(power), ..d.clone() }).collect();
        prop_assert_eq!(voc_ap(&dets, &gts, 0.5), voc_ap(&squashed, &gts, 0.5));
        let m = mr2(&dets, &gts, 3);
        prop_assert_eq!(m, mr2(&squashed, &gts, 3));
        prop_assert!((0.0..=100.0).contains(&m));
    }

    #[test]
    fn loss_is_target_order_invariant(seed in 0u64..500) {
        let spec = spec320();
        let cfg = SceneConfig::hands(seed);
        let schema = cfg.schema().unwrap();
        let ann = generate_scene(&cfg, &spec).unwrap();
        let set = assign_targets(&ann, &spec, &schema).unwrap();
        let g = perturb_grids(&render_perfect_grids(&ann, &spec, &schema).unwrap(), 0.5, seed).unwrap();
        let mut rev = set.targets.clone();
        rev.reverse();
        let w = LossWeights::default();
        let a = loss_total(&g, &set.targets, &spec, &schema, &w).l_total;
        let b = loss_total(&g, &rev, &spec, &schema, &w).l_total;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn windowed_loss_descends_below_the_stability_bound() {
    let spec = GridSpec::with_default_anchors(192, 192, &DEFAULT_STRIDES).unwrap();
    let cfg = SceneConfig {
        image_w: 192,
        image_h: 192,
        bodies: [5, 5],
        body_width: [36.0, 56.0],
        exclusive_slots: true,
        orphan_parts: [0, 0],
        ..SceneConfig::faces(2)
    };
    let schema = cfg.schema().unwrap();
    let ann = generate_scene(&cfg, &spec).unwrap();
    let set = assign_targets(&ann, &spec, &schema).unwrap();
    let weights = LossWeights::default();
    let bound = stability_bound(&set, &weights);
    let train = TrainConfig { lr: bound.min(10.0), steps: 1000, log_every: 1, ..Default::default() };
    let r = overfit(&ann, &spec, &schema, &train, &Thresholds::default()).unwrap();
    let totals: Vec<f64> = r.trace.iter().take(1000).map(|t| t.loss.l_total).collect();
    let means: Vec<f64> = totals.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "window means {means:?}");
    }
}

#[test]
fn runs_are_reproducible() {
    let spec = spec320();
    let a = generate_scene(&SceneConfig::faces(77), &spec).unwrap();
    let b = generate_scene(&SceneConfig::faces(77), &spec).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
