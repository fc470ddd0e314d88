use bpjdet_web::{associate_parts, decode_slot, run_scene};
use serde_json::{json, Value};

fn call(f: fn(&str) -> String, v: Value) -> Value {
    serde_json::from_str(&f(&v.to_string())).unwrap()
}

#[test]
fn decode_slot_centre_of_the_range() {
    let r = call(decode_slot, json!({ "raw_box": [0.0, 0.0, 0.0, 0.0], "raw_offsets": [0.0, 0.0], "anchor": [16.0, 32.0], "stride": 8.0 }));
    assert_eq!(r["box"], json!([0.5, 0.5, 2.0, 4.0]));
    assert_eq!(r["offsets"], json!([[0.0, 0.0]]));
    assert_eq!(r["bounds"]["size"], json!([8.0, 16.0]));
}

#[test]
fn decode_slot_stays_inside_bounds_for_huge_inputs() {
    let r = call(decode_slot, json!({ "raw_box": [1e6, -1e6, 1e6, -1e6], "raw_offsets": [1e6, -1e6], "anchor": [10.0, 10.0], "stride": 10.0 }));
    let b: Vec<f64> = serde_json::from_value(r["box"].clone()).unwrap();
    assert!(b[0] < 1.5 && b[1] > -0.5 && b[2] < 4.0 && b[3] > 0.0, "{b:?}");
    let o: Vec<[f64; 2]> = serde_json::from_value(r["offsets"].clone()).unwrap();
    assert!(o[0][0] < 2.0 && o[0][1] > -2.0);
}

#[test]
fn clean_scene_scores_perfectly() {
    for hands in [false, true] {
        let r = call(run_scene, json!({ "seed": 3, "hands": hands }));
        assert_eq!(r["report"]["ap_body"].as_f64().unwrap(), 1.0, "{r}");
        assert_eq!(r["report"]["cond_accuracy"].as_f64().unwrap(), 100.0);
        assert_eq!(r["parts"].as_array().unwrap().len(), if hands { 2 } else { 1 });
        assert_eq!(
            r["prediction"]["bodies"].as_array().unwrap().len(),
            r["annotation"]["bodies"].as_array().unwrap().len()
        );
    }
}

#[test]
fn dragging_an_offset_moves_the_link() {
    let parts = json!([
        { "box": [20.0, 10.0, 6.0, 6.0], "score": 0.9, "slot": 0 },
        { "box": [40.0, 10.0, 6.0, 6.0], "score": 0.8, "slot": 0 }
    ]);
    let body = |pt: [f64; 2]| json!({ "box": [30.0, 30.0, 40.0, 60.0], "score": 0.9, "offsets": [pt] });
    let near_first = call(associate_parts, json!({ "bodies": [body([21.0, 10.0])], "parts": parts }));
    assert_eq!(near_first["associations"], json!([[0]]));
    let near_second = call(associate_parts, json!({ "bodies": [body([39.0, 11.0])], "parts": parts }));
    assert_eq!(near_second["associations"], json!([[1]]));
}

#[test]
fn bad_requests_come_back_as_errors() {
    let cases = [
        (decode_slot as fn(&str) -> String, json!({ "raw_box": [0, 0, 0, 0], "anchor": [0.0, 1.0], "stride": 8.0 })),
        (decode_slot, json!({ "raw_box": [0, 0, 0, 0], "raw_offsets": [1.0], "anchor": [1.0, 1.0], "stride": 8.0 })),
        (run_scene, json!({ "seed": 1, "noise": -1.0 })),
        (run_scene, json!({ "seed": 1, "colour": "red" })),
        (associate_parts, json!({ "bodies": [], "parts": [], "inner_iou": 2.0 })),
        (associate_parts, json!({ "bodies": [{ "box": [0, 0, 1, 1], "score": 1.0, "offsets": [[0, 0]] }], "parts": [{ "box": [0, 0, 1, 1], "score": 1.0, "slot": 3 }] })),
    ];
    for (f, req) in cases {
        let r = call(f, req.clone());
        assert!(r["error"].is_string(), "{req} -> {r}");
    }
}
