mod common;

use chrono::Duration;
use common::{t0, Harness};
use pipescan_core::dataset::XorShift64Star;
use pipescan_core::domain::Frame;
use pipescan_core::store::{blob_id, Role};
use pipescan_core::synth::gray_frame;
use pipescan_server::services::ApiRequest;
use serde_json::{json, Value};

fn frames(n: usize) -> Vec<Frame> {
    let mut rng = XorShift64Star::seed_from(3);
    (0..n).map(|_| gray_frame(16, 16, 100, &mut rng)).collect()
}

fn annotation(frame: u32, class: &str, x: u32, source: &str) -> Value {
    json!({
        "frame_index": frame,
        "detection": {"box": {"x_min": x, "y_min": 1, "x_max": x + 4, "y_max": 6}, "class": class, "score": 0.75},
        "source": source,
        "params": {"flattener_window": 15, "rainbow_threshold": 0.5, "min_region_area": 25, "nms_iou_threshold": 0.5},
        "screenshot_ref": null,
        "created_at": t0(),
    })
}

#[test]
fn create_then_get_has_equal_metadata_and_no_annotations() {
    let h = Harness::new();
    let op = h.user("op", Role::Operator);
    let created = h.ok(201, "POST", "/api/inspections", &op, Some(json!({"id": "a", "title": "Line 7", "tags": ["north"]})));
    let got = h.ok(200, "GET", "/api/inspections/a", &op, None);
    assert_eq!(created, got);
    assert_eq!(got["title"], "Line 7");
    assert_eq!(got["created_at"], json!(t0()));
    assert_eq!(got["annotations"], json!([]));
    assert_eq!(got["locked"], false);
    // repeating the same create is idempotent
    let again = h.ok(200, "POST", "/api/inspections", &op, Some(json!({"id": "a", "title": "Line 7", "created_at": t0()})));
    assert_eq!(again, got);
    h.ok(409, "POST", "/api/inspections", &op, Some(json!({"id": "a", "title": "other"})));
    h.ok(400, "POST", "/api/inspections", &op, Some(json!({"id": "blobs", "title": "x"})));
    h.ok(404, "GET", "/api/inspections/nope", &op, None);
}

#[test]
fn library_pages_newest_first() {
    let h = Harness::new();
    let op = h.user("op", Role::Operator);
    for i in 0..25 {
        let at = t0() - Duration::hours(i);
        h.ok(201, "POST", "/api/inspections", &op, Some(json!({"id": format!("i{i:02}"), "title": "t", "created_at": at})));
    }
    let mut seen = Vec::new();
    let mut sizes = Vec::new();
    for page in 1..=4 {
        let r = h.ok(200, "GET", &format!("/api/inspections?page={page}&page_size=10"), &op, None);
        assert_eq!(r["total"], 25);
        let items = r["items"].as_array().unwrap();
        sizes.push(items.len());
        seen.extend(items.iter().map(|i| i["id"].as_str().unwrap().to_string()));
    }
    assert_eq!(sizes, [10, 10, 5, 0]);
    let expected: Vec<String> = (0..25).map(|i| format!("i{i:02}")).collect();
    assert_eq!(seen, expected);
    h.ok(400, "GET", "/api/inspections?page=0", &op, None);
    h.ok(400, "GET", "/api/inspections?page_size=201", &op, None);
    h.ok(400, "GET", "/api/inspections?page=x", &op, None);
}

#[test]
fn frames_must_be_uploaded_first() {
    let h = Harness::new();
    let op = h.user("op", Role::Operator);
    h.ok(201, "POST", "/api/inspections", &op, Some(json!({"id": "a", "title": "t"})));
    let absent = blob_id(b"never uploaded");
    let r = h.ok(400, "POST", "/api/inspections/a/frames", &op, Some(json!({"frame_refs": [absent]})));
    assert_eq!(r["code"], "missing_blobs");
    assert_eq!(r["missing"], json!([absent]));
    let m = h.ok(200, "POST", "/api/inspections/blobs/missing", &op, Some(json!({"ids": [absent]})));
    assert_eq!(m["missing"], json!([absent]));

    // wrong id for the body
    let r = h.api.handle(&ApiRequest::new("PUT", &format!("/api/inspections/blobs/{absent}")).token(&op).bytes(b"other".to_vec()));
    assert_eq!(r.status, 400);
    assert_eq!(r.json_body()["code"], "hash_mismatch");

    let id = h.put_bytes(&op, b"never uploaded".to_vec());
    assert_eq!(id, absent);
    // idempotent re-upload
    h.put_bytes(&op, b"never uploaded".to_vec());
    let r = h.api.handle(&ApiRequest::new("GET", &format!("/api/inspections/blobs/{id}")).token(&op));
    assert_eq!(r.body, b"never uploaded");
    h.ok(200, "POST", "/api/inspections/a/frames", &op, Some(json!({"frame_refs": [absent]})));
}

#[test]
fn put_then_download_round_trips() {
    let h = Harness::new();
    let op = h.user("op", Role::Operator);
    let insp = h.inspection(&op, "a", &frames(2));
    let list = json!([annotation(0, "Junction", 1, "manual"), annotation(1, "Crack", 3, "automatic")]);
    let rev = insp["revision"].as_u64().unwrap();
    let r = h.ok(200, "PUT", "/api/defects/a", &op, Some(json!({"annotations": list, "expected_revision": rev})));
    assert_eq!(r["changed"], true);
    let b1 = h.call("GET", "/api/inspections/a/bundle", Some(&op), None);
    let b2 = h.call("GET", "/api/inspections/a/bundle", Some(&op), None);
    assert_eq!(b1.body, b2.body);
    let bundle = b1.json_body();
    assert_eq!(bundle["bundle"]["annotations"], list);
    assert_eq!(bundle["bundle"]["frame_refs"], insp["frame_refs"]);
    let d = h.ok(200, "GET", "/api/defects/a", &op, None);
    assert_eq!(d["annotations"], list);

    // same list again is a no-op even with a stale revision
    let r = h.ok(200, "PUT", "/api/defects/a", &op, Some(json!({"annotations": list, "expected_revision": rev})));
    assert_eq!(r["changed"], false);
    assert_eq!(r["revision"], bundle["revision"]);
}

#[test]
fn delete_one_of_two() {
    let h = Harness::new();
    let op = h.user("op", Role::Operator);
    h.inspection(&op, "a", &frames(1));
    let list = json!([annotation(0, "Junction", 1, "manual"), annotation(0, "Crack", 8, "automatic")]);
    h.ok(200, "PUT", "/api/defects/a", &op, Some(json!({"annotations": list})));
    let r = h.ok(200, "DELETE", "/api/defects/a/1", &op, None);
    assert_eq!(r["annotations"], json!([list[0]]));
    h.ok(404, "DELETE", "/api/defects/a/5", &op, None);
    h.ok(400, "DELETE", "/api/defects/a/x", &op, None);
    let rev = r["revision"].as_u64().unwrap();
    let r = h.ok(409, "DELETE", &format!("/api/defects/a/0?expected_revision={}", rev - 1), &op, None);
    assert_eq!(r["current_revision"], rev);
}

#[test]
fn invalid_annotations_are_rejected() {
    let h = Harness::new();
    let op = h.user("op", Role::Operator);
    h.inspection(&op, "a", &frames(1));
    let r = h.ok(400, "PUT", "/api/defects/a", &op, Some(json!({"annotations": [annotation(3, "Junction", 1, "manual")]})));
    assert_eq!(r["code"], "validation_failed");
    assert!(r["violations"].as_array().is_some_and(|v| !v.is_empty()));
    let mut bad = annotation(0, "Junction", 1, "manual");
    bad["screenshot_ref"] = json!(blob_id(b"missing shot"));
    assert_eq!(h.ok(400, "PUT", "/api/defects/a", &op, Some(json!({"annotations": [bad]})))["code"], "missing_blobs");
    h.ok(400, "PUT", "/api/defects/a", &op, Some(json!({"oops": []})));
}

#[test]
fn stale_put_from_second_client_conflicts_and_leaves_server_list() {
    let h = Harness::new();
    let alice = h.user("alice", Role::Operator);
    let bob = h.user("bob", Role::Operator);
    h.inspection(&alice, "a", &frames(1));
    // both download the same revision
    let rev_a = h.ok(200, "GET", "/api/inspections/a/bundle", &alice, None)["revision"].as_u64().unwrap();
    let rev_b = h.ok(200, "GET", "/api/inspections/a/bundle", &bob, None)["revision"].as_u64().unwrap();
    assert_eq!(rev_a, rev_b);
    let alice_list = json!([annotation(0, "Junction", 1, "manual")]);
    let bob_list = json!([annotation(0, "Crack", 5, "manual")]);
    let won = h.ok(200, "PUT", "/api/defects/a", &alice, Some(json!({"annotations": alice_list, "expected_revision": rev_a})));
    let lost = h.ok(409, "PUT", "/api/defects/a", &bob, Some(json!({"annotations": bob_list, "expected_revision": rev_b})));
    assert_eq!(lost["code"], "revision_conflict");
    assert_eq!(lost["current_revision"], won["revision"]);
    let server = h.ok(200, "GET", "/api/defects/a", &bob, None);
    assert_eq!(server["annotations"], alice_list);
}

#[test]
fn tags_are_listed_with_counts() {
    let h = Harness::new();
    let op = h.user("op", Role::Operator);
    h.ok(201, "POST", "/api/inspections", &op, Some(json!({"id": "a", "title": "t"})));
    h.ok(201, "POST", "/api/inspections", &op, Some(json!({"id": "b", "title": "t"})));
    h.ok(200, "PUT", "/api/tags/a", &op, Some(json!({"tags": ["north", "pvc"]})));
    h.ok(200, "PUT", "/api/tags/b", &op, Some(json!({"tags": ["pvc"]})));
    h.ok(400, "PUT", "/api/tags/b", &op, Some(json!({"tags": ["x", "x"]})));
    let t = h.ok(200, "GET", "/api/tags", &op, None);
    assert_eq!(t["tags"], json!([{"tag": "north", "count": 1}, {"tag": "pvc", "count": 2}]));
}

#[test]
fn responses_are_byte_stable_across_restart() {
    let mut h = Harness::new();
    let op = h.user("op", Role::Operator);
    h.inspection(&op, "a", &frames(2));
    h.ok(200, "PUT", "/api/defects/a", &op, Some(json!({"annotations": [annotation(1, "Junction", 2, "manual")]})));
    let before = h.call("GET", "/api/inspections/a/bundle", Some(&op), None).body;
    h.reopen();
    let after = h.call("GET", "/api/inspections/a/bundle", Some(&op), None).body;
    assert_eq!(before, after);
}
