use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use pvad::dataset::{write_manifest, write_png16, BinaryLabel, FaultClass, ImageId, ManifestRecord, ModuleId, PlantId, RawFrame};
use pvad::encoder::Embedding;
use pvad::evaluation::{module_confusion, savings_report};
use pvad::index::{aggregate_modules, build_index, predict_batch, Prediction};
use pvad::store::{write_embeddings, write_predictions};
use pvad_workbench::service::{router, AppState, Projection, QueuePage, Report};
use serde_json::{json, Value};
use tower::ServiceExt;

const MODULES: u32 = 30;
const VIEWS: u32 = 4;

fn unit(angle: f64) -> Vec<f32> {
    vec![angle.cos() as f32, angle.sin() as f32]
}

fn embedding(id: u64, module: u32, angle: f64, label: Option<bool>) -> Embedding {
    Embedding {
        z: unit(angle),
        image_id: ImageId(id),
        plant_id: PlantId(1),
        module_id: ModuleId(module),
        binary_label: label.map(|a| if a { BinaryLabel::Anomalous } else { BinaryLabel::Normal }),
        fault_class: label.and_then(|a| a.then_some(FaultClass::Chs)),
    }
}

/// Source: normals around angle 0, anomalies around π/2. Target modules
/// sweep from normal to anomalous; every fifth module is truly anomalous.
struct Fixture {
    dir: tempfile::TempDir,
    targets: Vec<Embedding>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut source = Vec::new();
    for i in 0..150 {
        source.push(embedding(10_000 + i, 5000, 0.5 * (i as f64 / 150.0) - 0.25, Some(false)));
    }
    for i in 0..50 {
        source.push(embedding(20_000 + i, 6000, std::f64::consts::FRAC_PI_2 + 0.5 * (i as f64 / 50.0) - 0.25, Some(true)));
    }
    write_embeddings(&root.join("source.iremb"), &source).unwrap();

    let mut targets = Vec::new();
    let mut records = Vec::new();
    std::fs::create_dir_all(root.join("images")).unwrap();
    for m in 0..MODULES {
        let anomalous = m % 5 == 0;
        for v in 0..VIEWS {
            let id = u64::from(m * VIEWS + v);
            let angle = std::f64::consts::FRAC_PI_2 * (f64::from(m) / f64::from(MODULES)) + 0.01 * f64::from(v);
            targets.push(embedding(id, m, angle, None));
            let mut frame = RawFrame::filled(12, 10, 7000);
            if m == 3 && v == 0 {
                frame.data[17] = 9000;
            }
            let rel = format!("images/{id:04}.png");
            write_png16(&root.join(&rel), &frame).unwrap();
            records.push(ManifestRecord {
                image_id: ImageId(id),
                plant_id: PlantId(1),
                module_id: ModuleId(m),
                path: rel,
                orientation: 0,
                binary_label: Some(if anomalous { BinaryLabel::Anomalous } else { BinaryLabel::Normal }),
                fault_class: anomalous.then_some(FaultClass::Chs),
                gain: 0.04,
                offset: -273.15,
            });
        }
    }
    write_embeddings(&root.join("target.iremb"), &targets).unwrap();
    let index = build_index(&source).unwrap();
    write_predictions(&root.join("predictions.jsonl"), &predict_batch(&index, &targets, 20, 0.1).unwrap()).unwrap();
    write_manifest(&root.join("manifest.jsonl"), &records).unwrap();
    Fixture { dir, targets }
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    (status, response.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn app(root: &Path) -> axum::Router {
    router(Arc::new(AppState::open(root).unwrap()))
}

async fn create(app: &axum::Router, delta: f64, labelled: bool) -> String {
    let mut body = json!({ "source_store": "source.iremb", "predictions": "predictions.jsonl", "delta": delta, "k": 20 });
    if labelled {
        body["labels"] = json!("manifest.jsonl");
    }
    let (status, v) = call_json(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn page(app: &axum::Router, id: &str, cursor: Option<&str>, limit: usize) -> QueuePage {
    let uri = match cursor {
        Some(c) => format!("/v1/sessions/{id}/queue?cursor={c}&limit={limit}"),
        None => format!("/v1/sessions/{id}/queue?limit={limit}"),
    };
    let (status, bytes) = call(app, Method::GET, &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&bytes).unwrap()
}

async fn set_delta(app: &axum::Router, id: &str, delta: f64) -> (StatusCode, Value) {
    call_json(app, Method::PUT, &format!("/v1/sessions/{id}/threshold"), Some(json!({ "delta": delta }))).await
}

async fn decide(app: &axum::Router, id: &str, module: u32, verdict: &str) -> (StatusCode, Value) {
    call_json(
        app,
        Method::POST,
        &format!("/v1/sessions/{id}/decisions"),
        Some(json!({ "module_id": module, "verdict": verdict })),
    )
    .await
}

async fn report(app: &axum::Router, id: &str) -> Report {
    let (status, bytes) = call(app, Method::GET, &format!("/v1/sessions/{id}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test]
async fn sessions_are_independent_and_delta_one_flags_nothing() {
    let f = fixture();
    let app = app(f.dir.path());
    let a = create(&app, 0.1, false).await;
    let b = create(&app, 0.1, false).await;
    assert_ne!(a, b);
    let c = create(&app, 1.0, false).await;
    let all = page(&app, &c, None, 100).await;
    assert_eq!(all.total, MODULES as usize);
    assert!(all.items.iter().all(|i| i.verdict == BinaryLabel::Normal));
    assert!(all.next_cursor.is_none());

    let (status, _) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({ "source_store": "missing.iremb", "predictions": "predictions.jsonl" })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({ "source_store": "source.iremb", "predictions": "manifest.jsonl" })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn queue_is_ordered_and_paginated() {
    let f = fixture();
    let app = app(f.dir.path());
    let id = create(&app, 0.1, false).await;
    assert!(page(&app, &id, None, 0).await.items.is_empty());
    let first = page(&app, &id, None, 10).await;
    let second = page(&app, &id, first.next_cursor.as_deref(), 10).await;
    let top = page(&app, &id, None, 20).await;
    let joined: Vec<_> = first.items.iter().chain(&second.items).cloned().collect();
    assert_eq!(joined, top.items);
    let all = page(&app, &id, None, 100).await.items;
    for w in all.windows(2) {
        assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].module_id < w[1].module_id));
    }

    let (status, _) = call_json(&app, Method::GET, "/v1/sessions/nope/queue", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn thresholds_move_verdicts_not_scores() {
    let f = fixture();
    let app = app(f.dir.path());
    let id = create(&app, 0.1, false).await;
    let scores = |items: &[pvad_workbench::service::QueueItem]| {
        let mut s: Vec<(ModuleId, u64)> = items.iter().map(|i| (i.module_id, i.score.to_bits())).collect();
        s.sort();
        s
    };
    let before = page(&app, &id, None, 100).await.items;

    let (status, v) = set_delta(&app, &id, 0.0).await;
    assert_eq!(status, StatusCode::OK);
    let p: Projection = serde_json::from_value(v).unwrap();
    let at_zero = page(&app, &id, None, 100).await.items;
    let positive = at_zero.iter().filter(|i| i.verdict == BinaryLabel::Anomalous).count() as u64;
    assert_eq!(p.modules_to_review, positive);
    assert!(at_zero.iter().filter(|i| i.score == 0.0).all(|i| i.verdict == BinaryLabel::Normal));
    assert!(p.estimated_lost_anomalies.is_none());

    let mut previous = u64::MAX;
    for step in 0..=20 {
        let (_, v) = set_delta(&app, &id, step as f64 / 20.0).await;
        let p: Projection = serde_json::from_value(v).unwrap();
        assert!(p.modules_to_review <= previous);
        assert_eq!(p.estimated_review_time_s, 3.0 * p.modules_to_review as f64);
        previous = p.modules_to_review;
    }
    assert_eq!(previous, 0);
    assert_eq!(scores(&before), scores(&page(&app, &id, None, 100).await.items));
    assert_eq!(set_delta(&app, &id, 1.5).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(set_delta(&app, &id, -0.1).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn labelled_projection_matches_savings_arithmetic() {
    let f = fixture();
    let app = app(f.dir.path());
    let id = create(&app, 0.3, true).await;
    let (_, v) = set_delta(&app, &id, 0.1).await;
    let p: Projection = serde_json::from_value(v).unwrap();

    let text = std::fs::read_to_string(f.dir.path().join("predictions.jsonl")).unwrap();
    let mut predictions: Vec<Prediction> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for p in &mut predictions {
        let anomalous = p.module_id.0 % 5 == 0;
        p.binary_label = Some(if anomalous { BinaryLabel::Anomalous } else { BinaryLabel::Normal });
        *p = p.with_delta(0.1);
    }
    let m = module_confusion(&aggregate_modules(&predictions).unwrap());
    let direct = savings_report(m.total(), m.tp + m.fn_, m.tnr().unwrap(), m.recall().unwrap(), 3.0).unwrap();
    assert_eq!(p.modules_to_review, direct.modules_to_review);
    assert_eq!(p.estimated_lost_anomalies, Some(direct.lost_anomalies));
    assert_eq!(report(&app, &id).await.savings, Some(direct));
}

#[tokio::test]
async fn decisions_overwrite_and_count() {
    let f = fixture();
    let app = app(f.dir.path());
    let id = create(&app, 0.1, false).await;
    assert_eq!(decide(&app, &id, 4, "confirmed_anomalous").await.0, StatusCode::OK);
    let (status, v) = decide(&app, &id, 4, "confirmed_normal").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["decided"], 1);
    let r = report(&app, &id).await;
    assert_eq!((r.progress.decided, r.progress.confirmed_normal, r.progress.confirmed_anomalous), (1, 1, 0));
    assert_eq!(decide(&app, &id, 999, "skipped").await.0, StatusCode::NOT_FOUND);
    assert_eq!(decide(&app, "nope", 4, "skipped").await.0, StatusCode::NOT_FOUND);
    assert_eq!(decide(&app, &id, 4, "maybe").await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let flagged: Vec<u32> = page(&app, &id, None, 100)
        .await
        .items
        .iter()
        .filter(|i| i.verdict == BinaryLabel::Anomalous)
        .map(|i| i.module_id.0)
        .collect();
    assert!(!flagged.is_empty());
    for m in &flagged {
        decide(&app, &id, *m, "confirmed_anomalous").await;
    }
    let r = report(&app, &id).await;
    let decided = r.progress.decided;
    assert_eq!(decided, flagged.len() as u64 + u64::from(!flagged.contains(&4)));
    assert_eq!(r.progress.review_time_s, 3.0 * decided as f64);

    for m in 0..MODULES {
        decide(&app, &id, m, "skipped").await;
    }
    let items = page(&app, &id, None, 100).await.items;
    assert!(items.iter().all(|i| i.decision.is_some()));
    assert_eq!(report(&app, &id).await.progress.decided, u64::from(MODULES));
}

#[tokio::test]
async fn decisions_survive_a_restart() {
    let f = fixture();
    let id;
    let before;
    {
        let app = app(f.dir.path());
        id = create(&app, 0.1, true).await;
        decide(&app, &id, 0, "confirmed_anomalous").await;
        decide(&app, &id, 7, "confirmed_normal").await;
        decide(&app, &id, 7, "skipped").await;
        set_delta(&app, &id, 0.25).await;
        before = report(&app, &id).await;
    }
    // a torn, unacknowledged write at the end of the log is ignored
    let log = f.dir.path().join("sessions").join(format!("{id}.jsonl"));
    let mut bytes = std::fs::read(&log).unwrap();
    bytes.extend_from_slice(b"{\"op\":\"decision\",\"modu");
    std::fs::write(&log, bytes).unwrap();

    let app = app(f.dir.path());
    let after = report(&app, &id).await;
    assert_eq!(before, after);
    assert_eq!(after.delta, 0.25);
    assert_eq!((after.progress.confirmed_anomalous, after.progress.skipped), (1, 1));
}

#[tokio::test]
async fn target_store_is_scored_on_creation() {
    let f = fixture();
    let app = app(f.dir.path());
    let (status, v) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({ "source_store": "source.iremb", "predictions": "target.iremb", "delta": 0.1, "k": 20 })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["session_id"].as_str().unwrap();
    let from_store = page(&app, id, None, 100).await;
    let from_file = page(&app, &create(&app, 0.1, false).await, None, 100).await;
    assert_eq!(from_store.items, from_file.items);
    assert_eq!(f.targets.len(), (MODULES * VIEWS) as usize);
}

#[tokio::test]
async fn previews_are_min_max_png() {
    let f = fixture();
    let app = app(f.dir.path());
    let (status, bytes) = call(&app, Method::GET, "/v1/images/4/preview", None).await;
    assert_eq!(status, StatusCode::OK);
    let image = image::load_from_memory(&bytes).unwrap();
    assert_eq!(image.color(), image::ColorType::L8);
    assert!(image.to_luma8().pixels().all(|p| p.0[0] == 0));

    let (_, bytes) = call(&app, Method::GET, "/v1/images/12/preview", None).await;
    let luma = image::load_from_memory(&bytes).unwrap().to_luma8();
    assert_eq!(luma.as_raw()[17], 255);
    assert_eq!(luma.as_raw().iter().filter(|&&p| p == 255).count(), 1);

    assert_eq!(call(&app, Method::GET, "/v1/images/99999/preview", None).await.0, StatusCode::NOT_FOUND);
}

#[test]
fn preview_of_a_full_range_preview_is_unchanged() {
    let values: Vec<f64> = (0..=255).map(f64::from).rev().collect();
    let grid = pvad::dataset::Grid::new(16, 16, values);
    let once = pvad_workbench::service::preview_pixels(&grid);
    let twice = pvad_workbench::service::preview_pixels(&once.map(f64::from));
    assert_eq!(once, twice);
    assert_eq!(
        pvad_workbench::service::encode_png8(&once).unwrap(),
        pvad_workbench::service::encode_png8(&twice).unwrap()
    );
}
