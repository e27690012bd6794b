use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use archsketch::data::{gen_component_dataset, rough_facade, FacadeSpec, Material, Roof, Style};
use archsketch::diffusion::{Checkpoint, DenoiserParams, ModelConfig, NoiseSchedule, Trainer};
use archsketch::imaging::{binarize, color_png_bytes, decode_color, decode_image, sketch_png_bytes, BBox, ColorImage};
use archsketch::metrics::{psnr, ssim};
use archsketch::pipeline::generate_render;
use archsketch::retrieval::build_index;
use archsketch::service::{router, AppState};

fn spec() -> FacadeSpec {
    FacadeSpec {
        floors: 2,
        bays: 3,
        window_rows: 1,
        window_cols: 1,
        door_bay: 1,
        material: Material::Brick,
        style: Style::Modern,
        roof: Roof::Flat,
        elevated: false,
    }
}

fn checkpoint() -> Checkpoint {
    let params = DenoiserParams::init(&ModelConfig::desk(), 1).unwrap();
    Checkpoint::from_trainer(&Trainer::new(params, NoiseSchedule::default(), 1e-3, 8, 0))
}

fn app(with_model: bool) -> Router {
    let index = build_index(&gen_component_dataset(48, 1).unwrap(), 32, 0).unwrap();
    let model = with_model.then(checkpoint);
    router(Arc::new(AppState::new(Some(index), model, None, Duration::from_secs(600))))
}

/// Rough sketch PNG and the centre of its first window.
fn rough_png() -> (Vec<u8>, (usize, usize)) {
    let (rough, layout) = rough_facade(&spec(), 64).unwrap();
    let b: BBox = layout.window_boxes()[0];
    (sketch_png_bytes(&rough), ((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2))
}

struct Reply {
    status: StatusCode,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("not JSON ({e}): {:?}", String::from_utf8_lossy(&self.bytes)))
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> Reply {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, bytes }
}

async fn post_json(app: &Router, uri: &str, v: Value) -> Reply {
    call(app, Method::POST, uri, serde_json::to_vec(&v).unwrap()).await
}

async fn new_session(app: &Router) -> String {
    let r = call(app, Method::POST, "/v1/sessions", rough_png().0).await;
    assert_eq!(r.status, StatusCode::CREATED);
    r.json()["session_id"].as_str().unwrap().to_string()
}

async fn segment_window(app: &Router, sid: &str) -> usize {
    let (_, (x, y)) = rough_png();
    let r = post_json(
        app,
        &format!("/v1/sessions/{sid}/segment"),
        json!({ "points": [{ "x": x, "y": y, "label": "foreground" }] }),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json());
    r.json()["region_id"].as_u64().unwrap() as usize
}

fn error_code(r: &Reply) -> String {
    let v = r.json();
    assert_eq!(v["api_version"], 1);
    v["error"]["code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_loaded_artifacts() {
    let app = app(false);
    let r = call(&app, Method::GET, "/v1/health", vec![]).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["api_version"], 1);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["index_loaded"], true);
    assert_eq!(v["checkpoint_loaded"], false);
}

#[tokio::test]
async fn sessions_get_distinct_hex_ids() {
    let app = app(false);
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    assert_ne!(a, b);
    for id in [&a, &b] {
        assert_eq!(id.len(), 32);
        assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    }
    let r = call(&app, Method::GET, &format!("/v1/sessions/{a}/images/rough.png"), vec![]).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(binarize(&decode_image(&r.bytes).unwrap()), binarize(&decode_image(&rough_png().0).unwrap()));
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let app = app(false);
    let r = call(&app, Method::POST, "/v1/sessions", b"not an image".to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&r), "bad_image");
    let r = call(&app, Method::POST, "/v1/sessions", b"P5\n0 0\n255\n".to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&r), "bad_image");
}

#[tokio::test]
async fn unknown_session_and_route() {
    let app = app(false);
    let r = post_json(&app, "/v1/sessions/deadbeef/segment", json!({})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&r), "session_not_found");
    let r = call(&app, Method::GET, "/v1/nowhere", vec![]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&r), "not_found");
}

#[tokio::test]
async fn malformed_json_names_the_field() {
    let app = app(false);
    let sid = new_session(&app).await;
    let rid = segment_window(&app, &sid).await;
    let r = post_json(&app, &format!("/v1/sessions/{sid}/retrieve"), json!({ "region_id": rid })).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&r), "parse_error");
    assert!(r.json()["error"]["message"].as_str().unwrap().contains("query"));
    let r =
        post_json(&app, &format!("/v1/sessions/{sid}/retrieve"), json!({ "region_id": rid, "query": "x", "topk": 3 }))
            .await;
    assert!(r.json()["error"]["message"].as_str().unwrap().contains("topk"));
    let r = call(&app, Method::POST, &format!("/v1/sessions/{sid}/generate"), b"{".to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn retrieval_honours_the_query_filter() {
    let app = app(false);
    let sid = new_session(&app).await;
    let rid = segment_window(&app, &sid).await;
    let r = post_json(
        &app,
        &format!("/v1/sessions/{sid}/retrieve"),
        json!({ "region_id": rid, "query": "window with 1 row and 4 columns", "top_k": 10 }),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json());
    let cands = r.json()["candidates"].as_array().unwrap().clone();
    assert!(!cands.is_empty());
    for c in &cands {
        assert_eq!((c["kind"].as_str(), c["rows"].as_u64(), c["cols"].as_u64()), (Some("window"), Some(1), Some(4)));
        let thumb = call(&app, Method::GET, c["thumbnail_url"].as_str().unwrap(), vec![]).await;
        assert_eq!(thumb.status, StatusCode::OK);
    }
    let r =
        post_json(&app, &format!("/v1/sessions/{sid}/retrieve"), json!({ "region_id": 99, "query": "window" })).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&r), "region_not_found");
}

#[tokio::test]
async fn compose_undo_and_isolation() {
    let app = app(false);
    let sid = new_session(&app).await;
    let other = new_session(&app).await;
    let rid = segment_window(&app, &sid).await;
    let cands = post_json(
        &app,
        &format!("/v1/sessions/{sid}/retrieve"),
        json!({ "region_id": rid, "query": "window with 1 row and 3 columns" }),
    )
    .await
    .json();
    let offered: Vec<u64> =
        cands["candidates"].as_array().unwrap().iter().map(|c| c["component_id"].as_u64().unwrap()).collect();
    let not_offered = (0..48u64).find(|id| !offered.contains(id)).unwrap();

    let r = post_json(
        &app,
        &format!("/v1/sessions/{sid}/compose"),
        json!({ "region_id": rid, "component_id": not_offered }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(error_code(&r), "component_not_offered");

    let before = call(&app, Method::GET, &format!("/v1/sessions/{sid}/images/detailed.png"), vec![]).await.bytes;
    let other_before =
        call(&app, Method::GET, &format!("/v1/sessions/{other}/images/detailed.png"), vec![]).await.bytes;
    let r = post_json(
        &app,
        &format!("/v1/sessions/{sid}/compose"),
        json!({ "region_id": rid, "component_id": offered[0] }),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json());
    assert_eq!(r.json()["provenance"][0]["source"]["component"], offered[0]);
    let after = call(&app, Method::GET, &format!("/v1/sessions/{sid}/images/detailed.png"), vec![]).await.bytes;
    assert_ne!(before, after);
    let other_after = call(&app, Method::GET, &format!("/v1/sessions/{other}/images/detailed.png"), vec![]).await.bytes;
    assert_eq!(other_before, other_after);

    let r = call(&app, Method::POST, &format!("/v1/sessions/{sid}/undo"), vec![]).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["provenance"].as_array().unwrap().len(), 0);
    let undone = call(&app, Method::GET, &format!("/v1/sessions/{sid}/images/detailed.png"), vec![]).await.bytes;
    assert_eq!(undone, before);
    let r = call(&app, Method::POST, &format!("/v1/sessions/{sid}/undo"), vec![]).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(error_code(&r), "nothing_to_undo");
}

#[tokio::test]
async fn generation_is_deterministic_and_validates_steps() {
    let app = app(true);
    let sid = new_session(&app).await;
    let body = json!({ "prompt": "a modern school, brick", "steps": 3, "seed": 11 });
    let mut renders = Vec::new();
    for _ in 0..2 {
        let r = post_json(&app, &format!("/v1/sessions/{sid}/generate"), body.clone()).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.json());
        assert!(r.json()["metrics"].is_null());
        renders.push(call(&app, Method::GET, &format!("/v1/sessions/{sid}/images/render.png"), vec![]).await.bytes);
    }
    assert_eq!(renders[0], renders[1]);
    let r = post_json(&app, &format!("/v1/sessions/{sid}/generate"), json!({ "prompt": "school", "steps": 0 })).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&r), "invalid_steps");
}

#[tokio::test]
async fn generation_without_model_is_unavailable() {
    let app = app(false);
    let sid = new_session(&app).await;
    let r = post_json(&app, &format!("/v1/sessions/{sid}/generate"), json!({ "prompt": "school" })).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_code(&r), "not_loaded");
}

#[tokio::test]
async fn reference_metrics_match_the_metrics_module() {
    let app = app(true);
    let sid = new_session(&app).await;
    let reference = ColorImage::new(32, 32, 3, (0..3 * 32 * 32).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
    let r = call(&app, Method::POST, &format!("/v1/sessions/{sid}/reference"), color_png_bytes(&reference)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json());
    let r = post_json(
        &app,
        &format!("/v1/sessions/{sid}/generate"),
        json!({ "prompt": "glass school", "steps": 2, "seed": 5 }),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json());
    let m = r.json()["metrics"].clone();

    let stored = decode_color(&color_png_bytes(&reference)).unwrap();
    let sketch = binarize(&decode_image(&rough_png().0).unwrap());
    let render = generate_render(&checkpoint(), &sketch, "glass school", 2, 5).unwrap();
    assert_eq!(m["psnr"].as_f64().unwrap(), psnr(&render, &stored, 1.0).unwrap());
    assert_eq!(m["ssim"].as_f64().unwrap(), ssim(&render, &stored).unwrap());
}

#[tokio::test]
async fn deleted_sessions_are_gone() {
    let app = app(false);
    let sid = new_session(&app).await;
    let r = call(&app, Method::DELETE, &format!("/v1/sessions/{sid}"), vec![]).await;
    assert_eq!(r.status, StatusCode::OK);
    let r = call(&app, Method::GET, &format!("/v1/sessions/{sid}/images/rough.png"), vec![]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = call(&app, Method::DELETE, &format!("/v1/sessions/{sid}"), vec![]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interleaved_sessions_stay_isolated() {
    let app = app(true);
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    let rid = segment_window(&app, &a).await;
    let cands = post_json(
        &app,
        &format!("/v1/sessions/{a}/retrieve"),
        json!({ "region_id": rid, "query": "window", "top_k": 3 }),
    )
    .await
    .json();
    let ids: Vec<u64> =
        cands["candidates"].as_array().unwrap().iter().map(|c| c["component_id"].as_u64().unwrap()).collect();
    let b_before = call(&app, Method::GET, &format!("/v1/sessions/{b}/images/detailed.png"), vec![]).await.bytes;

    // Session A composes and undoes while session B generates, all interleaved.
    let churn_a = {
        let app = app.clone();
        let a = a.clone();
        tokio::spawn(async move {
            for i in 0..6 {
                let r = post_json(
                    &app,
                    &format!("/v1/sessions/{a}/compose"),
                    json!({ "region_id": rid, "component_id": ids[i % ids.len()] }),
                )
                .await;
                assert_eq!(r.status, StatusCode::OK);
                let r = call(&app, Method::POST, &format!("/v1/sessions/{a}/undo"), vec![]).await;
                assert_eq!(r.status, StatusCode::OK);
            }
        })
    };
    let gen_b = {
        let app = app.clone();
        let b = b.clone();
        tokio::spawn(async move {
            let mut out = Vec::new();
            for _ in 0..3 {
                let r = post_json(
                    &app,
                    &format!("/v1/sessions/{b}/generate"),
                    json!({ "prompt": "school", "steps": 2, "seed": 4 }),
                )
                .await;
                assert_eq!(r.status, StatusCode::OK);
                out.push(call(&app, Method::GET, &format!("/v1/sessions/{b}/images/render.png"), vec![]).await.bytes);
            }
            out
        })
    };
    churn_a.await.unwrap();
    let renders = gen_b.await.unwrap();
    assert!(renders.windows(2).all(|w| w[0] == w[1]));
    let b_after = call(&app, Method::GET, &format!("/v1/sessions/{b}/images/detailed.png"), vec![]).await.bytes;
    assert_eq!(b_before, b_after);
    let r = call(&app, Method::GET, &format!("/v1/sessions/{b}/images/region-0.png"), vec![]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND, "B never segmented");
    let a_final = post_json(&app, &format!("/v1/sessions/{a}/undo"), json!({})).await;
    assert_eq!(a_final.status, StatusCode::CONFLICT);
}
