use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use etch_core::model::{Model, ModelConfig, Variant};
use etch_core::training::Ensemble;
use etch_service::{router, AppState, PredictResponse};
use serde_json::{json, Value};
use tower::ServiceExt;

const G: usize = 8;

fn state_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for v in [Variant::Baseline, Variant::Weibull] {
        let cfg = ModelConfig { variant: v, d_model: 8, d_ffn: 16, grid_size: G, ..Default::default() };
        let members = (0..2).map(|s| Model::init(cfg.clone(), s).unwrap()).collect();
        Ensemble::from_members(members).unwrap().save(&dir.path().join(v.name()), None).unwrap();
    }
    dir
}

fn app() -> Router {
    let dir = state_dir();
    let state = AppState::load(&[dir.path().to_path_buf()]).unwrap();
    router(Arc::new(state), None)
}

fn step(duration: f64) -> Value {
    json!({
        "duration_s": duration,
        "power_w": 800.0,
        "pressure_mtorr": 40.0,
        "flow_passivation_sccm": 120.0,
        "flow_etch_sccm": 300.0
    })
}

fn request(steps: Vec<Value>, variant: Option<&str>) -> Value {
    let mut r = json!({ "id": "r1", "steps": steps, "equipment": "E2", "wafer_location": "center" });
    if let Some(v) = variant {
        r["variant"] = json!(v);
    }
    r
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(serde_json::to_vec(b).unwrap())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

#[tokio::test]
async fn health_is_ok() {
    let (status, body) = call(&app(), "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({ "status": "ok" }));
}

#[tokio::test]
async fn models_lists_loaded_variants() {
    let (status, body) = call(&app(), "GET", "/api/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|m| m["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "weibull"]);
    assert_eq!(v[1]["default"], json!(true));
}

#[tokio::test]
async fn single_step_per_step_equals_mean() {
    let app = app();
    for variant in ["weibull", "baseline"] {
        let (status, body) = call(&app, "POST", "/api/predict", Some(&request(vec![step(30.0)], Some(variant)))).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        let r: PredictResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(r.grid_size, G);
        assert_eq!(r.per_step_um.len(), 1);
        assert_eq!(r.per_step_um[0], r.mean_um);
        assert_eq!(r.model_meta.ensemble_size, 2);
        match variant {
            "weibull" => {
                assert_eq!(r.step_params.len(), 1);
                assert!(r.attention.is_none());
            }
            _ => {
                assert!(r.step_params.is_empty());
                let att = r.attention.unwrap();
                assert_eq!((att.len(), att[0].len()), (G, 1));
            }
        }
    }
}

#[tokio::test]
async fn response_shapes_follow_the_recipe() {
    let steps = vec![step(10.0), step(20.0), step(30.0)];
    let (_, body) = call(&app(), "POST", "/api/predict", Some(&request(steps, Some("baseline")))).await;
    let r: PredictResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.mean_um.len(), G);
    assert_eq!(r.variance_um2.len(), G);
    assert_eq!(r.per_step_um.len(), 3);
    assert!(r.per_step_um.iter().all(|row| row.len() == G));
    assert_eq!(r.attention.unwrap()[0].len(), 3);
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let app = app();
    let req = request(vec![step(12.0), step(40.0)], None);
    let (_, a) = call(&app, "POST", "/api/predict", Some(&req)).await;
    let (_, b) = call(&app, "POST", "/api/predict", Some(&req)).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn concurrent_requests_match_serial_ones() {
    let app = app();
    let reqs: Vec<Value> = (1..=8).map(|i| request(vec![step(5.0 * i as f64); i], None)).collect();
    let mut serial = Vec::new();
    for r in &reqs {
        serial.push(call(&app, "POST", "/api/predict", Some(r)).await.1);
    }
    let handles: Vec<_> = reqs
        .iter()
        .cloned()
        .map(|r| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, "POST", "/api/predict", Some(&r)).await.1 })
        })
        .collect();
    for (h, s) in handles.into_iter().zip(&serial) {
        assert_eq!(&h.await.unwrap(), s);
    }
}

#[tokio::test]
async fn malformed_requests_are_rejected_with_field_messages() {
    let app = app();
    let mut missing = request(vec![step(10.0)], None);
    missing.as_object_mut().unwrap().remove("equipment");
    let (status, body) = call(&app, "POST", "/api/predict", Some(&missing)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("equipment"));

    let (status, body) = call(&app, "POST", "/api/predict", Some(&request(vec![], None))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("steps"));

    let mut bad_knob = step(10.0);
    bad_knob["power_w"] = json!(-5.0);
    let (status, body) = call(&app, "POST", "/api/predict", Some(&request(vec![bad_knob], None))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("power_w"));
}

#[tokio::test]
async fn unknown_variant_is_not_found() {
    let app = app();
    for v in ["transformer", "accum_only"] {
        let (status, _) = call(&app, "POST", "/api/predict", Some(&request(vec![step(10.0)], Some(v)))).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
    }
}

#[tokio::test]
async fn out_of_range_knobs_warn() {
    let (status, body) = call(&app(), "POST", "/api/predict", Some(&request(vec![step(120.0)], None))).await;
    assert_eq!(status, StatusCode::OK);
    let r: PredictResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.warnings.len(), 1);
    assert!(r.warnings[0].contains("duration_s"));
}

#[tokio::test]
async fn trace_has_one_entry_per_step() {
    let (status, body) =
        call(&app(), "POST", "/api/trace", Some(&request(vec![step(10.0), step(50.0)], Some("weibull")))).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["steps"].as_array().unwrap().len(), 2);
    assert_eq!(v["member_variance_monotone"], json!(true));
}

#[tokio::test]
async fn sampled_recipes_are_seeded_and_valid() {
    let app = app();
    let req = json!({ "seed": 3, "steps": [2, 4] });
    let (status, a) = call(&app, "POST", "/api/sample-recipe", Some(&req)).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, "POST", "/api/sample-recipe", Some(&req)).await;
    assert_eq!(a, b);
    let recipe: etch_core::recipe::Recipe = serde_json::from_slice(&a).unwrap();
    assert!((2..=4).contains(&recipe.len()));
    recipe.validate().unwrap();

    let (status, _) = call(&app, "POST", "/api/sample-recipe", Some(&json!({ "steps": [0, 3] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn loading_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(AppState::load(&[dir.path().to_path_buf()]).is_err());
}
