use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

use trajdiff_core::diffusion::DiffusionConfig;
use trajdiff_core::engine::{trajectory_population, Engine, Representation};
use trajdiff_core::scenes::{generate_corpus, GeneratorParams};
use trajdiff_service::{router, AppState};

fn state() -> Arc<AppState> {
    let corpus = generate_corpus(4, 40, &GeneratorParams::default()).unwrap();
    let repr = Representation::fit_pca(&trajectory_population(&corpus), 3).unwrap();
    let cfg = Engine::default_model_config(&repr);
    let engine = Engine::new_untrained(repr, cfg, DiffusionConfig::default(), 3).unwrap();
    Arc::new(AppState {
        engine,
        corpus,
        model_id: "test-model".into(),
    })
}

async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        to_bytes(resp.into_body(), usize::MAX)
            .await
            .unwrap()
            .to_vec(),
    )
}

fn parse(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

#[tokio::test]
async fn health_and_scenes() {
    let app = router(state(), None);
    let (s, b) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse(&b), json!({"status": "ok", "model_id": "test-model"}));

    let (s, b) = call(&app, "GET", "/v1/scenes", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse(&b)["scenes"].as_array().unwrap().len(), 40);

    let (s, b) = call(&app, "GET", "/v1/scenes/s000003", None).await;
    assert_eq!(s, StatusCode::OK);
    let scene = parse(&b);
    assert_eq!(scene["scenario_id"], "s000003");
    assert!(scene["agents"][0].get("intent").is_none());

    let (s, b) = call(&app, "GET", "/v1/scenes/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(parse(&b)["error"]["code"], "not_found");
}

#[tokio::test]
async fn sample_is_deterministic() {
    let app = router(state(), None);
    let body =
        json!({"scene_id": "s000001", "num_samples": 4, "steps": 8, "seed": 11, "cluster_k": 2});
    let (s1, a) = call(&app, "POST", "/v1/sample", Some(body.clone())).await;
    let (s2, b) = call(&app, "POST", "/v1/sample", Some(body)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let v = parse(&a);
    assert_eq!(v["seed"], 11);
    assert_eq!(v["samples"].as_array().unwrap().len(), 4);
    assert_eq!(v["clusters"]["probabilities"].as_array().unwrap().len(), 2);
    assert!(v.get("timings_ms").is_none());
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let app = router(state(), None);
    let body = json!({"scene_id": "s000002", "num_samples": 3, "steps": 6, "seed": 5});
    let (a, b) = tokio::join!(
        call(&app, "POST", "/v1/sample", Some(body.clone())),
        call(&app, "POST", "/v1/sample", Some(body.clone()))
    );
    assert_eq!(a, b);
}

#[tokio::test]
async fn zero_lambda_constraints_are_a_no_op() {
    let app = router(state(), None);
    let plain = json!({"scene_id": "s000001", "num_samples": 4, "steps": 8, "seed": 2});
    let mut guided = plain.clone();
    guided["constraints"] = json!({
        "attractors": [{"agent": 0, "t_index": 15, "x": 1.0, "y": 1.0}],
        "repeller": {"radius": 1.0},
        "lambda_attract": 0.0,
        "lambda_repel": 0.0
    });
    let (_, a) = call(&app, "POST", "/v1/sample", Some(plain)).await;
    let (s, b) = call(&app, "POST", "/v1/sample", Some(guided)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse(&a)["samples"], parse(&b)["samples"]);
}

#[tokio::test]
async fn logprob_of_guided_samples_is_finite() {
    let app = router(state(), None);
    let body = json!({
        "scene_id": "s000001", "num_samples": 3, "steps": 8, "seed": 1,
        "constraints": {"attractors": [{"agent": 0, "t_index": 15, "x": 0.5, "y": 2.0}]}
    });
    let (_, b) = call(&app, "POST", "/v1/sample", Some(body)).await;
    let samples = parse(&b)["samples"].clone();
    let (s, b) = call(
        &app,
        "POST",
        "/v1/logprob",
        Some(json!({"scene_id": "s000001", "samples": samples, "steps": 8})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let v = parse(&b);
    let logp = v["logp"].as_array().unwrap();
    assert_eq!(logp.len(), 3);
    assert!(logp.iter().all(|x| x.as_f64().unwrap().is_finite()));
}

#[tokio::test]
async fn schema_errors_name_the_field() {
    let app = router(state(), None);
    let (s, b) = call(
        &app,
        "POST",
        "/v1/sample",
        Some(json!({"scene_id": "s000001", "num_samples": "four"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let e = parse(&b);
    assert_eq!(e["error"]["code"], "invalid_request");
    assert_eq!(e["error"]["field_path"], "num_samples");

    let (s, b) = call(
        &app,
        "POST",
        "/v1/sample",
        Some(json!({"scene_id": "s000001", "constraints": {"attractors": [{"agent": 0}]}})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(parse(&b)["error"]["field_path"]
        .as_str()
        .unwrap()
        .starts_with("constraints.attractors[0]"));

    let (s, _) = call(&app, "POST", "/v1/sample", Some(json!({"scene_id": "s000001", "constraints": {"attractors": [{"agent": 7, "t_index": 0, "x": 0, "y": 0}]}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn limits_are_enforced() {
    let st = state();
    let app = router(st.clone(), None);
    let (s, b) = call(
        &app,
        "POST",
        "/v1/sample",
        Some(json!({"scene_id": "s000001", "num_samples": 513})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["error"]["field_path"], "num_samples");

    let mut scene = serde_json::to_value(&st.corpus[0]).unwrap();
    let agent = scene["agents"][0].clone();
    scene["agents"] = json!(vec![agent; 9]);
    let (s, b) = call(
        &app,
        "POST",
        "/v1/sample",
        Some(json!({"scene": scene, "num_samples": 2})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["error"]["field_path"], "scene.agents");
}

#[tokio::test]
async fn numeric_failure_is_422() {
    let app = router(state(), None);
    let body = json!({
        "scene_id": "s000001", "num_samples": 2, "steps": 4,
        "constraints": {
            "attractors": [{"agent": 0, "t_index": 15, "x": 50.0, "y": 50.0}],
            "lambda_attract": 1e308,
            "score_thresholding": false
        }
    });
    let (s, b) = call(&app, "POST", "/v1/sample", Some(body)).await;
    assert_eq!(
        s,
        StatusCode::UNPROCESSABLE_ENTITY,
        "{}",
        String::from_utf8_lossy(&b)
    );
    let e = parse(&b);
    assert_eq!(e["error"]["code"], "numeric_failure");
    assert!(e["error"]["message"]
        .as_str()
        .unwrap()
        .contains("attractor"));
}

#[tokio::test]
async fn cors_header_only_when_enabled() {
    let req = || {
        Request::builder()
            .uri("/v1/health")
            .header("origin", "http://localhost:5173")
            .body(Body::empty())
            .unwrap()
    };
    let st = state();
    let off = router(st.clone(), None).oneshot(req()).await.unwrap();
    assert!(off.headers().get("access-control-allow-origin").is_none());
    let on = router(st, Some("*")).oneshot(req()).await.unwrap();
    assert!(on.headers().get("access-control-allow-origin").is_some());
}
