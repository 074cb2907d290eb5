use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tabcf_cli::rows::encoded_object;
use tabcf_cli::service::{router, ServiceState};
use tabcf_core::config::RunConfig;
use tabcf_core::experiment::ModelBundle;
use tabcf_core::nn::{LrSchedule, TrainConfig};
use tabcf_core::synthetic;
use tabcf_core::tabular::Dataset;

struct Fixture {
    state: Arc<ServiceState>,
    ds: Dataset,
    _dir: tempfile::TempDir,
}

fn tiny_config() -> RunConfig {
    let quick = TrainConfig {
        epochs: 2,
        batch_size: 50,
        lr: LrSchedule::constant(0.05),
        ..Default::default()
    };
    let mut cfg = synthetic::benchmark_config(3);
    cfg.diffusion.steps = 10;
    cfg.diffusion.embedding_width = 4;
    cfg.diffusion.hidden = 16;
    cfg.diffusion.train = quick.clone();
    cfg.classifier.hidden = 8;
    cfg.classifier.train = quick.clone();
    cfg.plausibility.hidden = 8;
    cfg.plausibility.train = quick.clone();
    cfg.vae.hidden = 8;
    cfg.vae.latent = 2;
    cfg.vae.train = quick;
    for b in [&mut cfg.baselines.wachter, &mut cfg.baselines.dice, &mut cfg.baselines.dice_vae] {
        b.steps = 5;
    }
    cfg
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = tiny_config();
        let ds = synthetic::dataset(200, synthetic::BENCHMARK_BINS, 1).unwrap();
        let (bundle, report) = ModelBundle::train(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save_dir(dir.path(), Some(&report)).unwrap();
        let state = ServiceState::load(dir.path(), &cfg).unwrap();
        Fixture {
            state: Arc::new(state),
            ds,
            _dir: dir,
        }
    })
}

async fn call(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let f = fixture();
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(f.state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn row_json(i: usize) -> Value {
    let f = fixture();
    Value::Object(encoded_object(&f.ds.rows[i], &f.state.bundle.table).unwrap())
}

#[tokio::test]
async fn schema_lists_columns() {
    let (status, body) = call("GET", "/api/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = body["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["a", "b", "c", "d", "e", "f"]);
    assert_eq!(body["label"], "y");
    assert_eq!(body["columns"][2]["bins"].as_array().unwrap().len(), synthetic::BENCHMARK_BINS);
}

#[tokio::test]
async fn models_advertise_checkpoints_and_defaults() {
    let (status, body) = call("GET", "/api/models", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["models"].as_array().unwrap().len(), 5);
    assert_eq!(body["defaults"]["guidance"]["eta"], 1.5);
    assert_eq!(body["methods"], json!(["scd", "wachter", "dice", "dice_vae"]));
    assert_eq!(body["diffusion_steps"], 10);
}

#[tokio::test]
async fn predict_returns_a_distribution() {
    for i in [0, 5, 17] {
        let (status, body) = call("POST", "/api/predict", Some(json!({"row": row_json(i)}))).await;
        assert_eq!(status, StatusCode::OK);
        let total: f64 = body["probabilities"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["probability"].as_f64().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[tokio::test]
async fn malformed_rows_get_column_diagnostics() {
    let mut row = row_json(0);
    row["a"] = json!("zzz");
    row["c"] = json!("not a number");
    row.as_object_mut().unwrap().remove("e");
    let (status, body) = call("POST", "/api/predict", Some(json!({"row": row}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let cols: Vec<&str> = body["issues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["column"].as_str().unwrap())
        .collect();
    assert_eq!(cols, ["a", "c", "e"]);

    let (status, body) = call(
        "POST",
        "/api/counterfactuals",
        Some(json!({"row": row_json(0), "desired_label": "maybe"})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["issues"][0]["column"], "desired_label");

    let (status, _) = call(
        "POST",
        "/api/counterfactuals",
        Some(json!({"row": row_json(0), "desired_label": "1", "tau": 999})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn counterfactuals_replay_from_the_returned_seed() {
    let req = json!({"row": row_json(2), "desired_label": "1", "B": 4});
    let (status, first) = call("POST", "/api/counterfactuals", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let seed = first["seed"].as_u64().unwrap();
    assert_eq!(first["rows"].as_array().unwrap().len(), 4);
    assert_eq!(first["loss_trace"].as_array().unwrap().len(), 5);

    let mut replay = req.clone();
    replay["seed"] = json!(seed);
    let (_, second) = call("POST", "/api/counterfactuals", Some(replay.clone())).await;
    assert_eq!(first["rows"], second["rows"]);
    assert_eq!(second["seed"], json!(seed));

    replay["method"] = json!("wachter");
    let (status, wachter) = call("POST", "/api/counterfactuals", Some(replay)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(wachter["method"], "wachter");
    assert_eq!(wachter["seed"], json!(seed));
    assert_eq!(wachter["rows"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn concurrent_requests_are_independent() {
    let seeds = [11u64, 12, 13, 14];
    let mut sequential = vec![];
    for s in seeds {
        let req = json!({"row": row_json(4), "desired_label": "1", "seed": s});
        sequential.push(call("POST", "/api/counterfactuals", Some(req)).await.1["rows"].clone());
    }
    let handles: Vec<_> = seeds
        .iter()
        .map(|&s| {
            let req = json!({"row": row_json(4), "desired_label": "1", "seed": s});
            tokio::spawn(async move { call("POST", "/api/counterfactuals", Some(req)).await.1["rows"].clone() })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(sequential) {
        assert_eq!(h.await.unwrap(), expected);
    }
}

#[tokio::test]
async fn evaluate_identical_valid_rows() {
    let x = row_json(0);
    let (_, pred) = call("POST", "/api/predict", Some(json!({"row": x}))).await;
    let label = pred["predicted"].clone();
    let req = json!({"rows": [x, x, x], "original_row": x, "desired_label": label});
    let (status, report) = call("POST", "/api/evaluate", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["validity"], 1.0);
    assert_eq!(report["proximity"], 1.0);
    assert_eq!(report["diversity"], 0.0);
    assert_eq!(report["valid_only"]["validity"], 1.0);

    let req = json!({"rows": [{"a": "a0"}], "original_row": x, "desired_label": label});
    let (status, body) = call("POST", "/api/evaluate", Some(req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["issues"][0]["message"].as_str().unwrap().starts_with("rows[0]:"));
}
