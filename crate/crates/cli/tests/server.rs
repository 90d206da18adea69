use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use invrise_cli::server::{router, AppState};
use invrise_core::classifier::{Architecture, TrainConfig};
use invrise_core::dataset::DatasetConfig;
use invrise_core::harness::ExperimentConfig;
use invrise_core::imaging::{self, BinaryMask};
use invrise_core::interaction::{self, Strategy};
use invrise_core::saliency::MaskConfig;
use invrise_core::BlackBox;

fn config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            ok: 14,
            no_seam: 6,
            nok: 10,
            side: 16,
            channels: 1,
            seed: 5,
        },
        splits: [0.3, 0.15, 0.2, 0.35],
        backgrounds: 2,
        train: TrainConfig {
            learning_rate: 0.05,
            max_epochs: 2,
            patience: 2,
            ..TrainConfig::default()
        },
        architecture: Architecture {
            input_side: 16,
            ..Architecture::default()
        },
        masks: MaskConfig {
            k: 16,
            l: 4,
            ..MaskConfig::default()
        },
        interactions_per_iteration: 50,
        iteration_budget: 3,
        ..ExperimentConfig::default()
    }
}

fn app(strategy: Strategy) -> (Router, interaction::LoopState) {
    let cfg = config();
    let state = invrise_cli::session_state(&cfg, 3, strategy, None, None).unwrap();
    let probe = invrise_cli::session_state(&cfg, 3, strategy, None, None).unwrap();
    let (session, _join) = interaction::spawn_session(state);
    let app = router(AppState {
        session,
        seed: 3,
        config_digest: cfg.digest(),
        started: Instant::now(),
    });
    (app, probe)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = to_bytes(res.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn next(app: &Router) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (status, body) = call(app, "GET", "/session/next", None).await;
        if status == StatusCode::OK {
            return body;
        }
        assert_eq!(status, StatusCode::ACCEPTED, "{body}");
        assert!(Instant::now() < deadline, "no query was published");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fresh_session_offers_the_most_uncertain_instance() {
    let (app, probe) = app(Strategy::Caipi);
    let q = next(&app).await;
    let data = probe.data();
    let scored: Vec<(String, invrise_core::Confidence)> = probe
        .pool()
        .iter()
        .map(|id| (id.clone(), probe.classifier().predict(&data.dataset.get(id).unwrap().image).unwrap()))
        .collect();
    let expected = interaction::most_uncertain(scored.iter().map(|(id, c)| (id.as_str(), *c))).unwrap();
    assert_eq!(q["id"], expected.as_str());
    assert_eq!(q["role"], "selected");
    let png = STANDARD.decode(q["image_png"].as_str().unwrap()).unwrap();
    assert_eq!(imaging::decode_png(&png).unwrap().side(), 16);
    assert!(q["saliency_overlay_png"].is_string());

    let (status, inst) = call(&app, "GET", &format!("/instance/{expected}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(inst["id"], expected.as_str());
    let (status, _) = call(&app, "GET", "/instance/does-not-exist", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn painted_mask_feedback_and_retrain() {
    let (app, _) = app(Strategy::Caipi);
    let q = next(&app).await;
    let id = q["id"].as_str().unwrap().to_string();
    let (_, before) = call(&app, "GET", "/session/status", None).await;
    let (_, metrics_before) = call(&app, "GET", "/run/metrics", None).await;

    let painted: Vec<usize> = (0..10).map(|i| 3 * 16 + 2 + i).collect();
    let mask = BinaryMask::from_fn(16, |x, y| painted.contains(&(y * 16 + x)));
    let mask_b64 = STANDARD.encode(imaging::encode_mask_png(&mask));
    let predicted_nok = q["predicted"] == "NOK";

    let (status, body) = call(
        &app,
        "POST",
        "/session/feedback",
        Some(json!({"id": "someone-else", "prediction_correct": true, "explanation_correct": true})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    let (status, _) = call(
        &app,
        "POST",
        "/session/feedback",
        Some(json!({"prediction_correct": false, "explanation_correct": false})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, after) = call(
        &app,
        "POST",
        "/session/feedback",
        Some(json!({
            "id": id,
            "prediction_correct": predicted_nok,
            "explanation_correct": false,
            "corrected_label": "NOK",
            "corrected_mask": mask_b64,
        })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{after}");
    assert_eq!(after["training_size"].as_u64().unwrap(), before["training_size"].as_u64().unwrap() + 1 + 4);
    assert_eq!(after["pool_size"].as_u64().unwrap(), before["pool_size"].as_u64().unwrap() - 1);

    let (_, events) = call(&app, "GET", "/session/events", None).await;
    let record = &events[0]["queries"][0];
    assert_eq!(record["id"], id.as_str());
    assert_eq!(record["feedback"]["source"], "human");
    let stored: BinaryMask = serde_json::from_value(record["feedback"]["corrected_mask"].clone()).unwrap();
    assert_eq!(stored, mask);
    assert_eq!(stored.count(), 10);

    next(&app).await;
    let (status, retrained) = call(&app, "POST", "/session/retrain", None).await;
    assert_eq!(status, StatusCode::OK, "{retrained}");
    assert_eq!(retrained["iteration"], 1);
    let (_, metrics_after) = call(&app, "GET", "/run/metrics", None).await;
    assert_eq!(
        metrics_after["iterations"].as_array().unwrap().len(),
        metrics_before["iterations"].as_array().unwrap().len() + 1
    );
    assert!(metrics_after["stop"].is_null());
}
