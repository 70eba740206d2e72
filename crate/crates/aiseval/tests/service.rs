//! The labelling service over HTTP: full sessions to exhaustion, crash
//! recovery from the data directory, and the error contract.

use std::path::Path;
use std::sync::Arc;

use aiseval::core::measures::{pool_measure, MeasureSpec};
use aiseval::core::pool::TestPool;
use aiseval::formats::{read_history, replay_estimate};
use aiseval::ingest::save_pool;
use aiseval::service::{router, Service};
use aiseval::synthetic::{generate_synthetic_pool, SyntheticPoolSpec};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_pool(size: usize, seed: u64) -> TestPool {
    generate_synthetic_pool(&SyntheticPoolSpec {
        size,
        imbalance: 4.0,
        quality: 1.5,
        seed,
    })
    .unwrap()
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(v) => request
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => request.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn session_request(pool_id: &str, measure: Value, budget: Option<usize>) -> Value {
    json!({
        "pool_id": pool_id,
        "measure": measure,
        "config": {
            "partition": {"blocks": 4, "branching": 2, "depth": 2},
            "budget": budget,
            "seed": 17,
        }
    })
}

/// Answers every outstanding query with the true label; returns the last
/// acknowledgement's status.
async fn answer_round(app: &Router, pool: &TestPool, id: &str, count: usize) -> String {
    let (status, batch) = call(app, Method::GET, &format!("/sessions/{id}/queries?count={count}"), None).await;
    assert_eq!(status, StatusCode::OK, "{batch}");
    let mut last = batch["status"].as_str().unwrap().to_string();
    for q in batch["queries"].as_array().unwrap() {
        let item = pool.index_of(q["item_id"].as_str().unwrap()).unwrap();
        let label = pool.item(item).true_label.unwrap();
        let (status, ack) = call(
            app,
            Method::POST,
            &format!("/sessions/{id}/labels"),
            Some(json!({"query_id": q["query_id"], "label": label})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{ack}");
        last = ack["status"].as_str().unwrap().to_string();
    }
    last
}

#[tokio::test]
async fn session_runs_to_exhaustion_and_export_replays() {
    let pool = small_pool(80, 1);
    let service = Service::in_memory();
    service.register_pool("demo", pool.clone());
    let app = router(Arc::new(service));

    let (status, summary) = call(&app, Method::POST, "/sessions", Some(session_request("demo", json!({"name": "f1"}), Some(80)))).await;
    assert_eq!(status, StatusCode::CREATED, "{summary}");
    let id = summary["session_id"].as_str().unwrap().to_string();

    let mut rounds = 0;
    while answer_round(&app, &pool, &id, 10).await != "complete" {
        rounds += 1;
        assert!(rounds < 10_000, "session never completed");
    }

    let (status, est) = call(&app, Method::GET, &format!("/sessions/{id}/estimate"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(est["budget_consumed"], 80);
    assert_eq!(est["census"], true);
    let measure = MeasureSpec::F1.build(Arc::new(pool.predictions())).unwrap();
    let labels = pool.true_labels().unwrap();
    let (_, exact) = pool_measure(&measure, &labels, &pool.marginal_vec());
    assert_eq!(est["g_hat"][0].as_f64(), exact[0]);

    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/queries?count=5"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "session_complete");

    let (status, text) = call(&app, Method::GET, &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    let text = match text {
        Value::String(s) => s,
        // a single-line export parses as JSON
        other => other.to_string(),
    };
    let history = read_history(text.as_bytes()).unwrap();
    let replayed = replay_estimate(&history, &measure, &pool.marginal_vec(), 0.05).unwrap();
    assert_eq!(replayed.g_hat[0], est["g_hat"][0].as_f64());
    assert_eq!(replayed.n_samples as u64, est["n_samples"].as_u64().unwrap());
}

#[tokio::test]
async fn partial_export_replays_the_live_estimate() {
    let pool = small_pool(300, 2);
    let service = Service::in_memory();
    service.register_pool("p", pool.clone());
    let app = router(Arc::new(service));
    let (_, summary) = call(&app, Method::POST, "/sessions", Some(session_request("p", json!({"name": "accuracy"}), None))).await;
    let id = summary["session_id"].as_str().unwrap().to_string();
    for _ in 0..6 {
        answer_round(&app, &pool, &id, 10).await;
    }
    let (_, est) = call(&app, Method::GET, &format!("/sessions/{id}/estimate"), None).await;
    let (_, text) = call(&app, Method::GET, &format!("/sessions/{id}/export"), None).await;
    let history = read_history(text.as_str().unwrap().as_bytes()).unwrap();
    let measure = MeasureSpec::Accuracy.build(Arc::new(pool.predictions())).unwrap();
    let replayed = replay_estimate(&history, &measure, &pool.marginal_vec(), 0.05).unwrap();
    assert_eq!(replayed.g_hat[0], est["g_hat"][0].as_f64());
    assert_eq!(serde_json::to_value(&replayed.r_hat).unwrap(), est["r_hat"]);
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[tokio::test]
async fn restart_resumes_the_same_session() {
    let dir = tempfile::tempdir().unwrap();
    let live_dir = dir.path().join("live");
    let pool = small_pool(200, 3);
    std::fs::create_dir_all(live_dir.join("pools")).unwrap();
    save_pool(&pool, &live_dir.join("pools/synthetic.csv")).unwrap();

    let (service, skipped) = Service::open(&live_dir).unwrap();
    assert!(skipped.is_empty());
    let live = Arc::new(service);
    let app = router(live.clone());
    let (status, summary) = call(&app, Method::POST, "/sessions", Some(session_request("synthetic", json!({"name": "f1"}), None))).await;
    assert_eq!(status, StatusCode::CREATED, "{summary}");
    let id = summary["session_id"].as_str().unwrap().to_string();
    for _ in 0..4 {
        answer_round(&app, &pool, &id, 10).await;
    }
    // leave a lease outstanding across the "crash"
    let (_, leased) = call(&app, Method::GET, &format!("/sessions/{id}/queries?count=3&annotator=ann"), None).await;

    // the files on disk are all a restarted process would see
    let crashed_dir = dir.path().join("restarted");
    copy_dir(&live_dir, &crashed_dir);
    let (restarted, skipped) = Service::open(&crashed_dir).unwrap();
    assert!(skipped.is_empty(), "{skipped:?}");
    let restarted = Arc::new(restarted);
    let app2 = router(restarted.clone());

    assert_eq!(live.summary(&id).unwrap(), restarted.summary(&id).unwrap());
    assert_eq!(live.current_proposal(&id).unwrap(), restarted.current_proposal(&id).unwrap());
    let (_, leased2) = call(&app2, Method::GET, &format!("/sessions/{id}/queries?count=3&annotator=ann"), None).await;
    assert_eq!(leased, leased2);

    // both continue identically
    for app in [&app, &app2] {
        answer_round(app, &pool, &id, 3).await;
        answer_round(app, &pool, &id, 10).await;
    }
    assert_eq!(live.current_proposal(&id).unwrap(), restarted.current_proposal(&id).unwrap());
    assert_eq!(live.export(&id).unwrap(), restarted.export(&id).unwrap());
}

#[tokio::test]
async fn error_contract() {
    let pool = small_pool(100, 4);
    let service = Service::in_memory();
    service.register_pool("p", pool.clone());
    let app = router(Arc::new(service));

    let (status, body) = call(&app, Method::POST, "/sessions", Some(session_request("nope", json!({"name": "f1"}), None))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_pool");

    let (status, body) = call(&app, Method::GET, "/sessions/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_session");

    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({"pool_id": 3}))).await;
    assert!(status.is_client_error());
    assert_eq!(body["error"]["code"], "bad_request");

    let (_, summary) = call(&app, Method::POST, "/sessions", Some(session_request("p", json!({"name": "f1"}), None))).await;
    let id = summary["session_id"].as_str().unwrap().to_string();

    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/estimate"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "no_data");

    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/queries?count=11"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "count_exceeds_stage");

    // a lease is returned unchanged on re-fetch
    let (_, a) = call(&app, Method::GET, &format!("/sessions/{id}/queries?count=2&annotator=x"), None).await;
    let (_, b) = call(&app, Method::GET, &format!("/sessions/{id}/queries?count=2&annotator=x"), None).await;
    assert_eq!(a, b);
    let q = &a["queries"][0];
    let url = format!("/sessions/{id}/labels");

    let (status, body) = call(&app, Method::POST, &url, Some(json!({"query_id": q["query_id"], "label": 7}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "label_out_of_range");

    let (status, body) = call(&app, Method::POST, &url, Some(json!({"query_id": "q999999", "label": 0}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_query");

    let (status, first) = call(&app, Method::POST, &url, Some(json!({"query_id": q["query_id"], "label": 1}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["duplicate"], false);
    let (status, again) = call(&app, Method::POST, &url, Some(json!({"query_id": q["query_id"], "label": 1}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["duplicate"], true);
    let (status, body) = call(&app, Method::POST, &url, Some(json!({"query_id": q["query_id"], "label": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "conflicting_label");

    // force-advance drops the other pending query
    let pending = &a["queries"][1];
    let (status, ack) = call(&app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    assert_eq!(ack["stage_advanced"], true);
    assert_eq!(ack["dropped"], 1);
    let (status, body) = call(&app, Method::POST, &url, Some(json!({"query_id": pending["query_id"], "label": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "query_expired");

    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/suspend"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/queries?count=1"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "session_suspended");
    let (status, summary) = call(&app, Method::POST, &format!("/sessions/{id}/resume"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(summary["status"], "active");

    let (status, body) = call(&app, Method::GET, "/no/such/route", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");
}

#[tokio::test]
async fn pools_can_be_registered_over_http() {
    let app = router(Arc::new(Service::in_memory()));
    let pool = small_pool(30, 5);
    let (status, info) = call(&app, Method::POST, "/pools", Some(json!({"pool_id": "new", "pool": pool}))).await;
    assert_eq!(status, StatusCode::CREATED, "{info}");
    let (_, list) = call(&app, Method::GET, "/pools", None).await;
    assert_eq!(list, json!([{"pool_id": "new", "n_items": 30, "n_classes": 2}]));
}
