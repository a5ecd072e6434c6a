use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use webpilot_core::gateway::{
    self, load_script, CompletionRequest, GatewayError, HttpModel, LanguageModel, RecordingProxy, ScriptedOracle,
};

#[derive(Clone, Default)]
struct Seen {
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<String>>>,
}

async fn completion(State(seen): State<Seen>, headers: HeaderMap, Json(body): Json<Value>) -> Json<Value> {
    if let Some(auth) = headers.get("authorization") {
        seen.auth.lock().unwrap().push(auth.to_str().unwrap().to_string());
    }
    let prompt = body["prompt"].as_str().unwrap_or_default().to_string();
    seen.bodies.lock().unwrap().push(body);
    Json(json!({"text": format!("echo: {prompt}")}))
}

async fn chat(State(seen): State<Seen>, Json(body): Json<Value>) -> Json<Value> {
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    seen.bodies.lock().unwrap().push(body);
    Json(json!({"choices": [{"message": {"role": "assistant", "content": format!("chat: {prompt}")}}]}))
}

async fn broken() -> (StatusCode, &'static str) {
    (StatusCode::INTERNAL_SERVER_ERROR, "model overloaded")
}

async fn slow() -> Json<Value> {
    tokio::time::sleep(Duration::from_secs(5)).await;
    Json(json!({"text": "late"}))
}

async fn serve(seen: Seen) -> String {
    let app = Router::new()
        .route("/complete", post(completion))
        .route("/v1/chat/completions", post(chat))
        .route("/broken", post(broken))
        .route("/slow", post(slow))
        .with_state(seen);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn request(prompt: &str) -> CompletionRequest {
    CompletionRequest { max_output_chars: 10, ..CompletionRequest::new(prompt) }
}

#[tokio::test]
async fn completion_endpoint_wire_format() {
    let seen = Seen::default();
    let base = serve(seen.clone()).await;
    let model = HttpModel::new(format!("{base}/complete"), Some("sk-test".into()));
    let text = gateway::complete(&model, &request("hello")).await.unwrap();
    assert_eq!(text, "echo: hello");
    let body = seen.bodies.lock().unwrap()[0].clone();
    assert_eq!(body, json!({"prompt": "hello", "max_tokens": 3, "temperature": 0.0}));
    assert_eq!(seen.auth.lock().unwrap().as_slice(), ["Bearer sk-test"]);
}

#[tokio::test]
async fn chat_endpoint_is_adapted() {
    let seen = Seen::default();
    let base = serve(seen.clone()).await;
    let model = HttpModel::new(format!("{base}/v1/chat/completions"), None);
    assert_eq!(model.complete(&request("hi")).await.unwrap(), "chat: hi");
    assert_eq!(seen.bodies.lock().unwrap()[0]["messages"][0]["role"], "user");
}

#[tokio::test]
async fn endpoint_errors_and_timeouts() {
    let base = serve(Seen::default()).await;
    let err = HttpModel::new(format!("{base}/broken"), None).complete(&request("x")).await.unwrap_err();
    assert!(matches!(err, GatewayError::EndpointError { status: 500, ref body } if body == "model overloaded"));

    let quick = CompletionRequest { deadline: Duration::from_millis(100), ..request("x") };
    let err = gateway::complete(&HttpModel::new(format!("{base}/slow"), None), &quick).await.unwrap_err();
    assert!(matches!(err, GatewayError::Timeout(_)));

    let err = HttpModel::new("http://127.0.0.1:9/none", None).complete(&request("x")).await.unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)));
}

#[tokio::test]
async fn recorded_session_replays_offline() {
    let base = serve(Seen::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("script.json");
    let proxy = RecordingProxy::new(HttpModel::new(format!("{base}/complete"), None), &path);
    for prompt in ["one", "two"] {
        proxy.complete(&request(prompt)).await.unwrap();
    }
    assert_eq!(proxy.records().len(), 2);

    let oracle = ScriptedOracle::new(load_script(&path).unwrap());
    assert_eq!(oracle.complete(&request("one")).await.unwrap(), "echo: one");
    let err = oracle.complete(&request("not two")).await.unwrap_err();
    assert!(matches!(err, GatewayError::PromptDigestMismatch { .. }), "{err}");
}
