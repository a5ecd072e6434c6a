mod common;

use futures::StreamExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

fn kinds(events: &[Value]) -> Vec<&str> {
    events.iter().map(|e| e["type"].as_str().unwrap()).collect()
}

#[tokio::test]
async fn lifecycle_over_http() {
    let server = common::start().await;
    let id = server.create("question_oracle.json", true, 300).await;
    let stream = server.sse(&id, 0);

    assert_eq!(server.status(&id).await, "Paused");
    let (code, body) = server.post(&format!("/tasks/{id}/pause"), json!({})).await;
    assert_eq!(code, 409);
    assert_eq!(body["error"], "illegal_transition");

    let (code, body) = server.post(&format!("/tasks/{id}/resume"), json!({})).await;
    assert_eq!((code, body["status"].as_str()), (200, Some("Running")));
    server.wait_status(&id, "AwaitingAnswers").await;
    let (_, view) = server.get(&format!("/tasks/{id}")).await;
    assert_eq!(view["pending_questions"], json!(["Which city?"]));

    let (code, _) = server.post(&format!("/tasks/{id}/answers"), json!({"answers": []})).await;
    assert_eq!(code, 422);
    let (code, body) = server.post(&format!("/tasks/{id}/answers"), json!({"answers": ["Boston"]})).await;
    assert_eq!((code, body["status"].as_str()), (200, Some("Running")));

    let (code, body) = server.post(&format!("/tasks/{id}/pause"), json!({})).await;
    assert_eq!((code, body["status"].as_str()), (200, Some("Paused")), "{body}");
    let (code, _) = server.post(&format!("/tasks/{id}/resume"), json!({})).await;
    assert_eq!(code, 200);

    let events = stream.await.unwrap();
    server.wait_status(&id, "Complete").await;
    let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    let kinds = kinds(&events);
    for expected in [
        "status_changed",
        "step_started",
        "elements_harvested",
        "llm_response",
        "validation_result",
        "question_pending",
        "event_dispatched",
        "cursor_moved",
        "task_complete",
    ] {
        assert!(kinds.contains(&expected), "missing {expected} in {kinds:?}");
    }
    assert_eq!(*kinds.last().unwrap(), "task_complete");
    let statuses: Vec<&str> = events
        .iter()
        .filter(|e| e["type"] == "status_changed")
        .map(|e| e["payload"]["status"].as_str().unwrap())
        .collect();
    assert_eq!(statuses, ["Paused", "Running", "AwaitingAnswers", "Running", "Paused", "Running", "Complete"]);

    let transcript = server
        .client
        .get(format!("{}/tasks/{id}/transcript", server.base))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let records: Vec<Value> = transcript.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records[0]["record"], "header");
    assert_eq!(records.last().unwrap()["record"], "final");
    assert_eq!(records.last().unwrap()["status"], "Complete");
}

#[tokio::test]
async fn websocket_stream_and_since() {
    let server = common::start().await;
    let id = server.create("pizza_oracle.json", false, 0).await;
    server.wait_status(&id, "Complete").await;

    let ws_url = format!("{}/tasks/{id}/events?since=3", server.base.replace("http", "ws"));
    let (mut ws, _) = tokio_tungstenite::connect_async(ws_url).await.unwrap();
    let mut events = Vec::new();
    while let Some(Ok(msg)) = ws.next().await {
        match msg {
            Message::Text(t) => events.push(serde_json::from_str::<Value>(&t).unwrap()),
            Message::Close(_) => break,
            _ => {}
        }
    }
    assert_eq!(events[0]["seq"], 4);
    assert_eq!(events.last().unwrap()["type"], "task_complete");
    assert_eq!(events.last().unwrap()["payload"]["status"], "Complete");

    let replayed = server.sse(&id, 0).await.unwrap();
    assert_eq!(replayed.len() as u64, events.last().unwrap()["seq"].as_u64().unwrap());
}

#[tokio::test]
async fn takeover_and_release_over_http() {
    let server = common::start().await;
    let id = server.create("pizza_oracle.json", true, 0).await;
    let (code, body) = server.post(&format!("/tasks/{id}/takeover"), json!({})).await;
    assert_eq!((code, body["status"].as_str()), (200, Some("TakenOver")));
    let (code, _) = server.post(&format!("/tasks/{id}/resume"), json!({})).await;
    assert_eq!(code, 200);
    server.wait_status(&id, "Complete").await;
    let (code, _) = server.post(&format!("/tasks/{id}/abort"), json!({})).await;
    assert_eq!(code, 409);
}

#[tokio::test]
async fn abort_paused_task() {
    let server = common::start().await;
    let id = server.create("pizza_oracle.json", true, 0).await;
    let (code, body) = server.post(&format!("/tasks/{id}/abort"), json!({})).await;
    assert_eq!((code, body["status"].as_str()), (200, Some("Aborted")));
    let events = server.sse(&id, 0).await.unwrap();
    assert_eq!(events.last().unwrap()["payload"]["status"], "Aborted");
}

#[tokio::test]
async fn request_errors() {
    let server = common::start().await;
    assert_eq!(server.get("/tasks/nope").await.0, 404);
    assert_eq!(server.post("/tasks/nope/pause", json!({})).await.0, 404);

    let (code, body) = server.post("/tasks", json!({"goal": "x", "oracle": "pizza_oracle.json"})).await;
    assert_eq!(code, 400);
    assert_eq!(body["error"], "bad_request");
    let (code, _) = server
        .post("/tasks", json!({"goal": " ", "world": "google_world.json", "oracle": "pizza_oracle.json"}))
        .await;
    assert_eq!(code, 400);
    let (code, _) = server.post("/tasks", json!({"world": "google_world.json"})).await;
    assert_eq!(code, 400);

    let id = server.create("pizza_oracle.json", true, 0).await;
    assert_eq!(server.post(&format!("/tasks/{id}/jump"), json!({})).await.0, 404);
    assert_eq!(server.post(&format!("/tasks/{id}/answers"), json!({"answers": ["a"]})).await.0, 409);
}

#[tokio::test]
async fn inline_world_and_oracle() {
    let server = common::start().await;
    let world: Value =
        serde_json::from_str(&std::fs::read_to_string(common::fixtures().join("google_world.json")).unwrap()).unwrap();
    let done = r#"{"event_list": [], "next_step": "", "is_complete": true, "questions": [], "action": "done"}"#;
    let (code, body) = server
        .post(
            "/tasks",
            json!({"goal": "look around", "start": "google-doodles", "world": world, "oracle": [{"index": 0, "response": done}]}),
        )
        .await;
    assert_eq!(code, 201, "{body}");
    let id = body["task_id"].as_str().unwrap();
    server.wait_status(id, "Complete").await;
}
