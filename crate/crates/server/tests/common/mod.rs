#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use futures::StreamExt;
use serde_json::{json, Value};
use webpilot_server::{serve, AppState, ServerConfig};

pub struct Server {
    pub base: String,
    pub client: reqwest::Client,
    _dir: tempfile::TempDir,
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub async fn start() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let config = ServerConfig {
        transcripts_dir: dir.path().to_path_buf(),
        base_dir: fixtures(),
        ..ServerConfig::default()
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(serve(listener, AppState::new(config)));
    Server { base, client: reqwest::Client::new(), _dir: dir }
}

impl Server {
    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn create(&self, oracle: &str, paused: bool, delay_ms: u64) -> String {
        let (status, body) = self
            .post(
                "/tasks",
                json!({
                    "goal": "search for pizza",
                    "mode": "fixture",
                    "world": "google_world.json",
                    "oracle": oracle,
                    "paused": paused,
                    "step_delay_ms": delay_ms,
                }),
            )
            .await;
        assert_eq!(status, 201, "{body}");
        body["task_id"].as_str().unwrap().to_string()
    }

    pub async fn status(&self, id: &str) -> String {
        self.get(&format!("/tasks/{id}")).await.1["status"].as_str().unwrap().to_string()
    }

    pub async fn wait_status(&self, id: &str, want: &str) {
        for _ in 0..500 {
            if self.status(id).await == want {
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("task {id} never reached {want}; now {}", self.status(id).await);
    }

    /// Collects server-sent events until the stream ends.
    pub fn sse(&self, id: &str, since: u64) -> tokio::task::JoinHandle<Vec<Value>> {
        let url = format!("{}/tasks/{id}/events?since={since}", self.base);
        let client = self.client.clone();
        tokio::spawn(async move {
            let resp = client.get(url).send().await.unwrap();
            assert_eq!(resp.headers()["content-type"], "text/event-stream");
            let mut bytes = resp.bytes_stream();
            let mut buf = String::new();
            let mut events = Vec::new();
            while let Some(chunk) = bytes.next().await {
                buf.push_str(&String::from_utf8_lossy(&chunk.unwrap()));
                while let Some(end) = buf.find("\n\n") {
                    let frame: String = buf.drain(..end + 2).collect();
                    for line in frame.lines() {
                        if let Some(data) = line.strip_prefix("data: ") {
                            events.push(serde_json::from_str(data).unwrap());
                        }
                    }
                }
            }
            events
        })
    }
}
