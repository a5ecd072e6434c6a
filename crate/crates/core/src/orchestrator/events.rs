use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

const LIVE_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    StepStarted,
    ElementsHarvested,
    LlmResponse,
    ValidationResult,
    EventDispatched,
    CursorMoved,
    QuestionPending,
    StatusChanged,
    TaskComplete,
}

/// One observer notification. `seq` starts at 1 and increases by one per
/// event, so a consumer can spot gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: EventType,
    pub payload: Value,
}

#[derive(Debug, Default)]
struct Backlog {
    next_seq: u64,
    events: Vec<StreamEvent>,
}

/// Broadcast of [`StreamEvent`]s plus a full backlog, so late subscribers
/// can catch up from any sequence number. Live receivers that fall behind
/// lose events (and see the gap in `seq`).
#[derive(Debug, Clone)]
pub struct EventBus {
    backlog: Arc<Mutex<Backlog>>,
    live: broadcast::Sender<StreamEvent>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::new()
    }
}

impl EventBus {
    pub fn new() -> Self {
        let (live, _) = broadcast::channel(LIVE_CAPACITY);
        Self { backlog: Arc::new(Mutex::new(Backlog { next_seq: 1, events: Vec::new() })), live }
    }

    pub fn emit(&self, kind: EventType, payload: Value) -> u64 {
        let mut backlog = self.backlog.lock().unwrap();
        let event = StreamEvent { seq: backlog.next_seq, kind, payload };
        backlog.next_seq += 1;
        backlog.events.push(event.clone());
        // send under the lock so live order matches seq order
        let _ = self.live.send(event);
        backlog.next_seq - 1
    }

    /// Events with `seq > since`, and a receiver for everything after them.
    pub fn subscribe_since(&self, since: u64) -> (Vec<StreamEvent>, broadcast::Receiver<StreamEvent>) {
        let backlog = self.backlog.lock().unwrap();
        let rx = self.live.subscribe();
        let past = backlog.events.iter().filter(|e| e.seq > since).cloned().collect();
        (past, rx)
    }

    pub fn history(&self) -> Vec<StreamEvent> {
        self.backlog.lock().unwrap().events.clone()
    }

    pub fn last_seq(&self) -> u64 {
        self.backlog.lock().unwrap().next_seq - 1
    }
}
