use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{sleep, timeout, Instant};
use tokio_tungstenite::tungstenite::Message;
use tracing::{debug, warn};

use super::{
    centering_offset, location_of, node_for, BrowserSession, DispatchOutcome, PlanGuard, SessionError,
    SessionEvent, SessionState,
};
use crate::harvest::{harvest_with, HarvestConfig, Location, PageSnapshot};
use crate::protocol::{CursorState, InteractionEvent};

/// Page-side script that reports candidate nodes as a [`PageSnapshot`].
pub const HARVEST_SCRIPT: &str = include_str!("harvest.js");

pub const COMMAND_TIMEOUT: Duration = Duration::from_secs(10);
pub const NAVIGATION_TIMEOUT: Duration = Duration::from_secs(30);
pub const CURSOR_ANIMATION: Duration = Duration::from_millis(300);
const CURSOR_ANIMATION_STEPS: u32 = 10;
const CLICK_SETTLE: Duration = Duration::from_millis(300);

const OVERLAY_ID: &str = "__agent_cursor";

type Pending = Arc<Mutex<HashMap<u64, oneshot::Sender<Result<Value, String>>>>>;

/// Protocol event pushed by the browser.
#[derive(Debug, Clone, PartialEq)]
pub struct CdpEvent {
    pub method: String,
    pub params: Value,
    pub session_id: Option<String>,
}

/// Minimal DevTools protocol client: id-correlated commands over one
/// WebSocket, events fanned out on a broadcast channel.
#[derive(Debug)]
pub struct CdpClient {
    outgoing: mpsc::UnboundedSender<Message>,
    pending: Pending,
    events: broadcast::Sender<CdpEvent>,
    next_id: AtomicU64,
    session_id: Option<String>,
    command_timeout: Duration,
    tasks: Vec<JoinHandle<()>>,
}

impl CdpClient {
    pub async fn connect(ws_url: &str) -> Result<Self, SessionError> {
        let (stream, _) = tokio_tungstenite::connect_async(ws_url)
            .await
            .map_err(|e| SessionError::SessionLost(format!("connecting to {ws_url}: {e}")))?;
        let (mut sink, mut source) = stream.split();
        let (outgoing, mut rx) = mpsc::unbounded_channel::<Message>();
        let pending: Pending = Arc::default();
        let (events, _) = broadcast::channel(1024);

        let writer = tokio::spawn(async move {
            while let Some(msg) = rx.recv().await {
                if sink.send(msg).await.is_err() {
                    break;
                }
            }
        });

        let reader_pending = Arc::clone(&pending);
        let reader_events = events.clone();
        let reader = tokio::spawn(async move {
            while let Some(frame) = source.next().await {
                let text = match frame {
                    Ok(Message::Text(t)) => t.to_string(),
                    Ok(Message::Close(_)) | Err(_) => break,
                    Ok(_) => continue,
                };
                let Ok(value) = serde_json::from_str::<Value>(&text) else {
                    warn!("ignoring non-JSON protocol frame");
                    continue;
                };
                if let Some(id) = value.get("id").and_then(Value::as_u64) {
                    let waiter = reader_pending.lock().unwrap().remove(&id);
                    if let Some(tx) = waiter {
                        let result = match value.get("error") {
                            Some(err) => Err(err
                                .get("message")
                                .and_then(Value::as_str)
                                .unwrap_or("unknown error")
                                .to_string()),
                            None => Ok(value.get("result").cloned().unwrap_or(Value::Null)),
                        };
                        let _ = tx.send(result);
                    }
                } else if let Some(method) = value.get("method").and_then(Value::as_str) {
                    let _ = reader_events.send(CdpEvent {
                        method: method.to_string(),
                        params: value.get("params").cloned().unwrap_or(Value::Null),
                        session_id: value.get("sessionId").and_then(Value::as_str).map(str::to_string),
                    });
                }
            }
            // dropping the senders wakes every waiter with SessionLost
            reader_pending.lock().unwrap().clear();
        });

        Ok(Self {
            outgoing,
            pending,
            events,
            next_id: AtomicU64::new(1),
            session_id: None,
            command_timeout: COMMAND_TIMEOUT,
            tasks: vec![writer, reader],
        })
    }

    pub fn with_command_timeout(mut self, limit: Duration) -> Self {
        self.command_timeout = limit;
        self
    }

    /// Routes subsequent commands to a flattened target session.
    pub fn set_session(&mut self, session_id: Option<String>) {
        self.session_id = session_id;
    }

    pub fn subscribe(&self) -> broadcast::Receiver<CdpEvent> {
        self.events.subscribe()
    }

    pub async fn call(&self, method: &str, params: Value) -> Result<Value, SessionError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut message = json!({"id": id, "method": method, "params": params});
        if let Some(session) = &self.session_id {
            message["sessionId"] = Value::String(session.clone());
        }
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().insert(id, tx);
        debug!(id, method, "protocol command");
        if self.outgoing.send(Message::text(message.to_string())).is_err() {
            self.pending.lock().unwrap().remove(&id);
            return Err(SessionError::SessionLost("connection closed".into()));
        }
        match timeout(self.command_timeout, rx).await {
            Ok(Ok(Ok(result))) => Ok(result),
            Ok(Ok(Err(message))) => Err(SessionError::Protocol(format!("{method}: {message}"))),
            Ok(Err(_)) => Err(SessionError::SessionLost(format!("connection closed during {method}"))),
            Err(_) => {
                self.pending.lock().unwrap().remove(&id);
                Err(SessionError::DispatchTimeout(format!("{method} after {:?}", self.command_timeout)))
            }
        }
    }

    /// Evaluates `expression` in the page and returns its JSON value.
    pub async fn evaluate(&self, expression: &str) -> Result<Value, SessionError> {
        let result = self
            .call(
                "Runtime.evaluate",
                json!({"expression": expression, "returnByValue": true, "awaitPromise": true}),
            )
            .await?;
        if let Some(details) = result.get("exceptionDetails") {
            let text = details
                .pointer("/exception/description")
                .or_else(|| details.get("text"))
                .and_then(Value::as_str)
                .unwrap_or("script threw");
            return Err(SessionError::Protocol(format!("Runtime.evaluate: {text}")));
        }
        Ok(result.pointer("/result/value").cloned().unwrap_or(Value::Null))
    }
}

impl Drop for CdpClient {
    fn drop(&mut self) {
        for task in &self.tasks {
            task.abort();
        }
    }
}

/// A real browser tab driven over the DevTools protocol.
pub struct LiveSession {
    client: CdpClient,
    config: HarvestConfig,
    last: Option<PageSnapshot>,
    cursor: CursorState,
    pointer: (f64, f64),
    focused: Option<usize>,
    plan: PlanGuard,
    events: broadcast::Sender<SessionEvent>,
    navigation_timeout: Duration,
    animation: Duration,
}

impl LiveSession {
    /// Attaches to `ws_url`. A browser-level endpoint
    /// (`/devtools/browser/...`) is attached to its first page target; a
    /// page-level endpoint is used directly.
    pub async fn connect(ws_url: &str) -> Result<Self, SessionError> {
        let client = CdpClient::connect(ws_url).await?;
        Self::attach(client, ws_url.contains("/devtools/browser")).await
    }

    pub async fn attach(mut client: CdpClient, browser_level: bool) -> Result<Self, SessionError> {
        if browser_level {
            let targets = client.call("Target.getTargets", json!({})).await?;
            let target_id = targets
                .get("targetInfos")
                .and_then(Value::as_array)
                .and_then(|infos| infos.iter().find(|t| t.get("type").and_then(Value::as_str) == Some("page")))
                .and_then(|t| t.get("targetId").and_then(Value::as_str))
                .ok_or_else(|| SessionError::SessionLost("browser has no page target".into()))?
                .to_string();
            let attached = client
                .call("Target.attachToTarget", json!({"targetId": target_id, "flatten": true}))
                .await?;
            let session = attached
                .get("sessionId")
                .and_then(Value::as_str)
                .ok_or_else(|| SessionError::Protocol("attachToTarget returned no sessionId".into()))?;
            client.set_session(Some(session.to_string()));
        }
        client.call("Page.enable", json!({})).await?;
        client.call("Runtime.enable", json!({})).await?;
        let (events, _) = broadcast::channel(256);
        Ok(Self {
            client,
            config: HarvestConfig::default(),
            last: None,
            cursor: CursorState::default(),
            pointer: (0.0, 0.0),
            focused: None,
            plan: PlanGuard::default(),
            events,
            navigation_timeout: NAVIGATION_TIMEOUT,
            animation: CURSOR_ANIMATION,
        })
    }

    pub fn with_harvest_config(mut self, config: HarvestConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_timings(mut self, navigation: Duration, animation: Duration) -> Self {
        self.navigation_timeout = navigation;
        self.animation = animation;
        self
    }

    fn emit(&self, event: SessionEvent) {
        let _ = self.events.send(event);
    }

    async fn refresh(&mut self) -> Result<PageSnapshot, SessionError> {
        let value = self.client.evaluate(HARVEST_SCRIPT).await?;
        let snapshot: PageSnapshot = serde_json::from_value(value)
            .map_err(|e| SessionError::Protocol(format!("harvest script returned bad data: {e}")))?;
        snapshot.validate()?;
        self.last = Some(snapshot.clone());
        Ok(snapshot)
    }

    fn current(&self) -> Result<&PageSnapshot, SessionError> {
        self.last.as_ref().ok_or(SessionError::NotNavigated)
    }

    fn state(&self) -> Result<SessionState, SessionError> {
        let snapshot = self.current()?.clone();
        Ok(SessionState { page_id: snapshot.url.clone(), snapshot, cursor: self.cursor })
    }

    async fn wait_for_load(
        &self,
        events: &mut broadcast::Receiver<CdpEvent>,
        limit: Duration,
        what: &str,
    ) -> Result<(), SessionError> {
        let deadline = Instant::now() + limit;
        loop {
            match tokio::time::timeout_at(deadline, events.recv()).await {
                Err(_) => return Err(SessionError::NavigationTimeout(what.to_string())),
                Ok(Err(broadcast::error::RecvError::Closed)) => {
                    return Err(SessionError::SessionLost("event stream closed".into()))
                }
                Ok(Err(broadcast::error::RecvError::Lagged(_))) => continue,
                Ok(Ok(ev)) if ev.method == "Page.loadEventFired" => return Ok(()),
                Ok(Ok(_)) => continue,
            }
        }
    }

    async fn mouse(&self, kind: &str, x: f64, y: f64, extra: Value) -> Result<(), SessionError> {
        let mut params = json!({"type": kind, "x": x, "y": y});
        if let (Some(p), Some(e)) = (params.as_object_mut(), extra.as_object()) {
            p.extend(e.clone());
        }
        self.client.call("Input.dispatchMouseEvent", params).await.map(|_| ())
    }

    /// Viewport coordinates of the centre of element `item`.
    fn aim(&self, item: usize) -> Result<(f64, f64), SessionError> {
        let snapshot = self.current()?;
        let (_, node) = node_for(snapshot, &self.config, item)
            .ok_or_else(|| SessionError::Protocol(format!("element {item} vanished")))?;
        let b = node.bounds;
        Ok((
            b.x + b.width / 2.0 - snapshot.scroll_offset.x,
            b.y + b.height / 2.0 - snapshot.scroll_offset.y,
        ))
    }

    async fn glide_to(&mut self, target: (f64, f64)) -> Result<(), SessionError> {
        let from = self.pointer;
        let pause = self.animation / CURSOR_ANIMATION_STEPS;
        for step in 1..=CURSOR_ANIMATION_STEPS {
            let t = f64::from(step) / f64::from(CURSOR_ANIMATION_STEPS);
            let x = from.0 + (target.0 - from.0) * t;
            let y = from.1 + (target.1 - from.1) * t;
            self.mouse("mouseMoved", x, y, json!({})).await?;
            if !pause.is_zero() {
                sleep(pause).await;
            }
        }
        self.pointer = target;
        Ok(())
    }

    async fn click_at(&mut self, target: (f64, f64)) -> Result<(), SessionError> {
        let button = json!({"button": "left", "clickCount": 1});
        self.mouse("mousePressed", target.0, target.1, button.clone()).await?;
        self.mouse("mouseReleased", target.0, target.1, button).await
    }

    fn element_count(snapshot: &PageSnapshot, config: &HarvestConfig) -> usize {
        harvest_with(snapshot, config).len()
    }
}

#[async_trait]
impl BrowserSession for LiveSession {
    async fn navigate(&mut self, target: &str) -> Result<SessionState, SessionError> {
        let mut events = self.client.subscribe();
        let result = self.client.call("Page.navigate", json!({"url": target})).await?;
        if let Some(err) = result.get("errorText").and_then(Value::as_str) {
            return Err(SessionError::Protocol(format!("navigating to {target}: {err}")));
        }
        self.wait_for_load(&mut events, self.navigation_timeout, target).await?;
        self.cursor = CursorState::default();
        self.focused = None;
        let snapshot = self.refresh().await?;
        self.plan = PlanGuard::begin(&snapshot, &self.config);
        self.emit(SessionEvent::Navigated { page_id: snapshot.url.clone(), url: snapshot.url.clone() });
        self.state()
    }

    async fn snapshot(&mut self) -> Result<PageSnapshot, SessionError> {
        self.current()?;
        self.refresh().await
    }

    async fn begin_plan(&mut self, carry_cursor: bool) -> Result<(), SessionError> {
        let snapshot = self.refresh().await?;
        self.plan = PlanGuard::begin(&snapshot, &self.config);
        PlanGuard::settle_cursor(&mut self.cursor, &snapshot, &self.config, carry_cursor);
        Ok(())
    }

    async fn dispatch(&mut self, event: &InteractionEvent) -> Result<DispatchOutcome, SessionError> {
        let snapshot = self.current()?.clone();
        self.plan.check(event, &self.cursor, &snapshot, &self.config)?;
        let item = event.item();
        let (_, node) = node_for(&snapshot, &self.config, item).expect("checked above");
        let (bounds, location) = (node.bounds, location_of(node));
        let before = Self::element_count(&snapshot, &self.config);
        let mut navigated = false;

        match event {
            InteractionEvent::CursorMove { .. } => {
                let target = self.aim(item)?;
                self.glide_to(target).await?;
                self.cursor = CursorState::on(item, location);
                self.emit(SessionEvent::CursorMoved { x: location.x, y: location.y });
            }
            InteractionEvent::Scroll { .. } => {
                let offset = centering_offset(&bounds, &snapshot.viewport, &snapshot.scroll_offset);
                self.client
                    .evaluate(&format!("window.scrollTo({}, {})", offset.x, offset.y))
                    .await?;
                self.plan.record_scroll(item);
                self.emit(SessionEvent::Scrolled { x: offset.x, y: offset.y });
            }
            InteractionEvent::Click { .. } => {
                let mut events = self.client.subscribe();
                let target = self.aim(item)?;
                self.click_at(target).await?;
                self.focused = Some(item);
                self.emit(SessionEvent::Clicked { item });
                navigated = main_frame_navigated(&mut events, CLICK_SETTLE).await;
                if navigated {
                    self.wait_for_load(&mut events, self.navigation_timeout, "click navigation")
                        .await?;
                }
            }
            InteractionEvent::TextInput { text, .. } => {
                if self.focused != Some(item) {
                    let target = self.aim(item)?;
                    self.click_at(target).await?;
                    self.focused = Some(item);
                }
                for ch in text.chars() {
                    self.client
                        .call("Input.dispatchKeyEvent", json!({"type": "char", "text": ch.to_string()}))
                        .await?;
                }
                self.emit(SessionEvent::Typed { item, text: text.clone() });
            }
        }

        let after = self.refresh().await?;
        if navigated {
            self.cursor = CursorState::default();
            self.focused = None;
            self.emit(SessionEvent::Navigated { page_id: after.url.clone(), url: after.url.clone() });
        }
        let page_changed = navigated || Self::element_count(&after, &self.config) != before;
        Ok(DispatchOutcome { state: self.state()?, page_changed })
    }

    async fn overlay_cursor(&mut self, position: Option<Location>, engaged: bool) -> Result<(), SessionError> {
        let scroll = self.current().map(|s| s.scroll_offset).unwrap_or_default();
        let (x, y) = position
            .map(|p| (p.x as f64 - scroll.x, p.y as f64 - scroll.y))
            .unwrap_or((-100.0, -100.0));
        let script = format!(
            r#"(() => {{
  let c = document.getElementById('{OVERLAY_ID}');
  if (!c) {{
    c = document.createElement('div');
    c.id = '{OVERLAY_ID}';
    c.style.cssText = 'position:fixed;width:14px;height:14px;margin:-7px 0 0 -7px;border-radius:50%;background:#e00;box-shadow:0 0 6px #e00;pointer-events:none;z-index:2147483647;transition:left .3s linear,top .3s linear';
    document.documentElement.appendChild(c);
  }}
  c.style.left = '{x}px';
  c.style.top = '{y}px';
  c.style.display = '{display}';
  return true;
}})()"#,
            display = if engaged { "block" } else { "none" },
        );
        self.client.evaluate(&script).await?;
        if let Some(p) = position {
            self.emit(SessionEvent::Overlay { x: p.x, y: p.y, engaged });
        }
        Ok(())
    }

    fn cursor(&self) -> CursorState {
        self.cursor
    }

    fn subscribe(&self) -> broadcast::Receiver<SessionEvent> {
        self.events.subscribe()
    }

    fn world_id(&self) -> String {
        "live".to_string()
    }
}

async fn main_frame_navigated(events: &mut broadcast::Receiver<CdpEvent>, window: Duration) -> bool {
    let deadline = Instant::now() + window;
    loop {
        match tokio::time::timeout_at(deadline, events.recv()).await {
            Ok(Ok(ev)) if ev.method == "Page.frameNavigated" => {
                if ev.params.pointer("/frame/parentId").is_none() {
                    return true;
                }
            }
            Ok(Ok(_)) | Ok(Err(broadcast::error::RecvError::Lagged(_))) => continue,
            _ => return false,
        }
    }
}
