use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tokio::sync::broadcast;

use super::{
    centering_offset, location_of, node_for, BrowserSession, DispatchOutcome, PlanGuard, SessionError,
    SessionEvent, SessionState,
};
use crate::digest::sha256_hex;
use crate::harvest::{interactable_indices, HarvestConfig, Location, NodeInfo, PageSnapshot};
use crate::protocol::{CursorState, EventKind, InteractionEvent};

/// Matches a dispatched event by kind, item and (optionally) typed text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPattern {
    #[serde(rename = "type")]
    pub kind: String,
    pub item: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl EventPattern {
    pub fn matches(&self, event: &InteractionEvent) -> bool {
        if self.kind != event.kind().as_str() || self.item != event.item() {
            return false;
        }
        match (&self.text, event) {
            (None, _) => true,
            (Some(want), InteractionEvent::TextInput { text, .. }) => want == text,
            (Some(_), _) => false,
        }
    }
}

/// Edit to a page's node list. Indices address `nodes`, not element ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeEdit {
    /// Overwrites the listed NodeInfo fields.
    Update { node: usize, set: Map<String, Value> },
    Insert { index: usize, node: NodeInfo },
    Remove { node: usize },
}

impl NodeEdit {
    fn apply(&self, nodes: &mut Vec<NodeInfo>) -> Result<(), SessionError> {
        match self {
            NodeEdit::Update { node, set } => {
                let target = nodes
                    .get_mut(*node)
                    .ok_or_else(|| SessionError::InvalidMutation(format!("no node {node}")))?;
                let mut value = serde_json::to_value(&*target).expect("node serializes");
                let obj = value.as_object_mut().expect("node is an object");
                for (k, v) in set {
                    obj.insert(k.clone(), v.clone());
                }
                *target = serde_json::from_value(value)
                    .map_err(|e| SessionError::InvalidMutation(format!("node {node}: {e}")))?;
            }
            NodeEdit::Insert { index, node } => {
                if *index > nodes.len() {
                    return Err(SessionError::InvalidMutation(format!("insert past end at {index}")));
                }
                nodes.insert(*index, node.clone());
            }
            NodeEdit::Remove { node } => {
                if *node >= nodes.len() {
                    return Err(SessionError::InvalidMutation(format!("no node {node}")));
                }
                nodes.remove(*node);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionEffect {
    Goto(String),
    Mutate(Vec<NodeEdit>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub page: String,
    pub on: EventPattern,
    #[serde(flatten)]
    pub effect: TransitionEffect,
}

/// A deterministic stand-in for the web: pages plus event-triggered transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureWorld {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<String>,
    pub pages: BTreeMap<String, PageSnapshot>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

impl FixtureWorld {
    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let world: FixtureWorld =
            serde_json::from_str(text).map_err(|e| SessionError::InvalidWorld(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A world holding one page and no transitions.
    pub fn single_page(page_id: impl Into<String>, snapshot: PageSnapshot) -> Self {
        let page_id = page_id.into();
        Self {
            start: Some(page_id.clone()),
            pages: BTreeMap::from([(page_id, snapshot)]),
            transitions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let invalid = |m: String| Err(SessionError::InvalidWorld(m));
        if let Some(start) = &self.start {
            if !self.pages.contains_key(start) {
                return invalid(format!("start page {start:?} does not exist"));
            }
        }
        for (id, page) in &self.pages {
            page.validate()
                .map_err(|e| SessionError::InvalidWorld(format!("page {id:?}: {e}")))?;
        }
        let config = HarvestConfig::default();
        for (i, t) in self.transitions.iter().enumerate() {
            let Some(page) = self.pages.get(&t.page) else {
                return invalid(format!("transition {i}: unknown page {:?}", t.page));
            };
            if EventKind::parse(&t.on.kind).is_none() {
                return invalid(format!("transition {i}: unknown event type {:?}", t.on.kind));
            }
            let elements = interactable_indices(page, &config).len();
            if t.on.item >= elements {
                return invalid(format!(
                    "transition {i}: item {} does not exist on page {:?} ({elements} elements)",
                    t.on.item, t.page
                ));
            }
            if let TransitionEffect::Goto(target) = &t.effect {
                if !self.pages.contains_key(target) {
                    return invalid(format!("transition {i}: goto target {target:?} does not exist"));
                }
            }
        }
        Ok(())
    }

    /// The configured start page, else the first page id.
    pub fn start_page(&self) -> Option<&str> {
        self.start.as_deref().or_else(|| self.pages.keys().next().map(String::as_str))
    }

    pub fn resolve(&self, target: &str) -> Option<&str> {
        if let Some((id, _)) = self.pages.get_key_value(target) {
            return Some(id);
        }
        self.pages.iter().find(|(_, p)| p.url == target).map(|(id, _)| id.as_str())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("world serializes"))
    }
}

#[derive(Debug)]
struct Loaded {
    page_id: String,
    snapshot: PageSnapshot,
}

#[derive(Debug)]
struct FixtureInner {
    world: FixtureWorld,
    config: HarvestConfig,
    page: Option<Loaded>,
    cursor: CursorState,
    focused: Option<usize>,
    plan: PlanGuard,
    overlay_trace: Vec<(Option<Location>, bool)>,
    events: broadcast::Sender<SessionEvent>,
}

impl FixtureInner {
    fn emit(&self, event: SessionEvent) {
        let _ = self.events.send(event);
    }

    fn loaded(&self) -> Result<&Loaded, SessionError> {
        self.page.as_ref().ok_or(SessionError::NotNavigated)
    }

    fn state(&self) -> Result<SessionState, SessionError> {
        let page = self.loaded()?;
        Ok(SessionState {
            snapshot: page.snapshot.clone(),
            cursor: self.cursor,
            page_id: page.page_id.clone(),
        })
    }

    fn node_for(&self, item: usize) -> Option<(usize, &NodeInfo)> {
        node_for(&self.page.as_ref()?.snapshot, &self.config, item)
    }

    fn load(&mut self, target: &str) -> Result<SessionState, SessionError> {
        let page_id = self
            .world
            .resolve(target)
            .ok_or_else(|| SessionError::UnknownPage(target.to_string()))?
            .to_string();
        let snapshot = self.world.pages[&page_id].clone();
        let url = snapshot.url.clone();
        self.page = Some(Loaded { page_id: page_id.clone(), snapshot });
        self.cursor = CursorState::default();
        self.focused = None;
        self.reset_plan();
        self.emit(SessionEvent::Navigated { page_id, url });
        self.state()
    }

    fn reset_plan(&mut self) {
        self.plan = match &self.page {
            Some(page) => PlanGuard::begin(&page.snapshot, &self.config),
            None => PlanGuard::default(),
        };
    }

    fn begin_plan(&mut self, carry_cursor: bool) -> Result<(), SessionError> {
        self.loaded()?;
        self.reset_plan();
        let snapshot = &self.page.as_ref().expect("loaded").snapshot;
        PlanGuard::settle_cursor(&mut self.cursor, snapshot, &self.config, carry_cursor);
        Ok(())
    }

    fn dispatch(&mut self, event: &InteractionEvent) -> Result<DispatchOutcome, SessionError> {
        let snapshot = &self.loaded()?.snapshot;
        self.plan.check(event, &self.cursor, snapshot, &self.config)?;
        let item = event.item();
        let (node_idx, node) = self.node_for(item).expect("checked above");
        let (bounds, location) = (node.bounds, location_of(node));
        match event {
            InteractionEvent::CursorMove { .. } => {
                self.cursor = CursorState::on(item, location);
                self.emit(SessionEvent::CursorMoved { x: location.x, y: location.y });
            }
            InteractionEvent::Scroll { .. } => {
                let page = self.page.as_mut().expect("loaded");
                let snap = &mut page.snapshot;
                snap.scroll_offset = centering_offset(&bounds, &snap.viewport, &snap.scroll_offset);
                let offset = snap.scroll_offset;
                self.plan.record_scroll(item);
                self.emit(SessionEvent::Scrolled { x: offset.x, y: offset.y });
            }
            InteractionEvent::Click { .. } => {
                self.focused = Some(item);
                self.emit(SessionEvent::Clicked { item });
            }
            InteractionEvent::TextInput { text, .. } => {
                self.focused = Some(item);
                let page = self.page.as_mut().expect("loaded");
                page.snapshot.nodes[node_idx].text.push_str(text);
                self.emit(SessionEvent::Typed { item, text: text.clone() });
            }
        }
        let page_changed = self.fire_transition(event)?;
        Ok(DispatchOutcome { state: self.state()?, page_changed })
    }

    fn fire_transition(&mut self, event: &InteractionEvent) -> Result<bool, SessionError> {
        let page_id = self.loaded()?.page_id.clone();
        let Some(effect) = self
            .world
            .transitions
            .iter()
            .find(|t| t.page == page_id && t.on.matches(event))
            .map(|t| t.effect.clone())
        else {
            return Ok(false);
        };
        match effect {
            TransitionEffect::Goto(target) => {
                self.load(&target)?;
            }
            TransitionEffect::Mutate(edits) => {
                self.apply_edits(&edits)?;
            }
        }
        Ok(true)
    }

    fn apply_edits(&mut self, edits: &[NodeEdit]) -> Result<(), SessionError> {
        let page = self.page.as_mut().ok_or(SessionError::NotNavigated)?;
        let mut nodes = page.snapshot.nodes.clone();
        for edit in edits {
            edit.apply(&mut nodes)?;
        }
        page.snapshot.nodes = nodes;
        let page_id = page.page_id.clone();
        self.emit(SessionEvent::Mutated { page_id });
        Ok(())
    }
}

/// Simulated browser over a [`FixtureWorld`].
#[derive(Debug, Clone)]
pub struct FixtureSession {
    inner: Arc<Mutex<FixtureInner>>,
    world_id: String,
}

/// Shared access to a running [`FixtureSession`], e.g. to play the human
/// during a takeover.
#[derive(Debug, Clone)]
pub struct FixtureHandle {
    inner: Arc<Mutex<FixtureInner>>,
}

impl FixtureSession {
    pub fn new(world: FixtureWorld) -> Self {
        Self::with_config(world, HarvestConfig::default())
    }

    pub fn with_config(world: FixtureWorld, config: HarvestConfig) -> Self {
        let (events, _) = broadcast::channel(256);
        let world_id = world.digest();
        Self {
            inner: Arc::new(Mutex::new(FixtureInner {
                world,
                config,
                page: None,
                cursor: CursorState::default(),
                focused: None,
                plan: PlanGuard::default(),
                overlay_trace: Vec::new(),
                events,
            })),
            world_id,
        }
    }

    fn lock(&self) -> MutexGuard<'_, FixtureInner> {
        self.inner.lock().expect("fixture session poisoned")
    }

    pub fn handle(&self) -> FixtureHandle {
        FixtureHandle { inner: Arc::clone(&self.inner) }
    }

    pub fn state(&self) -> Result<SessionState, SessionError> {
        self.lock().state()
    }

    pub fn navigate_sync(&self, target: &str) -> Result<SessionState, SessionError> {
        self.lock().load(target)
    }

    pub fn begin_plan_sync(&self, carry_cursor: bool) -> Result<(), SessionError> {
        self.lock().begin_plan(carry_cursor)
    }

    pub fn dispatch_sync(&self, event: &InteractionEvent) -> Result<DispatchOutcome, SessionError> {
        self.lock().dispatch(event)
    }

    /// Every `overlay_cursor` call so far, in order.
    pub fn overlay_trace(&self) -> Vec<(Option<Location>, bool)> {
        self.lock().overlay_trace.clone()
    }
}

impl FixtureHandle {
    /// Edits the current page in place, as a human would during a takeover.
    pub fn apply_edits(&self, edits: &[NodeEdit]) -> Result<(), SessionError> {
        self.inner.lock().expect("fixture session poisoned").apply_edits(edits)
    }

    pub fn state(&self) -> Result<SessionState, SessionError> {
        self.inner.lock().expect("fixture session poisoned").state()
    }

    pub fn overlay_trace(&self) -> Vec<(Option<Location>, bool)> {
        self.inner.lock().expect("fixture session poisoned").overlay_trace.clone()
    }
}

#[async_trait]
impl BrowserSession for FixtureSession {
    async fn navigate(&mut self, target: &str) -> Result<SessionState, SessionError> {
        self.navigate_sync(target)
    }

    async fn snapshot(&mut self) -> Result<PageSnapshot, SessionError> {
        Ok(self.lock().loaded()?.snapshot.clone())
    }

    async fn begin_plan(&mut self, carry_cursor: bool) -> Result<(), SessionError> {
        self.begin_plan_sync(carry_cursor)
    }

    async fn dispatch(&mut self, event: &InteractionEvent) -> Result<DispatchOutcome, SessionError> {
        self.dispatch_sync(event)
    }

    async fn overlay_cursor(&mut self, position: Option<Location>, engaged: bool) -> Result<(), SessionError> {
        let mut inner = self.lock();
        inner.overlay_trace.push((position, engaged));
        if let Some(p) = position {
            inner.emit(SessionEvent::Overlay { x: p.x, y: p.y, engaged });
        }
        Ok(())
    }

    fn cursor(&self) -> CursorState {
        self.lock().cursor
    }

    fn subscribe(&self) -> broadcast::Receiver<SessionEvent> {
        self.lock().events.subscribe()
    }

    fn world_id(&self) -> String {
        self.world_id.clone()
    }
}
