//! Browser sessions: the page the agent acts on.
//!
//! [`FixtureSession`] runs entirely from a JSON [`FixtureWorld`] and backs all
//! deterministic tests. [`LiveSession`] drives a real browser over a
//! DevTools-style debugging protocol. Both refuse events that break the
//! cursor/scroll discipline with [`SessionError::PreconditionFailure`].

mod fixture;
mod live;

use std::collections::HashSet;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::harvest::{
    compute_visibility, interactable_indices, round_half_up, HarvestConfig, HarvestError, Location,
    NodeInfo, PageSnapshot, Rect, ScrollOffset, Viewport,
};
use crate::protocol::{CursorState, EventKind, InteractionEvent, Rule, TEXT_ROLES, TEXT_TAGS};

pub use fixture::{EventPattern, FixtureHandle, FixtureSession, FixtureWorld, NodeEdit, Transition, TransitionEffect};
pub use live::{CdpClient, LiveSession, HARVEST_SCRIPT};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown page {0:?}")]
    UnknownPage(String),
    #[error("navigation to {0} timed out")]
    NavigationTimeout(String),
    #[error("precondition failed ({rule}): {message}")]
    PreconditionFailure { rule: Rule, message: String },
    #[error("dispatch timed out: {0}")]
    DispatchTimeout(String),
    #[error("session lost: {0}")]
    SessionLost(String),
    #[error("no page loaded yet")]
    NotNavigated,
    #[error("invalid fixture world: {0}")]
    InvalidWorld(String),
    #[error("invalid page mutation: {0}")]
    InvalidMutation(String),
    #[error("browser protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Snapshot(#[from] HarvestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SessionError {
    pub fn precondition(rule: Rule, message: impl Into<String>) -> Self {
        SessionError::PreconditionFailure { rule, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub snapshot: PageSnapshot,
    pub cursor: CursorState,
    pub page_id: String,
}

/// Result of dispatching one event. `page_changed` is set when the event
/// navigated or restructured the page, which invalidates the rest of the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    pub state: SessionState,
    pub page_changed: bool,
}

/// Notifications broadcast to session observers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Navigated { page_id: String, url: String },
    CursorMoved { x: i64, y: i64 },
    Scrolled { x: f64, y: f64 },
    Clicked { item: usize },
    Typed { item: usize, text: String },
    Mutated { page_id: String },
    Overlay { x: i64, y: i64, engaged: bool },
}

#[async_trait]
pub trait BrowserSession: Send {
    /// Loads a page; the cursor is reset.
    async fn navigate(&mut self, target: &str) -> Result<SessionState, SessionError>;

    async fn snapshot(&mut self) -> Result<PageSnapshot, SessionError>;

    /// Marks the start of a new plan against the current page. The cursor
    /// keeps its item only if `carry_cursor` is set and the item still sits
    /// where the cursor was left.
    async fn begin_plan(&mut self, carry_cursor: bool) -> Result<(), SessionError>;

    async fn dispatch(&mut self, event: &InteractionEvent) -> Result<DispatchOutcome, SessionError>;

    /// Shows (`engaged`) or hides the red AI cursor.
    async fn overlay_cursor(&mut self, position: Option<Location>, engaged: bool) -> Result<(), SessionError>;

    fn cursor(&self) -> CursorState;

    fn subscribe(&self) -> broadcast::Receiver<SessionEvent>;

    /// Identifies the page source for transcripts (fixture world digest or
    /// `live`).
    fn world_id(&self) -> String;
}

/// Scroll offset that centres `target` vertically. The horizontal offset
/// only changes when the target lies outside the current horizontal span.
pub fn centering_offset(target: &Rect, viewport: &Viewport, current: &ScrollOffset) -> ScrollOffset {
    let y = (target.y + target.height / 2.0 - viewport.height / 2.0).max(0.0);
    let span_left = current.x.max(target.x);
    let span_right = (current.x + viewport.width).min(target.right());
    let x = if span_right > span_left {
        current.x
    } else {
        (target.x + target.width / 2.0 - viewport.width / 2.0).max(0.0)
    };
    ScrollOffset { x, y }
}

pub(crate) fn location_of(node: &NodeInfo) -> Location {
    Location { x: round_half_up(node.bounds.x), y: round_half_up(node.bounds.y) }
}

/// Executor-side bookkeeping for one plan: which elements were on screen
/// when the plan began and which have been scrolled to since. Sessions run
/// every event through [`PlanGuard::check`] against their own page state
/// before touching the page.
#[derive(Debug, Clone, Default)]
pub(crate) struct PlanGuard {
    shown_visible: Vec<bool>,
    scrolled: HashSet<usize>,
}

impl PlanGuard {
    pub(crate) fn begin(snapshot: &PageSnapshot, config: &HarvestConfig) -> Self {
        let shown_visible = snapshot
            .nodes
            .iter()
            .filter(|n| config.is_interactable(n))
            .map(|n| compute_visibility(&n.bounds, n.hidden, &snapshot.viewport, &snapshot.scroll_offset))
            .collect();
        Self { shown_visible, scrolled: HashSet::new() }
    }

    /// Drops the cursor's item unless carrying is allowed and the element
    /// still sits exactly under the cursor.
    pub(crate) fn settle_cursor(
        cursor: &mut CursorState,
        snapshot: &PageSnapshot,
        config: &HarvestConfig,
        carry: bool,
    ) {
        if let Some(item) = cursor.current_item {
            let still_there = node_for(snapshot, config, item)
                .map(|(_, n)| location_of(n))
                .is_some_and(|loc| Some(loc) == cursor.position);
            if !(carry && still_there) {
                cursor.current_item = None;
            }
        }
    }

    pub(crate) fn check(
        &self,
        event: &InteractionEvent,
        cursor: &CursorState,
        snapshot: &PageSnapshot,
        config: &HarvestConfig,
    ) -> Result<(), SessionError> {
        use SessionError as E;
        let item = event.item();
        if matches!(event, InteractionEvent::TextInput { text, .. } if text.is_empty()) {
            return Err(E::precondition(Rule::MalformedEvent, "text_input needs text"));
        }
        let Some((_, node)) = node_for(snapshot, config, item) else {
            return Err(E::precondition(Rule::UnknownItem, format!("no element {item} on this page")));
        };
        match event.kind() {
            EventKind::Scroll => Ok(()),
            EventKind::CursorMove => {
                let shown = self.shown_visible.get(item).copied().unwrap_or(false);
                if shown || self.scrolled.contains(&item) {
                    Ok(())
                } else {
                    Err(E::precondition(Rule::NotScrolledIntoView, format!("element {item} is out of view")))
                }
            }
            kind => {
                if cursor.current_item != Some(item) {
                    return Err(E::precondition(
                        Rule::CursorNotOnItem,
                        format!("cursor is not on element {item}"),
                    ));
                }
                let takes_text = if node.aria_role.is_empty() {
                    TEXT_TAGS.contains(&node.tag_name.as_str())
                } else {
                    TEXT_ROLES.contains(&node.aria_role.as_str())
                };
                if kind == EventKind::TextInput && !takes_text {
                    return Err(E::precondition(Rule::NotEditable, format!("element {item} takes no text")));
                }
                Ok(())
            }
        }
    }

    pub(crate) fn record_scroll(&mut self, item: usize) {
        self.scrolled.insert(item);
    }
}

/// Node index and node behind element id `item`.
pub(crate) fn node_for<'a>(
    snapshot: &'a PageSnapshot,
    config: &HarvestConfig,
    item: usize,
) -> Option<(usize, &'a NodeInfo)> {
    let idx = *interactable_indices(snapshot, config).get(item)?;
    Some((idx, &snapshot.nodes[idx]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harvest::compute_visibility;

    #[test]
    fn centering_brings_target_into_view() {
        let vp = Viewport { width: 1280.0, height: 800.0 };
        let origin = ScrollOffset::default();
        let far = Rect::new(100.0, 3000.0, 50.0, 20.0);
        let off = centering_offset(&far, &vp, &origin);
        assert_eq!(off, ScrollOffset { x: 0.0, y: 2610.0 });
        assert!(compute_visibility(&far, false, &vp, &off));

        let right = Rect::new(5000.0, 10.0, 100.0, 20.0);
        let off = centering_offset(&right, &vp, &origin);
        assert_eq!(off.x, 5050.0 - 640.0);
        assert!(compute_visibility(&right, false, &vp, &off));
    }

    #[test]
    fn centering_is_idempotent_and_clamped() {
        let vp = Viewport { width: 300.0, height: 200.0 };
        let near_top = Rect::new(10.0, 10.0, 10.0, 10.0);
        let once = centering_offset(&near_top, &vp, &ScrollOffset { x: 0.0, y: 500.0 });
        assert_eq!(once, ScrollOffset::default());
        assert_eq!(centering_offset(&near_top, &vp, &once), once);
    }
}
