//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;
use serde_json::json;
use webpilot_core::context::{ContextState, HistorySegment};
use webpilot_core::harvest::{harvest, NodeInfo, PageSnapshot, Rect, ScrollOffset, Viewport};
use webpilot_core::protocol::{validate_events, InteractionEvent};
use webpilot_core::session::{FixtureSession, FixtureWorld, NodeEdit, SessionError};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures_dir().join(name)
}

/// Visibility by edge comparison: shown, non-degenerate, and strictly
/// overlapping the scrolled viewport on both axes.
pub fn visibility_oracle(b: &Rect, hidden: bool, vp: &Viewport, s: &ScrollOffset) -> bool {
    !hidden
        && b.width > 0.0
        && b.height > 0.0
        && b.x < s.x + vp.width
        && b.x + b.width > s.x
        && b.y < s.y + vp.height
        && b.y + b.height > s.y
}

/// Length of the longest suffix of `sizes` that fits in `room`, found by
/// trying every suffix from the longest down.
pub fn max_suffix_oracle(sizes: &[usize], room: usize) -> usize {
    (0..=sizes.len())
        .rev()
        .find(|&k| sizes[sizes.len() - k..].iter().sum::<usize>() <= room)
        .unwrap_or(0)
}

fn quarter(lo: i32, hi: i32) -> impl Strategy<Value = f64> {
    (lo * 4..hi * 4).prop_map(|v| f64::from(v) / 4.0)
}

pub fn arb_rect() -> impl Strategy<Value = Rect> {
    (quarter(-200, 2000), quarter(-200, 3000), quarter(0, 300), quarter(0, 80))
        .prop_map(|(x, y, w, h)| Rect::new(x, y, w, h))
}

pub fn arb_node() -> impl Strategy<Value = NodeInfo> {
    (
        prop::sample::select(vec!["a", "button", "input", "textarea", "select", "div", "span"]),
        prop::sample::select(vec!["", "", "", "textbox", "searchbox", "combobox", "button", "link", "checkbox"]),
        prop::bool::weighted(0.15),
        prop::option::weighted(0.2, -1..3i32),
        prop::bool::weighted(0.1),
        arb_rect(),
        "[a-z ]{0,12}",
    )
        .prop_map(|(tag, role, hidden, tabindex, click, bounds, text)| {
            let mut node = NodeInfo::new(tag, bounds);
            node.aria_role = role.to_string();
            node.hidden = hidden;
            node.tabindex = tabindex;
            node.has_click_handler = click;
            node.accessible_name = text.trim().to_string();
            node.text = text;
            node
        })
}

pub fn arb_snapshot() -> impl Strategy<Value = PageSnapshot> {
    (
        prop::collection::vec(arb_node(), 0..10),
        quarter(300, 1400),
        quarter(200, 1000),
        quarter(0, 300),
        quarter(0, 1500),
    )
        .prop_map(|(nodes, w, h, sx, sy)| PageSnapshot {
            url: "https://example.test/".into(),
            viewport: Viewport { width: w, height: h },
            scroll_offset: ScrollOffset { x: sx, y: sy },
            nodes,
        })
}

pub fn arb_event(max_item: usize) -> impl Strategy<Value = InteractionEvent> {
    let item = 0..max_item;
    prop_oneof![
        item.clone().prop_map(|item| InteractionEvent::Click { item }),
        item.clone().prop_map(|item| InteractionEvent::CursorMove { item }),
        item.clone().prop_map(|item| InteractionEvent::Scroll { item }),
        (item, prop::sample::select(vec!["", "pizza", "new york"]))
            .prop_map(|(item, text)| InteractionEvent::TextInput { item, text: text.to_string() }),
    ]
}

/// One validator/executor comparison: a page, an optional cursor placed
/// by an earlier plan, an optional shift of one node after that, and the
/// plan under test.
#[derive(Debug, Clone)]
pub struct EquivalenceCase {
    pub snapshot: PageSnapshot,
    pub earlier_cursor: Option<usize>,
    pub shift: Option<(usize, f64)>,
    pub events: Vec<InteractionEvent>,
}

pub fn arb_equivalence_case() -> impl Strategy<Value = EquivalenceCase> {
    arb_snapshot().prop_flat_map(|snapshot| {
        let n = snapshot.nodes.len();
        (
            Just(snapshot),
            prop::option::weighted(0.5, 0..n.max(1) + 1),
            prop::option::weighted(0.3, (0..n.max(1), prop::sample::select(vec![0.0, 0.25, 1.0, 40.0]))),
            prop::collection::vec(arb_event(n + 2), 0..=6),
        )
            .prop_map(|(snapshot, earlier_cursor, shift, events)| EquivalenceCase {
                snapshot,
                earlier_cursor,
                shift,
                events,
            })
    })
}

/// `(validator accepted, executor ran every event)`.
pub fn run_equivalence_case(case: &EquivalenceCase) -> (bool, bool) {
    let session = FixtureSession::new(FixtureWorld::single_page("page", case.snapshot.clone()));
    session.navigate_sync("page").expect("page loads");

    if let Some(item) = case.earlier_cursor {
        session.begin_plan_sync(false).unwrap();
        let elements = harvest(&session.state().unwrap().snapshot);
        if let Some(rec) = elements.get(item) {
            if !rec.visible_in_viewport {
                session.dispatch_sync(&InteractionEvent::Scroll { item }).unwrap();
            }
            session.dispatch_sync(&InteractionEvent::CursorMove { item }).unwrap();
        }
    }
    if let Some((node, dy)) = case.shift.filter(|(n, _)| *n < case.snapshot.nodes.len()) {
        let y = case.snapshot.nodes[node].bounds.y + dy;
        let mut bounds = case.snapshot.nodes[node].bounds;
        bounds.y = y;
        session
            .handle()
            .apply_edits(&[NodeEdit::Update {
                node,
                set: json!({"box": bounds}).as_object().unwrap().clone(),
            }])
            .unwrap();
    }

    let state = session.state().unwrap();
    let elements = harvest(&state.snapshot);
    let accepted = validate_events(&case.events, &elements, &state.cursor).ok;

    session.begin_plan_sync(true).unwrap();
    let mut executed = true;
    for event in &case.events {
        match session.dispatch_sync(event) {
            Ok(_) => {}
            Err(SessionError::PreconditionFailure { .. }) => {
                executed = false;
                break;
            }
            Err(other) => panic!("unexpected executor error: {other}"),
        }
    }
    (accepted, executed)
}

#[derive(Debug, Clone)]
pub enum ContextOp {
    Append(usize),
    Evict,
}

#[derive(Debug, Clone)]
pub struct ContextCase {
    pub sink_sizes: Vec<usize>,
    pub extra: usize,
    pub ops: Vec<ContextOp>,
}

pub fn arb_context_case() -> impl Strategy<Value = ContextCase> {
    (
        prop::collection::vec(1usize..200, 1..3),
        0usize..600,
        prop::collection::vec(
            prop_oneof![4 => (0usize..120).prop_map(ContextOp::Append), 1 => Just(ContextOp::Evict)],
            0..60,
        ),
    )
        .prop_map(|(sink_sizes, extra, ops)| ContextCase { sink_sizes, extra, ops })
}

/// Replays the ops, checking after each one that the retained size fits
/// the budget, the sinks are untouched, and the window is the longest
/// suffix of everything appended that fits beside the sinks.
pub fn check_context_case(case: &ContextCase) -> Result<(), String> {
    let budget = case.sink_sizes.iter().sum::<usize>() + case.extra;
    let sinks: Vec<HistorySegment> = case.sink_sizes.iter().map(|&n| HistorySegment::sink("s".repeat(n))).collect();
    let mut state = ContextState::new(sinks.clone(), budget).map_err(|e| e.to_string())?;
    let mut log: Vec<HistorySegment> = Vec::new();
    let mut step = 0u64;
    for (i, op) in case.ops.iter().enumerate() {
        state = match op {
            ContextOp::Append(n) => {
                step += 1;
                let action = "a".repeat(*n);
                log.push(HistorySegment::step(step, &action));
                state.append_step(step, &action)
            }
            ContextOp::Evict => state.evict(),
        }
        .map_err(|e| format!("op {i}: {e}"))?;
        if state.retained_size() > budget {
            return Err(format!("op {i}: retained {} over budget {budget}", state.retained_size()));
        }
        if state.sinks() != &sinks[..] {
            return Err(format!("op {i}: sinks changed"));
        }
        let sizes: Vec<usize> = log.iter().map(|s| s.size).collect();
        let keep = max_suffix_oracle(&sizes, budget - state.sink_size());
        if state.window() != &log[log.len() - keep..] {
            return Err(format!("op {i}: window holds {} segments, oracle keeps {keep}", state.window().len()));
        }
    }
    Ok(())
}

/// Draws `n` values from `strategy` with a fixed seed.
pub fn sample<S: Strategy>(strategy: S, n: usize) -> Vec<S::Value> {
    let mut runner = TestRunner::deterministic();
    (0..n).map(|_| strategy.new_tree(&mut runner).expect("strategy generates").current()).collect()
}

/// Scripted model that keeps every prompt it is sent.
pub struct PromptLog {
    oracle: webpilot_core::gateway::ScriptedOracle,
    prompts: std::sync::Mutex<Vec<String>>,
}

impl PromptLog {
    pub fn new(oracle: webpilot_core::gateway::ScriptedOracle) -> Self {
        Self { oracle, prompts: Default::default() }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

#[async_trait::async_trait]
impl webpilot_core::gateway::LanguageModel for PromptLog {
    async fn complete(
        &self,
        request: &webpilot_core::gateway::CompletionRequest,
    ) -> Result<String, webpilot_core::gateway::GatewayError> {
        self.prompts.lock().unwrap().push(request.prompt.clone());
        self.oracle.complete(request).await
    }
}

pub fn world() -> FixtureWorld {
    FixtureWorld::load(fixture("google_world.json")).unwrap()
}

pub fn oracle(name: &str) -> webpilot_core::gateway::ScriptedOracle {
    webpilot_core::gateway::ScriptedOracle::new(webpilot_core::gateway::load_script(fixture(name)).unwrap())
}
