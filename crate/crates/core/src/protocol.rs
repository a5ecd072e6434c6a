//! The model-facing contract: what goes in each step, what must come back,
//! and the movement discipline an event plan has to respect.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::harvest::{ElementMap, ElementRecord, Location};

/// One browser interaction requested by the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InteractionEvent {
    Click { item: usize },
    CursorMove { item: usize },
    Scroll { item: usize },
    TextInput { item: usize, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Click,
    CursorMove,
    Scroll,
    TextInput,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::Click,
        EventKind::CursorMove,
        EventKind::Scroll,
        EventKind::TextInput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Click => "click",
            EventKind::CursorMove => "cursor_move",
            EventKind::Scroll => "scroll",
            EventKind::TextInput => "text_input",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl InteractionEvent {
    pub fn item(&self) -> usize {
        match self {
            InteractionEvent::Click { item }
            | InteractionEvent::CursorMove { item }
            | InteractionEvent::Scroll { item }
            | InteractionEvent::TextInput { item, .. } => *item,
        }
    }

    pub fn kind(&self) -> EventKind {
        match self {
            InteractionEvent::Click { .. } => EventKind::Click,
            InteractionEvent::CursorMove { .. } => EventKind::CursorMove,
            InteractionEvent::Scroll { .. } => EventKind::Scroll,
            InteractionEvent::TextInput { .. } => EventKind::TextInput,
        }
    }
}

impl fmt::Display for InteractionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InteractionEvent::TextInput { item, text } => write!(f, "text_input {item} {text:?}"),
            other => write!(f, "{} {}", other.kind(), other.item()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

impl QaPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self { question: question.into(), answer: answer.into() }
    }
}

/// Everything the model receives for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentInput {
    pub task_description: String,
    pub elements: ElementMap,
    pub next_step: String,
    pub history: String,
    pub clarifying_qa: Vec<QaPair>,
}

/// The model's answer for one step. All five keys are always present on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentOutput {
    pub event_list: Vec<InteractionEvent>,
    pub next_step: String,
    pub is_complete: bool,
    pub questions: Vec<String>,
    pub action: String,
}

impl AgentOutput {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("agent output always serializes")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("task description must not be empty")]
    EmptyTask,
}

pub fn build_input(
    task: &str,
    elements: ElementMap,
    next_step: &str,
    history: &str,
    qa: Vec<QaPair>,
) -> Result<AgentInput, ProtocolError> {
    if task.trim().is_empty() {
        return Err(ProtocolError::EmptyTask);
    }
    Ok(AgentInput {
        task_description: task.to_string(),
        elements,
        next_step: next_step.to_string(),
        history: history.to_string(),
        clarifying_qa: qa,
    })
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ParseError {
    #[error("no JSON object found in model output")]
    NoJsonObject,
    #[error("missing key {0}")]
    MissingKey(String),
    #[error("wrong type for {0}")]
    WrongType(String),
    #[error("unknown event kind {0:?}")]
    UnknownEventKind(String),
    #[error("output contains escape characters")]
    EscapeViolation,
}

/// A parsed output plus the keys that were present but not part of the contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub output: AgentOutput,
    pub ignored_keys: Vec<String>,
}

pub fn parse_output(raw: &str, strict: bool) -> Result<AgentOutput, ParseError> {
    parse_output_detailed(raw, strict).map(|p| p.output)
}

/// Finds the first balanced JSON object in `raw` and checks it against the
/// output contract. Strict mode rejects any backslash escape.
pub fn parse_output_detailed(raw: &str, strict: bool) -> Result<ParsedOutput, ParseError> {
    let (text, object) = first_json_object(raw).ok_or(ParseError::NoJsonObject)?;
    if strict && text.contains('\\') {
        return Err(ParseError::EscapeViolation);
    }
    let mut ignored_keys = Vec::new();

    let event_list = match object.get("event_list") {
        None => return Err(ParseError::MissingKey("event_list".into())),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| parse_event(i, v, &mut ignored_keys))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(ParseError::WrongType("event_list".into())),
    };
    let next_step = string_field(&object, "next_step")?;
    let is_complete = match object.get("is_complete") {
        None => return Err(ParseError::MissingKey("is_complete".into())),
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(ParseError::WrongType("is_complete".into())),
    };
    let questions = match object.get("questions") {
        None => return Err(ParseError::MissingKey("questions".into())),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, q)| match q {
                Value::String(s) => Ok(s.clone()),
                _ => Err(ParseError::WrongType(format!("questions[{i}]"))),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(ParseError::WrongType("questions".into())),
    };
    let action = string_field(&object, "action")?;

    ignored_keys.extend(
        object
            .keys()
            .filter(|k| !OUTPUT_KEYS.contains(&k.as_str()))
            .cloned(),
    );
    Ok(ParsedOutput {
        output: AgentOutput { event_list, next_step, is_complete, questions, action },
        ignored_keys,
    })
}

const OUTPUT_KEYS: [&str; 5] = ["event_list", "next_step", "is_complete", "questions", "action"];

fn string_field(object: &Map<String, Value>, key: &str) -> Result<String, ParseError> {
    match object.get(key) {
        None => Err(ParseError::MissingKey(key.into())),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ParseError::WrongType(key.into())),
    }
}

fn parse_event(
    index: usize,
    value: &Value,
    ignored: &mut Vec<String>,
) -> Result<InteractionEvent, ParseError> {
    let path = |field: &str| format!("event_list[{index}].{field}");
    let Value::Object(obj) = value else {
        return Err(ParseError::WrongType(format!("event_list[{index}]")));
    };
    let kind = match obj.get("type") {
        None => return Err(ParseError::MissingKey(path("type"))),
        Some(Value::String(s)) => {
            EventKind::parse(s).ok_or_else(|| ParseError::UnknownEventKind(s.clone()))?
        }
        Some(_) => return Err(ParseError::WrongType(path("type"))),
    };
    let item = match obj.get("item") {
        None => return Err(ParseError::MissingKey(path("item"))),
        Some(v) => v
            .as_u64()
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| ParseError::WrongType(path("item")))?,
    };
    let mut known = vec!["type", "item"];
    let event = match kind {
        EventKind::Click => InteractionEvent::Click { item },
        EventKind::CursorMove => InteractionEvent::CursorMove { item },
        EventKind::Scroll => InteractionEvent::Scroll { item },
        EventKind::TextInput => {
            known.push("text");
            let text = match obj.get("text") {
                None => return Err(ParseError::MissingKey(path("text"))),
                Some(Value::String(s)) => s.clone(),
                Some(_) => return Err(ParseError::WrongType(path("text"))),
            };
            InteractionEvent::TextInput { item, text }
        }
    };
    ignored.extend(obj.keys().filter(|k| !known.contains(&k.as_str())).map(|k| path(k)));
    Ok(event)
}

/// Returns the source text and value of the first `{...}` span in `raw`
/// that is balanced and parses as a JSON object.
fn first_json_object(raw: &str) -> Option<(&str, Map<String, Value>)> {
    let bytes = raw.as_bytes();
    let mut search_from = 0;
    while let Some(offset) = raw[search_from..].find('{') {
        let start = search_from + offset;
        if let Some(end) = balanced_end(bytes, start) {
            let candidate = &raw[start..=end];
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(candidate) {
                return Some((candidate, map));
            }
        }
        search_from = start + 1;
    }
    None
}

/// Index of the `}` closing the object opened at `start`, honoring strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return (b == b'}').then_some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Where the AI cursor is, in page pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CursorState {
    pub current_item: Option<usize>,
    pub position: Option<Location>,
}

impl CursorState {
    pub fn on(item: usize, location: Location) -> Self {
        Self { current_item: Some(item), position: Some(location) }
    }

    /// The item the cursor still rests on in `elements`: the item must exist
    /// and sit exactly where the cursor was left.
    pub fn resting_item(&self, elements: &ElementMap) -> Option<usize> {
        let item = self.current_item?;
        let rec = elements.get(item)?;
        (self.position == Some(rec.location)).then_some(item)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    /// The item must exist in the element map.
    #[serde(rename = "R1")]
    UnknownItem,
    /// Click and text input need the cursor on the item first.
    #[serde(rename = "R2")]
    CursorNotOnItem,
    /// Moving to an element outside the viewport needs a scroll to it first.
    #[serde(rename = "R3")]
    NotScrolledIntoView,
    /// Text input needs an editable target.
    #[serde(rename = "R4")]
    NotEditable,
    /// The event must be a well-formed instance of one of the four kinds.
    #[serde(rename = "R5")]
    MalformedEvent,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::UnknownItem => "R1",
            Rule::CursorNotOnItem => "R2",
            Rule::NotScrolledIntoView => "R3",
            Rule::NotEditable => "R4",
            Rule::MalformedEvent => "R5",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub event_index: usize,
    pub rule: Rule,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self { ok: violations.is_empty(), violations }
    }
}

/// Roles that accept typed text. A non-empty role overrides the tag, so an
/// `<input>` presented as a button is not a text target.
pub const TEXT_ROLES: &[&str] = &["textbox", "searchbox", "combobox"];
pub const TEXT_TAGS: &[&str] = &["input", "textarea"];

pub fn is_text_target(record: &ElementRecord) -> bool {
    if record.aria_role.is_empty() {
        TEXT_TAGS.contains(&record.tag_name.as_str())
    } else {
        TEXT_ROLES.contains(&record.aria_role.as_str())
    }
}

/// Checks a plan against the element map the model was shown, threading a
/// simulated cursor and the set of items scrolled to so far. Every
/// violation is reported, in event order.
pub fn validate_events(
    events: &[InteractionEvent],
    elements: &ElementMap,
    cursor: &CursorState,
) -> ValidationReport {
    let mut violations = Vec::new();
    let mut on_item = cursor.resting_item(elements);
    let mut scrolled: HashSet<usize> = HashSet::new();

    for (i, event) in events.iter().enumerate() {
        let mut flag = |rule: Rule, message: String| {
            violations.push(Violation { event_index: i, rule, message })
        };
        if let InteractionEvent::TextInput { text, .. } = event {
            if text.is_empty() {
                flag(Rule::MalformedEvent, "text_input carries no text".into());
            }
        }
        let item = event.item();
        let Some(record) = elements.get(item) else {
            flag(Rule::UnknownItem, format!("item {item} is not on this page"));
            continue;
        };
        match event {
            InteractionEvent::Scroll { .. } => {
                scrolled.insert(item);
            }
            InteractionEvent::CursorMove { .. } => {
                if !record.visible_in_viewport && !scrolled.contains(&item) {
                    flag(
                        Rule::NotScrolledIntoView,
                        format!("item {item} is out of view; scroll to it before moving the cursor"),
                    );
                }
                on_item = Some(item);
            }
            InteractionEvent::Click { .. } | InteractionEvent::TextInput { .. } => {
                if on_item != Some(item) {
                    flag(
                        Rule::CursorNotOnItem,
                        format!("move the cursor to item {item} before {}", event.kind()),
                    );
                }
                if event.kind() == EventKind::TextInput && !is_text_target(record) {
                    flag(Rule::NotEditable, format!("item {item} does not accept text"));
                }
            }
        }
    }
    ValidationReport::from_violations(violations)
}
