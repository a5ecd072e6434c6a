//! Page snapshots and the numbered interactable-element map.
//!
//! A [`PageSnapshot`] is the raw material (every candidate DOM node with its
//! geometry); [`harvest`] keeps the interactable ones, numbers them in
//! document order and attaches a viewport visibility flag. The resulting
//! [`ElementMap`] is what the model sees each step.

use std::fmt;
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::pyjson;

/// Tags that are interactable regardless of role.
pub const DEFAULT_INTERACTIVE_TAGS: &[&str] = &["a", "button", "input", "textarea", "select"];

/// ARIA roles that make any element interactable.
pub const DEFAULT_INTERACTIVE_ROLES: &[&str] = &[
    "button", "link", "textbox", "searchbox", "checkbox", "radio", "combobox", "menuitem", "tab",
    "slider", "switch",
];

pub const DEFAULT_MAX_TEXT_CHARS: usize = 300;

#[derive(Debug, Error)]
pub enum HarvestError {
    #[error("viewport must have positive width and height, got {width}x{height}")]
    InvalidViewport { width: f64, height: f64 },
    #[error("node {index} has a negative width or height")]
    NegativeSize { index: usize },
    #[error("malformed snapshot JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading snapshot: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned rectangle in CSS pixels; `x`/`y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub width: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self { x, y, height, width }
    }

    pub fn right(&self) -> f64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.height
    }

    /// Area of the overlap with `other`, zero when they do not overlap.
    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScrollOffset {
    pub x: f64,
    pub y: f64,
}

/// One candidate DOM node as reported by the page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub tag_name: String,
    #[serde(default)]
    pub accessible_name: String,
    #[serde(default)]
    pub aria_role: String,
    #[serde(default)]
    pub dom_id: String,
    #[serde(default)]
    pub css_class: String,
    #[serde(default)]
    pub text: String,
    #[serde(rename = "box")]
    pub bounds: Rect,
    #[serde(default)]
    pub hidden: bool,
    #[serde(default)]
    pub has_click_handler: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabindex: Option<i32>,
    #[serde(default)]
    pub editable: bool,
}

impl NodeInfo {
    /// A plain, non-interactive node of the given tag.
    pub fn new(tag_name: impl Into<String>, bounds: Rect) -> Self {
        Self {
            tag_name: tag_name.into(),
            accessible_name: String::new(),
            aria_role: String::new(),
            dom_id: String::new(),
            css_class: String::new(),
            text: String::new(),
            bounds,
            hidden: false,
            has_click_handler: false,
            tabindex: None,
            editable: false,
        }
    }
}

/// Everything observed about a page at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageSnapshot {
    pub url: String,
    pub viewport: Viewport,
    #[serde(rename = "scroll", default)]
    pub scroll_offset: ScrollOffset,
    #[serde(default)]
    pub nodes: Vec<NodeInfo>,
}

impl PageSnapshot {
    pub fn validate(&self) -> Result<(), HarvestError> {
        let Viewport { width, height } = self.viewport;
        if !(width > 0.0 && height > 0.0) {
            return Err(HarvestError::InvalidViewport { width, height });
        }
        if let Some(index) = self
            .nodes
            .iter()
            .position(|n| n.bounds.width < 0.0 || n.bounds.height < 0.0)
        {
            return Err(HarvestError::NegativeSize { index });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarvestError> {
        let snapshot: PageSnapshot = serde_json::from_str(text)?;
        snapshot.validate()?;
        Ok(snapshot)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarvestError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The viewport rectangle in page coordinates.
    pub fn visible_rect(&self) -> Rect {
        Rect::new(
            self.scroll_offset.x,
            self.scroll_offset.y,
            self.viewport.width,
            self.viewport.height,
        )
    }
}

/// Which nodes count as interactable, and how much text each record keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    pub interactive_tags: Vec<String>,
    pub interactive_roles: Vec<String>,
    pub max_text_chars: usize,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            interactive_tags: DEFAULT_INTERACTIVE_TAGS.iter().map(|s| s.to_string()).collect(),
            interactive_roles: DEFAULT_INTERACTIVE_ROLES.iter().map(|s| s.to_string()).collect(),
            max_text_chars: DEFAULT_MAX_TEXT_CHARS,
        }
    }
}

impl HarvestConfig {
    pub fn is_interactable(&self, node: &NodeInfo) -> bool {
        self.interactive_tags.contains(&node.tag_name)
            || self.interactive_roles.contains(&node.aria_role)
            || node.tabindex.is_some_and(|t| t >= 0)
            || node.has_click_handler
    }
}

/// Interactability under the default whitelist.
pub fn classify_interactable(node: &NodeInfo) -> bool {
    DEFAULT_INTERACTIVE_TAGS.contains(&node.tag_name.as_str())
        || DEFAULT_INTERACTIVE_ROLES.contains(&node.aria_role.as_str())
        || node.tabindex.is_some_and(|t| t >= 0)
        || node.has_click_handler
}

/// True when the node is shown and its box overlaps the scrolled viewport
/// with positive area.
pub fn compute_visibility(
    bounds: &Rect,
    hidden: bool,
    viewport: &Viewport,
    scroll_offset: &ScrollOffset,
) -> bool {
    if hidden {
        return false;
    }
    let view = Rect::new(scroll_offset.x, scroll_offset.y, viewport.width, viewport.height);
    bounds.intersection_area(&view) > 0.0
}

/// Rounds half-up to the nearest integer (`2.5 -> 3`, `-2.5 -> -2`).
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub x: i64,
    pub y: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub height: i64,
    pub width: i64,
}

/// One numbered element as shown to the model.
///
/// Field order is the wire order. The accessible name goes out under the
/// key `accesible_name`, which is the spelling existing prompts and
/// transcripts use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub tag_name: String,
    #[serde(rename = "accesible_name")]
    pub accessible_name: String,
    pub aria_role: String,
    #[serde(rename = "id")]
    pub dom_id: String,
    #[serde(rename = "class")]
    pub css_class: String,
    pub text: String,
    pub location: Location,
    pub size: Size,
    pub visible_in_viewport: bool,
}

impl ElementRecord {
    pub fn from_node(node: &NodeInfo, snapshot: &PageSnapshot, max_text_chars: usize) -> Self {
        Self {
            tag_name: node.tag_name.clone(),
            accessible_name: node.accessible_name.clone(),
            aria_role: node.aria_role.clone(),
            dom_id: node.dom_id.clone(),
            css_class: node.css_class.clone(),
            text: node.text.trim().chars().take(max_text_chars).collect(),
            location: Location {
                x: round_half_up(node.bounds.x),
                y: round_half_up(node.bounds.y),
            },
            size: Size {
                height: round_half_up(node.bounds.height),
                width: round_half_up(node.bounds.width),
            },
            visible_in_viewport: compute_visibility(
                &node.bounds,
                node.hidden,
                &snapshot.viewport,
                &snapshot.scroll_offset,
            ),
        }
    }
}

/// Element id (`"0"`, `"1"`, ...) to record, in document order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ElementMap {
    records: Vec<ElementRecord>,
}

impl ElementMap {
    pub fn new(records: Vec<ElementRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ElementRecord> {
        self.records.get(id)
    }

    pub fn contains(&self, id: usize) -> bool {
        id < self.records.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ElementRecord)> {
        self.records.iter().enumerate()
    }

    pub fn records(&self) -> &[ElementRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ElementRecord> {
        self.records
    }
}

impl Serialize for ElementMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.records.len()))?;
        for (id, record) in self.records.iter().enumerate() {
            map.serialize_entry(&id.to_string(), record)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ElementMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MapVisitor;

        impl<'de> Visitor<'de> for MapVisitor {
            type Value = ElementMap;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object keyed by consecutive decimal element ids")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<ElementMap, A::Error> {
                let mut entries: Vec<(usize, ElementRecord)> = Vec::new();
                while let Some((key, record)) = access.next_entry::<String, ElementRecord>()? {
                    let canonical = key.parse::<usize>().ok().filter(|id| id.to_string() == key);
                    let Some(id) = canonical else {
                        return Err(de::Error::custom(format!("invalid element id {key:?}")));
                    };
                    entries.push((id, record));
                }
                entries.sort_by_key(|(id, _)| *id);
                for (expected, (id, _)) in entries.iter().enumerate() {
                    if *id != expected {
                        return Err(de::Error::custom(format!(
                            "element ids must be 0..{} without gaps, found {id} at position {expected}",
                            entries.len()
                        )));
                    }
                }
                Ok(ElementMap::new(entries.into_iter().map(|(_, r)| r).collect()))
            }
        }

        deserializer.deserialize_map(MapVisitor)
    }
}

/// Indices into `snapshot.nodes` of the interactable nodes, in element-id order.
pub fn interactable_indices(snapshot: &PageSnapshot, config: &HarvestConfig) -> Vec<usize> {
    snapshot
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| config.is_interactable(n))
        .map(|(i, _)| i)
        .collect()
}

/// Harvests with the default whitelist.
pub fn harvest(snapshot: &PageSnapshot) -> ElementMap {
    harvest_with(snapshot, &HarvestConfig::default())
}

pub fn harvest_with(snapshot: &PageSnapshot, config: &HarvestConfig) -> ElementMap {
    ElementMap::new(
        snapshot
            .nodes
            .iter()
            .filter(|n| config.is_interactable(n))
            .map(|n| ElementRecord::from_node(n, snapshot, config.max_text_chars))
            .collect(),
    )
}

/// Single-line elements JSON in the prompt's wire layout.
pub fn serialize_elements(map: &ElementMap) -> String {
    pyjson::to_string(map).expect("element maps always serialize")
}

pub fn parse_elements(text: &str) -> Result<ElementMap, serde_json::Error> {
    serde_json::from_str(text)
}
