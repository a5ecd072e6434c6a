//! Prompt rendering from a slot template.

use std::path::Path;

use thiserror::Error;

use crate::harvest::serialize_elements;
use crate::protocol::{AgentInput, QaPair};

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/prompt.txt");

pub const NO_HISTORY: &str = "No history yet.";
pub const NO_QUESTIONS: &str = "No clarifying questions yet.";

pub const SLOTS: [&str; 5] = ["task", "elements", "next_step", "history", "questions"];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template has no {{{0}}} slot")]
    TemplateSlotMissing(&'static str),
    #[error("reading template: {0}")]
    Io(#[from] std::io::Error),
}

/// Template text with `{task}`, `{elements}`, `{next_step}`, `{history}`
/// and `{questions}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { text: DEFAULT_TEMPLATE.to_string() }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Ok(Self::new(std::fs::read_to_string(path)?))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match SLOTS.iter().find(|s| !self.text.contains(&format!("{{{s}}}"))) {
            Some(missing) => Err(PromptError::TemplateSlotMissing(missing)),
            None => Ok(()),
        }
    }

    /// Everything before the `{task}` slot: the fixed instructions that every
    /// prompt starts with.
    pub fn instruction_block(&self) -> &str {
        match self.text.find("{task}") {
            Some(at) => &self.text[..at],
            None => &self.text,
        }
    }

    pub fn render(&self, input: &AgentInput) -> Result<String, PromptError> {
        self.validate()?;
        let history = if input.history.is_empty() { NO_HISTORY.to_string() } else { input.history.clone() };
        let questions = if input.clarifying_qa.is_empty() {
            NO_QUESTIONS.to_string()
        } else {
            render_questions(&input.clarifying_qa)
        };
        let values = [
            input.task_description.clone(),
            serialize_elements(&input.elements),
            input.next_step.clone(),
            history,
            questions,
        ];
        let lines: Vec<String> = self
            .text
            .split('\n')
            .map(|line| fill_line(line, &values))
            .collect();
        Ok(lines.join("\n"))
    }
}

pub fn render_prompt(input: &AgentInput, template: &PromptTemplate) -> Result<String, PromptError> {
    template.render(input)
}

pub fn render_questions(qa: &[QaPair]) -> String {
    qa.iter()
        .map(|p| format!("Q: {} A: {}", p.question, p.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Drops every `"` and `'`.
pub fn sanitize_prompt(s: &str) -> String {
    s.chars().filter(|c| !matches!(c, '"' | '\'')).collect()
}

// A line holding nothing but an empty slot renders as an empty line.
// Multi-line values keep the slot line's indentation on every line.
fn fill_line(line: &str, values: &[String; 5]) -> String {
    let indent_len = line.len() - line.trim_start().len();
    let indent = &line[..indent_len];
    if let Some(i) = SLOTS.iter().position(|s| line.trim() == format!("{{{s}}}")) {
        if values[i].is_empty() {
            return String::new();
        }
    }
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        for (i, slot) in SLOTS.iter().enumerate() {
            if let Some(after) = tail.strip_prefix(slot).and_then(|t| t.strip_prefix('}')) {
                out.push_str(&values[i].replace('\n', &format!("\n{indent}")));
                rest = after;
                continue 'scan;
            }
        }
        out.push('{');
        rest = tail;
    }
    out.push_str(rest);
    out
}
