//! The agent loop: one [`Agent::step`] per model call, the task state
//! machine, the long-running [`TaskRunner`] with its control channel, and
//! transcript replay.

mod events;
mod replay;
mod runner;
mod transcript;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::context::{ContextError, ContextState, HistorySegment, DEFAULT_BUDGET_CHARS};
use crate::digest::sha256_hex;
use crate::gateway::{self, CompletionRequest, LanguageModel, DEFAULT_DEADLINE, DEFAULT_MAX_OUTPUT_CHARS};
use crate::harvest::{harvest_with, HarvestConfig};
use crate::prompt::{render_prompt, sanitize_prompt, PromptError, PromptTemplate};
use crate::protocol::{
    build_input, parse_output, validate_events, AgentOutput, CursorState, InteractionEvent, ParseError,
    ProtocolError, QaPair, ValidationReport,
};
use crate::session::{BrowserSession, SessionError};

pub use events::{EventBus, EventType, StreamEvent};
pub use replay::{replay, replay_with, ReplayError};
pub use runner::{run_task, CommandRequest, TaskCommand, TaskHandle, TaskRunner, TaskSpec};
pub use transcript::{
    AnswerRecord, ControlRecord, FinalRecord, SessionTranscript, TranscriptEntry, TranscriptError,
    TranscriptHeader, TranscriptLog,
};

/// Appended to the prompt when the previous output could not be parsed.
pub const REPAIR_LINE: &str = "Your previous output was not valid JSON. Respond with only the JSON object.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_steps: u32,
    /// Per-call gateway deadline.
    pub deadline_ms: u64,
    pub max_output_chars: usize,
    pub temperature: f64,
    /// Strip quote characters from rendered prompts.
    pub sanitize: bool,
    /// Reject model output containing backslashes.
    pub strict_parse: bool,
    /// Extra model calls allowed after an unparseable output.
    pub parse_repairs: u32,
    pub context_budget: usize,
    /// Let the cursor keep its item across steps when the element has not moved.
    pub cursor_carryover: bool,
    pub harvest: HarvestConfig,
    /// Pause between steps. Pacing only; not part of the digest.
    pub step_delay_ms: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_steps: 25,
            deadline_ms: DEFAULT_DEADLINE.as_millis() as u64,
            max_output_chars: DEFAULT_MAX_OUTPUT_CHARS,
            temperature: 0.0,
            sanitize: true,
            strict_parse: false,
            parse_repairs: 2,
            context_budget: DEFAULT_BUDGET_CHARS,
            cursor_carryover: true,
            harvest: HarvestConfig::default(),
            step_delay_ms: 0,
        }
    }
}

impl AgentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, OrchestratorError> {
        toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OrchestratorError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn deadline(&self) -> Duration {
        Duration::from_millis(self.deadline_ms)
    }

    /// SHA-256 over every setting that can change a step's outcome.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("object").remove("step_delay_ms");
        sha256_hex(value.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskStatus {
    Running,
    AwaitingAnswers,
    Paused,
    TakenOver,
    Complete,
    Failed,
    Aborted,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Complete | TaskStatus::Failed | TaskStatus::Aborted)
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Pause,
    Resume,
    Abort,
    Takeover,
    Release,
}

impl ControlCommand {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlCommand::Pause => "pause",
            ControlCommand::Resume => "resume",
            ControlCommand::Abort => "abort",
            ControlCommand::Takeover => "takeover",
            ControlCommand::Release => "release",
        }
    }
}

impl fmt::Display for ControlCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlCommand {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "pause" => ControlCommand::Pause,
            "resume" => ControlCommand::Resume,
            "abort" => ControlCommand::Abort,
            "takeover" => ControlCommand::Takeover,
            "release" => ControlCommand::Release,
            other => return Err(OrchestratorError::UnknownCommand(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum FailureReason {
    GatewayFailure { message: String },
    ParseFailureAfterRetries { error: ParseError, attempts: u32 },
    ExecutionFailure { message: String },
    MaxSteps { max_steps: u32 },
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("goal must not be empty")]
    EmptyGoal,
    #[error("expected status {expected}, task is {found}")]
    WrongStatus { expected: &'static str, found: TaskStatus },
    #[error("{expected} question(s) pending but {got} answer(s) given")]
    AnswerCountMismatch { expected: usize, got: usize },
    #[error("cannot {command} while {status}")]
    IllegalTransition { command: ControlCommand, status: TaskStatus },
    #[error("unknown control command {0:?}")]
    UnknownCommand(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("task runner has stopped")]
    TaskGone,
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ProtocolError> for OrchestratorError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::EmptyTask => OrchestratorError::EmptyGoal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task_id: String,
    pub goal: String,
    pub status: TaskStatus,
    pub step_count: u32,
    pub pending_questions: Vec<String>,
    pub context: ContextState,
    pub cursor: CursorState,
    /// The model's own plan for the next step, fed back verbatim.
    pub next_step: String,
    pub clarifying_qa: Vec<QaPair>,
    /// Questions parked while a human has taken over.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suspended_questions: Vec<String>,
    /// Set by a takeover: the next plan starts without a carried cursor.
    #[serde(default)]
    pub cursor_invalidated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
}

impl TaskState {
    fn fail(&mut self, reason: FailureReason) {
        self.status = TaskStatus::Failed;
        self.failure = Some(reason);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairAttempt {
    pub prompt_sha256: String,
    pub raw_output: String,
    pub parse_error: ParseError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventOutcome {
    Executed,
    /// Not dispatched because an earlier event changed the page.
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventResult {
    pub index: usize,
    pub event: InteractionEvent,
    pub outcome: EventOutcome,
    pub page_changed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Audit record of one step. When the model answered, exactly one of
/// `parsed` and `parse_error` is set; a gateway failure leaves both empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u32,
    pub page_url: String,
    pub element_count: usize,
    pub prompt_sha256: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repair_attempts: Vec<RepairAttempt>,
    pub raw_output: Option<String>,
    pub parsed: Option<AgentOutput>,
    pub parse_error: Option<ParseError>,
    pub validation: Option<ValidationReport>,
    pub executed: Vec<EventResult>,
    /// Events held back because the model asked questions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deferred: Vec<InteractionEvent>,
    pub status_after: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

impl StepRecord {
    fn new(step_index: u32) -> Self {
        Self {
            step_index,
            page_url: String::new(),
            element_count: 0,
            prompt_sha256: String::new(),
            repair_attempts: Vec::new(),
            raw_output: None,
            parsed: None,
            parse_error: None,
            validation: None,
            executed: Vec::new(),
            deferred: Vec::new(),
            status_after: TaskStatus::Running,
            failure: None,
            started_at: Some(now()),
            finished_at: None,
        }
    }

    pub fn without_timestamps(&self) -> Self {
        Self { started_at: None, finished_at: None, ..self.clone() }
    }
}

pub(crate) fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Applies answers to pending questions and resumes the task.
pub fn supply_answers(state: &TaskState, answers: &[String]) -> Result<TaskState, OrchestratorError> {
    if state.status != TaskStatus::AwaitingAnswers {
        return Err(OrchestratorError::WrongStatus { expected: "AwaitingAnswers", found: state.status });
    }
    if answers.len() != state.pending_questions.len() {
        return Err(OrchestratorError::AnswerCountMismatch {
            expected: state.pending_questions.len(),
            got: answers.len(),
        });
    }
    let mut next = state.clone();
    next.clarifying_qa.extend(
        state.pending_questions.iter().zip(answers).map(|(q, a)| QaPair::new(q.clone(), a.clone())),
    );
    next.pending_questions.clear();
    next.status = TaskStatus::Running;
    Ok(next)
}

/// Pure status transition for a human control command.
pub fn control(state: &TaskState, command: ControlCommand) -> Result<TaskState, OrchestratorError> {
    use TaskStatus as S;
    let illegal = || OrchestratorError::IllegalTransition { command, status: state.status };
    let mut next = state.clone();
    match (command, state.status) {
        (_, s) if s.is_terminal() => return Err(illegal()),
        (ControlCommand::Abort, _) => next.status = S::Aborted,
        (ControlCommand::Pause, S::Running) => next.status = S::Paused,
        (ControlCommand::Resume, S::Paused) => next.status = S::Running,
        (ControlCommand::Resume | ControlCommand::Release, S::TakenOver) => {
            next.pending_questions = std::mem::take(&mut next.suspended_questions);
            next.status = if next.pending_questions.is_empty() { S::Running } else { S::AwaitingAnswers };
        }
        (ControlCommand::Takeover, S::Running | S::Paused | S::AwaitingAnswers) => {
            next.suspended_questions = std::mem::take(&mut next.pending_questions);
            next.cursor_invalidated = true;
            next.status = S::TakenOver;
        }
        _ => return Err(illegal()),
    }
    Ok(next)
}

/// Config plus prompt template: everything needed to run steps.
#[derive(Debug, Clone, Default)]
pub struct Agent {
    pub config: AgentConfig,
    pub template: PromptTemplate,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Self {
        Self { config, template: PromptTemplate::default() }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    /// Fresh Running state. The instruction block and the goal are pinned as
    /// context sinks.
    pub fn start(&self, task_id: impl Into<String>, goal: &str) -> Result<TaskState, OrchestratorError> {
        if goal.trim().is_empty() {
            return Err(OrchestratorError::EmptyGoal);
        }
        self.template.validate()?;
        let sinks = vec![
            HistorySegment::sink(self.template.instruction_block()),
            HistorySegment::sink(goal),
        ];
        Ok(TaskState {
            task_id: task_id.into(),
            goal: goal.to_string(),
            status: TaskStatus::Running,
            step_count: 0,
            pending_questions: Vec::new(),
            context: ContextState::new(sinks, self.config.context_budget)?,
            cursor: CursorState::default(),
            next_step: String::new(),
            clarifying_qa: Vec::new(),
            suspended_questions: Vec::new(),
            cursor_invalidated: false,
            failure: None,
        })
    }

    /// Runs one harvest, prompt, parse, validate, dispatch round. Failures
    /// inside the step end the task as Failed and are captured in the
    /// record; only a call in the wrong status is an `Err`.
    pub async fn step<S, M>(
        &self,
        state: TaskState,
        session: &mut S,
        model: &M,
        bus: &EventBus,
    ) -> Result<(TaskState, StepRecord), OrchestratorError>
    where
        S: BrowserSession + ?Sized,
        M: LanguageModel + ?Sized,
    {
        if state.status != TaskStatus::Running {
            return Err(OrchestratorError::WrongStatus { expected: "Running", found: state.status });
        }
        let mut state = state;
        let index = state.step_count + 1;
        state.step_count = index;
        let mut record = StepRecord::new(index);
        bus.emit(EventType::StepStarted, json!({"step": index}));

        let outcome = self.step_inner(&mut state, &mut record, session, model, bus).await;
        if let Err(reason) = outcome {
            state.fail(reason.clone());
            record.failure = Some(reason);
        }
        record.status_after = state.status;
        record.finished_at = Some(now());
        Ok((state, record))
    }

    async fn step_inner<S, M>(
        &self,
        state: &mut TaskState,
        record: &mut StepRecord,
        session: &mut S,
        model: &M,
        bus: &EventBus,
    ) -> Result<(), FailureReason>
    where
        S: BrowserSession + ?Sized,
        M: LanguageModel + ?Sized,
    {
        let index = record.step_index;
        let exec = |e: SessionError| FailureReason::ExecutionFailure { message: e.to_string() };

        let carry = self.config.cursor_carryover && !state.cursor_invalidated;
        state.cursor_invalidated = false;
        session.begin_plan(carry).await.map_err(exec)?;
        let snapshot = session.snapshot().await.map_err(exec)?;
        let elements = harvest_with(&snapshot, &self.config.harvest);
        let cursor = session.cursor();
        state.cursor = cursor;
        record.page_url = snapshot.url.clone();
        record.element_count = elements.len();
        bus.emit(
            EventType::ElementsHarvested,
            json!({"step": index, "url": snapshot.url, "count": elements.len(), "elements": elements}),
        );

        let input = build_input(
            &state.goal,
            elements.clone(),
            &state.next_step,
            &state.context.render_history(),
            state.clarifying_qa.clone(),
        )
        .map_err(|e| FailureReason::ExecutionFailure { message: e.to_string() })?;
        let mut prompt = render_prompt(&input, &self.template)
            .map_err(|e| FailureReason::ExecutionFailure { message: e.to_string() })?;
        if self.config.sanitize {
            prompt = sanitize_prompt(&prompt);
        }
        record.prompt_sha256 = sha256_hex(&prompt);

        let output = self.ask(&prompt, record, model, bus).await?;

        let validation = validate_events(&output.event_list, &elements, &cursor);
        bus.emit(
            EventType::ValidationResult,
            json!({"step": index, "ok": validation.ok, "violations": validation.violations}),
        );
        record.validation = Some(validation.clone());
        record.parsed = Some(output.clone());

        if !output.questions.is_empty() {
            record.deferred = output.event_list.clone();
            state.pending_questions = output.questions.clone();
            state.status = TaskStatus::AwaitingAnswers;
        } else {
            if !validation.ok {
                let first = &validation.violations[0];
                return Err(FailureReason::ExecutionFailure {
                    message: format!(
                        "plan rejected: event {} breaks {}: {}",
                        first.event_index, first.rule, first.message
                    ),
                });
            }
            self.dispatch_all(&output.event_list, state, record, session, bus).await?;
        }

        state.next_step = output.next_step.clone();
        state.context = state
            .context
            .append_step(u64::from(index), &output.action)
            .map_err(|e| FailureReason::ExecutionFailure { message: e.to_string() })?;
        if output.is_complete && state.status == TaskStatus::Running {
            state.status = TaskStatus::Complete;
        }
        Ok(())
    }

    /// Calls the model, re-prompting with [`REPAIR_LINE`] while the output
    /// does not parse.
    async fn ask<M: LanguageModel + ?Sized>(
        &self,
        prompt: &str,
        record: &mut StepRecord,
        model: &M,
        bus: &EventBus,
    ) -> Result<AgentOutput, FailureReason> {
        let attempts = self.config.parse_repairs + 1;
        let mut request = CompletionRequest {
            prompt: prompt.to_string(),
            max_output_chars: self.config.max_output_chars,
            temperature: self.config.temperature,
            deadline: self.config.deadline(),
        };
        for attempt in 0..attempts {
            if attempt > 0 {
                request.prompt = format!("{prompt}\n{REPAIR_LINE}");
            }
            let raw = gateway::complete(model, &request)
                .await
                .map_err(|e| FailureReason::GatewayFailure { message: e.to_string() })?;
            bus.emit(
                EventType::LlmResponse,
                json!({"step": record.step_index, "attempt": attempt, "raw_output": raw}),
            );
            match parse_output(&raw, self.config.strict_parse) {
                Ok(output) => {
                    record.raw_output = Some(raw);
                    return Ok(output);
                }
                Err(error) if attempt + 1 < attempts => {
                    record.repair_attempts.push(RepairAttempt {
                        prompt_sha256: sha256_hex(&request.prompt),
                        raw_output: raw,
                        parse_error: error,
                    });
                }
                Err(error) => {
                    record.raw_output = Some(raw);
                    record.parse_error = Some(error.clone());
                    return Err(FailureReason::ParseFailureAfterRetries { error, attempts });
                }
            }
        }
        unreachable!("at least one attempt is always made")
    }

    async fn dispatch_all<S: BrowserSession + ?Sized>(
        &self,
        events: &[InteractionEvent],
        state: &mut TaskState,
        record: &mut StepRecord,
        session: &mut S,
        bus: &EventBus,
    ) -> Result<(), FailureReason> {
        let index = record.step_index;
        let mut page_changed = false;
        for (i, event) in events.iter().enumerate() {
            if page_changed {
                record.executed.push(EventResult {
                    index: i,
                    event: event.clone(),
                    outcome: EventOutcome::Skipped,
                    page_changed: false,
                    error: None,
                });
                continue;
            }
            match session.dispatch(event).await {
                Ok(outcome) => {
                    page_changed = outcome.page_changed;
                    state.cursor = outcome.state.cursor;
                    record.executed.push(EventResult {
                        index: i,
                        event: event.clone(),
                        outcome: EventOutcome::Executed,
                        page_changed,
                        error: None,
                    });
                    bus.emit(
                        EventType::EventDispatched,
                        json!({"step": index, "index": i, "event": event, "page_changed": page_changed}),
                    );
                    if let (InteractionEvent::CursorMove { item }, Some(pos)) = (event, state.cursor.position) {
                        bus.emit(EventType::CursorMoved, json!({"x": pos.x, "y": pos.y, "item": item}));
                        if let Err(e) = session.overlay_cursor(Some(pos), true).await {
                            tracing::warn!("cursor overlay failed: {e}");
                        }
                    }
                }
                Err(e) => {
                    record.executed.push(EventResult {
                        index: i,
                        event: event.clone(),
                        outcome: EventOutcome::Failed,
                        page_changed: false,
                        error: Some(e.to_string()),
                    });
                    return Err(FailureReason::ExecutionFailure { message: format!("event {i}: {e}") });
                }
            }
        }
        state.cursor = session.cursor();
        Ok(())
    }
}
