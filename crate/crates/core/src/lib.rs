//! Core of an observable web agent.
//!
//! Each step of the agent loop harvests the interactable elements of the
//! current page into a numbered JSON map, renders a prompt under a
//! sink-plus-sliding-window history policy, asks a language model for a JSON
//! action plan, checks that plan against the cursor/scroll discipline, and
//! executes it against a browser session. A human can watch the red AI cursor,
//! answer clarifying questions, pause, or take over at any point.
//!
//! ## Module overview
//!
//! - [`harvest`]: page snapshots, interactability rules and the element map wire format
//! - [`protocol`]: model input/output contract, output parsing and plan validation
//! - [`prompt`]: prompt template rendering and quote sanitization
//! - [`context`]: sink + sliding-window history retention
//! - [`gateway`]: language-model providers (scripted oracle, recorder, HTTP)
//! - [`session`]: browser sessions (fixture world and DevTools protocol)
//! - [`orchestrator`]: the step loop, human control, transcripts and replay

pub mod context;
pub mod digest;
pub mod gateway;
pub mod harvest;
pub mod orchestrator;
pub mod prompt;
pub mod protocol;
pub mod pyjson;
pub mod session;

pub use context::{ContextError, ContextState, HistorySegment, SegmentKind};
pub use gateway::{
    CompletionRequest, GatewayError, HttpModel, LanguageModel, OracleScript, RecordingProxy,
    ScriptedOracle,
};
pub use harvest::{
    harvest, ElementMap, ElementRecord, HarvestConfig, NodeInfo, PageSnapshot, Rect,
};
pub use orchestrator::{
    replay, run_task, Agent, AgentConfig, ControlCommand, EventBus, SessionTranscript, StepRecord,
    TaskHandle, TaskRunner, TaskSpec, TaskState, TaskStatus,
};
pub use prompt::{render_prompt, sanitize_prompt, PromptTemplate};
pub use protocol::{
    parse_output, validate_events, AgentInput, AgentOutput, CursorState, InteractionEvent,
    ValidationReport,
};
pub use session::{BrowserSession, FixtureSession, FixtureWorld, SessionError, SessionState};
