use std::collections::VecDeque;
use std::path::PathBuf;
use std::time::Duration;

use serde_json::json;
use tokio::sync::{mpsc, oneshot, watch};
use tracing::{debug, warn};

use super::{
    control, now, supply_answers, Agent, AgentConfig, AnswerRecord, ControlCommand, ControlRecord, EventBus,
    EventType, FailureReason, FinalRecord, OrchestratorError, SessionTranscript, TaskState, TaskStatus,
    TranscriptEntry, TranscriptHeader, TranscriptLog,
};
use crate::digest::sha256_hex;
use crate::gateway::LanguageModel;
use crate::session::BrowserSession;

const COMMAND_QUEUE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum TaskCommand {
    Control(ControlCommand),
    Answers(Vec<String>),
}

#[derive(Debug)]
pub struct CommandRequest {
    pub command: TaskCommand,
    pub reply: oneshot::Sender<Result<TaskState, OrchestratorError>>,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: String,
    pub goal: String,
    /// Start page: a fixture page id / url, or a real url.
    pub start: String,
    /// JSONL transcript written while the task runs.
    pub transcript_path: Option<PathBuf>,
    /// Begin in Paused; nothing runs until a resume.
    pub start_paused: bool,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, goal: impl Into<String>, start: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            goal: goal.into(),
            start: start.into(),
            transcript_path: None,
            start_paused: false,
        }
    }
}

/// Client side of a running task: state snapshots, commands, events.
#[derive(Debug, Clone)]
pub struct TaskHandle {
    commands: mpsc::Sender<CommandRequest>,
    state: watch::Receiver<TaskState>,
    bus: EventBus,
}

impl TaskHandle {
    pub fn state(&self) -> TaskState {
        self.state.borrow().clone()
    }

    pub fn events(&self) -> &EventBus {
        &self.bus
    }

    /// Resolves once the command has been applied (at the next step
    /// boundary; abort interrupts a running step).
    pub async fn send(&self, command: TaskCommand) -> Result<TaskState, OrchestratorError> {
        let (reply, rx) = oneshot::channel();
        self.commands
            .send(CommandRequest { command, reply })
            .await
            .map_err(|_| OrchestratorError::TaskGone)?;
        rx.await.map_err(|_| OrchestratorError::TaskGone)?
    }

    pub async fn control(&self, command: ControlCommand) -> Result<TaskState, OrchestratorError> {
        self.send(TaskCommand::Control(command)).await
    }

    pub async fn answer(&self, answers: Vec<String>) -> Result<TaskState, OrchestratorError> {
        self.send(TaskCommand::Answers(answers)).await
    }

    /// Waits until the status satisfies `pred`.
    pub async fn wait_for(&self, pred: impl Fn(&TaskState) -> bool) -> TaskState {
        let mut rx = self.state.clone();
        let state = rx.wait_for(|s| pred(s)).await.map(|s| s.clone());
        state.unwrap_or_else(|_| self.state())
    }
}

/// Drives one task to a terminal status, applying commands between steps.
pub struct TaskRunner {
    agent: Agent,
    spec: TaskSpec,
    commands: mpsc::Receiver<CommandRequest>,
    state: watch::Sender<TaskState>,
    bus: EventBus,
}

impl TaskRunner {
    pub fn new(spec: TaskSpec, agent: Agent) -> Result<(Self, TaskHandle), OrchestratorError> {
        let mut initial = agent.start(spec.task_id.clone(), &spec.goal)?;
        if spec.start_paused {
            initial.status = TaskStatus::Paused;
        }
        let (tx, rx) = mpsc::channel(COMMAND_QUEUE);
        let (state_tx, state_rx) = watch::channel(initial);
        let bus = EventBus::new();
        let handle = TaskHandle { commands: tx, state: state_rx, bus: bus.clone() };
        Ok((Self { agent, spec, commands: rx, state: state_tx, bus }, handle))
    }

    pub async fn run<S, M>(self, session: &mut S, model: &M) -> Result<SessionTranscript, OrchestratorError>
    where
        S: BrowserSession + ?Sized,
        M: LanguageModel + ?Sized,
    {
        let TaskRunner { agent, spec, mut commands, state: state_tx, bus } = self;
        let header = TranscriptHeader {
            format: super::transcript::TRANSCRIPT_FORMAT,
            goal: spec.goal.clone(),
            start: spec.start.clone(),
            world_id: session.world_id(),
            config_digest: agent.config.digest(),
            template_sha256: sha256_hex(agent.template.text()),
            config: agent.config.clone(),
            started_at: Some(now()),
        };
        let mut run = Run {
            log: TranscriptLog::create(header, spec.transcript_path.as_deref())?,
            state: state_tx.borrow().clone(),
            state_tx: &state_tx,
            bus: &bus,
        };
        run.bus.emit(EventType::StatusChanged, json!({"status": run.state.status}));

        match session.navigate(&spec.start).await {
            Ok(_) => {
                if let Err(e) = session.overlay_cursor(None, true).await {
                    warn!("cursor overlay failed: {e}");
                }
            }
            Err(e) => {
                let mut next = run.state.clone();
                next.fail(FailureReason::ExecutionFailure { message: format!("navigating to {}: {e}", spec.start) });
                run.set(next);
            }
        }

        let delay = Duration::from_millis(agent.config.step_delay_ms);
        let mut queued: VecDeque<CommandRequest> = VecDeque::new();
        while !run.state.status.is_terminal() {
            if let Some(req) = queued.pop_front() {
                run.apply(req, session).await?;
                continue;
            }
            match run.state.status {
                TaskStatus::Running => {
                    if let Ok(req) = commands.try_recv() {
                        queued.push_back(req);
                        continue;
                    }
                    if run.state.step_count >= agent.config.max_steps {
                        let mut next = run.state.clone();
                        next.fail(FailureReason::MaxSteps { max_steps: agent.config.max_steps });
                        run.set(next);
                        continue;
                    }
                    let mut abort = None;
                    let stepped = {
                        let step = agent.step(run.state.clone(), &mut *session, model, &bus);
                        tokio::pin!(step);
                        loop {
                            tokio::select! {
                                res = &mut step => break Some(res),
                                Some(req) = commands.recv() => {
                                    if req.command == TaskCommand::Control(ControlCommand::Abort) {
                                        abort = Some(req);
                                        break None;
                                    }
                                    queued.push_back(req);
                                }
                            }
                        }
                    };
                    if let Some(req) = abort {
                        debug!("abort interrupted step {}", run.state.step_count + 1);
                        run.apply(req, session).await?;
                        continue;
                    }
                    let (next, record) = stepped.expect("step finished")?;
                    run.log.append(TranscriptEntry::Step(record))?;
                    let questions = next.pending_questions.clone();
                    run.set(next);
                    if run.state.status == TaskStatus::AwaitingAnswers {
                        bus.emit(EventType::QuestionPending, json!({"questions": questions}));
                    }
                    if !delay.is_zero() && run.state.status == TaskStatus::Running {
                        tokio::select! {
                            _ = tokio::time::sleep(delay) => {}
                            Some(req) = commands.recv() => queued.push_back(req),
                        }
                    }
                }
                _ => match commands.recv().await {
                    Some(req) => queued.push_back(req),
                    None => {
                        // nobody left to answer or resume
                        let mut next = run.state.clone();
                        next.status = TaskStatus::Aborted;
                        run.set(next);
                    }
                },
            }
        }
        // late commands get a definite answer instead of a dropped channel
        commands.close();
        while let Ok(req) = commands.try_recv() {
            queued.push_back(req);
        }
        for req in queued {
            let _ = req.reply.send(Err(OrchestratorError::WrongStatus {
                expected: "a live task",
                found: run.state.status,
            }));
        }

        let state = run.state.clone();
        run.log.append(TranscriptEntry::Final(FinalRecord {
            status: state.status,
            step_count: state.step_count,
            failure: state.failure.clone(),
            at: Some(now()),
        }))?;
        bus.emit(
            EventType::TaskComplete,
            json!({"status": state.status, "steps": state.step_count, "failure": state.failure}),
        );
        Ok(run.log.into_transcript())
    }
}

struct Run<'a> {
    log: TranscriptLog,
    state: TaskState,
    state_tx: &'a watch::Sender<TaskState>,
    bus: &'a EventBus,
}

impl Run<'_> {
    /// Publishes `next` and announces a status change.
    fn set(&mut self, next: TaskState) {
        let changed = next.status != self.state.status;
        self.state = next;
        self.state_tx.send_replace(self.state.clone());
        if changed {
            self.bus.emit(
                EventType::StatusChanged,
                json!({"status": self.state.status, "failure": self.state.failure}),
            );
        }
    }

    async fn apply<S: BrowserSession + ?Sized>(
        &mut self,
        req: CommandRequest,
        session: &mut S,
    ) -> Result<(), OrchestratorError> {
        let after_step = self.state.step_count;
        let result = match &req.command {
            TaskCommand::Answers(answers) => supply_answers(&self.state, answers).map(|next| {
                let questions = self.state.pending_questions.clone();
                (next, TranscriptEntry::Answers(AnswerRecord {
                    after_step,
                    questions,
                    answers: answers.clone(),
                    at: Some(now()),
                }))
            }),
            TaskCommand::Control(cmd) => control(&self.state, *cmd).map(|next| {
                let record = TranscriptEntry::Control(ControlRecord {
                    after_step,
                    command: *cmd,
                    status: next.status,
                    at: Some(now()),
                });
                (next, record)
            }),
        };
        match result {
            Ok((next, entry)) => {
                let was = self.state.status;
                self.log.append(entry)?;
                let pending = next.pending_questions.clone();
                let resumed_questions = was == TaskStatus::TakenOver && next.status == TaskStatus::AwaitingAnswers;
                self.set(next);
                let position = self.state.cursor.position;
                let overlay = match (was, self.state.status) {
                    (_, TaskStatus::TakenOver) => Some(false),
                    (TaskStatus::TakenOver, s) if !s.is_terminal() => Some(true),
                    _ => None,
                };
                if let Some(engaged) = overlay {
                    if let Err(e) = session.overlay_cursor(position, engaged).await {
                        warn!("cursor overlay failed: {e}");
                    }
                }
                if resumed_questions {
                    self.bus.emit(EventType::QuestionPending, json!({"questions": pending}));
                }
                let _ = req.reply.send(Ok(self.state.clone()));
            }
            Err(e) => {
                let _ = req.reply.send(Err(e));
            }
        }
        Ok(())
    }
}

/// Runs `goal` from `start` to a terminal status with no external
/// controller. A question from the model ends the run as Aborted, since
/// nobody can answer it.
pub async fn run_task<S, M>(
    goal: &str,
    start: &str,
    session: &mut S,
    model: &M,
    config: &AgentConfig,
) -> Result<SessionTranscript, OrchestratorError>
where
    S: BrowserSession + ?Sized,
    M: LanguageModel + ?Sized,
{
    let (runner, handle) = TaskRunner::new(TaskSpec::new("local", goal, start), Agent::new(config.clone()))?;
    drop(handle);
    runner.run(session, model).await
}
