use thiserror::Error;

use super::{
    control, now, supply_answers, Agent, EventBus, FailureReason, FinalRecord, OrchestratorError,
    SessionTranscript, StepRecord, TaskStatus, TranscriptEntry, TranscriptHeader,
};
use crate::digest::sha256_hex;
use crate::gateway::{OracleScript, ScriptedOracle};
use crate::prompt::PromptTemplate;
use crate::session::{BrowserSession, FixtureSession, FixtureWorld};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("transcript was recorded against world {expected}, replaying against {found}")]
    WorldMismatch { expected: String, found: String },
    #[error("transcript config or template does not match its digest")]
    ConfigMismatch,
    #[error("replay diverges at step {0}")]
    DivergenceAt(u32),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

/// Re-runs a fixture transcript, feeding the recorded model outputs back
/// as the oracle, and checks every regenerated step record against the
/// original (timestamps excluded).
pub async fn replay(transcript: &SessionTranscript, world: FixtureWorld) -> Result<SessionTranscript, ReplayError> {
    let mut session = FixtureSession::with_config(world, transcript.header().config.harvest.clone());
    replay_with(transcript, &mut session, PromptTemplate::default()).await
}

pub async fn replay_with<S: BrowserSession + ?Sized>(
    transcript: &SessionTranscript,
    session: &mut S,
    template: PromptTemplate,
) -> Result<SessionTranscript, ReplayError> {
    let header = transcript.header();
    if session.world_id() != header.world_id {
        return Err(ReplayError::WorldMismatch { expected: header.world_id.clone(), found: session.world_id() });
    }
    if header.config.digest() != header.config_digest || sha256_hex(template.text()) != header.template_sha256 {
        return Err(ReplayError::ConfigMismatch);
    }
    let agent = Agent::new(header.config.clone()).with_template(template);
    let bus = EventBus::new();
    let mut state = agent.start("replay", &header.goal)?;
    let mut out = SessionTranscript::new(TranscriptHeader { started_at: Some(now()), ..header.clone() });

    if let Err(e) = session.navigate(&header.start).await {
        state.fail(FailureReason::ExecutionFailure { message: format!("navigating to {}: {e}", header.start) });
    }
    for entry in transcript.entries().iter().skip(1) {
        let diverged = |state: &super::TaskState| ReplayError::DivergenceAt(state.step_count + 1);
        match entry {
            TranscriptEntry::Header(_) => return Err(ReplayError::DivergenceAt(state.step_count + 1)),
            TranscriptEntry::Step(original) => {
                if state.status != TaskStatus::Running || original.step_index != state.step_count + 1 {
                    return Err(ReplayError::DivergenceAt(original.step_index));
                }
                let oracle = ScriptedOracle::new(OracleScript::from_responses(recorded_outputs(original)));
                let (next, record) = agent.step(state, &mut *session, &oracle, &bus).await?;
                if record.without_timestamps() != original.without_timestamps() {
                    return Err(ReplayError::DivergenceAt(original.step_index));
                }
                state = next;
                out.push(TranscriptEntry::Step(record));
            }
            TranscriptEntry::Answers(answers) => {
                if answers.questions != state.pending_questions {
                    return Err(diverged(&state));
                }
                state = supply_answers(&state, &answers.answers).map_err(|_| diverged(&state))?;
                out.push(TranscriptEntry::Answers(answers.clone()));
            }
            TranscriptEntry::Control(record) => {
                state = match control(&state, record.command) {
                    Ok(next) if next.status == record.status => next,
                    _ => return Err(diverged(&state)),
                };
                out.push(TranscriptEntry::Control(record.clone()));
            }
            TranscriptEntry::Final(original) => {
                if state.status == TaskStatus::Running && original.status == TaskStatus::Failed {
                    // the runner's step cap, not a step outcome
                    if let Some(FailureReason::MaxSteps { .. }) = &original.failure {
                        state.fail(original.failure.clone().expect("matched"));
                    }
                }
                let regenerated = FinalRecord {
                    status: state.status,
                    step_count: state.step_count,
                    failure: state.failure.clone(),
                    at: Some(now()),
                };
                if (regenerated.status, regenerated.step_count, &regenerated.failure)
                    != (original.status, original.step_count, &original.failure)
                {
                    return Err(diverged(&state));
                }
                out.push(TranscriptEntry::Final(regenerated));
            }
        }
    }
    Ok(out)
}

fn recorded_outputs(record: &StepRecord) -> Vec<String> {
    record
        .repair_attempts
        .iter()
        .map(|a| a.raw_output.clone())
        .chain(record.raw_output.clone())
        .collect()
}
