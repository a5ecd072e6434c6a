//! One PASS/FAIL line per acceptance criterion, each checked against its
//! time limit. Exits non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;
mod common;

use std::future::Future;
use std::pin::Pin;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use webpilot_core::harvest::{harvest, serialize_elements, PageSnapshot};
use webpilot_core::orchestrator::{replay, run_task, Agent, AgentConfig, EventType, TaskRunner, TaskSpec, TaskStatus};
use webpilot_core::prompt::{render_prompt, sanitize_prompt, PromptTemplate};
use webpilot_core::protocol::build_input;
use webpilot_core::session::FixtureSession;

type Outcome = Result<String, String>;
type Check = fn() -> Pin<Box<dyn Future<Output = Outcome>>>;

const GOAL: &str = "search for pizza";

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(support::golden_dir().join(name)).unwrap()
}

fn home_snapshot() -> PageSnapshot {
    PageSnapshot::load(support::fixture("google_home_snapshot.json")).unwrap()
}

async fn golden_harvest() -> Outcome {
    let wire = serialize_elements(&harvest(&home_snapshot()));
    ensure(wire == golden("google_home_elements.json"), || format!("harvest differs:\n{wire}"))?;
    Ok(format!("{} bytes identical", wire.len()))
}

async fn golden_prompt() -> Outcome {
    let input = build_input(GOAL, harvest(&home_snapshot()), "", "", vec![]).map_err(|e| e.to_string())?;
    let prompt = render_prompt(&input, &PromptTemplate::default()).map_err(|e| e.to_string())?;
    ensure(prompt == golden("first_step_prompt.txt"), || "prompt differs from golden".into())?;
    ensure(prompt.contains("No history yet.") && prompt.contains("No clarifying questions yet."), || {
        "placeholders missing".into()
    })?;
    let clean = sanitize_prompt(&prompt);
    ensure(!clean.contains('"') && !clean.contains('\''), || "quotes survive sanitizing".into())?;
    ensure(sanitize_prompt(&clean) == clean, || "sanitize is not idempotent".into())?;
    Ok(format!("{} bytes identical, sanitized clean", prompt.len()))
}

async fn equivalence() -> Outcome {
    let cases = support::sample(support::arb_equivalence_case(), 1000);
    ensure(cases.iter().all(|c| c.events.len() <= 6), || "plan longer than 6".into())?;
    let verdicts: Vec<(bool, bool)> = cases.iter().map(support::run_equivalence_case).collect();
    let disagreements = verdicts.iter().filter(|(a, e)| a != e).count();
    let accepted = verdicts.iter().filter(|(a, _)| *a).count();
    ensure(disagreements == 0, || format!("{disagreements} disagreements"))?;
    Ok(format!("1000 cases, {accepted} accepted, 0 disagreements"))
}

async fn pizza_run() -> Result<webpilot_core::orchestrator::SessionTranscript, String> {
    let mut session = FixtureSession::new(support::world());
    let model = support::oracle("pizza_oracle.json");
    run_task(GOAL, "google-home", &mut session, &model, &AgentConfig::default()).await.map_err(|e| e.to_string())
}

async fn end_to_end() -> Outcome {
    let first = pizza_run().await?;
    let second = pizza_run().await?;
    ensure(first.final_status() == Some(TaskStatus::Complete), || format!("ended {:?}", first.final_status()))?;
    let steps = first.steps().count();
    ensure(steps == 2, || format!("{steps} steps"))?;
    ensure(first.normalized_jsonl() == second.normalized_jsonl(), || "runs differ".into())?;
    let again = replay(&first, support::world()).await.map_err(|e| e.to_string())?;
    ensure(again.normalized_jsonl() == first.normalized_jsonl(), || "replay differs".into())?;
    Ok("2 steps, runs identical, replay clean".into())
}

async fn question_gate() -> Outcome {
    let (runner, handle) = TaskRunner::new(TaskSpec::new("q", GOAL, "google-home"), Agent::new(AgentConfig::default()))
        .map_err(|e| e.to_string())?;
    let model = support::PromptLog::new(support::oracle("question_oracle.json"));
    let mut session = FixtureSession::new(support::world());
    let driver = async {
        let waiting = handle.wait_for(|s| s.status != TaskStatus::Running).await;
        ensure(waiting.status == TaskStatus::AwaitingAnswers, || format!("status {}", waiting.status))?;
        let dispatched = handle.events().history().iter().filter(|e| e.kind == EventType::EventDispatched).count();
        ensure(dispatched == 0, || format!("{dispatched} events dispatched while waiting"))?;
        handle.answer(vec!["Boston".into()]).await.map_err(|e| e.to_string())?;
        Ok::<_, String>(())
    };
    let (transcript, driven) = tokio::join!(runner.run(&mut session, &model), driver);
    driven?;
    let transcript = transcript.map_err(|e| e.to_string())?;
    ensure(transcript.final_status() == Some(TaskStatus::Complete), || {
        format!("ended {:?}", transcript.final_status())
    })?;
    let prompts = model.prompts();
    ensure(prompts.get(1).is_some_and(|p| p.contains("Q: Which city? A: Boston")), || {
        "answer missing from the next prompt".into()
    })?;
    Ok(format!("0 dispatched while waiting, complete after {} steps", transcript.steps().count()))
}

async fn context_budget() -> Outcome {
    let cases = support::sample(support::arb_context_case(), 500);
    for (i, case) in cases.iter().enumerate() {
        support::check_context_case(case).map_err(|e| format!("sequence {i}: {e}"))?;
    }
    let ops: usize = cases.iter().map(|c| c.ops.len()).sum();
    Ok(format!("500 sequences, {ops} operations"))
}

async fn control_api() -> Outcome {
    let server = common::start().await;
    let id = server.create("question_oracle.json", true, 300).await;
    let stream = server.sse(&id, 0);

    let expect = |(code, body): (u16, Value), want: &str| {
        ensure(code == 200 && body["status"] == want, || format!("got {code} {body}, wanted {want}"))
    };
    expect(server.post(&format!("/tasks/{id}/resume"), json!({})).await, "Running")?;
    server.wait_status(&id, "AwaitingAnswers").await;
    expect(server.post(&format!("/tasks/{id}/answers"), json!({"answers": ["Boston"]})).await, "Running")?;
    expect(server.post(&format!("/tasks/{id}/pause"), json!({})).await, "Paused")?;
    expect(server.post(&format!("/tasks/{id}/resume"), json!({})).await, "Running")?;

    let events = tokio::time::timeout(Duration::from_secs(8), stream)
        .await
        .map_err(|_| "event stream did not end".to_string())?
        .map_err(|e| e.to_string())?;
    let known = [
        "step_started",
        "elements_harvested",
        "llm_response",
        "validation_result",
        "event_dispatched",
        "cursor_moved",
        "question_pending",
        "status_changed",
        "task_complete",
    ];
    ensure(events.iter().all(|e| known.contains(&e["type"].as_str().unwrap_or(""))), || "untyped event".into())?;
    ensure(events.len() >= 5, || format!("only {} events", events.len()))?;
    let seqs: Vec<u64> = events.iter().filter_map(|e| e["seq"].as_u64()).collect();
    ensure(seqs.len() == events.len() && seqs.windows(2).all(|w| w[0] < w[1]), || "seq not increasing".into())?;
    let last = events.last().unwrap();
    ensure(last["type"] == "task_complete" && last["payload"]["status"] == "Complete", || {
        format!("last event {last}")
    })?;
    Ok(format!("{} events, seq 1..{}", events.len(), seqs.last().unwrap()))
}

fn main() {
    let checks: [(&str, u64, Check); 7] = [
        ("golden harvest", 1_000, || Box::pin(golden_harvest())),
        ("golden prompt", 1_000, || Box::pin(golden_prompt())),
        ("validator/executor equivalence", 30_000, || Box::pin(equivalence())),
        ("end-to-end pizza run", 5_000, || Box::pin(end_to_end())),
        ("question gate", 5_000, || Box::pin(question_gate())),
        ("context budget law", 10_000, || Box::pin(context_budget())),
        ("control API lifecycle", 10_000, || Box::pin(control_api())),
    ];
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let mut failed = 0;
    for (n, (name, limit_ms, check)) in checks.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = runtime.block_on(async {
            match tokio::time::timeout(Duration::from_millis(limit_ms * 2), check()).await {
                Ok(outcome) => outcome,
                Err(_) => Err("timed out".into()),
            }
        });
        let ms = started.elapsed().as_secs_f64() * 1000.0;
        let outcome = outcome.and_then(|detail| {
            if ms < limit_ms as f64 {
                Ok(detail)
            } else {
                Err(format!("{detail}; over the {limit_ms} ms limit"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS {}. {name} ({ms:.1} ms < {limit_ms} ms): {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name} ({ms:.1} ms, limit {limit_ms} ms): {why}", n + 1);
            }
        }
    }
    println!("{} of 7 criteria pass", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
