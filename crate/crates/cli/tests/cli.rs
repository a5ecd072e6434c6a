use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

fn core(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core").join(path)
}

fn agent(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_agent"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn fixture_run_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("run.jsonl");
    let world = core("fixtures/google_world.json");
    let out = agent(
        &[
            "run",
            "--goal",
            "search for pizza",
            "--fixture",
            world.to_str().unwrap(),
            "--oracle",
            core("fixtures/pizza_oracle.json").to_str().unwrap(),
            "--transcript",
            transcript.to_str().unwrap(),
        ],
        "",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let last: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(last["status"], "Complete");
    assert_eq!(last["step_count"], 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"type\":\"task_complete\""));

    let out = agent(&["replay", transcript.to_str().unwrap(), "--fixture", world.to_str().unwrap()], "");
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("no divergence: 2 steps"));
}

#[test]
fn questions_are_answered_from_stdin() {
    let args = [
        "run",
        "--goal",
        "search for pizza",
        "--fixture",
        core("fixtures/google_world.json").to_str().unwrap().to_string().leak(),
        "--oracle",
        core("fixtures/question_oracle.json").to_str().unwrap().to_string().leak(),
    ];
    let out = agent(&args, "Boston\n");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Which city?"));

    let out = agent(&args, "");
    assert!(!out.status.success());
    assert!(stdout(&out).contains("\"status\":\"Aborted\""));
}

#[test]
fn harvest_prints_the_element_map() {
    let out = agent(&["harvest", "--fixture", core("fixtures/google_home_snapshot.json").to_str().unwrap()], "");
    assert!(out.status.success());
    let golden = std::fs::read_to_string(core("tests/golden/google_home_elements.json")).unwrap();
    assert_eq!(stdout(&out).trim_end(), golden.trim_end());
}

#[test]
fn validate_reports_rule_violations() {
    let dir = tempfile::tempdir().unwrap();
    let elements = core("tests/golden/google_home_elements.json");
    let good = dir.path().join("good.json");
    std::fs::write(&good, r#"{"event_list": [{"type": "cursor_move", "item": 9}, {"type": "click", "item": 9}], "next_step": "", "is_complete": false, "questions": [], "action": "a"}"#).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"event_list": [{"type": "click", "item": 9}], "next_step": "", "is_complete": false, "questions": [], "action": "a"}"#).unwrap();

    let out = agent(&["validate", "--output", good.to_str().unwrap(), "--elements", elements.to_str().unwrap()], "");
    assert!(out.status.success(), "{}", stdout(&out));
    let out = agent(&["validate", "--output", bad.to_str().unwrap(), "--elements", elements.to_str().unwrap()], "");
    assert!(!out.status.success());
    assert!(stdout(&out).contains("\"R2\""));
    let out = agent(
        &["validate", "--output", bad.to_str().unwrap(), "--elements", elements.to_str().unwrap(), "--cursor-item", "9"],
        "",
    );
    assert!(out.status.success(), "{}", stdout(&out));
}
