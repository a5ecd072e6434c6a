mod support;

use webpilot_core::harvest::{harvest, parse_elements, serialize_elements, PageSnapshot};
use webpilot_core::prompt::{render_prompt, sanitize_prompt, PromptTemplate};
use webpilot_core::protocol::build_input;

fn golden(name: &str) -> String {
    std::fs::read_to_string(support::golden_dir().join(name)).unwrap()
}

#[test]
fn google_home_harvest_matches_golden_elements() {
    let snapshot = PageSnapshot::load(support::fixture("google_home_snapshot.json")).unwrap();
    let elements = harvest(&snapshot);
    assert_eq!(elements.len(), 11);
    assert_eq!(serialize_elements(&elements), golden("google_home_elements.json"));
}

#[test]
fn golden_elements_parse_back_to_the_harvest() {
    let snapshot = PageSnapshot::load(support::fixture("google_home_snapshot.json")).unwrap();
    let parsed = parse_elements(&golden("google_home_elements.json")).unwrap();
    assert_eq!(parsed, harvest(&snapshot));
}

#[test]
fn first_step_prompt_matches_golden() {
    let snapshot = PageSnapshot::load(support::fixture("google_home_snapshot.json")).unwrap();
    let input = build_input("search for pizza", harvest(&snapshot), "", "", vec![]).unwrap();
    let prompt = render_prompt(&input, &PromptTemplate::default()).unwrap();
    assert_eq!(prompt, golden("first_step_prompt.txt"));
    assert!(prompt.contains("    No history yet.\n"));
    assert!(prompt.contains("    No clarifying questions yet.\n"));
}

#[test]
fn sanitized_golden_prompt_has_no_quotes() {
    let clean = sanitize_prompt(&golden("first_step_prompt.txt"));
    assert!(!clean.contains('"') && !clean.contains('\''));
    assert_eq!(sanitize_prompt(&clean), clean);
    assert!(clean.contains("accesible_name: About"));
}
