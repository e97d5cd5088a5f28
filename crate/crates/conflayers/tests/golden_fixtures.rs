//! Locks engine behavior against the committed seeded-run fixtures.

use std::path::PathBuf;

use serde_json::Value;

use conflayers::backend::{ModelBackend, ToyModel, ToyModelConfig, TraceBackend};
use conflayers::confidence::ConfidenceProfile;
use conflayers::decode::{generate, uniform_initial_skip_set, DraftConfig, Session};
use conflayers::layer_filter::{select_skip_layers, FilterConfig};
use conflayers::search::{SearchConfig, SearchController};
use conflayers::SkipSet;

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture_model() -> ToyModel {
    ToyModel::new(ToyModelConfig {
        vocab_size: 12,
        num_layers: 12,
        hidden_dim: 32,
        num_heads: 4,
        max_seq: 160,
        seed: 42,
    })
    .unwrap()
}

fn golden() -> Value {
    let text = std::fs::read_to_string(fixtures_dir().join("golden_small.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn prompt() -> Vec<u32> {
    vec![1, 2, 3, 4]
}

fn as_f32_vec(value: &Value) -> Vec<f32> {
    value
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap() as f32)
        .collect()
}

fn assert_logits_close(live: &[f32], frozen: &[f32]) {
    assert_eq!(live.len(), frozen.len());
    for (a, b) in live.iter().zip(frozen.iter()) {
        assert!((a - b).abs() <= 1e-6, "logit drifted: {a} vs {b}");
    }
}

#[test]
fn trace_replay_matches_recorded_line() {
    let trace = TraceBackend::load(&fixtures_dir().join("trace_small.jsonl")).unwrap();
    // Read position 5 straight from the file.
    let text = std::fs::read_to_string(fixtures_dir().join("trace_small.jsonl")).unwrap();
    let line: Value = serde_json::from_str(text.lines().nth(6).unwrap()).unwrap();
    assert_eq!(line["pos"].as_u64(), Some(5));
    let expected = as_f32_vec(&line["final"]);

    let mut state = trace.new_state();
    let outs = trace.forward_target(&mut state, &[0; 6], false).unwrap();
    assert_eq!(outs[5].final_logits, expected);
}

#[test]
fn profile_fixture_is_valid_and_covers_considered_layers() {
    let text = std::fs::read_to_string(fixtures_dir().join("profile_small.json")).unwrap();
    let profile: ConfidenceProfile = serde_json::from_str(&text).unwrap();
    profile.validate().unwrap();
    assert_eq!(profile.num_layers(), 12);
    assert_eq!(profile.len(), 10);
}

#[test]
fn profile_recomputed_from_trace_matches_fixture() {
    let trace = TraceBackend::load(&fixtures_dir().join("trace_small.jsonl")).unwrap();
    let mut state = trace.new_state();
    let outs = trace.forward_target(&mut state, &[0; 20], true).unwrap();
    let recomputed =
        conflayers::confidence::build_profile(&outs[4..20], trace.num_layers(), 1e-10).unwrap();

    let text = std::fs::read_to_string(fixtures_dir().join("profile_small.json")).unwrap();
    let frozen: ConfidenceProfile = serde_json::from_str(&text).unwrap();
    assert_eq!(recomputed, frozen);
}

#[test]
fn plateau_count_on_fixture_matches_direct_count() {
    let text = std::fs::read_to_string(fixtures_dir().join("profile_small.json")).unwrap();
    let profile: ConfidenceProfile = serde_json::from_str(&text).unwrap();
    let values = profile.values();
    let mut count = 0usize;
    while count < values.len() && (values[count] - values[0]).abs() < 1e-4 {
        count += 1;
    }
    assert_eq!(
        conflayers::layer_filter::derive_w_max(&profile),
        count.max(1)
    );
}

#[test]
fn local_stats_on_fixture_matches_direct_computation() {
    let text = std::fs::read_to_string(fixtures_dir().join("profile_small.json")).unwrap();
    let profile: ConfidenceProfile = serde_json::from_str(&text).unwrap();
    let norm = conflayers::layer_filter::normalize(&profile, 1e-10);
    let (mean, sd) = conflayers::layer_filter::local_stats(&norm, 5, 4).unwrap();

    let neighbors: Vec<f64> = (1..=9usize)
        .filter(|&j| j != 5)
        .map(|j| norm.values()[j])
        .collect();
    let want_mean = neighbors.iter().sum::<f64>() / neighbors.len() as f64;
    let want_var = neighbors
        .iter()
        .map(|&x| (x - want_mean) * (x - want_mean))
        .sum::<f64>()
        / neighbors.len() as f64;
    assert_eq!(mean, want_mean);
    assert_eq!(sd, want_var.sqrt());
}

#[test]
fn backend_logits_match_golden() {
    let model = fixture_model();
    let golden = golden();
    let skip = SkipSet::new(vec![2, 5], 12).unwrap();

    let mut state = model.new_state();
    let mut last = None;
    for &t in &prompt() {
        last = Some(model.forward_draft(&mut state, t, &skip, false).unwrap());
    }
    assert_logits_close(
        &last.unwrap().final_logits,
        &as_f32_vec(&golden["backend"]["draft_skip_2_5_final_logits"]),
    );

    let mut state = model.new_state();
    let outs = model.forward_target(&mut state, &prompt(), false).unwrap();
    assert_logits_close(
        &outs.last().unwrap().final_logits,
        &as_f32_vec(&golden["backend"]["target_prompt_last_logits"]),
    );

    let mut state = model.new_state();
    let outs = model
        .forward_target(&mut state, &[1, 2, 3, 4, 5, 6, 7, 8], false)
        .unwrap();
    assert_logits_close(
        &outs.last().unwrap().final_logits,
        &as_f32_vec(&golden["backend"]["target_8tok_last_logits"]),
    );
}

fn fixture_draft_cfg() -> DraftConfig {
    DraftConfig {
        max_draft_len: 4,
        draft_stop_confidence: 0.0,
        context_window: 12,
        max_new_tokens: 40,
        ..DraftConfig::default()
    }
}

#[test]
fn draft_and_verify_match_golden() {
    let model = fixture_model();
    let golden = golden();
    let skip = SkipSet::new(vec![2, 5], 12).unwrap();
    let mut session = Session::new(&model, &prompt()).unwrap();
    let step = session.draft_step(&skip, &fixture_draft_cfg(), false).unwrap();
    let drafted: Vec<u64> = step.drafted.iter().map(|&t| t as u64).collect();
    let want: Vec<u64> = golden["draft"]["drafted"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(drafted, want);

    let (outcome, _) = session.verify_step(&step, false).unwrap();
    assert_eq!(outcome.accepted as u64, golden["verify"]["accepted"].as_u64().unwrap());
    assert_eq!(
        outcome.correction as u64,
        golden["verify"]["correction"].as_u64().unwrap()
    );
}

#[test]
fn filter_outputs_match_golden_fixture_profile() {
    let text = std::fs::read_to_string(fixtures_dir().join("profile_small.json")).unwrap();
    let profile: ConfidenceProfile = serde_json::from_str(&text).unwrap();
    let golden = golden();

    let no_bounds = select_skip_layers(
        &profile,
        &FilterConfig {
            enforce_bounds: false,
            ..FilterConfig::default()
        },
    )
    .unwrap();
    let bounded = select_skip_layers(&profile, &FilterConfig::default()).unwrap();

    let want_no_bounds: Vec<usize> = golden["filter"]["no_bounds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    let want_bounds: Vec<usize> = golden["filter"]["bounds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    assert_eq!(no_bounds.layers(), want_no_bounds.as_slice());
    assert_eq!(bounded.layers(), want_bounds.as_slice());
}

#[test]
fn full_searching_run_matches_golden() {
    let model = fixture_model();
    let golden = golden();
    let mut controller = SearchController::searching(
        uniform_initial_skip_set(12, 0.5).unwrap(),
        SearchConfig {
            opt_interval: 5,
            max_rounds: 3,
            score_goal: 100.0,
        },
        FilterConfig::default(),
    )
    .unwrap();
    let run = generate(&model, &mut controller, &prompt(), &fixture_draft_cfg()).unwrap();

    let tokens: Vec<u64> = run.tokens.iter().map(|&t| t as u64).collect();
    let want: Vec<u64> = golden["generate"]["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(tokens, want, "golden output drifted");

    let live_iterations = serde_json::to_value(&run.iterations).unwrap();
    assert_eq!(live_iterations, golden["generate"]["iterations"]);

    let live_log = serde_json::to_value(controller.search_log()).unwrap();
    assert_eq!(live_log, golden["generate"]["search_log"]);
}
