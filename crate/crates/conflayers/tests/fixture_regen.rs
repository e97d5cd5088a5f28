//! Regenerates the committed test fixtures from seeded reference runs.
//!
//! Run manually after intentional behavior changes:
//! `cargo test -p conflayers --test fixture_regen -- --ignored`
//! then review the diff under `tests/fixtures/`.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use serde_json::json;

use conflayers::backend::{write_trace, BackendStepOutput, ModelBackend, ToyModel, ToyModelConfig};
use conflayers::confidence::build_profile;
use conflayers::decode::{generate, greedy_argmax, uniform_initial_skip_set, Session, DraftConfig};
use conflayers::layer_filter::{select_skip_layers, FilterConfig};
use conflayers::search::{SearchConfig, SearchController};
use conflayers::SkipSet;

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

const TRACE_POSITIONS: usize = 100;
const PROMPT: [u32; 4] = [1, 2, 3, 4];

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Greedy rollout with sublayer collection on every position.
fn record_reference_steps(model: &ToyModel, positions: usize) -> Vec<BackendStepOutput> {
    let mut state = model.new_state();
    let mut steps = model.forward_target(&mut state, &PROMPT, true).unwrap();
    while steps.len() < positions {
        let next = greedy_argmax(&steps.last().unwrap().final_logits);
        let out = model.forward_target(&mut state, &[next], true).unwrap();
        steps.extend(out);
    }
    steps
}

#[test]
#[ignore = "writes committed fixtures; run deliberately"]
fn regenerate_fixtures() {
    let dir = fixtures_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let model = fixture_model();
    let num_layers = model.num_layers();

    // Trace fixture.
    let steps = record_reference_steps(&model, TRACE_POSITIONS);
    let mut writer = BufWriter::new(File::create(dir.join("trace_small.jsonl")).unwrap());
    write_trace(&mut writer, model.vocab_size(), num_layers, &steps).unwrap();
    drop(writer);

    // Confidence profile over a 16-token window of generated positions.
    let profile = build_profile(&steps[PROMPT.len()..PROMPT.len() + 16], num_layers, 1e-10).unwrap();
    std::fs::write(
        dir.join("profile_small.json"),
        format!("{}\n", serde_json::to_string_pretty(&profile).unwrap()),
    )
    .unwrap();

    // Golden values locked against the same seeded model.
    let skip25 = SkipSet::new(vec![2, 5], num_layers).unwrap();

    let mut state = model.new_state();
    for &t in &PROMPT[..PROMPT.len() - 1] {
        model.forward_draft(&mut state, t, &skip25, false).unwrap();
    }
    let draft_logits = model
        .forward_draft(&mut state, PROMPT[3], &skip25, false)
        .unwrap()
        .final_logits;

    let mut state = model.new_state();
    let target_block = model.forward_target(&mut state, &PROMPT, false).unwrap();
    let target_last = target_block.last().unwrap().final_logits.clone();

    let eight_tokens: Vec<u32> = vec![1, 2, 3, 4, 5, 6, 7, 8];
    let mut state = model.new_state();
    let eight_block = model.forward_target(&mut state, &eight_tokens, false).unwrap();
    let eight_last = eight_block.last().unwrap().final_logits.clone();

    let draft_cfg = DraftConfig {
        max_draft_len: 4,
        draft_stop_confidence: 0.0,
        context_window: 12,
        max_new_tokens: 40,
        ..DraftConfig::default()
    };
    let mut session = Session::new(&model, &PROMPT).unwrap();
    let draft_step = session.draft_step(&skip25, &draft_cfg, false).unwrap();
    let (outcome, _) = session.verify_step(&draft_step, false).unwrap();

    let no_bounds = FilterConfig {
        enforce_bounds: false,
        ..FilterConfig::default()
    };
    let filter_no_bounds = select_skip_layers(&profile, &no_bounds).unwrap();
    let filter_bounds = select_skip_layers(&profile, &FilterConfig::default()).unwrap();

    // Full searching run.
    let mut controller = SearchController::searching(
        uniform_initial_skip_set(num_layers, 0.5).unwrap(),
        SearchConfig {
            opt_interval: 5,
            max_rounds: 3,
            score_goal: 100.0,
        },
        FilterConfig::default(),
    )
    .unwrap();
    let run = generate(&model, &mut controller, &PROMPT, &draft_cfg).unwrap();

    let golden = json!({
        "model": {
            "vocab_size": 12,
            "num_layers": 12,
            "hidden_dim": 32,
            "num_heads": 4,
            "max_seq": 160,
            "seed": 42
        },
        "prompt": PROMPT,
        "backend": {
            "draft_skip_2_5_final_logits": draft_logits,
            "target_prompt_last_logits": target_last,
            "target_8tok_last_logits": eight_last
        },
        "draft": {
            "skip": [2, 5],
            "max_draft_len": 4,
            "drafted": draft_step.drafted,
            "confidences": draft_step.confidences
        },
        "verify": {
            "accepted": outcome.accepted,
            "correction": outcome.correction
        },
        "filter": {
            "lambda": 0.3,
            "no_bounds": filter_no_bounds.layers(),
            "bounds": filter_bounds.layers()
        },
        "generate": {
            "tokens": run.tokens,
            "iterations": run.iterations,
            "search_log": controller.search_log()
        }
    });
    std::fs::write(
        dir.join("golden_small.json"),
        format!("{}\n", serde_json::to_string_pretty(&golden).unwrap()),
    )
    .unwrap();

    println!("fixtures written to {}", dir.display());
    println!("draft: {:?} verify: ({}, {})", draft_step.drafted, outcome.accepted, outcome.correction);
    println!("filter no_bounds: {:?}", filter_no_bounds.layers());
    println!("filter bounds: {:?}", filter_bounds.layers());
    println!("generate tokens: {:?}", run.tokens);
}
