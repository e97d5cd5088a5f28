//! Experiment execution and output emission.
//!
//! Every run writes the same file set into the output directory:
//! `iterations.jsonl`, `search.jsonl`, `metrics.json`, `outputs.jsonl`,
//! `best_set.json`, and (when a search ran) `diagnostics.jsonl`. All files
//! are deterministic functions of the config and seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use conflayers::backend::ModelBackend;
use conflayers::decode::{
    generate, uniform_initial_skip_set, vanilla_generate, IterationRecord,
};
use conflayers::metrics::{rouge2, MetricsReport, RunStats};
use conflayers::search::SearchController;
use conflayers::{SkipSet, TokenId};

use crate::config::{load_skip_set, ExperimentConfig, Mode};
use crate::log_info;

pub struct RunArtifacts {
    pub report: MetricsReport,
}

/// Runs the configured experiment over the whole corpus and writes the
/// output files. A single controller persists across prompts, so a
/// searching run keeps refining (or reusing) its skip set from prompt to
/// prompt.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    backend: &dyn ModelBackend,
    prompts: &[Vec<TokenId>],
    out_dir: &Path,
) -> Result<RunArtifacts> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let num_layers = backend.num_layers();

    if cfg.mode == Mode::Vanilla {
        return run_vanilla(cfg, backend, prompts, out_dir);
    }

    let mut controller = match cfg.mode {
        Mode::ConfLayers => SearchController::searching(
            uniform_initial_skip_set(num_layers, cfg.uniform_skip_ratio)?,
            cfg.search.clone(),
            cfg.filter.clone(),
        )?,
        Mode::UniformBaseline => SearchController::frozen(uniform_initial_skip_set(
            num_layers,
            cfg.uniform_skip_ratio,
        )?),
        Mode::FrozenSet => {
            let path = cfg
                .skip_set_file
                .as_ref()
                .expect("frozen-set mode validated at load");
            SearchController::frozen(load_skip_set(path, num_layers)?)
        }
        Mode::Vanilla => unreachable!(),
    };

    let mut stats = RunStats::default();
    let mut all_records: Vec<IterationRecord> = Vec::new();
    let mut outputs = Vec::with_capacity(prompts.len());
    let mut rouge_sum = 0.0;
    let mut rouge_count = 0usize;

    for (i, prompt) in prompts.iter().enumerate() {
        let report = generate(backend, &mut controller, prompt, &cfg.draft)?;
        let offset = stats.iterations;
        stats.absorb(&report.stats);
        for mut record in report.iterations {
            record.iter += offset;
            all_records.push(record);
        }
        if cfg.compute_reference {
            let reference = vanilla_generate(
                backend,
                prompt,
                cfg.draft.max_new_tokens,
                cfg.draft.eos_token,
            )?;
            rouge_sum += rouge2(&report.tokens, &reference);
            rouge_count += 1;
        }
        log_info(&format!(
            "prompt {}/{}: {} tokens, {} iterations",
            i + 1,
            prompts.len(),
            report.tokens.len(),
            stats.iterations - offset
        ));
        outputs.push(report.tokens);
    }
    stats.rounds = controller.round();

    let rouge = if rouge_count > 0 {
        Some(rouge_sum / rouge_count as f64)
    } else {
        None
    };
    let report = MetricsReport::from_stats(&stats, num_layers, cfg.projection_overhead, rouge);

    write_jsonl(
        &out_dir.join("iterations.jsonl"),
        all_records.iter().map(|r| serde_json::to_string(r).expect("record serializes")),
    )?;
    write_jsonl(
        &out_dir.join("search.jsonl"),
        controller
            .search_log()
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes")),
    )?;
    if !controller.diagnostics().is_empty() {
        let mut lines = Vec::new();
        for round in controller.diagnostics() {
            for layer in &round.layers {
                let mut value = serde_json::to_value(layer).expect("diagnostic serializes");
                value
                    .as_object_mut()
                    .expect("diagnostic is an object")
                    .insert("round".into(), json!(round.round));
                lines.push(value.to_string());
            }
        }
        write_jsonl(&out_dir.join("diagnostics.jsonl"), lines.into_iter())?;
    }
    write_outputs(&out_dir.join("outputs.jsonl"), &outputs)?;
    write_skip_set(&out_dir.join("best_set.json"), controller.active_set())?;
    write_metrics(&out_dir.join("metrics.json"), &report)?;

    Ok(RunArtifacts { report })
}

fn run_vanilla(
    cfg: &ExperimentConfig,
    backend: &dyn ModelBackend,
    prompts: &[Vec<TokenId>],
    out_dir: &Path,
) -> Result<RunArtifacts> {
    let mut outputs = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        outputs.push(vanilla_generate(
            backend,
            prompt,
            cfg.draft.max_new_tokens,
            cfg.draft.eos_token,
        )?);
    }
    let report = MetricsReport {
        alpha: None,
        beta_mean: None,
        mean_accepted: None,
        speedup_est: None,
        rouge2: None,
        iterations: 0,
        rounds: 0,
    };
    write_jsonl(&out_dir.join("iterations.jsonl"), std::iter::empty::<String>())?;
    write_jsonl(&out_dir.join("search.jsonl"), std::iter::empty::<String>())?;
    write_outputs(&out_dir.join("outputs.jsonl"), &outputs)?;
    write_metrics(&out_dir.join("metrics.json"), &report)?;
    Ok(RunArtifacts { report })
}

fn write_jsonl<I: Iterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_outputs(path: &Path, outputs: &[Vec<TokenId>]) -> Result<()> {
    write_jsonl(
        path,
        outputs
            .iter()
            .map(|tokens| serde_json::to_string(tokens).expect("tokens serialize")),
    )
}

fn write_skip_set(path: &Path, set: &SkipSet) -> Result<()> {
    let value = json!({ "layers": set.layers() });
    fs::write(path, format!("{value}\n")).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let line = serde_json::to_string(report).expect("report serializes");
    fs::write(path, format!("{line}\n")).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
