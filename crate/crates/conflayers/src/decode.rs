//! The draft-verify generation loop.
//!
//! Each iteration drafts greedy candidate tokens with the layer-skipped
//! subnetwork until the draft's own confidence drops below a threshold,
//! verifies the block with the full model, commits the longest matching
//! prefix plus one correction token from the target distribution, and rolls
//! both caches back to the committed point. Greedy verification makes the
//! committed stream identical to vanilla greedy decoding regardless of the
//! skip set, so skip-set search only affects speed, never output.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendStepOutput, DecoderState, ModelBackend};
use crate::confidence::{build_profile, confidence_from_logits, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::metrics::RunStats;
use crate::search::{SearchController, SearchDecision};
use crate::skip::SkipSet;
use crate::TokenId;

/// Drafting and generation-loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DraftConfig {
    /// Hard cap on drafted tokens per iteration.
    pub max_draft_len: usize,
    /// Drafting stops once the draft's confidence in its next token falls
    /// below this value; the first token is always drafted.
    pub draft_stop_confidence: f64,
    /// Number of generated-token positions whose sublayer outputs feed one
    /// confidence profile.
    pub context_window: usize,
    pub max_new_tokens: usize,
    /// Epsilon for the confidence computations driven by the loop.
    pub epsilon: f64,
    /// Generation halts after this token is committed.
    pub eos_token: Option<TokenId>,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self {
            max_draft_len: 8,
            draft_stop_confidence: 0.4,
            context_window: 100,
            max_new_tokens: 512,
            epsilon: DEFAULT_EPSILON,
            eos_token: None,
        }
    }
}

impl DraftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_draft_len < 1 {
            return Err(Error::Config("max_draft_len must be >= 1".into()));
        }
        if self.context_window < 1 {
            return Err(Error::Config("context_window must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.draft_stop_confidence) {
            return Err(Error::Config(format!(
                "draft_stop_confidence must be in [0, 1], got {}",
                self.draft_stop_confidence
            )));
        }
        Ok(())
    }
}

/// Tokens proposed by one draft phase.
#[derive(Debug, Clone)]
pub struct DraftStep {
    pub drafted: Vec<TokenId>,
    /// Confidence of the draft distribution that produced each token.
    pub confidences: Vec<f64>,
    /// Sublayer outputs gathered during drafting, when collection was on.
    pub collected: Vec<BackendStepOutput>,
}

/// Result of verifying one drafted block.
#[derive(Debug, Clone)]
pub struct DraftOutcome {
    pub drafted: Vec<TokenId>,
    pub accepted: usize,
    pub correction: TokenId,
    pub draft_confidences: Vec<f64>,
}

/// One line of the iteration log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub round: usize,
    pub skip_set: Vec<usize>,
    pub drafted: usize,
    pub accepted: usize,
    pub committed: usize,
}

/// Everything one generation run produces.
#[derive(Debug, Clone)]
pub struct GenerationReport {
    /// Generated tokens (prompt excluded), cut at EOS and capped at
    /// `max_new_tokens`.
    pub tokens: Vec<TokenId>,
    pub stats: RunStats,
    pub iterations: Vec<IterationRecord>,
}

/// Greedy argmax with ties broken toward the lowest token id.
pub fn greedy_argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Evenly spaced initial skip set over the considered range; the seed the
/// search starts from.
pub fn uniform_initial_skip_set(num_layers: usize, ratio: f64) -> Result<SkipSet> {
    if num_layers < 4 {
        return Err(Error::Config(format!(
            "uniform skip set requires num_layers >= 4, got {num_layers}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "skip ratio must be in (0, 1), got {ratio}"
        )));
    }
    let m = (ratio * num_layers as f64 + 1e-9).floor() as usize;
    if m < 1 {
        return Err(Error::Config(format!(
            "ratio {ratio} selects no layers of {num_layers}"
        )));
    }
    let considered = num_layers - 2;
    if m > considered {
        return Err(Error::Config(format!(
            "ratio {ratio} selects {m} layers but only {considered} are skippable"
        )));
    }
    let mut layers: Vec<usize> = if m == 1 {
        vec![((num_layers - 1) as f64 / 2.0).round() as usize]
    } else {
        (0..m)
            .map(|t| {
                (1.0 + t as f64 * (num_layers as f64 - 3.0) / (m as f64 - 1.0)).round() as usize
            })
            .collect()
    };
    layers.sort_unstable();
    layers.dedup();
    // Rounding collisions: pad with the nearest unused considered indices.
    while layers.len() < m {
        let mut best: Option<(usize, usize)> = None; // (distance, index)
        for candidate in 1..=num_layers - 2 {
            if layers.contains(&candidate) {
                continue;
            }
            let dist = layers
                .iter()
                .map(|&l| l.abs_diff(candidate))
                .min()
                .unwrap_or(0);
            if best.is_none() || (dist, candidate) < best.unwrap() {
                best = Some((dist, candidate));
            }
        }
        layers.push(best.expect("unused considered index exists").1);
        layers.sort_unstable();
    }
    SkipSet::new(layers, num_layers)
}

/// One in-flight generation: backend state, the committed token stream, and
/// the pending next-token predictions of both sides.
pub struct Session<'a> {
    backend: &'a dyn ModelBackend,
    state: DecoderState,
    tokens: Vec<TokenId>,
    prompt_len: usize,
    pending_target: Vec<f32>,
    pending_draft: Option<Vec<f32>>,
    draft_skip: Option<SkipSet>,
    pub stats: RunStats,
}

impl<'a> Session<'a> {
    /// Prefills the target cache on the prompt. The draft cache fills
    /// lazily at the first draft, once the skip set is known.
    pub fn new(backend: &'a dyn ModelBackend, prompt: &[TokenId]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        let mut state = backend.new_state();
        let outs = backend.forward_target(&mut state, prompt, false)?;
        let pending_target = outs
            .last()
            .expect("non-empty prompt yields outputs")
            .final_logits
            .clone();
        state.truncate(prompt.len())?;
        Ok(Self {
            backend,
            state,
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            pending_target,
            pending_draft: None,
            draft_skip: None,
            stats: RunStats::default(),
        })
    }

    pub fn committed_tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn state(&self) -> &DecoderState {
        &self.state
    }

    /// Brings the draft cache up to the committed point under `skip_set`,
    /// rebuilding from scratch if the set changed since the cache was
    /// built. Leaves a fresh pending draft prediction behind.
    fn ensure_draft(&mut self, skip_set: &SkipSet) -> Result<()> {
        if self.draft_skip.as_ref() != Some(skip_set) {
            self.state.reset_draft();
            self.pending_draft = None;
            self.draft_skip = Some(skip_set.clone());
        }
        while self.state.draft_len() < self.state.committed_length() {
            let token = self.tokens[self.state.draft_len()];
            let out = self.backend.forward_draft(&mut self.state, token, skip_set, false)?;
            self.stats.layers_executed_draft += out.layers_executed;
            self.pending_draft = Some(out.final_logits);
        }
        if self.pending_draft.is_none() {
            return Err(Error::State(
                "draft cache has no pending prediction; session out of sync".into(),
            ));
        }
        Ok(())
    }

    /// Greedily drafts tokens with the skip-aware subnetwork. Drafting
    /// continues while the draft's confidence in the next token stays at or
    /// above the stop threshold; the first token is always taken and
    /// `max_draft_len` caps the block.
    pub fn draft_step(
        &mut self,
        skip_set: &SkipSet,
        cfg: &DraftConfig,
        collect_sublayer: bool,
    ) -> Result<DraftStep> {
        cfg.validate()?;
        self.ensure_draft(skip_set)?;
        let mut drafted = Vec::new();
        let mut confidences = Vec::new();
        let mut collected = Vec::new();
        loop {
            let logits = self.pending_draft.as_ref().expect("ensured above");
            let token = greedy_argmax(logits);
            let confidence = confidence_from_logits(logits, cfg.epsilon)?;
            if !drafted.is_empty() && confidence < cfg.draft_stop_confidence {
                break;
            }
            drafted.push(token);
            confidences.push(confidence);
            if drafted.len() >= cfg.max_draft_len {
                break;
            }
            let out = self
                .backend
                .forward_draft(&mut self.state, token, skip_set, collect_sublayer)?;
            self.stats.layers_executed_draft += out.layers_executed;
            self.stats.sublayer_projections += 2 * out.sublayer_logits.len();
            self.pending_draft = Some(out.final_logits.clone());
            if collect_sublayer {
                collected.push(out);
            }
        }
        Ok(DraftStep {
            drafted,
            confidences,
            collected,
        })
    }

    /// Verifies a drafted block with the full model: commits the longest
    /// prefix matching the target's greedy path plus one correction token,
    /// then rolls both caches back to the committed point.
    ///
    /// Returns the outcome and, when collection is on, the step outputs of
    /// exactly the committed positions (accepted prefix + correction).
    pub fn verify_step(
        &mut self,
        draft: &DraftStep,
        collect_sublayer: bool,
    ) -> Result<(DraftOutcome, Vec<BackendStepOutput>)> {
        if draft.drafted.is_empty() {
            return Err(Error::InvalidInput("verify_step on an empty draft".into()));
        }
        let committed_before = self.state.committed_length();
        let num_layers = self.backend.num_layers();

        // One verification pass per iteration: the drafted block and the
        // correction position below are what a single (m+1)-wide target
        // pass covers, so the cost model charges num_layers once.
        let outs = self
            .backend
            .forward_target(&mut self.state, &draft.drafted, collect_sublayer)?;
        self.stats.layers_executed_verify += num_layers;

        let mut accepted = 0usize;
        for (j, &token) in draft.drafted.iter().enumerate() {
            let prediction = if j == 0 {
                &self.pending_target
            } else {
                &outs[j - 1].final_logits
            };
            if greedy_argmax(prediction) == token {
                accepted += 1;
            } else {
                break;
            }
        }
        let correction = if accepted == 0 {
            greedy_argmax(&self.pending_target)
        } else {
            greedy_argmax(&outs[accepted - 1].final_logits)
        };

        // Drop rejected positions, process the correction token so the
        // target cache covers it, then commit.
        self.state.truncate(committed_before + accepted)?;
        let correction_out = self
            .backend
            .forward_target(&mut self.state, &[correction], collect_sublayer)?;
        self.state.truncate(committed_before + accepted + 1)?;

        self.tokens.extend_from_slice(&draft.drafted[..accepted]);
        self.tokens.push(correction);
        self.pending_target = correction_out[0].final_logits.clone();
        self.pending_draft = None;

        let mut committed_steps = Vec::new();
        if collect_sublayer {
            // Projections were computed for every verified position, so all
            // of them are charged; only the committed ones feed the window.
            for step in outs.iter().chain(correction_out.iter()) {
                self.stats.sublayer_projections += 2 * step.sublayer_logits.len();
            }
            committed_steps.extend(outs.into_iter().take(accepted));
            committed_steps.extend(correction_out);
        }

        self.stats.total_drafted += draft.drafted.len();
        self.stats.total_accepted += accepted;
        self.stats.total_committed += accepted + 1;
        self.stats.iterations += 1;

        Ok((
            DraftOutcome {
                drafted: draft.drafted.clone(),
                accepted,
                correction,
                draft_confidences: draft.confidences.clone(),
            },
            committed_steps,
        ))
    }
}

/// Runs the full loop for one prompt under `controller`'s skip-set policy.
/// The controller carries search state across prompts; pass a frozen
/// controller for fixed-set decoding.
pub fn generate(
    backend: &dyn ModelBackend,
    controller: &mut SearchController,
    prompt: &[TokenId],
    cfg: &DraftConfig,
) -> Result<GenerationReport> {
    cfg.validate()?;
    let mut session = Session::new(backend, prompt)?;
    let num_layers = backend.num_layers();
    let mut records = Vec::new();
    let mut window: Vec<BackendStepOutput> = Vec::new();
    let mut iter = 0usize;
    let mut eos_seen = false;

    while session.generated().len() < cfg.max_new_tokens && !eos_seen {
        // Leave room for the deepest draft plus the correction token.
        if session.committed_tokens().len() + cfg.max_draft_len + 1 > backend.max_seq() {
            break;
        }
        let skip_set = controller.active_set().clone();
        match session.stats.active_skip_sets.last() {
            Some((_, last)) if *last == skip_set => {}
            _ => session.stats.active_skip_sets.push((iter, skip_set.clone())),
        }

        let collect = controller.collecting() && window.len() < cfg.context_window;
        let draft = session.draft_step(&skip_set, cfg, false)?;
        let (outcome, committed_steps) = session.verify_step(&draft, collect)?;
        if collect {
            window.extend(committed_steps);
            if window.len() > cfg.context_window {
                let excess = window.len() - cfg.context_window;
                window.drain(..excess);
            }
        }

        records.push(IterationRecord {
            iter,
            round: controller.round(),
            skip_set: skip_set.layers().to_vec(),
            drafted: outcome.drafted.len(),
            accepted: outcome.accepted,
            committed: outcome.accepted + 1,
        });
        iter += 1;

        if let Some(eos) = cfg.eos_token {
            let committed = &session.committed_tokens()
                [session.committed_tokens().len() - (outcome.accepted + 1)..];
            eos_seen = committed.contains(&eos);
        }

        if controller.collecting() {
            if controller.needs_profile_now() && !window.is_empty() {
                controller.supply_profile(build_profile(&window, num_layers, cfg.epsilon)?);
            }
            let decision = controller.after_iteration(outcome.accepted)?;
            if decision == SearchDecision::TriggerSearch {
                // The next interval refills the window for the next search.
                window.clear();
            }
        }
    }

    session.stats.rounds = controller.round();
    let mut tokens = Vec::new();
    for &t in session.generated() {
        tokens.push(t);
        if cfg.eos_token == Some(t) || tokens.len() >= cfg.max_new_tokens {
            break;
        }
    }
    Ok(GenerationReport {
        tokens,
        stats: session.stats,
        iterations: records,
    })
}

/// Plain greedy decoding with the full model; the reference the engine's
/// output must match token for token.
pub fn vanilla_generate(
    backend: &dyn ModelBackend,
    prompt: &[TokenId],
    max_new_tokens: usize,
    eos_token: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let mut state = backend.new_state();
    let outs = backend.forward_target(&mut state, prompt, false)?;
    let mut pending = outs.last().expect("non-empty prompt").final_logits.clone();
    let mut tokens = Vec::new();
    while tokens.len() < max_new_tokens {
        let token = greedy_argmax(&pending);
        tokens.push(token);
        if eos_token == Some(token) || tokens.len() >= max_new_tokens {
            break;
        }
        if state.target_len() >= backend.max_seq() {
            break;
        }
        let outs = backend.forward_target(&mut state, &[token], false)?;
        pending = outs[0].final_logits.clone();
    }
    Ok(tokens)
}
