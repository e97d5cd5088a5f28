//! Run metrics: acceptance rate, skip rate, mean accepted tokens, a
//! layer-forward cost-model speedup, and token-level Rouge-2.
//!
//! The speedup is a cost-model proxy, not wall clock: it counts layer
//! forwards, with a verification block charged as one full-model pass and
//! sublayer LM-head projections charged a configurable fraction of a layer
//! forward each.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skip::SkipSet;
use crate::TokenId;

/// Default cost of one sublayer LM-head projection, in layer-forwards.
pub const DEFAULT_PROJECTION_OVERHEAD: f64 = 0.1;

/// Cumulative counters for one run (one prompt or a whole corpus).
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub total_drafted: usize,
    pub total_accepted: usize,
    pub total_committed: usize,
    pub iterations: usize,
    /// Layer forwards spent in draft passes, including cache rebuilds.
    pub layers_executed_draft: usize,
    /// Layer forwards spent in verification passes (one full-model cost per
    /// block pass plus the correction-token pass).
    pub layers_executed_verify: usize,
    /// Sublayer LM-head projections performed for confidence collection.
    pub sublayer_projections: usize,
    /// Skip-set history as (iteration, set) pairs, recorded on change.
    pub active_skip_sets: Vec<(usize, SkipSet)>,
    /// Search rounds completed by the controller.
    pub rounds: usize,
}

impl RunStats {
    /// Folds another run's counters into this one; the skip-set history is
    /// appended with iteration indices shifted past this run's.
    pub fn absorb(&mut self, other: &RunStats) {
        let offset = self.iterations;
        self.total_drafted += other.total_drafted;
        self.total_accepted += other.total_accepted;
        self.total_committed += other.total_committed;
        self.iterations += other.iterations;
        self.layers_executed_draft += other.layers_executed_draft;
        self.layers_executed_verify += other.layers_executed_verify;
        self.sublayer_projections += other.sublayer_projections;
        for (iter, set) in &other.active_skip_sets {
            self.active_skip_sets.push((iter + offset, set.clone()));
        }
        self.rounds = self.rounds.max(other.rounds);
    }

    /// The skip set active at the end of the run, if any was recorded.
    pub fn final_skip_set(&self) -> Option<&SkipSet> {
        self.active_skip_sets.last().map(|(_, s)| s)
    }
}

/// Accepted drafted tokens over total drafted tokens.
pub fn acceptance_rate(stats: &RunStats) -> Result<f64> {
    if stats.total_drafted == 0 {
        return Err(Error::UndefinedMetric(
            "acceptance rate with zero drafted tokens".into(),
        ));
    }
    Ok(stats.total_accepted as f64 / stats.total_drafted as f64)
}

/// Fraction of all model layers in the skip set.
pub fn skip_rate(set: &SkipSet, num_layers: usize) -> f64 {
    set.len() as f64 / num_layers as f64
}

/// Mean accepted drafted tokens per verification iteration.
pub fn mean_accepted(stats: &RunStats) -> Result<f64> {
    if stats.iterations == 0 {
        return Err(Error::UndefinedMetric(
            "mean accepted tokens with zero iterations".into(),
        ));
    }
    Ok(stats.total_accepted as f64 / stats.iterations as f64)
}

/// Cost-model speedup: vanilla layer-forwards (`committed * num_layers`)
/// over the run's draft + verify + collection-overhead layer-forwards.
pub fn speedup_estimate(
    stats: &RunStats,
    num_layers: usize,
    overhead_per_projection: f64,
) -> Result<f64> {
    let vanilla = stats.total_committed as f64 * num_layers as f64;
    let engine = stats.layers_executed_draft as f64
        + stats.layers_executed_verify as f64
        + stats.sublayer_projections as f64 * overhead_per_projection;
    if engine <= 0.0 {
        return Err(Error::UndefinedMetric("speedup with zero engine cost".into()));
    }
    Ok(vanilla / engine)
}

/// Token-level Rouge-2: F1 over bigram multiset overlap. Sequences shorter
/// than two tokens score 0.
pub fn rouge2(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    if candidate.len() < 2 || reference.len() < 2 {
        return 0.0;
    }
    let mut ref_bigrams: HashMap<(TokenId, TokenId), usize> = HashMap::new();
    for w in reference.windows(2) {
        *ref_bigrams.entry((w[0], w[1])).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    let mut cand_total = 0usize;
    for w in candidate.windows(2) {
        cand_total += 1;
        if let Some(count) = ref_bigrams.get_mut(&(w[0], w[1])) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    let ref_total = reference.len() - 1;
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / cand_total as f64;
    let recall = overlap as f64 / ref_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// The run-level metrics report. `null` fields are metrics undefined for
/// the run (e.g. acceptance rate of a vanilla run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alpha: Option<f64>,
    pub beta_mean: Option<f64>,
    #[serde(rename = "M")]
    pub mean_accepted: Option<f64>,
    pub speedup_est: Option<f64>,
    pub rouge2: Option<f64>,
    pub iterations: usize,
    pub rounds: usize,
}

impl MetricsReport {
    /// Assembles the report from run counters. `rouge2` is supplied by the
    /// caller when a vanilla reference is available.
    pub fn from_stats(
        stats: &RunStats,
        num_layers: usize,
        overhead_per_projection: f64,
        rouge2_score: Option<f64>,
    ) -> Self {
        Self {
            alpha: acceptance_rate(stats).ok(),
            beta_mean: stats
                .final_skip_set()
                .map(|s| skip_rate(s, num_layers)),
            mean_accepted: mean_accepted(stats).ok(),
            speedup_est: speedup_estimate(stats, num_layers, overhead_per_projection).ok(),
            rouge2: rouge2_score,
            iterations: stats.iterations,
            rounds: stats.rounds,
        }
    }
}
