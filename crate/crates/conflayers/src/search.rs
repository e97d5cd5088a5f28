//! Interval-based periodic search over skip sets.
//!
//! A candidate skip set drafts for `opt_interval` iterations while accepted
//! token counts accumulate. At each interval boundary the round is scored
//! (mean accepted tokens per iteration), the best set so far is updated,
//! and the controller either halts (score goal met or round budget spent)
//! or triggers a fresh layer-filter search on the latest confidence
//! profile. Once halted, the best saved set serves all remaining
//! generation. A frozen controller serves one externally supplied set and
//! never searches.

use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceProfile;
use crate::error::{Error, Result};
use crate::layer_filter::{select_skip_layers_detailed, FilterConfig, LayerDiagnostic};
use crate::skip::SkipSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Draft-verify iterations per search round.
    pub opt_interval: usize,
    /// Maximum number of search rounds before the search halts.
    pub max_rounds: usize,
    /// Mean accepted tokens per iteration that ends the search early.
    pub score_goal: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            opt_interval: 30,
            max_rounds: 10,
            score_goal: 4.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.opt_interval < 1 {
            return Err(Error::Config("opt_interval must be >= 1".into()));
        }
        if self.max_rounds < 1 {
            return Err(Error::Config("max_rounds must be >= 1".into()));
        }
        if self.score_goal < 0.0 || self.score_goal.is_nan() {
            return Err(Error::Config("score_goal must be non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of the per-iteration search check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchDecision {
    Continue,
    TriggerSearch,
    Halt,
}

/// Mutable search progress.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub current_set: SkipSet,
    pub best_set: SkipSet,
    pub best_score: f64,
    pub round: usize,
    pub opt_iterations: usize,
    pub accumulated_accepted: usize,
    pub halted: bool,
}

/// One line of the search log, emitted at every interval boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRecord {
    pub round: usize,
    pub score: f64,
    pub set: Vec<usize>,
    pub best_score: f64,
    pub decision: String,
}

/// Diagnostics from the filter run that produced one round's skip set.
#[derive(Debug, Clone, Serialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub layers: Vec<LayerDiagnostic>,
}

enum Mode {
    /// Full periodic search.
    Searching,
    /// Externally supplied set, no search; used for frozen-set runs, the
    /// uniform baseline, and plain fixed-set decoding.
    Frozen,
}

pub struct SearchController {
    mode: Mode,
    state: SearchState,
    search_cfg: SearchConfig,
    filter_cfg: FilterConfig,
    pending_profile: Option<ConfidenceProfile>,
    log: Vec<SearchRecord>,
    diagnostics: Vec<RoundDiagnostics>,
}

impl SearchController {
    /// Controller that searches, starting from `initial_set`.
    pub fn searching(
        initial_set: SkipSet,
        search_cfg: SearchConfig,
        filter_cfg: FilterConfig,
    ) -> Result<Self> {
        search_cfg.validate()?;
        filter_cfg.validate()?;
        Ok(Self {
            mode: Mode::Searching,
            state: SearchState {
                best_set: initial_set.clone(),
                current_set: initial_set,
                best_score: f64::NEG_INFINITY,
                round: 0,
                opt_iterations: 0,
                accumulated_accepted: 0,
                halted: false,
            },
            search_cfg,
            filter_cfg,
            pending_profile: None,
            log: Vec::new(),
            diagnostics: Vec::new(),
        })
    }

    /// Controller that always serves `set` and never searches.
    pub fn frozen(set: SkipSet) -> Self {
        Self {
            mode: Mode::Frozen,
            state: SearchState {
                best_set: set.clone(),
                current_set: set,
                best_score: f64::NEG_INFINITY,
                round: 0,
                opt_iterations: 0,
                accumulated_accepted: 0,
                halted: false,
            },
            search_cfg: SearchConfig::default(),
            filter_cfg: FilterConfig::default(),
            pending_profile: None,
            log: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    /// The skip set drafting should use right now: the current candidate
    /// while searching, the best saved set once halted, and the external
    /// set in frozen mode.
    pub fn active_set(&self) -> &SkipSet {
        match self.mode {
            Mode::Frozen => &self.state.current_set,
            Mode::Searching => {
                if self.state.halted {
                    &self.state.best_set
                } else {
                    &self.state.current_set
                }
            }
        }
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn halted(&self) -> bool {
        self.state.halted
    }

    pub fn round(&self) -> usize {
        self.state.round
    }

    /// True while the controller still wants confidence profiles, i.e. it
    /// is a searching controller that has not halted.
    pub fn collecting(&self) -> bool {
        matches!(self.mode, Mode::Searching) && !self.state.halted
    }

    /// True when the next recorded iteration completes the interval, so the
    /// caller should supply a fresh profile first.
    pub fn needs_profile_now(&self) -> bool {
        self.collecting() && self.state.opt_iterations + 1 >= self.search_cfg.opt_interval
    }

    /// Hands the controller the profile a triggered search will consume.
    pub fn supply_profile(&mut self, profile: ConfidenceProfile) {
        self.pending_profile = Some(profile);
    }

    pub fn search_log(&self) -> &[SearchRecord] {
        &self.log
    }

    pub fn diagnostics(&self) -> &[RoundDiagnostics] {
        &self.diagnostics
    }

    /// Accumulates one iteration's accepted-token count.
    pub fn record_iteration(&mut self, accepted: usize) -> Result<()> {
        if self.state.halted {
            return Err(Error::State(
                "record_iteration called after the search halted".into(),
            ));
        }
        self.state.accumulated_accepted += accepted;
        self.state.opt_iterations += 1;
        Ok(())
    }

    /// Pure decision on the current counters: halt when the round budget is
    /// spent or an interval boundary meets the score goal, trigger a search
    /// at a boundary below goal, continue otherwise. Halt is absorbing.
    pub fn search_check(&self) -> SearchDecision {
        if self.state.halted {
            return SearchDecision::Halt;
        }
        if self.state.round >= self.search_cfg.max_rounds {
            return SearchDecision::Halt;
        }
        if self.state.opt_iterations < self.search_cfg.opt_interval {
            return SearchDecision::Continue;
        }
        let round_score =
            self.state.accumulated_accepted as f64 / self.search_cfg.opt_interval as f64;
        if round_score >= self.search_cfg.score_goal {
            SearchDecision::Halt
        } else {
            SearchDecision::TriggerSearch
        }
    }

    /// Scores the finished round: a strictly better score adopts
    /// `evaluated_set` as best (ties keep the earlier set), counters reset,
    /// and the round index advances.
    pub fn update_best(&mut self, round_score: f64, evaluated_set: SkipSet) {
        if round_score > self.state.best_score {
            self.state.best_score = round_score;
            self.state.best_set = evaluated_set;
        }
        self.state.accumulated_accepted = 0;
        self.state.opt_iterations = 0;
        self.state.round += 1;
    }

    /// Runs the layer filter on `profile` and adopts the result as the next
    /// round's candidate set.
    pub fn on_trigger(&mut self, profile: &ConfidenceProfile) -> Result<()> {
        if self.state.halted {
            return Err(Error::State("on_trigger called after halt".into()));
        }
        let report = select_skip_layers_detailed(profile, &self.filter_cfg)?;
        self.state.current_set = report.skip_set;
        self.diagnostics.push(RoundDiagnostics {
            round: self.state.round,
            layers: report.layers,
        });
        Ok(())
    }

    fn halt_now(&mut self) {
        self.state.halted = true;
        self.state.current_set = self.state.best_set.clone();
    }

    /// Records one iteration and drives the boundary bookkeeping: scoring,
    /// best-set update, halt, or a triggered search consuming the pending
    /// profile. The boundary where the round budget runs out halts
    /// immediately, so at most `max_rounds * opt_interval` iterations are
    /// ever recorded.
    pub fn after_iteration(&mut self, accepted: usize) -> Result<SearchDecision> {
        if matches!(self.mode, Mode::Frozen) {
            return Ok(SearchDecision::Continue);
        }
        self.record_iteration(accepted)?;
        let mut decision = self.search_check();
        if decision == SearchDecision::Continue {
            return Ok(decision);
        }
        // Interval boundary: score the round the counters describe, then act.
        let round_score =
            self.state.accumulated_accepted as f64 / self.search_cfg.opt_interval as f64;
        let evaluated = self.state.current_set.clone();
        let round_index = self.state.round;
        self.update_best(round_score, evaluated.clone());
        if decision == SearchDecision::TriggerSearch
            && self.state.round >= self.search_cfg.max_rounds
        {
            decision = SearchDecision::Halt;
        }
        self.log.push(SearchRecord {
            round: round_index,
            score: round_score,
            set: evaluated.layers().to_vec(),
            best_score: self.state.best_score,
            decision: match decision {
                SearchDecision::Halt => "halt".into(),
                SearchDecision::TriggerSearch => "search".into(),
                SearchDecision::Continue => "continue".into(),
            },
        });
        match decision {
            SearchDecision::Halt => self.halt_now(),
            SearchDecision::TriggerSearch => {
                let profile = self.pending_profile.take().ok_or_else(|| {
                    Error::State(
                        "search triggered without a confidence profile; the context \
                         window must be refilled first"
                            .into(),
                    )
                })?;
                self.on_trigger(&profile)?;
            }
            SearchDecision::Continue => unreachable!(),
        }
        Ok(decision)
    }
}
