//! Model backends: the abstract interface, a deterministic toy
//! decoder-only transformer, and a trace-replay backend for
//! fixture-driven tests.

mod toy;
mod trace;

pub use toy::{ToyModel, ToyModelConfig};
pub use trace::{write_trace, TraceBackend};

use crate::error::{Error, Result};
use crate::skip::SkipSet;
use crate::TokenId;

/// Logits projected from one layer's two sublayer residual streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerLogits {
    /// Post-attention residual stream, normed and projected.
    pub attn: Vec<f32>,
    /// Post-FFNN residual stream, normed and projected.
    pub ffn: Vec<f32>,
}

/// Output of one token position through a backend pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendStepOutput {
    /// Final next-token logits, length K.
    pub final_logits: Vec<f32>,
    /// Per considered-layer sublayer logits, sorted by layer index.
    /// Present only for the layers that executed with collection enabled.
    pub sublayer_logits: Vec<(usize, SublayerLogits)>,
    /// Number of transformer layers executed for this position.
    pub layers_executed: usize,
}

impl BackendStepOutput {
    pub fn sublayer(&self, layer: usize) -> Option<&SublayerLogits> {
        self.sublayer_logits
            .binary_search_by_key(&layer, |&(l, _)| l)
            .ok()
            .map(|i| &self.sublayer_logits[i].1)
    }
}

/// Key/value memory for one transformer layer, flattened `[len * hidden]`.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

impl LayerKv {
    fn truncate(&mut self, positions: usize, hidden: usize) {
        let n = positions * hidden;
        if self.k.len() > n {
            self.k.truncate(n);
            self.v.truncate(n);
        }
    }
}

/// One side (draft or target) of a decoder state: per-layer KV plus the
/// number of token positions this side has processed.
#[derive(Debug, Clone)]
pub(crate) struct CacheSide {
    pub layers: Vec<LayerKv>,
    pub len: usize,
    hidden: usize,
}

impl CacheSide {
    fn new(num_layers: usize, hidden: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); num_layers],
            len: 0,
            hidden,
        }
    }

    /// Lengths-only side for backends that replay by position.
    fn positions_only() -> Self {
        Self {
            layers: Vec::new(),
            len: 0,
            hidden: 0,
        }
    }

    fn truncate(&mut self, len: usize) {
        for layer in &mut self.layers {
            layer.truncate(len, self.hidden);
        }
        if self.len > len {
            self.len = len;
        }
    }

    fn clear(&mut self) {
        for layer in &mut self.layers {
            layer.k.clear();
            layer.v.clear();
        }
        self.len = 0;
    }
}

/// Decoding state for one generation session: independent draft and target
/// caches plus the number of committed tokens.
///
/// The draft cache holds entries only for the layers executed under the
/// current skip set and may lag `committed_length`; it is topped up (or
/// rebuilt, after a skip-set change) at the next draft. The target cache
/// always covers exactly the committed tokens after a verify step.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub(crate) draft: CacheSide,
    pub(crate) target: CacheSide,
    committed: usize,
}

impl DecoderState {
    pub fn committed_length(&self) -> usize {
        self.committed
    }

    /// Token positions the draft side has processed.
    pub fn draft_len(&self) -> usize {
        self.draft.len
    }

    /// Token positions the target side has processed.
    pub fn target_len(&self) -> usize {
        self.target.len
    }

    /// Cuts both caches down to `len` positions and sets the committed
    /// length. Caches shorter than `len` are left as they are (the draft
    /// side refills lazily); the target side must already cover `len`.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.target.len {
            return Err(Error::InvalidInput(format!(
                "cannot truncate to {len}: target cache holds {} positions",
                self.target.len
            )));
        }
        self.draft.truncate(len);
        self.target.truncate(len);
        self.committed = len;
        Ok(())
    }

    /// Drops all draft-side entries, forcing a rebuild on the next draft.
    pub fn reset_draft(&mut self) {
        self.draft.clear();
    }
}

/// A decoder-only model exposing skip-aware draft execution and full-model
/// verification. Weights are immutable after construction; all mutation
/// happens through the caller-owned [`DecoderState`].
pub trait ModelBackend: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn num_layers(&self) -> usize;

    /// Maximum sequence length (token positions) a state may reach.
    fn max_seq(&self) -> usize;

    fn new_state(&self) -> DecoderState;

    /// Runs one token through the non-skipped layers, appending to the
    /// draft cache. With `collect_sublayer`, each executed considered
    /// layer's post-attention and post-FFNN residual streams are normed and
    /// projected through the shared LM head into the output.
    fn forward_draft(
        &self,
        state: &mut DecoderState,
        token: TokenId,
        skip_set: &SkipSet,
        collect_sublayer: bool,
    ) -> Result<BackendStepOutput>;

    /// Runs a token block through the full model, appending to the target
    /// cache; returns one step output per input position.
    fn forward_target(
        &self,
        state: &mut DecoderState,
        tokens: &[TokenId],
        collect_sublayer: bool,
    ) -> Result<Vec<BackendStepOutput>>;
}

pub(crate) fn check_skip_set(skip_set: &SkipSet, num_layers: usize) -> Result<()> {
    if skip_set.num_layers() != num_layers {
        return Err(Error::InvalidInput(format!(
            "skip set sized for {} layers used with a {}-layer model",
            skip_set.num_layers(),
            num_layers
        )));
    }
    Ok(())
}
