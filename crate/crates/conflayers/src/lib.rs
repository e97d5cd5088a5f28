//! Self-speculative decoding with confidence-based adaptive layer skipping.
//!
//! The engine accelerates greedy autoregressive generation by drafting
//! tokens with a layer-skipped subnetwork of the target model and verifying
//! them losslessly with the full model. Which layers to skip is decided
//! online: per-layer confidence scores (complement of normalized predictive
//! entropy) are aggregated over a context window, filtered through an
//! adaptive local-statistics threshold, and re-searched periodically until
//! the acceptance score goal is met or the round budget runs out.
//!
//! Module map:
//! - [`confidence`]: entropy-derived confidence scores and per-layer profiles
//! - [`layer_filter`]: confidence profile -> skip set (normalize, curvature,
//!   adaptive windows, local threshold, ratio bounds)
//! - [`backend`]: model abstraction, a deterministic toy transformer, and a
//!   trace-replay backend
//! - [`decode`]: the draft-verify generation loop
//! - [`search`]: interval-based periodic search controller
//! - [`metrics`]: acceptance rate, skip rate, mean accepted tokens, cost-model
//!   speedup, token-level Rouge-2

pub mod backend;
pub mod confidence;
pub mod decode;
pub mod error;
pub mod layer_filter;
pub mod metrics;
pub mod search;
pub mod skip;

pub use error::{Error, Result};
pub use skip::SkipSet;

/// Token identifier; the engine operates on token ids, not text.
pub type TokenId = u32;
