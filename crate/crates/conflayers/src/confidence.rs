//! Entropy-derived confidence scores and per-layer confidence profiles.
//!
//! A layer's token distribution is obtained by projecting its sublayer
//! hidden states through the shared LM head (done by the backend); here we
//! turn those logits into a scalar confidence: logits are stabilized,
//! softmaxed, their Shannon entropy is computed in nats, and confidence is
//! the complement of entropy normalized by the uniform-distribution maximum
//! `ln K`. Sharply peaked distributions score near 1, near-uniform ones
//! near 0. Per-layer scores are averaged over a context window of generated
//! tokens to form a [`ConfidenceProfile`].

use serde::{Deserialize, Serialize};

use crate::backend::BackendStepOutput;
use crate::error::{Error, Result};

/// Default clamp bound for logit stabilization. With max-subtraction in the
/// softmax the bound is never binding in practice.
pub const DEFAULT_CLAMP_BOUND: f32 = 50.0;

/// Default epsilon guarding `ln(0)` in the entropy sum.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// Per-layer confidence values over the considered layers of a model.
///
/// Considered layers are `1..=num_layers-2`: the first and last layer are
/// never skip candidates and carry no entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceProfile {
    entries: Vec<(usize, f64)>,
    num_layers: usize,
}

impl ConfidenceProfile {
    /// Builds a profile, checking ordering, range, and the considered-layer
    /// coverage `1..=num_layers-2`.
    pub fn new(entries: Vec<(usize, f64)>, num_layers: usize) -> Result<Self> {
        if num_layers < 4 {
            return Err(Error::InvalidInput(format!(
                "profile requires num_layers >= 4, got {num_layers}"
            )));
        }
        if entries.len() != num_layers - 2 {
            return Err(Error::InvalidInput(format!(
                "profile must cover layers 1..={}, got {} entries",
                num_layers - 2,
                entries.len()
            )));
        }
        for (slot, &(layer, c)) in entries.iter().enumerate() {
            if layer != slot + 1 {
                return Err(Error::InvalidInput(format!(
                    "profile entry {slot} has layer index {layer}, expected {}",
                    slot + 1
                )));
            }
            if !(0.0..=1.0).contains(&c) || !c.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "confidence {c} for layer {layer} is outside [0, 1]"
                )));
            }
        }
        Ok(Self { entries, num_layers })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Confidence values in layer order, without indices.
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|&(_, c)| c).collect()
    }

    /// Re-validates a profile deserialized from disk.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.entries.clone(), self.num_layers).map(|_| ())
    }
}

/// Casts logits to finite f32 values clamped to `[-clamp_bound, clamp_bound]`.
///
/// NaN maps to 0 and infinities clamp to the bound, so downstream math never
/// sees a non-finite value.
pub fn stabilize_logits(raw: &[f32], clamp_bound: f32) -> Result<Vec<f32>> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("empty logit vector".into()));
    }
    if clamp_bound <= 0.0 || clamp_bound.is_nan() {
        return Err(Error::InvalidInput(format!(
            "clamp_bound must be positive, got {clamp_bound}"
        )));
    }
    Ok(raw
        .iter()
        .map(|&v| {
            let v = if v.is_nan() { 0.0 } else { v };
            v.clamp(-clamp_bound, clamp_bound)
        })
        .collect())
}

/// Softmax over stabilized logits, computed in f64 with max-subtraction.
///
/// Max-subtraction only stabilizes the exponentials; the resulting
/// distribution is the plain softmax of the inputs.
pub fn softmax(logits: &[f32]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax requires at least 2 logits, got {}",
            logits.len()
        )));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Shannon entropy in nats: `-sum p_i * ln(p_i + epsilon)`, floored at 0.
///
/// The floor absorbs the `-ln(1 + epsilon)` excursion a one-hot
/// distribution would otherwise produce.
pub fn entropy(probs: &[f64], epsilon: f64) -> f64 {
    let h: f64 = -probs.iter().map(|&p| p * (p + epsilon).ln()).sum::<f64>();
    h.max(0.0)
}

/// Confidence of a raw logit vector: `1 - H(softmax(stabilize(l))) / ln K`,
/// clamped to `[0, 1]`.
pub fn confidence_from_logits(logits: &[f32], epsilon: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "confidence requires vocabulary size >= 2, got {}",
            logits.len()
        )));
    }
    let stable = stabilize_logits(logits, DEFAULT_CLAMP_BOUND)?;
    let probs = softmax(&stable)?;
    let h = entropy(&probs, epsilon);
    let h_max = (logits.len() as f64).ln();
    Ok((1.0 - h / h_max).clamp(0.0, 1.0))
}

/// Per-layer confidence: the arithmetic mean of the attention-sublayer and
/// FFNN-sublayer logit confidences.
pub fn layer_confidence(attn_logits: &[f32], ffn_logits: &[f32], epsilon: f64) -> Result<f64> {
    if attn_logits.len() != ffn_logits.len() {
        return Err(Error::InvalidInput(format!(
            "sublayer logit lengths differ: attn {} vs ffn {}",
            attn_logits.len(),
            ffn_logits.len()
        )));
    }
    let a = confidence_from_logits(attn_logits, epsilon)?;
    let f = confidence_from_logits(ffn_logits, epsilon)?;
    Ok(0.5 * (a + f))
}

/// Aggregates a window of step outputs into a per-layer profile.
///
/// Each considered layer's confidence is the mean over window tokens of
/// [`layer_confidence`]. Every step must carry sublayer logits for all
/// considered layers `1..=num_layers-2`.
pub fn build_profile(
    window: &[BackendStepOutput],
    num_layers: usize,
    epsilon: f64,
) -> Result<ConfidenceProfile> {
    if window.is_empty() {
        return Err(Error::InvalidInput("empty confidence window".into()));
    }
    if num_layers < 4 {
        return Err(Error::InvalidInput(format!(
            "build_profile requires num_layers >= 4, got {num_layers}"
        )));
    }
    let mut entries = Vec::with_capacity(num_layers - 2);
    for layer in 1..=num_layers - 2 {
        let mut sum = 0.0;
        for (t, step) in window.iter().enumerate() {
            let sub = step.sublayer(layer).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "window token {t} is missing sublayer logits for layer {layer}"
                ))
            })?;
            sum += layer_confidence(&sub.attn, &sub.ffn, epsilon)?;
        }
        entries.push((layer, sum / window.len() as f64));
    }
    ConfidenceProfile::new(entries, num_layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SublayerLogits;
    use proptest::prelude::*;

    const EPS: f64 = DEFAULT_EPSILON;

    // Straight-line evaluation of the softmax/entropy/confidence chain
    // without max-subtraction, kept independent of the implementation path.
    fn confidence_oracle(logits: &[f32], eps: f64) -> f64 {
        let vals: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let sum: f64 = vals.iter().map(|&l| l.exp()).sum();
        let p: Vec<f64> = vals.iter().map(|&l| l.exp() / sum).collect();
        let h = -p.iter().map(|&pi| pi * (pi + eps).ln()).sum::<f64>();
        (1.0 - h.max(0.0) / (vals.len() as f64).ln()).clamp(0.0, 1.0)
    }

    #[test]
    fn stabilize_passes_in_bound_values() {
        let out = stabilize_logits(&[3.0, -2.0], 50.0).unwrap();
        assert_eq!(out, vec![3.0, -2.0]);
    }

    #[test]
    fn stabilize_clamps_to_bound() {
        let out = stabilize_logits(&[1e9, 0.0], 50.0).unwrap();
        assert_eq!(out, vec![50.0, 0.0]);
        let out = stabilize_logits(&[f32::INFINITY, f32::NEG_INFINITY], 50.0).unwrap();
        assert_eq!(out, vec![50.0, -50.0]);
    }

    #[test]
    fn stabilize_maps_nan_to_zero() {
        let out = stabilize_logits(&[f32::NAN, 2.0], 50.0).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn stabilize_rejects_empty() {
        assert!(matches!(
            stabilize_logits(&[], 50.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for &pi in &p {
            assert!((pi - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_three_to_one_ratio() {
        let p = softmax(&[3.0f32.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-7);
        assert!((p[1] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Frozen from the straight-line oracle (no max-subtraction).
        let p = softmax(&[2.0, 1.0, 0.5]).unwrap();
        let expected = [
            0.6285317192117625,
            0.23122389762214907,
            0.1402443831660885,
        ];
        for (got, want) in p.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn entropy_uniform_is_ln_k() {
        let h = entropy(&[0.25; 4], EPS);
        assert!((h - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let h = entropy(&[1.0, 0.0, 0.0, 0.0], EPS);
        assert!((0.0..=1e-6).contains(&h), "one-hot entropy {h}");
    }

    #[test]
    fn entropy_matches_direct_evaluation() {
        let h = entropy(&[0.75, 0.25], EPS);
        assert!((h - 0.5623351444188083).abs() < 1e-12);
    }

    #[test]
    fn confidence_uniform_is_zero() {
        let c = confidence_from_logits(&[1.0; 4], EPS).unwrap();
        assert!(c.abs() < 1e-6);
    }

    #[test]
    fn confidence_near_one_hot() {
        let c = confidence_from_logits(&[100.0, 0.0, 0.0, 0.0], EPS).unwrap();
        assert!(c >= 0.999, "near-deterministic confidence {c}");
    }

    #[test]
    fn confidence_matches_oracle_chain() {
        let c = confidence_from_logits(&[2.0, 1.0, 0.5, 0.0], EPS).unwrap();
        assert!((c - 0.19947232549073046).abs() < 1e-12);
    }

    #[test]
    fn confidence_rejects_k_below_two() {
        assert!(confidence_from_logits(&[1.0], EPS).is_err());
    }

    #[test]
    fn layer_confidence_both_uniform() {
        let c = layer_confidence(&[0.0; 4], &[0.0; 4], EPS).unwrap();
        assert!(c.abs() < 1e-6);
    }

    #[test]
    fn layer_confidence_mixes_peaked_and_uniform() {
        let c = layer_confidence(&[100.0, 0.0, 0.0, 0.0], &[0.0; 4], EPS).unwrap();
        assert!((c - 0.5).abs() < 1e-3, "mean of ~1 and ~0 was {c}");
    }

    #[test]
    fn layer_confidence_matches_oracle_mean() {
        let c = layer_confidence(&[2.0, 1.0, 0.5, 0.0], &[0.0, 1.0, 2.0, 3.0], EPS).unwrap();
        assert!((c - 0.257984443143052).abs() < 1e-12);
    }

    #[test]
    fn layer_confidence_rejects_mismatched_k() {
        assert!(layer_confidence(&[1.0, 2.0], &[1.0, 2.0, 3.0], EPS).is_err());
    }

    fn step_with_uniform_sublayers(num_layers: usize, k: usize) -> BackendStepOutput {
        let sub: Vec<(usize, SublayerLogits)> = (1..=num_layers - 2)
            .map(|l| {
                (
                    l,
                    SublayerLogits {
                        attn: vec![0.0; k],
                        ffn: vec![0.0; k],
                    },
                )
            })
            .collect();
        BackendStepOutput {
            final_logits: vec![0.0; k],
            sublayer_logits: sub,
            layers_executed: num_layers,
        }
    }

    #[test]
    fn build_profile_all_uniform_gives_zeros() {
        let window = vec![step_with_uniform_sublayers(6, 8)];
        let profile = build_profile(&window, 6, EPS).unwrap();
        assert_eq!(profile.len(), 4);
        for &(_, c) in profile.entries() {
            assert!(c.abs() < 1e-6);
        }
    }

    #[test]
    fn build_profile_averages_over_tokens() {
        // Two tokens whose layer-3 confidences are about 0.2 and 0.4; all
        // other layers uniform. Pick logit vectors hitting those targets by
        // scaling a fixed direction and bisecting.
        fn logits_for(target: f64, k: usize) -> Vec<f32> {
            let mut lo = 0.0f32;
            let mut hi = 60.0f32;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let mut v = vec![0.0f32; k];
                v[0] = mid;
                let c = confidence_from_logits(&v, EPS).unwrap();
                if c < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mut v = vec![0.0f32; k];
            v[0] = 0.5 * (lo + hi);
            v
        }
        let k = 8;
        let num_layers = 6;
        let mut step_a = step_with_uniform_sublayers(num_layers, k);
        let mut step_b = step_with_uniform_sublayers(num_layers, k);
        let la = logits_for(0.2, k);
        let lb = logits_for(0.4, k);
        step_a.sublayer_logits[2].1.attn = la.clone();
        step_a.sublayer_logits[2].1.ffn = la;
        step_b.sublayer_logits[2].1.attn = lb.clone();
        step_b.sublayer_logits[2].1.ffn = lb;
        let profile = build_profile(&[step_a, step_b], num_layers, EPS).unwrap();
        let c3 = profile.entries()[2].1;
        assert!((c3 - 0.3).abs() < 1e-3, "mean confidence was {c3}");
    }

    #[test]
    fn build_profile_rejects_empty_window() {
        assert!(build_profile(&[], 6, EPS).is_err());
    }

    #[test]
    fn build_profile_excludes_first_and_last_layer() {
        let window = vec![step_with_uniform_sublayers(12, 8)];
        let profile = build_profile(&window, 12, EPS).unwrap();
        assert!(profile.entries().iter().all(|&(l, _)| (1..=10).contains(&l)));
        assert_eq!(profile.entries().first().unwrap().0, 1);
        assert_eq!(profile.entries().last().unwrap().0, 10);
    }

    #[test]
    fn confidence_monotone_in_two_outcome_peakedness() {
        // For p in (0.5, 1), logits [ln(p/(1-p)), 0] give distribution [p, 1-p].
        let mut last = -1.0;
        for i in 0..20 {
            let p = 0.5 + 0.025 * (i as f64 + 0.5);
            let logit = (p / (1.0 - p)).ln() as f32;
            let c = confidence_from_logits(&[logit, 0.0], EPS).unwrap();
            assert!(c > last, "confidence not increasing at p={p}: {c} <= {last}");
            last = c;
        }
    }

    proptest! {
        #[test]
        fn confidence_always_in_unit_interval(
            logits in proptest::collection::vec(-40.0f32..40.0, 2..80)
        ) {
            let c = confidence_from_logits(&logits, EPS).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn confidence_is_shift_invariant(
            logits in proptest::collection::vec(-10.0f32..10.0, 2..40),
            shift in -10.0f32..10.0
        ) {
            let shifted: Vec<f32> = logits.iter().map(|&v| v + shift).collect();
            let a = confidence_from_logits(&logits, EPS).unwrap();
            let b = confidence_from_logits(&shifted, EPS).unwrap();
            prop_assert!((a - b).abs() < 1e-6, "shift changed confidence: {a} vs {b}");
        }

        #[test]
        fn entropy_is_permutation_invariant(
            mut probs in proptest::collection::vec(0.0f64..1.0, 2..20)
        ) {
            let sum: f64 = probs.iter().sum();
            prop_assume!(sum > 1e-9);
            for p in probs.iter_mut() {
                *p /= sum;
            }
            let h = entropy(&probs, EPS);
            let mut rev = probs.clone();
            rev.reverse();
            let h_rev = entropy(&rev, EPS);
            prop_assert!((h - h_rev).abs() < 1e-9);
        }

        #[test]
        fn oracle_equivalence_on_random_logits(
            logits in proptest::collection::vec(-30.0f32..30.0, 2..65)
        ) {
            let c = confidence_from_logits(&logits, EPS).unwrap();
            let want = confidence_oracle(&logits, EPS);
            prop_assert!((c - want).abs() < 1e-8, "impl {c} vs oracle {want}");
        }
    }
}
