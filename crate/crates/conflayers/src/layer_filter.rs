//! Converts a confidence profile into a skip set.
//!
//! Pipeline: global standardization of the per-layer confidences, absolute
//! second-order discrete gradient rescaled to `[0, 1]`, an adaptive
//! comparison window per layer (growing with gradient magnitude and layer
//! depth), local mean/std over that window excluding the layer itself, and
//! the skip condition `c_hat < mu_local - lambda * sigma_local`. A ratio
//! band then keeps the skip set inside the configured operating range by
//! adding or removing layers in margin order.

use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceProfile;
use crate::error::{Error, Result};
use crate::skip::SkipSet;

/// Confidence plateau tolerance used when sizing the maximum window bonus.
pub const PLATEAU_TOL: f64 = 1e-4;

/// Globally standardized confidence values, aligned to profile order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedProfile {
    values: Vec<f64>,
}

impl NormalizedProfile {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Rescaled absolute second differences, aligned to profile order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProfile {
    values: Vec<f64>,
}

impl GradientProfile {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Filter parameters. Defaults follow the engine-wide operating values:
/// base window 2, sensitivity 0.3, skip-ratio band 40-60%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub w_base: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub min_skip_ratio: f64,
    pub max_skip_ratio: f64,
    /// When false, the raw skip condition decides alone (no ratio band).
    pub enforce_bounds: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            w_base: 2,
            lambda: 0.3,
            epsilon: 1e-10,
            min_skip_ratio: 0.40,
            max_skip_ratio: 0.60,
            enforce_bounds: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_base < 1 {
            return Err(Error::Config("w_base must be >= 1".into()));
        }
        if self.lambda <= 0.0 || self.lambda.is_nan() {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.epsilon <= 0.0 || self.epsilon.is_nan() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.min_skip_ratio) {
            return Err(Error::Config(format!(
                "min_skip_ratio must be in [0, 1), got {}",
                self.min_skip_ratio
            )));
        }
        if self.max_skip_ratio <= self.min_skip_ratio || self.max_skip_ratio > 1.0 {
            return Err(Error::Config(format!(
                "max_skip_ratio must be in ({}, 1], got {}",
                self.min_skip_ratio, self.max_skip_ratio
            )));
        }
        Ok(())
    }
}

/// Per-layer record behind one filter decision, emitted by the diagnostic
/// dump as one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDiagnostic {
    pub layer: usize,
    pub c: f64,
    pub c_hat: f64,
    pub g: f64,
    pub w: usize,
    pub threshold: f64,
    pub skipped: bool,
}

/// Full outcome of one filter run.
#[derive(Debug, Clone)]
pub struct FilterReport {
    pub skip_set: SkipSet,
    /// Layers satisfying the raw skip condition, before ratio enforcement.
    pub marked_pre_bounds: Vec<usize>,
    /// Whether ratio enforcement changed the marked set.
    pub adjusted: bool,
    pub layers: Vec<LayerDiagnostic>,
}

/// Standardizes confidences to zero mean and unit variance (population
/// statistics); `epsilon` keeps a constant profile at zero instead of
/// dividing by zero.
pub fn normalize(profile: &ConfidenceProfile, epsilon: f64) -> NormalizedProfile {
    let values = profile.values();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&c| (c - mean) * (c - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    NormalizedProfile {
        values: values.iter().map(|&c| (c - mean) / (sd + epsilon)).collect(),
    }
}

/// Absolute second discrete differences, min-max rescaled to `[0, 1]`.
///
/// Interior points use the centered difference; endpoints reuse the
/// one-sided difference over their three nearest points. A flat result
/// (max == min) rescales to all zeros.
pub fn curvature(norm: &NormalizedProfile) -> Result<GradientProfile> {
    let v = &norm.values;
    let n = v.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "curvature requires at least 3 layers, got {n}"
        )));
    }
    let mut g = Vec::with_capacity(n);
    for i in 0..n {
        let j = i.clamp(1, n - 2);
        g.push((v[j + 1] - 2.0 * v[j] + v[j - 1]).abs());
    }
    let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        for x in g.iter_mut() {
            *x = (*x - min) / (max - min);
        }
    } else {
        for x in g.iter_mut() {
            *x = 0.0;
        }
    }
    Ok(GradientProfile { values: g })
}

/// Length of the leading confidence plateau: the number of consecutive
/// layers from the front whose confidence stays within [`PLATEAU_TOL`] of
/// the first layer's value. Never less than 1.
pub fn derive_w_max(profile: &ConfidenceProfile) -> usize {
    let values = profile.values();
    let first = values[0];
    let run = values
        .iter()
        .take_while(|&&c| (c - first).abs() < PLATEAU_TOL)
        .count();
    run.max(1)
}

/// Adaptive window size: `round(w_base + w_max * g_i * (layer_index /
/// num_layers))`, floored at `w_base`.
pub fn window_size(
    w_base: usize,
    w_max: usize,
    g_i: f64,
    layer_index: usize,
    num_layers: usize,
) -> usize {
    let w = w_base as f64 + w_max as f64 * g_i * (layer_index as f64 / num_layers as f64);
    (w.round() as usize).max(w_base)
}

/// Population mean and standard deviation over the positions within
/// `window` of `center`, excluding the center itself. Neighborhoods are
/// truncated at the sequence ends, never padded.
pub fn local_stats(norm: &NormalizedProfile, center: usize, window: usize) -> Result<(f64, f64)> {
    let v = &norm.values;
    let lo = center.saturating_sub(window);
    let hi = (center + window).min(v.len().saturating_sub(1));
    let neighborhood: Vec<f64> = (lo..=hi).filter(|&j| j != center).map(|j| v[j]).collect();
    if neighborhood.is_empty() {
        return Err(Error::InvalidInput(format!(
            "empty neighborhood at position {center} with window {window}"
        )));
    }
    let n = neighborhood.len() as f64;
    let mean = neighborhood.iter().sum::<f64>() / n;
    let var = neighborhood.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Runs the full filter pipeline and returns the skip set alone.
pub fn select_skip_layers(profile: &ConfidenceProfile, cfg: &FilterConfig) -> Result<SkipSet> {
    Ok(select_skip_layers_detailed(profile, cfg)?.skip_set)
}

/// Runs the full filter pipeline with per-layer diagnostics.
pub fn select_skip_layers_detailed(
    profile: &ConfidenceProfile,
    cfg: &FilterConfig,
) -> Result<FilterReport> {
    cfg.validate()?;
    if profile.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "filter requires at least 4 considered layers, got {}",
            profile.len()
        )));
    }
    let num_layers = profile.num_layers();
    let norm = normalize(profile, cfg.epsilon);
    let grad = curvature(&norm)?;
    let w_max = derive_w_max(profile);

    // margin = c_hat - threshold; negative means marked for skipping.
    let mut margins = Vec::with_capacity(profile.len());
    let mut diagnostics = Vec::with_capacity(profile.len());
    for (pos, &(layer, c)) in profile.entries().iter().enumerate() {
        let g_i = grad.values[pos];
        let w_i = window_size(cfg.w_base, w_max, g_i, layer, num_layers);
        let (mu, sigma) = local_stats(&norm, pos, w_i)?;
        let threshold = mu - cfg.lambda * sigma;
        let c_hat = norm.values[pos];
        margins.push((layer, c_hat - threshold));
        diagnostics.push(LayerDiagnostic {
            layer,
            c,
            c_hat,
            g: g_i,
            w: w_i,
            threshold,
            skipped: c_hat < threshold,
        });
    }

    let marked_pre_bounds: Vec<usize> = margins
        .iter()
        .filter(|&&(_, m)| m < 0.0)
        .map(|&(l, _)| l)
        .collect();
    let mut selected = marked_pre_bounds.clone();
    let mut adjusted = false;

    if cfg.enforce_bounds {
        let count_min = (cfg.min_skip_ratio * num_layers as f64 - 1e-9).ceil().max(0.0) as usize;
        let count_max = (cfg.max_skip_ratio * num_layers as f64 + 1e-9).floor() as usize;
        if count_min > profile.len() || count_min > count_max {
            return Err(Error::Config(format!(
                "skip-ratio band [{}, {}] unsatisfiable with {} considered of {} layers",
                cfg.min_skip_ratio,
                cfg.max_skip_ratio,
                profile.len(),
                num_layers
            )));
        }
        if selected.len() < count_min {
            // Closest-to-threshold unmarked layers join first.
            let mut candidates: Vec<(usize, f64)> = margins
                .iter()
                .filter(|&&(l, m)| m >= 0.0 && !selected.contains(&l))
                .cloned()
                .collect();
            candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            for (layer, _) in candidates {
                if selected.len() >= count_min {
                    break;
                }
                selected.push(layer);
                adjusted = true;
            }
        } else if selected.len() > count_max {
            // Least-clearly-skippable marked layers leave first.
            let mut members: Vec<(usize, f64)> = margins
                .iter()
                .filter(|&&(l, _)| selected.contains(&l))
                .cloned()
                .collect();
            members.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (layer, _) in members {
                if selected.len() <= count_max {
                    break;
                }
                selected.retain(|&l| l != layer);
                adjusted = true;
            }
        }
    }

    selected.sort_unstable();
    let skip_set = SkipSet::new(selected, num_layers)?;
    for diag in diagnostics.iter_mut() {
        diag.skipped = skip_set.contains(diag.layer);
    }
    Ok(FilterReport {
        skip_set,
        marked_pre_bounds,
        adjusted,
        layers: diagnostics,
    })
}
