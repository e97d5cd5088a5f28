//! A deterministic desk-scale decoder-only transformer.
//!
//! Pre-norm blocks with multi-head causal attention and a SiLU MLP,
//! learned positional embeddings, and an untied LM head. Weights are drawn
//! from a seeded PRNG so runs are reproducible; storage is f32 with f64
//! accumulation in the reductions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_skip_set, BackendStepOutput, CacheSide, DecoderState, ModelBackend, SublayerLogits};
use crate::error::{Error, Result};
use crate::skip::SkipSet;
use crate::TokenId;

const WEIGHT_SCALE: f32 = 0.08;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_layers: 12,
            hidden_dim: 32,
            num_heads: 4,
            max_seq: 256,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.num_layers < 4 {
            return Err(Error::Config(format!(
                "num_layers must be >= 4, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::Config("max_seq must be positive".into()));
        }
        Ok(())
    }
}

struct LayerWeights {
    attn_norm: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ffn_norm: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

pub struct ToyModel {
    cfg: ToyModelConfig,
    token_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Vec<f32>,
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden_dim;
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| rng.random_range(-WEIGHT_SCALE..WEIGHT_SCALE))
                .collect()
        };
        let token_emb = draw(cfg.vocab_size * h);
        let pos_emb = draw(cfg.max_seq * h);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                attn_norm: draw(h),
                wq: draw(h * h),
                wk: draw(h * h),
                wv: draw(h * h),
                wo: draw(h * h),
                ffn_norm: draw(h),
                w_up: draw(h * 4 * h),
                w_down: draw(4 * h * h),
            })
            .collect();
        let final_norm = draw(h);
        let lm_head = draw(h * cfg.vocab_size);
        Ok(Self {
            cfg,
            token_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    fn head_dim(&self) -> usize {
        self.cfg.hidden_dim / self.cfg.num_heads
    }

    fn project_logits(&self, x: &[f32]) -> Vec<f32> {
        let normed = rms_norm(x, &self.final_norm);
        matvec(&normed, &self.lm_head, self.cfg.vocab_size)
    }

    /// Runs one token through either cache side; `skip` is `None` for
    /// target passes.
    fn forward_one(
        &self,
        side_is_draft: bool,
        state: &mut DecoderState,
        token: TokenId,
        skip: Option<&SkipSet>,
        collect: bool,
    ) -> Result<BackendStepOutput> {
        if (token as usize) >= self.cfg.vocab_size {
            return Err(Error::InvalidInput(format!(
                "token {token} out of vocabulary (K = {})",
                self.cfg.vocab_size
            )));
        }
        let side = if side_is_draft {
            &mut state.draft
        } else {
            &mut state.target
        };
        let pos = side.len;
        if pos >= self.cfg.max_seq {
            return Err(Error::Capacity(format!(
                "position {pos} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let h = self.cfg.hidden_dim;
        let dh = self.head_dim();
        let num_layers = self.cfg.num_layers;

        let mut x: Vec<f32> = (0..h)
            .map(|i| self.token_emb[token as usize * h + i] + self.pos_emb[pos * h + i])
            .collect();

        let mut executed = 0usize;
        let mut sublayers: Vec<(usize, SublayerLogits)> = Vec::new();
        for (layer_idx, w) in self.layers.iter().enumerate() {
            if skip.is_some_and(|s| s.contains(layer_idx)) {
                continue;
            }
            executed += 1;

            // Attention sublayer.
            let hn = rms_norm(&x, &w.attn_norm);
            let q = matvec(&hn, &w.wq, h);
            let k = matvec(&hn, &w.wk, h);
            let v = matvec(&hn, &w.wv, h);
            let cache = &mut side.layers[layer_idx];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            let n_pos = cache.k.len() / h;
            let mut attn_out = vec![0.0f32; h];
            for head in 0..self.cfg.num_heads {
                let off = head * dh;
                let mut scores = Vec::with_capacity(n_pos);
                for p in 0..n_pos {
                    let mut dot = 0.0f64;
                    for d in 0..dh {
                        dot += q[off + d] as f64 * cache.k[p * h + off + d] as f64;
                    }
                    scores.push(dot / (dh as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
                let sum: f64 = weights.iter().sum();
                for wgt in weights.iter_mut() {
                    *wgt /= sum;
                }
                for d in 0..dh {
                    let mut acc = 0.0f64;
                    for (p, wgt) in weights.iter().enumerate() {
                        acc += wgt * cache.v[p * h + off + d] as f64;
                    }
                    attn_out[off + d] = acc as f32;
                }
            }
            let o = matvec(&attn_out, &w.wo, h);
            for i in 0..h {
                x[i] += o[i];
            }
            let considered = layer_idx >= 1 && layer_idx <= num_layers - 2;
            let attn_logits = if collect && considered {
                Some(self.project_logits(&x))
            } else {
                None
            };

            // FFNN sublayer.
            let hn2 = rms_norm(&x, &w.ffn_norm);
            let mut up = matvec(&hn2, &w.w_up, 4 * h);
            for u in up.iter_mut() {
                *u = silu(*u);
            }
            let down = matvec(&up, &w.w_down, h);
            for i in 0..h {
                x[i] += down[i];
            }
            if let Some(attn_logits) = attn_logits {
                sublayers.push((
                    layer_idx,
                    SublayerLogits {
                        attn: attn_logits,
                        ffn: self.project_logits(&x),
                    },
                ));
            }
        }
        side.len += 1;
        Ok(BackendStepOutput {
            final_logits: self.project_logits(&x),
            sublayer_logits: sublayers,
            layers_executed: executed,
        })
    }

    /// From-scratch logits for every position of `tokens`, computed with
    /// full causal attention and no cache structures. Validation path for
    /// the incremental decoder.
    pub fn reference_logits(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f32>>> {
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Capacity(format!(
                "sequence of {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        let h = self.cfg.hidden_dim;
        let dh = self.head_dim();
        let n = tokens.len();
        let mut xs: Vec<Vec<f32>> = tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                (0..h)
                    .map(|i| self.token_emb[t as usize * h + i] + self.pos_emb[pos * h + i])
                    .collect()
            })
            .collect();
        for w in &self.layers {
            let mut ks = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            let mut qs = Vec::with_capacity(n);
            for x in &xs {
                let hn = rms_norm(x, &w.attn_norm);
                qs.push(matvec(&hn, &w.wq, h));
                ks.push(matvec(&hn, &w.wk, h));
                vs.push(matvec(&hn, &w.wv, h));
            }
            for t in 0..n {
                let mut attn_out = vec![0.0f32; h];
                for head in 0..self.cfg.num_heads {
                    let off = head * dh;
                    let mut scores = Vec::with_capacity(t + 1);
                    for k_row in ks.iter().take(t + 1) {
                        let mut dot = 0.0f64;
                        for d in 0..dh {
                            dot += qs[t][off + d] as f64 * k_row[off + d] as f64;
                        }
                        scores.push(dot / (dh as f64).sqrt());
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
                    let sum: f64 = weights.iter().sum();
                    for wgt in weights.iter_mut() {
                        *wgt /= sum;
                    }
                    for d in 0..dh {
                        let mut acc = 0.0f64;
                        for (p, wgt) in weights.iter().enumerate() {
                            acc += wgt * vs[p][off + d] as f64;
                        }
                        attn_out[off + d] = acc as f32;
                    }
                }
                let o = matvec(&attn_out, &w.wo, h);
                for i in 0..h {
                    xs[t][i] += o[i];
                }
                let hn2 = rms_norm(&xs[t], &w.ffn_norm);
                let mut up = matvec(&hn2, &w.w_up, 4 * h);
                for u in up.iter_mut() {
                    *u = silu(*u);
                }
                let down = matvec(&up, &w.w_down, h);
                for i in 0..h {
                    xs[t][i] += down[i];
                }
            }
        }
        Ok(xs.iter().map(|x| self.project_logits(x)).collect())
    }
}

impl ModelBackend for ToyModel {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    fn max_seq(&self) -> usize {
        self.cfg.max_seq
    }

    fn new_state(&self) -> DecoderState {
        DecoderState {
            draft: CacheSide::new(self.cfg.num_layers, self.cfg.hidden_dim),
            target: CacheSide::new(self.cfg.num_layers, self.cfg.hidden_dim),
            committed: 0,
        }
    }

    fn forward_draft(
        &self,
        state: &mut DecoderState,
        token: TokenId,
        skip_set: &SkipSet,
        collect_sublayer: bool,
    ) -> Result<BackendStepOutput> {
        check_skip_set(skip_set, self.cfg.num_layers)?;
        self.forward_one(true, state, token, Some(skip_set), collect_sublayer)
    }

    fn forward_target(
        &self,
        state: &mut DecoderState,
        tokens: &[TokenId],
        collect_sublayer: bool,
    ) -> Result<Vec<BackendStepOutput>> {
        if state.target.len + tokens.len() > self.cfg.max_seq {
            return Err(Error::Capacity(format!(
                "block of {} tokens at position {} exceeds max_seq {}",
                tokens.len(),
                state.target.len,
                self.cfg.max_seq
            )));
        }
        tokens
            .iter()
            .map(|&t| self.forward_one(false, state, t, None, collect_sublayer))
            .collect()
    }
}

fn rms_norm(x: &[f32], weight: &[f32]) -> Vec<f32> {
    let mean_sq = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (mean_sq + NORM_EPS).sqrt();
    x.iter()
        .zip(weight.iter())
        .map(|(&v, &w)| ((v as f64 * inv) as f32) * w)
        .collect()
}

/// `y = x @ W` for row-major `W[len(x)][out]`, f64 accumulation.
fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out];
    for (j, yj) in y.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (i, &xi) in x.iter().enumerate() {
            acc += xi as f64 * w[i * out + j] as f64;
        }
        *yj = acc as f32;
    }
    y
}

fn silu(x: f32) -> f32 {
    let xf = x as f64;
    (xf / (1.0 + (-xf).exp())) as f32
}
