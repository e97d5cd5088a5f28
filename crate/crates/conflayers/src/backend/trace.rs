//! Trace-replay backend: serves recorded logits and sublayer logits by
//! position, for fixture-driven tests of the filter and search machinery.
//!
//! Trace files are JSON-lines. The first line is a header
//! `{"meta": {"K": 16, "num_layers": 12}}`; every following line is
//! `{"pos": p, "final": [K floats], "sublayers": [[[K],[K]], ...]}` with
//! `sublayers` ordered by considered-layer index (`1..=num_layers-2`).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_skip_set, BackendStepOutput, CacheSide, DecoderState, ModelBackend, SublayerLogits};
use crate::error::{Error, Result};
use crate::skip::SkipSet;
use crate::TokenId;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    #[serde(rename = "K")]
    k: usize,
    num_layers: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    meta: Meta,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    pos: usize,
    #[serde(rename = "final")]
    final_logits: Vec<f32>,
    sublayers: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug)]
struct TraceRecord {
    final_logits: Vec<f32>,
    sublayers: Vec<SublayerLogits>,
}

/// Backend that replays a recorded run position by position.
#[derive(Debug)]
pub struct TraceBackend {
    k: usize,
    num_layers: usize,
    records: Vec<TraceRecord>,
}

impl TraceBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "trace file is empty".into(),
        })?;
        let header: HeaderLine =
            serde_json::from_str(&header?).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?;
        let k = header.meta.k;
        let num_layers = header.meta.num_layers;
        if k < 2 || num_layers < 4 {
            return Err(Error::Parse {
                line: 1,
                message: format!("unusable meta: K={k}, num_layers={num_layers}"),
            });
        }

        let mut records = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if rec.pos != records.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected pos {}, found {}", records.len(), rec.pos),
                });
            }
            if rec.final_logits.len() != k {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("final logits length {} != K {k}", rec.final_logits.len()),
                });
            }
            if rec.sublayers.len() != num_layers - 2 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!(
                        "expected {} sublayer pairs, found {}",
                        num_layers - 2,
                        rec.sublayers.len()
                    ),
                });
            }
            let mut sublayers = Vec::with_capacity(rec.sublayers.len());
            for (attn, ffn) in rec.sublayers {
                if attn.len() != k || ffn.len() != k {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "sublayer logit length mismatch".into(),
                    });
                }
                sublayers.push(SublayerLogits { attn, ffn });
            }
            records.push(TraceRecord {
                final_logits: rec.final_logits,
                sublayers,
            });
        }
        if records.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "trace carries no positions".into(),
            });
        }
        Ok(Self {
            k,
            num_layers,
            records,
        })
    }

    fn step_at(&self, pos: usize, skip: Option<&SkipSet>, collect: bool) -> Result<BackendStepOutput> {
        let rec = self.records.get(pos).ok_or_else(|| {
            Error::Capacity(format!(
                "replay position {pos} beyond recorded length {}",
                self.records.len()
            ))
        })?;
        let skipped = skip.map_or(0, SkipSet::len);
        let sublayer_logits = if collect {
            rec.sublayers
                .iter()
                .enumerate()
                .filter_map(|(i, sub)| {
                    let layer = i + 1;
                    if skip.is_some_and(|s| s.contains(layer)) {
                        None
                    } else {
                        Some((layer, sub.clone()))
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(BackendStepOutput {
            final_logits: rec.final_logits.clone(),
            sublayer_logits,
            layers_executed: self.num_layers - skipped,
        })
    }
}

impl ModelBackend for TraceBackend {
    fn vocab_size(&self) -> usize {
        self.k
    }

    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn max_seq(&self) -> usize {
        self.records.len()
    }

    fn new_state(&self) -> DecoderState {
        DecoderState {
            draft: CacheSide::positions_only(),
            target: CacheSide::positions_only(),
            committed: 0,
        }
    }

    fn forward_draft(
        &self,
        state: &mut DecoderState,
        _token: TokenId,
        skip_set: &SkipSet,
        collect_sublayer: bool,
    ) -> Result<BackendStepOutput> {
        check_skip_set(skip_set, self.num_layers)?;
        let out = self.step_at(state.draft.len, Some(skip_set), collect_sublayer)?;
        state.draft.len += 1;
        Ok(out)
    }

    fn forward_target(
        &self,
        state: &mut DecoderState,
        tokens: &[TokenId],
        collect_sublayer: bool,
    ) -> Result<Vec<BackendStepOutput>> {
        let mut outs = Vec::with_capacity(tokens.len());
        for _ in tokens {
            let out = self.step_at(state.target.len, None, collect_sublayer)?;
            state.target.len += 1;
            outs.push(out);
        }
        Ok(outs)
    }
}

/// Writes a trace file from a recorded sequence of step outputs. Every step
/// must carry sublayer logits for all considered layers.
pub fn write_trace<W: Write>(
    writer: &mut W,
    k: usize,
    num_layers: usize,
    steps: &[BackendStepOutput],
) -> Result<()> {
    let header = HeaderLine {
        meta: Meta { k, num_layers },
    };
    writeln!(writer, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for (pos, step) in steps.iter().enumerate() {
        let mut sublayers = Vec::with_capacity(num_layers - 2);
        for layer in 1..=num_layers - 2 {
            let sub = step.sublayer(layer).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "step at position {pos} lacks sublayer logits for layer {layer}"
                ))
            })?;
            sublayers.push((sub.attn.clone(), sub.ffn.clone()));
        }
        let rec = RecordLine {
            pos,
            final_logits: step.final_logits.clone(),
            sublayers,
        };
        writeln!(writer, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}
