//! Block-wise iterative denoising decoding, plus a greedy AR baseline.
//!
//! The block decoder walks left to right over blocks anchored at position
//! zero (matching the training-time block-causal layout), fills the whole
//! generation region with mask tokens up front, and repeatedly commits the
//! highest-confidence masked positions of the current block until none
//! remain. Confidence is the maximum softmax probability at a masked
//! position over committable tokens; ties break toward the lowest position
//! index, so decoding is fully deterministic.
//!
//! The first committed eos ends generation: output is truncated before it.

use crate::model::{forward, AttentionMaskSpec, ModelConfig, Parameters, Parametrization};
use crate::objectives::Readout;
use crate::tensor::{softmax_row, Element};
use crate::{Error, Result};

/// Reserved vocabulary entries the decoders must know about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub mask_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl SpecialTokens {
    /// Mask and BOS are never legal outputs.
    pub fn committable(&self, token: usize) -> bool {
        token != self.mask_id && token != self.bos_id
    }
}

/// Block decoding configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub block_size: usize,
    pub steps_per_block: usize,
    /// Positions committed per denoising step.
    pub commits_per_step: usize,
    pub max_new_tokens: usize,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.steps_per_block == 0 || self.commits_per_step == 0 {
            return Err(Error::InvalidArgument(
                "block_size, steps_per_block, commits_per_step must be >= 1".into(),
            ));
        }
        if self.commits_per_step * self.steps_per_block < self.block_size {
            return Err(Error::InvalidArgument(format!(
                "{} commits/step x {} steps cannot complete a block of {}",
                self.commits_per_step, self.steps_per_block, self.block_size
            )));
        }
        Ok(())
    }
}

/// One denoising step, as observed by tests.
#[derive(Debug, Clone)]
pub struct DecodeStepTrace {
    /// Index of the block being decoded (anchored at position 0).
    pub block: usize,
    /// Positions committed in this step, with their tokens.
    pub committed: Vec<(usize, usize)>,
    /// Mask flags over the whole working buffer after the step.
    pub mask_flags: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Prompt followed by generated tokens (eos and anything after removed).
    pub tokens: Vec<usize>,
    pub trace: Vec<DecodeStepTrace>,
}

fn check_budget(cfg: &ModelConfig, prompt: &[usize], max_new_tokens: usize) -> Result<usize> {
    let limit = prompt.len() + max_new_tokens;
    if limit > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: limit,
            max_len: cfg.max_len,
        });
    }
    Ok(limit)
}

/// Highest committable token and its probability for one logit row.
fn best_committable<F: Element>(row: &[F], specials: &SpecialTokens) -> (usize, f64) {
    let probs = softmax_row(row);
    let mut best_token = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (token, &p) in probs.iter().enumerate() {
        if specials.committable(token) && p > best_p {
            best_p = p;
            best_token = token;
        }
    }
    (best_token, best_p)
}

/// Truncate at the first generated eos, if any.
fn truncate_at_eos(tokens: Vec<usize>, prompt_len: usize, eos_id: usize) -> Vec<usize> {
    if let Some(pos) = tokens[prompt_len..].iter().position(|&t| t == eos_id) {
        tokens[..prompt_len + pos].to_vec()
    } else {
        tokens
    }
}

/// Block-wise denoising decode with a step trace.
pub fn decode_blockwise_traced<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    specials: &SpecialTokens,
    prompt: &[usize],
    dcfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    dcfg.validate()?;
    let limit = check_budget(cfg, prompt, dcfg.max_new_tokens)?;
    let readout = Readout::for_parametrization(cfg.parametrization);
    if prompt.is_empty() && readout == Readout::PrevSlot {
        return Err(Error::InvalidArgument(
            "shifted readout cannot decode from an empty prompt".into(),
        ));
    }
    let mut trace = Vec::new();
    if limit == prompt.len() {
        return Ok(DecodeOutput {
            tokens: prompt.to_vec(),
            trace,
        });
    }

    // Materialize the whole generation region as masks; blocks beyond the
    // current one stay fully masked until their turn.
    let mut working = prompt.to_vec();
    working.resize(limit, specials.mask_id);
    let mut masked: Vec<bool> = (0..limit).map(|i| i >= prompt.len()).collect();
    let mask_spec = AttentionMaskSpec::block_causal(dcfg.block_size);

    let first_block = prompt.len() / dcfg.block_size;
    let last_block = (limit - 1) / dcfg.block_size;
    for block in first_block..=last_block {
        let start = (block * dcfg.block_size).max(prompt.len());
        let end = ((block + 1) * dcfg.block_size).min(limit);
        let mut steps = 0usize;
        while masked[start..end].iter().any(|&m| m) {
            let logits = forward(params, cfg, &working, &mask_spec)?;
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
            for pos in start..end {
                if !masked[pos] {
                    continue;
                }
                let slot = readout.slot(pos)?;
                let (token, confidence) = best_committable(logits.row(slot), specials);
                candidates.push((pos, token, confidence));
            }
            // Highest confidence first; equal confidences resolve to the
            // lowest position because the sort is stable over ascending
            // positions.
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
            let take = dcfg.commits_per_step.min(candidates.len());
            let mut committed = Vec::with_capacity(take);
            for &(pos, token, _) in candidates.iter().take(take) {
                working[pos] = token;
                masked[pos] = false;
                committed.push((pos, token));
            }
            steps += 1;
            trace.push(DecodeStepTrace {
                block,
                committed,
                mask_flags: masked.clone(),
            });
            debug_assert!(steps <= dcfg.steps_per_block);
        }
        // A committed eos ends generation; content after it is discarded.
        if working[prompt.len()..end].contains(&specials.eos_id) {
            return Ok(DecodeOutput {
                tokens: truncate_at_eos(working[..end].to_vec(), prompt.len(), specials.eos_id),
                trace,
            });
        }
    }
    Ok(DecodeOutput {
        tokens: truncate_at_eos(working, prompt.len(), specials.eos_id),
        trace,
    })
}

/// Block-wise denoising decode; prompt tokens appear unchanged as a prefix.
pub fn decode_blockwise<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    specials: &SpecialTokens,
    prompt: &[usize],
    dcfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    decode_blockwise_traced(params, cfg, specials, prompt, dcfg).map(|o| o.tokens)
}

/// Greedy next-token decoding under a causal mask.
pub fn decode_ar<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    specials: &SpecialTokens,
    prompt: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    if cfg.parametrization != Parametrization::Shifted {
        return Err(Error::InvalidArgument(
            "decode_ar requires the shifted parametrization".into(),
        ));
    }
    let limit = check_budget(cfg, prompt, max_new_tokens)?;
    if prompt.is_empty() {
        if max_new_tokens == 0 {
            return Ok(Vec::new());
        }
        return Err(Error::InvalidArgument(
            "AR decoding needs a non-empty prompt (prepend a BOS)".into(),
        ));
    }
    let mask = AttentionMaskSpec::causal();
    let mut working = prompt.to_vec();
    while working.len() < limit {
        let logits = forward(params, cfg, &working, &mask)?;
        let (token, _) = best_committable(logits.row(working.len() - 1), specials);
        if token == specials.eos_id {
            return Ok(working);
        }
        working.push(token);
    }
    Ok(working)
}
