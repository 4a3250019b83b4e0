//! Training objectives.
//!
//! Three losses share one normalization rule (divide by the number of
//! supervised tokens in the batch):
//!
//! - [`ar_loss`] — next-token cross-entropy under a causal mask and shifted
//!   heads; the first token is predicted from a begin-of-sequence token that
//!   the data pipeline prepends.
//! - [`dllm_loss`] — weighted denoising cross-entropy over masked positions,
//!   weight `1/u_eff` attached per sample at corruption time.
//! - [`warmup_loss`] — identical with every token weight forced to one.
//!
//! The module also hosts the AR/diffusion equivalence oracle. Shifted and
//! unshifted modes compute the same logit grid and differ only in target
//! indexing, so the oracle evaluates the block-size-1 diffusion machinery
//! with targets re-indexed one slot back. Under block-causal attention the
//! consuming slot cannot see the mask, which makes its logits identical to
//! the AR model's on the same clean prefix, for any parameters.

use crate::corruption::{corrupt_block, BlockClipConfig, CorruptionSample};
use crate::model::{
    forward_on_tape, AttentionMaskSpec, MaskKind, ModelConfig, Parameters, Parametrization,
};
use crate::rng::{self, Stream};
use crate::tensor::{CeTerm, Element, Tape, Tensor};
use crate::{Error, Result};

/// Corruption-cap ramp for stable continued pretraining.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WarmupConfig {
    /// Initial corruption cap, e.g. 1e-3.
    pub u_init: f64,
    /// Number of steps over which the cap ramps to one.
    pub warmup_steps: u64,
    /// Current step within the ramp.
    pub step: u64,
}

impl WarmupConfig {
    pub fn new(u_init: f64, warmup_steps: u64) -> Result<Self> {
        if !(u_init > 0.0 && u_init <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "u_init {u_init} outside (0, 1]"
            )));
        }
        if warmup_steps == 0 {
            return Err(Error::InvalidArgument("warmup_steps must be >= 1".into()));
        }
        Ok(WarmupConfig {
            u_init,
            warmup_steps,
            step: 0,
        })
    }

    pub fn at_step(mut self, step: u64) -> Result<Self> {
        if step > self.warmup_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup step {step} beyond {}",
                self.warmup_steps
            )));
        }
        self.step = step;
        Ok(self)
    }
}

/// Current corruption cap: `u_init + (1 - u_init) * s / S`.
///
/// Corruption times are then drawn from `Uniform(0, u_max)`.
pub fn warmup_umax(w: &WarmupConfig) -> f64 {
    w.u_init + (1.0 - w.u_init) * w.step as f64 / w.warmup_steps as f64
}

/// One supervised token's contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PerTokenLoss {
    /// Index of the sequence within the batch.
    pub sequence: usize,
    /// Position of the target token within its sequence.
    pub position: usize,
    /// Raw negative log-likelihood, unweighted.
    pub nll: f64,
    pub weight: f64,
}

/// Batch loss with its per-token decomposition.
#[derive(Debug, Clone)]
pub struct LossReport {
    /// Weighted mean over supervised tokens.
    pub loss: f64,
    pub per_token: Vec<PerTokenLoss>,
    pub supervised_count: usize,
    pub mean_weight: f64,
}

impl LossReport {
    fn from_terms(per_token: Vec<PerTokenLoss>) -> Self {
        let count = per_token.len();
        let weighted: f64 = per_token.iter().map(|t| t.weight * t.nll).sum();
        let weight_sum: f64 = per_token.iter().map(|t| t.weight).sum();
        LossReport {
            loss: weighted / count as f64,
            supervised_count: count,
            mean_weight: weight_sum / count as f64,
            per_token,
        }
    }
}

/// Gradients aligned with [`Parameters::entries`].
pub type ParamGrads<F> = Vec<Tensor<F>>;

fn zero_grads<F: Element>(params: &Parameters<F>) -> ParamGrads<F> {
    params
        .entries()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect()
}

fn accumulate<F: Element>(acc: &mut ParamGrads<F>, grads: &[Option<&Tensor<F>>]) {
    for (slot, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
}

fn scale_grads<F: Element>(acc: &mut ParamGrads<F>, k: f64) {
    let k = F::from_f64(k);
    for g in acc.iter_mut() {
        for v in g.data_mut() {
            *v = *v * k;
        }
    }
}

/// Which logit slot supplies the conditional for a supervised position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Unshifted heads: position i is predicted from slot i.
    SelfSlot,
    /// Shifted heads / re-indexed targets: position i is predicted from
    /// slot i-1.
    PrevSlot,
}

impl Readout {
    pub fn for_parametrization(p: Parametrization) -> Self {
        match p {
            Parametrization::Shifted => Readout::PrevSlot,
            Parametrization::Unshifted => Readout::SelfSlot,
        }
    }

    /// Logit row consumed for a target at `position`.
    pub fn slot(self, position: usize) -> Result<usize> {
        match self {
            Readout::SelfSlot => Ok(position),
            Readout::PrevSlot => position.checked_sub(1).ok_or_else(|| {
                Error::InvalidArgument(
                    "shifted readout needs a predecessor slot; position 0 has none".into(),
                )
            }),
        }
    }
}

struct BatchAccumulator<F: Element> {
    grads: Option<ParamGrads<F>>,
    per_token: Vec<PerTokenLoss>,
}

impl<F: Element> BatchAccumulator<F> {
    fn new(params: &Parameters<F>, with_grads: bool) -> Self {
        BatchAccumulator {
            grads: with_grads.then(|| zero_grads(params)),
            per_token: Vec::new(),
        }
    }

    /// Run one sequence forward, add weighted CE terms, and backprop if
    /// gradients were requested.
    #[allow(clippy::too_many_arguments)]
    fn run_sequence(
        &mut self,
        params: &Parameters<F>,
        cfg: &ModelConfig,
        mask: &AttentionMaskSpec,
        seq_index: usize,
        tokens: &[usize],
        terms: &[(usize, usize, f64)], // (target position, target token, weight)
        readout: Readout,
    ) -> Result<()> {
        let mut tape: Tape<F> = Tape::new();
        let nodes = params.register(&mut tape, self.grads.is_some());
        let logits = forward_on_tape(&mut tape, params, &nodes, cfg, tokens, mask)?;
        let ce_terms: Vec<CeTerm> = terms
            .iter()
            .map(|&(pos, target, weight)| {
                Ok(CeTerm {
                    row: readout.slot(pos)?,
                    target,
                    weight,
                })
            })
            .collect::<Result<_>>()?;
        let (loss_node, nlls) = tape.cross_entropy_rows(logits, ce_terms, 1.0)?;
        for (&(pos, _, weight), nll) in terms.iter().zip(&nlls) {
            self.per_token.push(PerTokenLoss {
                sequence: seq_index,
                position: pos,
                nll: *nll,
                weight,
            });
        }
        if let Some(acc) = &mut self.grads {
            let grads = tape.backward(loss_node)?;
            let views: Vec<Option<&Tensor<F>>> = nodes.iter().map(|&n| grads.get(n)).collect();
            accumulate(acc, &views);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(LossReport, Option<ParamGrads<F>>)> {
        if self.per_token.is_empty() {
            return Err(Error::InvalidArgument(
                "no supervised tokens in batch".into(),
            ));
        }
        let report = LossReport::from_terms(self.per_token);
        if let Some(acc) = &mut self.grads {
            // Gradients were accumulated for the weighted sum; normalize to
            // match the reported mean.
            scale_grads(acc, 1.0 / report.supervised_count as f64);
        }
        Ok((report, self.grads))
    }
}

fn ar_terms(tokens: &[usize]) -> Result<Vec<(usize, usize, f64)>> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "AR loss needs at least 2 tokens (a BOS plus one target), got {}",
            tokens.len()
        )));
    }
    Ok((1..tokens.len()).map(|i| (i, tokens[i], 1.0)).collect())
}

fn ar_loss_impl<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    batch: &[Vec<usize>],
    with_grads: bool,
) -> Result<(LossReport, Option<ParamGrads<F>>)> {
    if cfg.parametrization != Parametrization::Shifted {
        return Err(Error::InvalidArgument(
            "ar_loss requires the shifted parametrization".into(),
        ));
    }
    let mask = AttentionMaskSpec::causal();
    let mut acc = BatchAccumulator::new(params, with_grads);
    for (s, tokens) in batch.iter().enumerate() {
        let terms = ar_terms(tokens)?;
        acc.run_sequence(params, cfg, &mask, s, tokens, &terms, Readout::PrevSlot)?;
    }
    acc.finish()
}

/// Mean next-token cross-entropy over a batch of sequences.
pub fn ar_loss<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    batch: &[Vec<usize>],
) -> Result<LossReport> {
    ar_loss_impl(params, cfg, batch, false).map(|(r, _)| r)
}

/// [`ar_loss`] plus parameter gradients.
pub fn ar_loss_grad<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    batch: &[Vec<usize>],
) -> Result<(LossReport, ParamGrads<F>)> {
    ar_loss_impl(params, cfg, batch, true).map(|(r, g)| (r, g.unwrap()))
}

fn diffusion_terms(
    sample: &CorruptionSample,
    unit_weights: bool,
) -> Result<Vec<(usize, usize, f64)>> {
    let terms: Vec<(usize, usize, f64)> = sample
        .masked_positions()
        .map(|i| {
            (
                i,
                sample.x0[i],
                if unit_weights { 1.0 } else { sample.token_weight },
            )
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::InvalidArgument(
            "corruption sample has zero masked tokens".into(),
        ));
    }
    Ok(terms)
}

fn dllm_loss_impl<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    mask: &AttentionMaskSpec,
    samples: &[CorruptionSample],
    unit_weights: bool,
    readout: Readout,
    with_grads: bool,
) -> Result<(LossReport, Option<ParamGrads<F>>)> {
    let mut acc = BatchAccumulator::new(params, with_grads);
    for (s, sample) in samples.iter().enumerate() {
        let terms = diffusion_terms(sample, unit_weights)?;
        acc.run_sequence(params, cfg, mask, s, &sample.xt, &terms, readout)?;
    }
    acc.finish()
}

fn require_unshifted(cfg: &ModelConfig) -> Result<()> {
    if cfg.parametrization != Parametrization::Unshifted {
        return Err(Error::InvalidArgument(
            "denoising losses require the unshifted parametrization".into(),
        ));
    }
    Ok(())
}

/// ELBO-weighted denoising loss over masked positions.
///
/// The attention mask selects the variant: bidirectional (BiDLLM), causal
/// (ARDLLM), or block-causal (BlockDLLM).
pub fn dllm_loss<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    mask: &AttentionMaskSpec,
    samples: &[CorruptionSample],
) -> Result<LossReport> {
    require_unshifted(cfg)?;
    dllm_loss_impl(params, cfg, mask, samples, false, Readout::SelfSlot, false).map(|(r, _)| r)
}

/// [`dllm_loss`] plus parameter gradients.
pub fn dllm_loss_grad<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    mask: &AttentionMaskSpec,
    samples: &[CorruptionSample],
) -> Result<(LossReport, ParamGrads<F>)> {
    require_unshifted(cfg)?;
    dllm_loss_impl(params, cfg, mask, samples, false, Readout::SelfSlot, true)
        .map(|(r, g)| (r, g.unwrap()))
}

/// Denoising loss with the ELBO weight dropped (all token weights one).
pub fn warmup_loss<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    mask: &AttentionMaskSpec,
    samples: &[CorruptionSample],
) -> Result<LossReport> {
    require_unshifted(cfg)?;
    dllm_loss_impl(params, cfg, mask, samples, true, Readout::SelfSlot, false).map(|(r, _)| r)
}

/// [`warmup_loss`] plus parameter gradients.
pub fn warmup_loss_grad<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    mask: &AttentionMaskSpec,
    samples: &[CorruptionSample],
) -> Result<(LossReport, ParamGrads<F>)> {
    require_unshifted(cfg)?;
    dllm_loss_impl(params, cfg, mask, samples, true, Readout::SelfSlot, true)
        .map(|(r, g)| (r, g.unwrap()))
}

/// Side-by-side per-token losses from the equivalence construction.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// AR per-token losses for targets `x[0..n]`, in order.
    pub ar_nll: Vec<f64>,
    /// Block-size-1 diffusion per-token losses for the same targets.
    pub dllm_nll: Vec<f64>,
    pub max_abs_diff: f64,
}

/// The AR/diffusion equivalence oracle.
///
/// Both sides run over `[bos] + x`. The AR side is the ordinary shifted loss
/// under causal attention. The diffusion side builds one fully-masked
/// block-size-1 corruption per data token under block-causal attention and
/// consumes the logit grid with targets re-indexed one slot back, so both
/// sides read the model's conditionals for `x_i` given the same clean
/// prefix. Per-token losses must agree for any parameters.
pub fn ar_equivalence_report<F: Element>(
    params: &Parameters<F>,
    cfg: &ModelConfig,
    x: &[usize],
    bos_id: usize,
    mask_id: usize,
) -> Result<EquivalenceReport> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let mut seq = Vec::with_capacity(x.len() + 1);
    seq.push(bos_id);
    seq.extend_from_slice(x);

    let ar_cfg = ModelConfig {
        parametrization: Parametrization::Shifted,
        ..cfg.clone()
    };
    let ar = ar_loss(params, &ar_cfg, &[seq.clone()])?;
    let ar_nll: Vec<f64> = ar.per_token.iter().map(|t| t.nll).collect();

    let block_cfg = BlockClipConfig::new(1)?;
    let mask = AttentionMaskSpec {
        kind: MaskKind::BlockCausal { block_size: 1 },
        segment_ids: None,
    };
    // Never corrupt block 0: it holds the BOS, which is evidence, not a
    // target. A fully-masked size-1 block needs no randomness, but the
    // sampler interface does.
    let mut rng = rng::stream(0, Stream::Test);
    let samples: Vec<CorruptionSample> = (1..seq.len())
        .map(|j| corrupt_block(&seq, j, block_cfg, 1.0, 1.0, mask_id, &mut rng))
        .collect::<Result<_>>()?;
    let (dllm, _) = dllm_loss_impl(
        params,
        cfg,
        &mask,
        &samples,
        false,
        Readout::PrevSlot,
        false,
    )?;
    let mut dllm_by_pos: Vec<(usize, f64)> = dllm
        .per_token
        .iter()
        .map(|t| (t.position, t.nll))
        .collect();
    dllm_by_pos.sort_by_key(|&(p, _)| p);
    let dllm_nll: Vec<f64> = dllm_by_pos.into_iter().map(|(_, v)| v).collect();

    let max_abs_diff = ar_nll
        .iter()
        .zip(&dllm_nll)
        .map(|(a, d)| (a - d).abs())
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        ar_nll,
        dllm_nll,
        max_abs_diff,
    })
}
