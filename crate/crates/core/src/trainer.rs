//! Optimization loop, sequence packing, and curriculum pipelines.
//!
//! A [`TrainRun`] is an ordered list of [`CurriculumStage`]s sharing one
//! model; parameters carry across stage boundaries verbatim (through a
//! checkpoint round-trip, which the runner verifies bit-exactly). Stage
//! objectives select the attention pattern, the parametrization, and the
//! corruption mode:
//!
//! - `Ar` — shifted heads, causal mask, clean BOS-prefixed buffers
//! - `ArDllm` — unshifted heads, causal mask, full-sequence masking
//! - `BiDllm` — unshifted heads, bidirectional mask, full-sequence masking
//! - `BlockDllm(B)` — unshifted heads, block-causal mask, clipped block
//!   corruption with the fallback rule
//!
//! Full-sequence corruption can produce zero masked tokens at low rates; the
//! batch builder resamples such sequences. An all-clean sample contributes
//! zero gradient, so conditioning on at least one mask leaves the expected
//! update direction unchanged.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::corruption::{
    block_count, clip_block_rate, corrupt_block, corrupt_full, BlockClipConfig, CorruptionSample,
};
use crate::decoding::{decode_blockwise, DecodeConfig, SpecialTokens};
use crate::model::{
    init_params, validate_shapes, AttentionMaskSpec, ModelConfig, Parameters, Parametrization,
};
use crate::objectives::{
    ar_loss_grad, dllm_loss_grad, warmup_loss_grad, warmup_umax, ParamGrads, WarmupConfig,
};
use crate::rng::{self, Stream};
use crate::tensor::Element;
use crate::{Error, Result};

/// Training objective of one curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Ar,
    ArDllm,
    BiDllm,
    BlockDllm { block_size: usize },
}

impl Objective {
    pub fn parametrization(&self) -> Parametrization {
        match self {
            Objective::Ar => Parametrization::Shifted,
            _ => Parametrization::Unshifted,
        }
    }

    pub fn mask_spec(&self) -> AttentionMaskSpec {
        match self {
            Objective::Ar | Objective::ArDllm => AttentionMaskSpec::causal(),
            Objective::BiDllm => AttentionMaskSpec::bidirectional(),
            Objective::BlockDllm { block_size } => AttentionMaskSpec::block_causal(*block_size),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Objective::Ar => "ar".into(),
            Objective::ArDllm => "ardllm".into(),
            Objective::BiDllm => "bidllm".into(),
            Objective::BlockDllm { block_size } => format!("blockdllm{block_size}"),
        }
    }
}

/// Linear peak-to-final learning-rate schedule over a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub final_lr: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak: lr,
            final_lr: lr,
        }
    }

    pub fn at(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.peak;
        }
        let frac = step as f64 / (total - 1) as f64;
        self.peak + (self.final_lr - self.peak) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumStage {
    pub name: String,
    pub objective: Objective,
    pub steps: u64,
    pub lr: LrSchedule,
    /// Corruption-cap ramp; applies to diffusion objectives only. Steps past
    /// the ramp revert to the weighted loss with t ~ U(0,1).
    pub warmup: Option<WarmupConfig>,
}

impl CurriculumStage {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "stage {} has zero steps",
                self.name
            )));
        }
        if let Objective::BlockDllm { block_size } = self.objective {
            if block_size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage {} has block size 0",
                    self.name
                )));
            }
        }
        if self.warmup.is_some() && self.objective == Objective::Ar {
            return Err(Error::InvalidArgument(format!(
                "stage {}: corruption warmup is meaningless for the AR objective",
                self.name
            )));
        }
        Ok(())
    }
}

/// AdamW hyperparameters plus the global-norm clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer.
///
/// Weight decay applies to rank-2 tensors only; norm gains and biases are
/// exempt.
#[derive(Debug, Clone)]
pub struct AdamW<F: Element> {
    cfg: OptimizerConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Element> AdamW<F> {
    pub fn new(cfg: OptimizerConfig, params: &Parameters<F>) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|(_, t)| vec![F::zero(); t.numel()])
            .collect::<Vec<_>>();
        AdamW {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Gradients must already be clipped if clipping is wanted.
    pub fn update(&mut self, params: &mut Parameters<F>, grads: &ParamGrads<F>, lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, (_, tensor)) in params.entries_mut().iter_mut().enumerate() {
            let decay = if tensor.shape().len() >= 2 {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let g = &grads[i];
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j].as_f64();
                let m = self.m[i][j].as_f64() * b1 + (1.0 - b1) * gj;
                let v = self.v[i][j].as_f64() * b2 + (1.0 - b2) * gj * gj;
                self.m[i][j] = F::from_f64(m);
                self.v[i][j] = F::from_f64(v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let pj = p.as_f64();
                *p = F::from_f64(pj - lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + decay * pj));
            }
        }
    }
}

/// Global L2 norm over a gradient set.
pub fn global_grad_norm<F: Element>(grads: &ParamGrads<F>) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Scale gradients so the global norm is at most `clip`; returns the
/// pre-clip norm.
pub fn clip_global_norm<F: Element>(grads: &mut ParamGrads<F>, clip: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > clip && norm > 0.0 {
        let k = F::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * k;
            }
        }
    }
    norm
}

/// One packed training buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBuffer {
    pub tokens: Vec<usize>,
    /// Per-position sample label; `PAD_SEGMENT` marks trailing eos padding.
    pub segment_ids: Vec<u32>,
}

pub const PAD_SEGMENT: u32 = u32::MAX;

/// Concatenate whole samples, each followed by 1..=4 eos tokens (uniform),
/// into fixed-size buffers padded with eos. Samples never split across
/// buffers; packed positions stay mutually visible under bidirectional
/// attention.
pub fn pack_sequences(
    corpus: &[Vec<usize>],
    context_len: usize,
    eos_min: usize,
    eos_max: usize,
    eos_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PackedBuffer>> {
    if eos_min == 0 || eos_min > eos_max {
        return Err(Error::InvalidArgument(format!(
            "eos run range [{eos_min}, {eos_max}] invalid"
        )));
    }
    let mut buffers = Vec::new();
    let mut tokens: Vec<usize> = Vec::with_capacity(context_len);
    let mut segments: Vec<u32> = Vec::with_capacity(context_len);
    let mut segment: u32 = 0;
    let mut close = |tokens: &mut Vec<usize>, segments: &mut Vec<u32>| {
        if tokens.is_empty() {
            return;
        }
        tokens.resize(context_len, eos_id);
        segments.resize(context_len, PAD_SEGMENT);
        buffers.push(PackedBuffer {
            tokens: std::mem::take(tokens),
            segment_ids: std::mem::take(segments),
        });
    };
    for (index, sample) in corpus.iter().enumerate() {
        if sample.len() + eos_min > context_len {
            return Err(Error::SampleTooLong {
                index,
                len: sample.len(),
                context_len,
            });
        }
        let run = rng.gen_range(eos_min..=eos_max);
        if tokens.len() + sample.len() + run > context_len {
            close(&mut tokens, &mut segments);
        }
        tokens.extend_from_slice(sample);
        tokens.extend(std::iter::repeat(eos_id).take(run));
        segments.extend(std::iter::repeat(segment).take(sample.len() + run));
        segment += 1;
    }
    close(&mut tokens, &mut segments);
    Ok(buffers)
}

/// Step metrics, one record per optimizer step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Current corruption cap, present while a warmup ramp is active.
    pub u_max: Option<f64>,
    pub tokens_seen: u64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// The record with timing removed; two runs of the same manifest must
    /// agree on this exactly.
    pub fn deterministic_view(&self) -> MetricsRecord {
        MetricsRecord {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

/// Mid-training decoding evaluation record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub stage: String,
    pub block_size: usize,
    pub exact_match: f64,
}

/// Held-out exact-match evaluation: decode each prompt and require the
/// first `gold.len()` generated tokens to equal the gold continuation.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Run every N steps (and at the end of each stage). Zero disables.
    pub every: u64,
    pub prompts: Vec<(Vec<usize>, Vec<usize>)>,
    pub block_sizes: Vec<usize>,
}

/// Data the trainer draws batches from.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub corpus: Vec<Vec<usize>>,
    pub context_len: usize,
    pub batch_size: usize,
    pub specials: SpecialTokens,
}

/// A complete training configuration.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub stages: Vec<CurriculumStage>,
    pub optimizer: OptimizerConfig,
    pub data: TrainData,
    pub seed: u64,
    /// When set, the total step budget must match exactly; used to enforce
    /// compute parity across compared schemes.
    pub compare_total_steps: Option<u64>,
    pub eval: Option<EvalConfig>,
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("no stages configured".into()));
        }
        for stage in &self.stages {
            stage.validate()?;
        }
        if self.data.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        // AR buffers get a BOS prepended, so the model must fit one extra slot.
        if self.model.max_len < self.data.context_len + 1 {
            return Err(Error::InvalidArgument(format!(
                "max_len {} too small for context_len {} plus BOS",
                self.model.max_len, self.data.context_len
            )));
        }
        if let Some(total) = self.compare_total_steps {
            let sum: u64 = self.stages.iter().map(|s| s.steps).sum();
            if sum != total {
                return Err(Error::InvalidArgument(format!(
                    "compute-parity violation: stages sum to {sum} steps, expected {total}"
                )));
            }
        }
        Ok(())
    }
}

/// A prepared batch, matching its stage objective.
#[derive(Debug, Clone)]
pub enum PreparedBatch {
    Ar(Vec<Vec<usize>>),
    Diffusion {
        samples: Vec<CorruptionSample>,
        mask: AttentionMaskSpec,
        /// Warmup drops the ELBO weight.
        unit_weights: bool,
    },
}

impl PreparedBatch {
    pub fn token_count(&self) -> u64 {
        match self {
            PreparedBatch::Ar(seqs) => seqs.iter().map(|s| s.len() as u64).sum(),
            PreparedBatch::Diffusion { samples, .. } => {
                samples.iter().map(|s| s.xt.len() as u64).sum()
            }
        }
    }
}

/// Live training state threaded through [`train_step`].
pub struct TrainState<F: Element> {
    pub params: Parameters<F>,
    pub optimizer: AdamW<F>,
    pub model: ModelConfig,
    pub global_step: u64,
    pub tokens_seen: u64,
    started: Instant,
}

impl<F: Element> TrainState<F> {
    pub fn new(params: Parameters<F>, optimizer: AdamW<F>, model: ModelConfig) -> Self {
        TrainState {
            params,
            optimizer,
            model,
            global_step: 0,
            tokens_seen: 0,
            started: Instant::now(),
        }
    }
}

const CORRUPTION_RETRIES: usize = 1000;

/// Corrupt one sequence for a diffusion objective, resampling until at
/// least one token is masked (full-sequence mode only; block mode's
/// fallback already guarantees supervision).
fn corrupt_for_objective(
    objective: Objective,
    tokens: &[usize],
    mask_id: usize,
    u_max: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionSample> {
    match objective {
        Objective::Ar => Err(Error::InvalidArgument(
            "AR objective takes clean batches".into(),
        )),
        Objective::ArDllm | Objective::BiDllm => {
            for _ in 0..CORRUPTION_RETRIES {
                let t = rng.gen::<f64>() * u_max.unwrap_or(1.0);
                let sample = corrupt_full(tokens, t, mask_id, rng)?;
                if sample.masked_count() > 0 {
                    return Ok(sample);
                }
            }
            Err(Error::InvalidArgument(
                "could not draw a supervised corruption sample".into(),
            ))
        }
        Objective::BlockDllm { block_size } => {
            let cfg = BlockClipConfig::new(block_size)?;
            let t = rng.gen::<f64>() * u_max.unwrap_or(1.0);
            let u_blk = clip_block_rate(t, block_size)?;
            let block = rng.gen_range(0..block_count(tokens.len(), cfg));
            corrupt_block(tokens, block, cfg, u_blk, t, mask_id, rng)
        }
    }
}

/// Assemble the next batch for a stage, cycling over packed buffers.
pub fn prepare_batch(
    stage: &CurriculumStage,
    buffers: &[PackedBuffer],
    data: &TrainData,
    step_in_stage: u64,
    u_max: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    if buffers.is_empty() {
        return Err(Error::InvalidArgument("empty packed corpus".into()));
    }
    let picks = (0..data.batch_size)
        .map(|i| &buffers[((step_in_stage * data.batch_size as u64) as usize + i) % buffers.len()]);
    match stage.objective {
        Objective::Ar => {
            let seqs = picks
                .map(|b| {
                    let mut seq = Vec::with_capacity(b.tokens.len() + 1);
                    seq.push(data.specials.bos_id);
                    seq.extend_from_slice(&b.tokens);
                    seq
                })
                .collect();
            Ok(PreparedBatch::Ar(seqs))
        }
        objective => {
            let samples = picks
                .map(|b| {
                    corrupt_for_objective(objective, &b.tokens, data.specials.mask_id, u_max, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedBatch::Diffusion {
                samples,
                mask: objective.mask_spec(),
                unit_weights: u_max.is_some(),
            })
        }
    }
}

/// One optimizer update. Returns metrics with the pre-clip gradient norm.
pub fn train_step<F: Element>(
    state: &mut TrainState<F>,
    batch: &PreparedBatch,
    lr: f64,
    u_max: Option<f64>,
    stage_name: &str,
    clip_norm: f64,
) -> Result<MetricsRecord> {
    let (report, mut grads) = match batch {
        PreparedBatch::Ar(seqs) => ar_loss_grad(&state.params, &state.model, seqs)?,
        PreparedBatch::Diffusion {
            samples,
            mask,
            unit_weights,
        } => {
            if *unit_weights {
                warmup_loss_grad(&state.params, &state.model, mask, samples)?
            } else {
                dllm_loss_grad(&state.params, &state.model, mask, samples)?
            }
        }
    };
    if !report.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: stage_name.to_string(),
            step: state.global_step,
        });
    }
    let grad_norm = clip_global_norm(&mut grads, clip_norm);
    state.optimizer.update(&mut state.params, &grads, lr);
    state.tokens_seen += batch.token_count();
    let record = MetricsRecord {
        step: state.global_step,
        stage: stage_name.to_string(),
        loss: report.loss,
        grad_norm,
        u_max,
        tokens_seen: state.tokens_seen,
        wall_time_s: state.started.elapsed().as_secs_f64(),
    };
    state.global_step += 1;
    Ok(record)
}

/// Everything a finished run hands back.
pub struct RunOutcome<F: Element> {
    pub params: Parameters<F>,
    /// Parameters at the end of each stage, in order.
    pub stage_params: Vec<(String, Parameters<F>)>,
    pub metrics: Vec<MetricsRecord>,
    pub evals: Vec<EvalRecord>,
}

fn run_eval<F: Element>(
    state: &TrainState<F>,
    eval: &EvalConfig,
    data: &TrainData,
    stage_name: &str,
    out: &mut Vec<EvalRecord>,
) -> Result<()> {
    for &block_size in &eval.block_sizes {
        let dcfg = DecodeConfig {
            block_size,
            steps_per_block: block_size,
            commits_per_step: 1,
            max_new_tokens: eval
                .prompts
                .iter()
                .map(|(_, gold)| gold.len())
                .max()
                .unwrap_or(0)
                .max(1),
        };
        let mut hits = 0usize;
        for (prompt, gold) in &eval.prompts {
            let decoded =
                decode_blockwise(&state.params, &state.model, &data.specials, prompt, &dcfg)?;
            let generated = &decoded[prompt.len()..];
            if generated.len() >= gold.len() && &generated[..gold.len()] == gold.as_slice() {
                hits += 1;
            }
        }
        out.push(EvalRecord {
            step: state.global_step,
            stage: stage_name.to_string(),
            block_size,
            exact_match: hits as f64 / eval.prompts.len().max(1) as f64,
        });
    }
    Ok(())
}

/// Execute all stages, carrying parameters across boundaries and streaming
/// metrics through `sink` (flushed per step by the caller).
pub fn run_curriculum<F: Element>(
    run: &TrainRun,
    initial: Option<Parameters<F>>,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<RunOutcome<F>> {
    run.validate()?;
    let params = match initial {
        Some(p) => {
            validate_shapes(&p, &run.model)?;
            p
        }
        None => init_params(&run.model, run.seed)?,
    };
    let optimizer = AdamW::new(run.optimizer, &params);
    let mut state = TrainState::new(params, optimizer, run.model.clone());
    let mut pack_rng = rng::stream(run.seed, Stream::Packing);
    let buffers = pack_sequences(
        &run.data.corpus,
        run.data.context_len,
        1,
        4,
        run.data.specials.eos_id,
        &mut pack_rng,
    )?;
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let mut stage_params = Vec::new();

    for (stage_index, stage) in run.stages.iter().enumerate() {
        state.model.parametrization = stage.objective.parametrization();
        for step_in_stage in 0..stage.steps {
            let u_max = match &stage.warmup {
                Some(w) if step_in_stage < w.warmup_steps => {
                    Some(warmup_umax(&w.at_step(step_in_stage)?))
                }
                _ => None,
            };
            let mut corrupt_rng =
                rng::indexed(run.seed, Stream::Corruption, state.global_step);
            let batch = prepare_batch(
                stage,
                &buffers,
                &run.data,
                step_in_stage,
                u_max,
                &mut corrupt_rng,
            )?;
            let lr = stage.lr.at(step_in_stage, stage.steps);
            let record = train_step(
                &mut state,
                &batch,
                lr,
                u_max,
                &stage.name,
                run.optimizer.clip_norm,
            )?;
            sink(&record);
            metrics.push(record);
            if let Some(eval) = &run.eval {
                if eval.every > 0 && state.global_step % eval.every == 0 {
                    run_eval(&state, eval, &run.data, &stage.name, &mut evals)?;
                }
            }
        }
        // Stage boundary: parameters pass through a checkpoint round-trip and
        // must come back bit-identical.
        let bytes = checkpoint::to_bytes(&state.params);
        let restored: Parameters<F> = checkpoint::from_bytes(&bytes)?;
        debug_assert!(restored == state.params);
        state.params = restored;
        stage_params.push((stage.name.clone(), state.params.clone()));
        if let Some(eval) = &run.eval {
            if eval.every > 0 && stage_index + 1 == run.stages.len() {
                run_eval(&state, eval, &run.data, &stage.name, &mut evals)?;
            }
        }
    }
    Ok(RunOutcome {
        params: state.params,
        stage_params,
        metrics,
        evals,
    })
}

/// The compared curricula: schemes (1)-(3) plus the recommended AR-to-
/// small-block pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumScheme {
    /// (1) AR then BiDLLM continued pretraining.
    ArThenBiDllm,
    /// (2) causal-structured diffusion then BiDLLM.
    ArDllmThenBiDllm,
    /// (3) BiDLLM from the start.
    BiDllmOnly,
    /// Recommended: AR then small-block diffusion.
    ArThenBlockDllm { block_size: usize },
}

/// Build the stage list for a scheme under a fixed total step budget.
/// Two-stage schemes split the budget in half; the second stage ramps its
/// corruption cap over the first half of its steps.
pub fn scheme_stages(
    scheme: CurriculumScheme,
    total_steps: u64,
    lr: LrSchedule,
    warmup_u_init: f64,
) -> Result<Vec<CurriculumStage>> {
    if total_steps < 2 {
        return Err(Error::InvalidArgument("budget too small".into()));
    }
    let first = total_steps / 2;
    let second = total_steps - first;
    let cpt_warmup = |steps: u64| WarmupConfig::new(warmup_u_init, (steps / 2).max(1));
    let stages = match scheme {
        CurriculumScheme::ArThenBiDllm => vec![
            CurriculumStage {
                name: "ar".into(),
                objective: Objective::Ar,
                steps: first,
                lr,
                warmup: None,
            },
            CurriculumStage {
                name: "bidllm-cpt".into(),
                objective: Objective::BiDllm,
                steps: second,
                lr,
                warmup: Some(cpt_warmup(second)?),
            },
        ],
        CurriculumScheme::ArDllmThenBiDllm => vec![
            CurriculumStage {
                name: "ardllm".into(),
                objective: Objective::ArDllm,
                steps: first,
                lr,
                warmup: Some(cpt_warmup(first)?),
            },
            CurriculumStage {
                name: "bidllm-cpt".into(),
                objective: Objective::BiDllm,
                steps: second,
                lr,
                warmup: Some(cpt_warmup(second)?),
            },
        ],
        CurriculumScheme::BiDllmOnly => vec![CurriculumStage {
            name: "bidllm".into(),
            objective: Objective::BiDllm,
            steps: total_steps,
            lr,
            warmup: Some(cpt_warmup(total_steps)?),
        }],
        CurriculumScheme::ArThenBlockDllm { block_size } => vec![
            CurriculumStage {
                name: "ar".into(),
                objective: Objective::Ar,
                steps: first,
                lr,
                warmup: None,
            },
            CurriculumStage {
                name: format!("blockdllm{block_size}-cpt"),
                objective: Objective::BlockDllm { block_size },
                steps: second,
                lr,
                warmup: Some(cpt_warmup(second)?),
            },
        ],
    };
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn specials() -> SpecialTokens {
        SpecialTokens {
            mask_id: 11,
            bos_id: 10,
            eos_id: 9,
        }
    }

    fn model(parametrization: Parametrization) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 33,
            parametrization,
        }
    }

    fn toy_corpus(n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| vec![i % 9, (i + 1) % 9, (i + 2) % 9, (2 * i) % 9])
            .collect()
    }

    fn toy_run(stages: Vec<CurriculumStage>, seed: u64) -> TrainRun {
        TrainRun {
            model: model(Parametrization::Shifted),
            stages,
            optimizer: OptimizerConfig::default(),
            data: TrainData {
                corpus: toy_corpus(24),
                context_len: 32,
                batch_size: 2,
                specials: specials(),
            },
            seed,
            compare_total_steps: None,
            eval: None,
        }
    }

    #[test]
    fn packing_single_sample_layout() {
        let mut rng = rng::stream(0, Stream::Test);
        let sample = vec![1usize, 2, 3, 4];
        let buffers = pack_sequences(&[sample.clone()], 8, 1, 4, 0, &mut rng).unwrap();
        assert_eq!(buffers.len(), 1);
        let b = &buffers[0];
        assert_eq!(b.tokens.len(), 8);
        assert_eq!(&b.tokens[..4], &sample[..]);
        let run = b.segment_ids.iter().filter(|&&s| s == 0).count() - 4;
        assert!((1..=4).contains(&run), "eos run length {run}");
        assert!(b.tokens[4..].iter().all(|&t| t == 0));
    }

    #[test]
    fn packing_empty_corpus_and_oversized_sample() {
        let mut rng = rng::stream(1, Stream::Test);
        assert!(pack_sequences(&[], 8, 1, 4, 0, &mut rng).unwrap().is_empty());
        let long = vec![1usize; 8];
        match pack_sequences(&[vec![1, 2], long], 8, 1, 4, 0, &mut rng) {
            Err(Error::SampleTooLong { index: 1, .. }) => {}
            other => panic!("expected SampleTooLong, got {other:?}"),
        }
    }

    #[test]
    fn eos_run_lengths_are_uniform() {
        let mut rng = rng::stream(2, Stream::Test);
        let corpus: Vec<Vec<usize>> = (0..10_000).map(|i| vec![1 + (i % 5), 2, 3]).collect();
        let buffers = pack_sequences(&corpus, 64, 1, 4, 0, &mut rng).unwrap();
        let mut histogram = [0u64; 5];
        for b in &buffers {
            let mut segs: Vec<u32> = b
                .segment_ids
                .iter()
                .copied()
                .filter(|&s| s != PAD_SEGMENT)
                .collect();
            segs.dedup();
            for seg in segs {
                let positions: Vec<usize> = (0..b.tokens.len())
                    .filter(|&i| b.segment_ids[i] == seg)
                    .collect();
                let run = positions
                    .iter()
                    .rev()
                    .take_while(|&&i| b.tokens[i] == 0)
                    .count();
                assert!((1..=4).contains(&run));
                histogram[run] += 1;
            }
        }
        let total: u64 = histogram.iter().sum();
        assert_eq!(total, 10_000);
        let expect = total as f64 / 4.0;
        let sigma = (total as f64 * 0.25 * 0.75).sqrt();
        for k in 1..=4 {
            assert!(
                (histogram[k] as f64 - expect).abs() <= 3.0 * sigma,
                "run length {k}: {} vs {expect}",
                histogram[k]
            );
        }
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut params: Parameters<f64> = Parameters::from_entries(vec![(
            "w".into(),
            Tensor::from_vec(&[1, 2], vec![0.5, -0.25]).unwrap(),
        )]);
        let grads = vec![Tensor::from_vec(&[1, 2], vec![0.2, -0.4]).unwrap()];
        let mut opt = AdamW::new(cfg, &params);
        let lr = 0.1;
        opt.update(&mut params, &grads, lr);
        // From zero moments: m_hat = g, v_hat = g^2, so the step is
        // -lr * g / (|g| + eps) = -lr * sign(g), up to eps.
        let w = params.get("w").unwrap();
        for (j, &g) in [0.2f64, -0.4].iter().enumerate() {
            let want = [0.5, -0.25][j] - lr * (g / (g.abs() + cfg.eps));
            assert!((w.at(j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_zero_grads_zero_decay_is_identity() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut params: Parameters<f64> = Parameters::from_entries(vec![(
            "w".into(),
            Tensor::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap(),
        )]);
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[2, 1])];
        let mut opt = AdamW::new(cfg, &params);
        opt.update(&mut params, &grads, 0.01);
        assert_eq!(params, before);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![Tensor::from_vec(&[1, 2], vec![3.0f64, 4.0]).unwrap()];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((global_grad_norm(&grads) - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::from_vec(&[1, 2], vec![0.3f64, 0.4]).unwrap()];
        let pre = clip_global_norm(&mut small, 1.0);
        assert!((pre - 0.5).abs() < 1e-12);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn quadratic_probe_loss_strictly_decreases() {
        // Convex sanity oracle: fit a fixed target vector with AdamW.
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            clip_norm: 1e9,
            ..OptimizerConfig::default()
        };
        let target = [0.7f64, -1.3, 0.2, 2.0];
        let mut params: Parameters<f64> = Parameters::from_entries(vec![(
            "p".into(),
            Tensor::from_vec(&[1, 4], vec![3.0, 3.0, 3.0, 3.0]).unwrap(),
        )]);
        let mut opt = AdamW::new(cfg, &params);
        let loss_of = |p: &Parameters<f64>| -> f64 {
            p.get("p")
                .unwrap()
                .data()
                .iter()
                .zip(&target)
                .map(|(x, t)| (x - t) * (x - t))
                .sum()
        };
        let mut prev = loss_of(&params);
        for _ in 0..100 {
            let grads = vec![Tensor::from_vec(
                &[1, 4],
                params
                    .get("p")
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&target)
                    .map(|(x, t)| 2.0 * (x - t))
                    .collect(),
            )
            .unwrap()];
            opt.update(&mut params, &grads, 0.02);
            let now = loss_of(&params);
            assert!(now < prev, "loss must strictly decrease: {now} vs {prev}");
            prev = now;
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let stages = vec![CurriculumStage {
            name: "ar".into(),
            objective: Objective::Ar,
            steps: 3,
            lr: LrSchedule::constant(0.0),
            warmup: None,
        }];
        let run = toy_run(stages, 7);
        let init: Parameters<f32> = init_params(&run.model, run.seed).unwrap();
        let outcome = run_curriculum::<f32>(&run, None, |_| {}).unwrap();
        assert_eq!(outcome.params, init);
    }

    #[test]
    fn identical_seeds_give_identical_metric_streams() {
        let stages = |n| {
            vec![
                CurriculumStage {
                    name: "ar".into(),
                    objective: Objective::Ar,
                    steps: n,
                    lr: LrSchedule::constant(3e-3),
                    warmup: None,
                },
                CurriculumStage {
                    name: "bidllm".into(),
                    objective: Objective::BiDllm,
                    steps: n,
                    lr: LrSchedule::constant(3e-3),
                    warmup: Some(WarmupConfig::new(1e-3, n).unwrap()),
                },
            ]
        };
        let a = run_curriculum::<f32>(&toy_run(stages(4), 3), None, |_| {}).unwrap();
        let b = run_curriculum::<f32>(&toy_run(stages(4), 3), None, |_| {}).unwrap();
        let va: Vec<_> = a.metrics.iter().map(|m| m.deterministic_view()).collect();
        let vb: Vec<_> = b.metrics.iter().map(|m| m.deterministic_view()).collect();
        assert_eq!(va, vb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn stage_boundary_preserves_parameters() {
        let stages = vec![
            CurriculumStage {
                name: "ar".into(),
                objective: Objective::Ar,
                steps: 2,
                lr: LrSchedule::constant(1e-3),
                warmup: None,
            },
            CurriculumStage {
                name: "blockdllm".into(),
                objective: Objective::BlockDllm { block_size: 4 },
                steps: 2,
                lr: LrSchedule::constant(0.0),
                warmup: None,
            },
        ];
        let outcome = run_curriculum::<f32>(&toy_run(stages, 5), None, |_| {}).unwrap();
        // The second stage ran at zero lr, so its parameters equal stage 1's
        // output: boundary carried them over unchanged.
        assert_eq!(outcome.stage_params[0].1, outcome.stage_params[1].1);
    }

    #[test]
    fn compute_parity_flag_is_enforced() {
        let stages = vec![CurriculumStage {
            name: "ar".into(),
            objective: Objective::Ar,
            steps: 5,
            lr: LrSchedule::constant(1e-3),
            warmup: None,
        }];
        let mut run = toy_run(stages, 0);
        run.compare_total_steps = Some(6);
        assert!(run_curriculum::<f32>(&run, None, |_| {}).is_err());
        run.compare_total_steps = Some(5);
        assert!(run_curriculum::<f32>(&run, None, |_| {}).is_ok());
    }

    #[test]
    fn scheme_budgets_are_equal() {
        let lr = LrSchedule::constant(1e-3);
        for scheme in [
            CurriculumScheme::ArThenBiDllm,
            CurriculumScheme::ArDllmThenBiDllm,
            CurriculumScheme::BiDllmOnly,
            CurriculumScheme::ArThenBlockDllm { block_size: 4 },
        ] {
            let stages = scheme_stages(scheme, 100, lr, 1e-3).unwrap();
            assert_eq!(stages.iter().map(|s| s.steps).sum::<u64>(), 100);
        }
    }
}
