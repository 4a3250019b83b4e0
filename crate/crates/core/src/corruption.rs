//! Forward noising processes.
//!
//! The global schedule is linear with the convention that `t` itself is the
//! mask rate: `u(t) = t`. Since `t` is drawn uniformly this induces the same
//! rate distribution as the `u(t) = 1 - t` convention, and the per-token
//! ELBO weight reads directly as `w = 1/u_eff`.
//!
//! Block corruption confines masking to one contiguous block, clips the rate
//! to `[1/B, 1]`, and falls back to forcing a single uniformly chosen
//! in-block mask whenever the Bernoulli draws produce none, so every sample
//! carries at least one supervised token.
//!
//! Draw order is part of the contract: one uniform `f64` per in-block
//! position (ascending), then one index draw if the fallback fires. Tests
//! rely on this to observe the pre-fallback pattern.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Global continuous-time noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSchedule {
    Linear,
}

impl NoiseSchedule {
    /// Mask rate at time `t`.
    pub fn rate(&self, t: f64) -> Result<f64> {
        match self {
            NoiseSchedule::Linear => mask_rate_linear(t),
        }
    }
}

/// Block-corruption configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockClipConfig {
    pub block_size: usize,
}

impl BlockClipConfig {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be >= 1".into()));
        }
        Ok(BlockClipConfig { block_size })
    }
}

/// One corrupted view of a clean sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSample {
    pub x0: Vec<usize>,
    /// Clean tokens with masked positions replaced by the mask id.
    pub xt: Vec<usize>,
    pub mask_flags: Vec<bool>,
    /// Corruption time that produced this sample.
    pub t: f64,
    /// Effective mask rate actually used (post-clipping in block mode).
    pub u_eff: f64,
    /// Which block was corrupted; `None` for full-sequence corruption.
    pub block_index: Option<usize>,
    /// Per-masked-token loss weight, exactly `1 / u_eff`.
    pub token_weight: f64,
}

impl CorruptionSample {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask_flags
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }
}

/// Linear schedule: the mask rate at time `t` is `t` itself.
pub fn mask_rate_linear(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "corruption time {t} outside [0, 1]"
        )));
    }
    Ok(t)
}

/// Block-specific mask rate: `min(1, max(u, 1/B))`.
pub fn clip_block_rate(u: f64, block_size: usize) -> Result<f64> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!(
            "mask rate {u} outside [0, 1]"
        )));
    }
    Ok(u.max(1.0 / block_size as f64).min(1.0))
}

/// Expected fraction of zero-supervision steps under the unclipped global
/// linear schedule: `1 / (B + 1)`.
pub fn zero_mask_fraction_analytic(block_size: usize) -> f64 {
    1.0 / (block_size as f64 + 1.0)
}

/// Mask every position independently with rate `u(t) = t`.
pub fn corrupt_full(
    x0: &[usize],
    t: f64,
    mask_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionSample> {
    if x0.is_empty() {
        return Err(Error::InvalidArgument("cannot corrupt empty sequence".into()));
    }
    let u = mask_rate_linear(t)?;
    let mut xt = x0.to_vec();
    let mut mask_flags = vec![false; x0.len()];
    for i in 0..x0.len() {
        if rng.gen::<f64>() < u {
            mask_flags[i] = true;
            xt[i] = mask_id;
        }
    }
    Ok(CorruptionSample {
        x0: x0.to_vec(),
        xt,
        mask_flags,
        t,
        u_eff: u,
        block_index: None,
        token_weight: 1.0 / u,
    })
}

/// Extent of block `k` within a sequence of `len` tokens.
pub fn block_span(len: usize, cfg: BlockClipConfig, block_index: usize) -> Result<(usize, usize)> {
    let start = block_index * cfg.block_size;
    if start >= len {
        return Err(Error::InvalidArgument(format!(
            "block {block_index} out of range for len {len} with B={}",
            cfg.block_size
        )));
    }
    Ok((start, (start + cfg.block_size).min(len)))
}

/// Number of (possibly partial) blocks covering a sequence.
pub fn block_count(len: usize, cfg: BlockClipConfig) -> usize {
    len.div_ceil(cfg.block_size)
}

/// Mask tokens inside one block independently with rate `u_blk`; tokens
/// outside the block remain clean. If no in-block token gets masked, one
/// uniformly chosen in-block position is forced.
pub fn corrupt_block(
    x0: &[usize],
    block_index: usize,
    cfg: BlockClipConfig,
    u_blk: f64,
    t: f64,
    mask_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionSample> {
    if x0.is_empty() {
        return Err(Error::InvalidArgument("cannot corrupt empty sequence".into()));
    }
    let lo = 1.0 / cfg.block_size as f64;
    if !(lo - 1e-12..=1.0 + 1e-12).contains(&u_blk) {
        return Err(Error::InvalidArgument(format!(
            "u_blk {u_blk} outside clip band [{lo}, 1]"
        )));
    }
    let (start, end) = block_span(x0.len(), cfg, block_index)?;
    let mut xt = x0.to_vec();
    let mut mask_flags = vec![false; x0.len()];
    let mut masked = 0usize;
    for i in start..end {
        if rng.gen::<f64>() < u_blk {
            mask_flags[i] = true;
            xt[i] = mask_id;
            masked += 1;
        }
    }
    if masked == 0 {
        let forced = start + rng.gen_range(0..end - start);
        mask_flags[forced] = true;
        xt[forced] = mask_id;
    }
    Ok(CorruptionSample {
        x0: x0.to_vec(),
        xt,
        mask_flags,
        t,
        u_eff: u_blk,
        block_index: Some(block_index),
        token_weight: 1.0 / u_blk,
    })
}

/// Monte-Carlo report over block-corruption draws.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScheduleStatsReport {
    pub block_size: usize,
    pub clipped: bool,
    pub n_samples: u64,
    /// Fraction of samples with zero masked tokens.
    pub zero_mask_fraction: f64,
    /// Standard error of the zero-mask fraction estimate.
    pub stderr: f64,
    pub mean_masked: f64,
    /// Largest per-token weight over samples that carried supervision.
    pub max_weight: f64,
    /// Histogram of `1/u_eff` over supervised samples, bucketed by powers of
    /// two: bucket k counts weights in `[2^k, 2^(k+1))`.
    pub weight_histogram: Vec<u64>,
}

/// Sample the block-masking process under the global schedule and report
/// zero-supervision statistics. `clipped` selects the block-wise clipped
/// rate plus the fallback rule; unclipped reproduces the raw schedule.
pub fn schedule_stats(
    schedule: NoiseSchedule,
    cfg: BlockClipConfig,
    clipped: bool,
    n_samples: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ScheduleStatsReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let b = cfg.block_size;
    let mut zero = 0u64;
    let mut total_masked = 0u64;
    let mut max_weight = 0.0f64;
    let mut histogram = vec![0u64; 64];
    for _ in 0..n_samples {
        let t = rng.gen::<f64>();
        let u = schedule.rate(t)?;
        let u_eff = if clipped { clip_block_rate(u, b)? } else { u };
        let mut m = 0u64;
        for _ in 0..b {
            if rng.gen::<f64>() < u_eff {
                m += 1;
            }
        }
        if m == 0 && clipped {
            m = 1;
        }
        if m == 0 {
            zero += 1;
        } else {
            let w = 1.0 / u_eff;
            max_weight = max_weight.max(w);
            let bucket = (w.log2().floor().max(0.0) as usize).min(histogram.len() - 1);
            histogram[bucket] += 1;
        }
        total_masked += m;
    }
    let p = zero as f64 / n_samples as f64;
    Ok(ScheduleStatsReport {
        block_size: b,
        clipped,
        n_samples,
        zero_mask_fraction: p,
        stderr: (p * (1.0 - p) / n_samples as f64).sqrt(),
        mean_masked: total_masked as f64 / n_samples as f64,
        max_weight,
        weight_histogram: histogram,
    })
}
