//! Finite-difference verification of reverse-mode gradients.
//!
//! Every differentiable primitive and the composed model losses are checked
//! against central differences (h = 1e-5) in 64-bit arithmetic. The relative
//! error uses `|a - n| / max(|a|, |n|, 1e-3)` so near-zero gradients are
//! compared absolutely at 1e-7 resolution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corruption::corrupt_full;
use crate::model::{
    init_params, AttentionMaskSpec, ModelConfig, Parameters, Parametrization,
};
use crate::objectives::{ar_loss, ar_loss_grad, dllm_loss, dllm_loss_grad};
use crate::rng::{self, Stream};
use crate::tensor::{BoolMatrix, CeTerm, NodeId, Tape, Tensor};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckCase {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CheckCase>,
    pub max_rel_err: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Worst relative disagreement between analytic and numeric gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Check one primitive: `build` assembles a scalar loss from the leaves.
fn check_primitive(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<CheckCase> {
    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|&l| grads.get(l).expect("leaf requires grad").data().to_vec())
        .collect();

    // Numeric pass over the concatenated input elements.
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let f = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let leaves: Vec<NodeId> = shapes
            .iter()
            .map(|shape| {
                let numel: usize = shape.iter().product();
                let t = Tensor::from_vec(shape, x[offset..offset + numel].to_vec()).unwrap();
                offset += numel;
                tape.leaf(t, false)
            })
            .collect();
        let loss = build(&mut tape, &leaves).expect("loss rebuild");
        tape.value(loss).scalar_value()
    };
    let numeric = numeric_grad(f, &flat, FD_STEP);
    Ok(CheckCase {
        name: name.to_string(),
        max_rel_err: max_rel_err(&analytic, &numeric),
    })
}

fn primitive_cases(seed: u64, cases: &mut Vec<CheckCase>) -> Result<()> {
    let mut rng = rng::indexed(seed, Stream::Test, 101);
    let std = 0.8;

    // A constant cotangent richer than all-ones, shared by unary ops.
    let cot = randn(&mut rng, &[3, 5], 1.0);
    let cot46 = randn(&mut rng, &[4, 6], 1.0);

    let a = randn(&mut rng, &[3, 4], std);
    let b = randn(&mut rng, &[4, 5], std);
    let c = randn(&mut rng, &[3, 5], 1.0);
    cases.push(check_primitive("matmul", &[a, b], |tape, l| {
        let prod = tape.matmul(l[0], l[1])?;
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(prod, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let a = randn(&mut rng, &[3, 4], std);
    let b = randn(&mut rng, &[5, 4], std);
    let c = randn(&mut rng, &[3, 5], 1.0);
    cases.push(check_primitive("matmul_nt", &[a, b], |tape, l| {
        let prod = tape.matmul_nt(l[0], l[1])?;
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(prod, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let x = randn(&mut rng, &[3, 5], std);
    let y = randn(&mut rng, &[3, 5], std);
    let c = cot.clone();
    cases.push(check_primitive("add_mul_scale", &[x, y], |tape, l| {
        let s = tape.add(l[0], l[1])?;
        let m = tape.mul(s, l[0])?;
        let sc = tape.scale(m, 1.7);
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(sc, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let x = randn(&mut rng, &[3, 5], std);
    let bias = randn(&mut rng, &[5], std);
    let gain = randn(&mut rng, &[5], std);
    let c = cot.clone();
    cases.push(check_primitive("add_row_mul_row", &[x, bias, gain], |tape, l| {
        let biased = tape.add_row(l[0], l[1])?;
        let gained = tape.mul_row(biased, l[2])?;
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(gained, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let table = randn(&mut rng, &[6, 5], std);
    let c = cot.clone();
    cases.push(check_primitive("embed", &[table], |tape, l| {
        // Repeated ids exercise scatter-add accumulation.
        let rows = tape.embed(l[0], &[0, 2, 2])?;
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(rows, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let x = randn(&mut rng, &[3, 5], std);
    let c = cot.clone();
    cases.push(check_primitive("rms_norm", &[x], |tape, l| {
        let n = tape.rms_norm(l[0]);
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(n, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let x = randn(&mut rng, &[3, 5], 1.5);
    let c = cot.clone();
    cases.push(check_primitive("gelu", &[x], |tape, l| {
        let g = tape.gelu(l[0]);
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(g, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let x = randn(&mut rng, &[4, 6], std);
    let mut allow = BoolMatrix::new(4, 6, false);
    for r in 0..4 {
        for col in 0..6 {
            allow.set(r, col, rng.gen_bool(0.6));
        }
        allow.set(r, rng.gen_range(0..6), true);
    }
    cases.push(check_primitive("masked_softmax_rows", &[x], |tape, l| {
        let p = tape.masked_softmax_rows(l[0], &allow)?;
        let cot = tape.leaf(cot46.clone(), false);
        let weighted = tape.mul(p, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let x = randn(&mut rng, &[3, 5], std);
    let c = cot.clone();
    cases.push(check_primitive("slice_concat", &[x], |tape, l| {
        let left = tape.slice_cols(l[0], 0, 2)?;
        let right = tape.slice_cols(l[0], 2, 3)?;
        let joined = tape.concat_cols(&[left, right])?;
        let cot = tape.leaf(c.clone(), false);
        let weighted = tape.mul(joined, cot)?;
        Ok(tape.sum(weighted))
    })?);

    let logits = randn(&mut rng, &[4, 7], 1.2);
    cases.push(check_primitive("cross_entropy_rows", &[logits], |tape, l| {
        let terms = vec![
            CeTerm { row: 0, target: 3, weight: 1.0 },
            CeTerm { row: 1, target: 6, weight: 2.5 },
            CeTerm { row: 3, target: 0, weight: 0.5 },
        ];
        let (loss, _) = tape.cross_entropy_rows(l[0], terms, 1.0 / 3.0)?;
        Ok(loss)
    })?);
    Ok(())
}

fn fd_check_params(
    name: &str,
    params: &Parameters<f64>,
    analytic: &[Tensor<f64>],
    loss_fn: impl Fn(&Parameters<f64>) -> f64,
) -> CheckCase {
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (i, (_, tensor)) in params.entries().iter().enumerate() {
        for j in 0..tensor.numel() {
            let orig = tensor.data()[j];
            probe.entries_mut()[i].1.data_mut()[j] = orig + FD_STEP;
            let up = loss_fn(&probe);
            probe.entries_mut()[i].1.data_mut()[j] = orig - FD_STEP;
            let down = loss_fn(&probe);
            probe.entries_mut()[i].1.data_mut()[j] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3));
        }
    }
    CheckCase {
        name: name.to_string(),
        max_rel_err: worst,
    }
}

fn model_cases(seed: u64, cases: &mut Vec<CheckCase>) -> Result<()> {
    let vocab = 9usize;
    let mask_id = vocab - 1;
    let cfg = ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_len: 6,
        parametrization: Parametrization::Shifted,
    };
    let params: Parameters<f64> = init_params(&cfg, seed)?;
    let mut rng = rng::indexed(seed, Stream::Test, 202);
    let tokens: Vec<usize> = (0..5).map(|_| rng.gen_range(0..vocab - 1)).collect();

    // Composed AR loss.
    let batch = vec![tokens.clone()];
    let (_, grads) = ar_loss_grad(&params, &cfg, &batch)?;
    cases.push(fd_check_params("model_ar_loss", &params, &grads, |p| {
        ar_loss(p, &cfg, &batch).unwrap().loss
    }));

    // Composed denoising loss under bidirectional attention.
    let dcfg = ModelConfig {
        parametrization: Parametrization::Unshifted,
        ..cfg.clone()
    };
    let sample = loop {
        let s = corrupt_full(&tokens, 0.6, mask_id, &mut rng)?;
        if s.masked_count() > 0 {
            break s;
        }
    };
    let mask = AttentionMaskSpec::bidirectional();
    let samples = vec![sample];
    let (_, grads) = dllm_loss_grad(&params, &dcfg, &mask, &samples)?;
    cases.push(fd_check_params("model_dllm_loss", &params, &grads, |p| {
        dllm_loss(p, &dcfg, &mask, &samples).unwrap().loss
    }));
    Ok(())
}

/// Run the whole verification suite over the given seeds.
pub fn run_suite(seeds: &[u64]) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for &seed in seeds {
        primitive_cases(seed, &mut cases)?;
        model_cases(seed, &mut cases)?;
    }
    let max = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteReport {
        cases,
        max_rel_err: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_over_multiple_seeds() {
        let report = run_suite(&[0, 1, 2]).unwrap();
        assert!(
            report.passed(),
            "worst case {:?}",
            report
                .cases
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        );
    }

    #[test]
    fn numeric_grad_of_square() {
        let g = numeric_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floors_small_denominators() {
        assert!(max_rel_err(&[0.0], &[5e-8]) < 1e-4);
        assert!(max_rel_err(&[0.0], &[1e-5]) > 1e-4 * 0.99);
    }
}
