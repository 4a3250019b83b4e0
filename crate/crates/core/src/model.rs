//! A small decoder transformer with pluggable attention visibility.
//!
//! The network is a stack of pre-norm residual blocks (RMS norm, multi-head
//! attention, GELU feed-forward) over learned token and absolute position
//! embeddings, with the output head weight-tied to the token embedding.
//!
//! The forward pass computes the same logit grid regardless of the
//! parametrization; `Shifted` and `Unshifted` only determine which logit row
//! is consumed for which target (next-token heads versus predict-self heads).
//! That choice lives in the objectives and decoding modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{self, Stream};
use crate::tensor::{BoolMatrix, Element, NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Default standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

/// How the logit grid is consumed.
///
/// `Shifted`: the logits at position i parameterize p(x_{i+1} | x_{<=i}).
/// `Unshifted`: the logits at position i parameterize p(x_i | visible
/// context) and are consumed only at masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Parametrization {
    Shifted,
    Unshifted,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Total vocabulary size, including reserved specials (mask, bos, eos).
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub parametrization: Parametrization,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Attention visibility pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Bidirectional,
    /// Position i sees exactly the positions in blocks <= floor(i/B).
    BlockCausal { block_size: usize },
}

/// Which positions may attend to which.
///
/// `segment_ids` records packed-sample boundaries. Packed buffers keep all
/// positions mutually visible under bidirectional attention (the packed
/// training choice), so segment ids do not restrict visibility; they exist
/// for bookkeeping and diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub kind: MaskKind,
    pub segment_ids: Option<Vec<u32>>,
}

impl AttentionMaskSpec {
    pub fn causal() -> Self {
        AttentionMaskSpec {
            kind: MaskKind::Causal,
            segment_ids: None,
        }
    }

    pub fn bidirectional() -> Self {
        AttentionMaskSpec {
            kind: MaskKind::Bidirectional,
            segment_ids: None,
        }
    }

    pub fn block_causal(block_size: usize) -> Self {
        AttentionMaskSpec {
            kind: MaskKind::BlockCausal { block_size },
            segment_ids: None,
        }
    }
}

/// Build the boolean visibility matrix for a sequence length.
///
/// The result is always reflexive: every position sees itself.
pub fn build_attention_mask(spec: &AttentionMaskSpec, seq_len: usize) -> Result<BoolMatrix> {
    if let Some(segs) = &spec.segment_ids {
        if segs.len() != seq_len {
            return Err(Error::InvalidArgument(format!(
                "segment_ids length {} does not match seq_len {}",
                segs.len(),
                seq_len
            )));
        }
    }
    let mut m = BoolMatrix::new(seq_len, seq_len, false);
    match spec.kind {
        MaskKind::Causal => {
            for i in 0..seq_len {
                for j in 0..=i {
                    m.set(i, j, true);
                }
            }
        }
        MaskKind::Bidirectional => {
            // Packed samples stay mutually visible, so this is all-ones even
            // when segment ids are present.
            m = BoolMatrix::new(seq_len, seq_len, true);
        }
        MaskKind::BlockCausal { block_size } => {
            if block_size == 0 {
                return Err(Error::InvalidArgument(
                    "block_causal requires block_size >= 1".into(),
                ));
            }
            for i in 0..seq_len {
                let my_block = i / block_size;
                let end = ((my_block + 1) * block_size).min(seq_len);
                for j in 0..end {
                    m.set(i, j, true);
                }
            }
        }
    }
    Ok(m)
}

/// Named, ordered parameter tensors.
///
/// Iteration order is fixed by construction, which keeps optimizer state,
/// checkpoints, and gradients aligned without any name lookups on hot paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F: Element> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Element> Parameters<F> {
    pub fn from_entries(entries: Vec<(String, Tensor<F>)>) -> Self {
        Parameters { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<F>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<(String, Tensor<F>)> {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Register every parameter as a tape leaf, preserving order.
    pub fn register(&self, tape: &mut Tape<F>, requires_grad: bool) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Convert element type (used to run f64 verification on f32 weights).
    pub fn cast<G: Element>(&self) -> Parameters<G> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|&x| G::from_f64(x.as_f64())).collect();
                    (n.clone(), Tensor::from_vec(t.shape(), data).unwrap())
                })
                .collect(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn_tensor<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(gaussian(rng, std))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Initialize parameters with a custom weight scale.
pub fn init_params_with_std<F: Element>(
    config: &ModelConfig,
    seed: u64,
    std: f64,
) -> Result<Parameters<F>> {
    config.validate()?;
    let mut rng = rng::indexed(seed, Stream::Init, 0);
    let d = config.d_model;
    let hidden = 4 * d;
    let mut entries: Vec<(String, Tensor<F>)> = Vec::new();
    entries.push((
        "embed.tokens".into(),
        randn_tensor(&mut rng, &[config.vocab_size, d], std),
    ));
    entries.push((
        "embed.positions".into(),
        randn_tensor(&mut rng, &[config.max_len, d], std),
    ));
    for layer in 0..config.n_layers {
        let ones = Tensor::from_vec(&[d], vec![F::one(); d]).unwrap();
        entries.push((format!("layer{layer}.attn.norm_gain"), ones.clone()));
        for proj in ["wq", "wk", "wv", "wo"] {
            entries.push((
                format!("layer{layer}.attn.{proj}"),
                randn_tensor(&mut rng, &[d, d], std),
            ));
        }
        entries.push((format!("layer{layer}.ffn.norm_gain"), ones));
        entries.push((
            format!("layer{layer}.ffn.w1"),
            randn_tensor(&mut rng, &[d, hidden], std),
        ));
        entries.push((
            format!("layer{layer}.ffn.w2"),
            randn_tensor(&mut rng, &[hidden, d], std),
        ));
    }
    entries.push((
        "final.norm_gain".into(),
        Tensor::from_vec(&[d], vec![F::one(); d]).unwrap(),
    ));
    // The output head reuses the token embedding; only its bias is separate,
    // and it starts at zero.
    entries.push(("head.bias".into(), Tensor::zeros(&[config.vocab_size])));
    Ok(Parameters { entries })
}

/// Deterministic scaled-normal initialization.
pub fn init_params<F: Element>(config: &ModelConfig, seed: u64) -> Result<Parameters<F>> {
    init_params_with_std(config, seed, INIT_STD)
}

/// Check that parameter shapes agree with a model configuration.
pub fn validate_shapes<F: Element>(params: &Parameters<F>, config: &ModelConfig) -> Result<()> {
    let reference: Parameters<F> = init_params_with_std(config, 0, 0.0)?;
    if reference.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "parameter count {} does not match config ({} expected)",
            params.len(),
            reference.len()
        )));
    }
    for ((name, tensor), (ref_name, ref_tensor)) in
        params.entries().iter().zip(reference.entries())
    {
        if name != ref_name || tensor.shape() != ref_tensor.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter {name} with shape {:?} does not match config entry {ref_name} {:?}",
                tensor.shape(),
                ref_tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Build the transformer forward graph on an existing tape.
///
/// `param_nodes` must come from [`Parameters::register`] on the same
/// parameter set, in order. Returns the `[seq_len, vocab]` logits node.
pub fn forward_on_tape<F: Element>(
    tape: &mut Tape<F>,
    params: &Parameters<F>,
    param_nodes: &[NodeId],
    config: &ModelConfig,
    tokens: &[usize],
    mask: &AttentionMaskSpec,
) -> Result<NodeId> {
    config.validate()?;
    let len = tokens.len();
    if len == 0 {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if len > config.max_len {
        return Err(Error::SequenceTooLong {
            len,
            max_len: config.max_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TargetOutOfRange {
            target: bad,
            vocab: config.vocab_size,
        });
    }
    let allow = build_attention_mask(mask, len)?;
    let node = |name: &str| -> Result<NodeId> {
        params
            .index_of(name)
            .map(|i| param_nodes[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    };

    let tok_table = node("embed.tokens")?;
    let pos_table = node("embed.positions")?;
    let positions: Vec<usize> = (0..len).collect();
    let tok = tape.embed(tok_table, tokens)?;
    let pos = tape.embed(pos_table, &positions)?;
    let mut h = tape.add(tok, pos)?;

    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in 0..config.n_layers {
        let normed = tape.rms_norm(h);
        let n1 = tape.mul_row(normed, node(&format!("layer{layer}.attn.norm_gain"))?)?;
        let q = tape.matmul(n1, node(&format!("layer{layer}.attn.wq"))?)?;
        let k = tape.matmul(n1, node(&format!("layer{layer}.attn.wk"))?)?;
        let v = tape.matmul(n1, node(&format!("layer{layer}.attn.wv"))?)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let start = head * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let raw = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(raw, scale);
            let probs = tape.masked_softmax_rows(scores, &allow)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = tape.matmul(ctx, node(&format!("layer{layer}.attn.wo"))?)?;
        h = tape.add(h, attn_out)?;

        let normed2 = tape.rms_norm(h);
        let n2 = tape.mul_row(normed2, node(&format!("layer{layer}.ffn.norm_gain"))?)?;
        let pre = tape.matmul(n2, node(&format!("layer{layer}.ffn.w1"))?)?;
        let act = tape.gelu(pre);
        let ff = tape.matmul(act, node(&format!("layer{layer}.ffn.w2"))?)?;
        h = tape.add(h, ff)?;
    }

    let normed_f = tape.rms_norm(h);
    let nf = tape.mul_row(normed_f, node("final.norm_gain")?)?;
    let raw_logits = tape.matmul_nt(nf, tok_table)?;
    let logits = tape.add_row(raw_logits, node("head.bias")?)?;
    Ok(logits)
}

/// Run the model and return per-position logits over the vocabulary.
pub fn forward<F: Element>(
    params: &Parameters<F>,
    config: &ModelConfig,
    tokens: &[usize],
    mask: &AttentionMaskSpec,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, false);
    let logits = forward_on_tape(&mut tape, params, &nodes, config, tokens, mask)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_row;

    fn tiny_config(parametrization: Parametrization) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_len: 16,
            parametrization,
        }
    }

    #[test]
    fn causal_mask_matches_definition() {
        let m = build_attention_mask(&AttentionMaskSpec::causal(), 3).unwrap();
        let expect = [[true, false, false], [true, true, false], [true, true, true]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), expect[i][j]);
            }
        }
    }

    #[test]
    fn bidirectional_mask_is_all_ones() {
        let m = build_attention_mask(&AttentionMaskSpec::bidirectional(), 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(m.get(i, j));
            }
        }
    }

    #[test]
    fn block_causal_b2_len4() {
        let m = build_attention_mask(&AttentionMaskSpec::block_causal(2), 4).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), j < 2, "i={i} j={j}");
            }
        }
        for i in 2..4 {
            for j in 0..4 {
                assert!(m.get(i, j), "i={i} j={j}");
            }
        }
    }

    #[test]
    fn block_causal_rejects_zero_block() {
        assert!(build_attention_mask(&AttentionMaskSpec::block_causal(0), 4).is_err());
    }

    #[test]
    fn packed_bidirectional_is_mutually_visible() {
        let spec = AttentionMaskSpec {
            kind: MaskKind::Bidirectional,
            segment_ids: Some(vec![0, 0, 1, 1, 2]),
        };
        let m = build_attention_mask(&spec, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!(m.get(i, j));
            }
        }
    }

    #[test]
    fn block_causal_matches_independent_reference() {
        // Independent construction: enumerate blocks, then expand visibility
        // block-by-block rather than per position.
        for len in 1..=32usize {
            for b in [1usize, 2, 4, 8] {
                let got = build_attention_mask(&AttentionMaskSpec::block_causal(b), len).unwrap();
                let n_blocks = len.div_ceil(b);
                let mut want = BoolMatrix::new(len, len, false);
                for blk_i in 0..n_blocks {
                    for blk_j in 0..=blk_i {
                        for i in blk_i * b..((blk_i + 1) * b).min(len) {
                            for j in blk_j * b..((blk_j + 1) * b).min(len) {
                                want.set(i, j, true);
                            }
                        }
                    }
                }
                assert_eq!(got, want, "len={len} B={b}");
            }
        }
    }

    #[test]
    fn masks_are_reflexive() {
        for len in 1..=8 {
            for spec in [
                AttentionMaskSpec::causal(),
                AttentionMaskSpec::bidirectional(),
                AttentionMaskSpec::block_causal(3),
            ] {
                let m = build_attention_mask(&spec, len).unwrap();
                for i in 0..len {
                    assert!(m.get(i, i));
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config(Parametrization::Shifted);
        let a: Parameters<f64> = init_params(&cfg, 5).unwrap();
        let b: Parameters<f64> = init_params(&cfg, 5).unwrap();
        let c: Parameters<f64> = init_params(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_std_near_configured_scale() {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 64,
            n_layers: 1,
            n_heads: 4,
            max_len: 32,
            parametrization: Parametrization::Shifted,
        };
        let p: Parameters<f64> = init_params(&cfg, 9).unwrap();
        let wq = p.get("layer0.attn.wq").unwrap();
        let n = wq.numel() as f64;
        let mean: f64 = wq.data().iter().sum::<f64>() / n;
        let var: f64 = wq.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - INIT_STD).abs() < 0.2 * INIT_STD,
            "sample std {std} vs configured {INIT_STD}"
        );
    }

    #[test]
    fn near_zero_head_gives_uniform_distributions() {
        let cfg = tiny_config(Parametrization::Unshifted);
        let params: Parameters<f64> = init_params_with_std(&cfg, 3, 1e-6).unwrap();
        let logits = forward(
            &params,
            &cfg,
            &[0, 4, 2, 7],
            &AttentionMaskSpec::bidirectional(),
        )
        .unwrap();
        let uniform = 1.0 / cfg.vocab_size as f64;
        for r in 0..4 {
            for p in softmax_row(logits.row(r)) {
                assert!((p - uniform).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rejects_sequences_beyond_max_len() {
        let cfg = tiny_config(Parametrization::Shifted);
        let params: Parameters<f64> = init_params(&cfg, 0).unwrap();
        let tokens = vec![1usize; cfg.max_len + 1];
        match forward(&params, &cfg, &tokens, &AttentionMaskSpec::causal()) {
            Err(Error::SequenceTooLong { .. }) => {}
            other => panic!("expected SequenceTooLong, got {other:?}"),
        }
    }

    #[test]
    fn hidden_token_edits_never_change_visible_logits() {
        // Exhaustive visibility soundness at small length: editing any token
        // position j that i cannot see leaves row i of the logits unchanged.
        let cfg = ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 8,
            parametrization: Parametrization::Unshifted,
        };
        let params: Parameters<f64> = init_params(&cfg, 21).unwrap();
        let specs = [
            AttentionMaskSpec::causal(),
            AttentionMaskSpec::bidirectional(),
            AttentionMaskSpec::block_causal(2),
            AttentionMaskSpec::block_causal(3),
        ];
        for len in [1usize, 4, 6] {
            let base: Vec<usize> = (0..len).map(|i| i % cfg.vocab_size).collect();
            for spec in &specs {
                let allow = build_attention_mask(spec, len).unwrap();
                let logits = forward(&params, &cfg, &base, spec).unwrap();
                for j in 0..len {
                    let mut edited = base.clone();
                    edited[j] = (base[j] + 3) % cfg.vocab_size;
                    let logits2 = forward(&params, &cfg, &edited, spec).unwrap();
                    for i in 0..len {
                        if allow.get(i, j) {
                            continue;
                        }
                        for c in 0..cfg.vocab_size {
                            assert_eq!(
                                logits.get(i, c).to_bits(),
                                logits2.get(i, c).to_bits(),
                                "len={len} spec={spec:?} i={i} j={j}"
                            );
                        }
                    }
                }
            }
        }
    }
}
