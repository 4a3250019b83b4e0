//! Synthetic arithmetic corpus and brute-force candidate-set analysis.
//!
//! Sequences are concatenations of clauses `a = x , b = y , a + b = z ;`
//! over a closed symbol-level vocabulary, so every empirical conditional is
//! exactly enumerable. A context is a token pattern with wildcard slots; the
//! empirical conditional of a target slot is tallied over every corpus
//! window whose visible slots match. The candidate set keeps tokens with
//! probability at least epsilon; its size and peak probability classify the
//! context into the reasoning, correlation, or noise regime.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corruption::{block_count, clip_block_rate, corrupt_block, corrupt_full, BlockClipConfig};
use crate::decoding::SpecialTokens;
use crate::{Error, Result};

/// Largest value token the vocabulary will represent.
pub const MAX_NUMBER: u32 = 512;

/// Closed vocabulary: number tokens `0..=max_number`, six structural
/// symbols, then `<bos>`, `<eos>`, `<mask>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    max_number: u32,
}

impl Vocab {
    pub fn arithmetic(max_number: u32, var_a: &str, var_b: &str) -> Result<Self> {
        if max_number > MAX_NUMBER {
            return Err(Error::InvalidArgument(format!(
                "value range needs numbers up to {max_number}, vocabulary caps at {MAX_NUMBER}"
            )));
        }
        let mut names: Vec<String> = (0..=max_number).map(|n| n.to_string()).collect();
        for s in [var_a, var_b, "=", "+", ",", ";", "<bos>", "<eos>", "<mask>"] {
            names.push(s.to_string());
        }
        Ok(Vocab { names, max_number })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_number(&self) -> u32 {
        self.max_number
    }

    pub fn number(&self, n: u32) -> Result<usize> {
        if n > self.max_number {
            return Err(Error::InvalidArgument(format!(
                "number {n} exceeds vocabulary maximum {}",
                self.max_number
            )));
        }
        Ok(n as usize)
    }

    pub fn symbol(&self, s: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown token {s:?}")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn bos_id(&self) -> usize {
        self.len() - 3
    }

    pub fn eos_id(&self) -> usize {
        self.len() - 2
    }

    pub fn mask_id(&self) -> usize {
        self.len() - 1
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens {
            mask_id: self.mask_id(),
            bos_id: self.bos_id(),
            eos_id: self.eos_id(),
        }
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.symbol(w)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArithmeticCorpusConfig {
    pub lo: u32,
    pub hi: u32,
    pub clauses_per_sequence: usize,
    pub var_a: String,
    pub var_b: String,
}

impl ArithmeticCorpusConfig {
    pub fn new(lo: u32, hi: u32, clauses_per_sequence: usize) -> Self {
        ArithmeticCorpusConfig {
            lo,
            hi,
            clauses_per_sequence,
            var_a: "a".into(),
            var_b: "b".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hi < self.lo {
            return Err(Error::InvalidArgument(format!(
                "range [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        if self.clauses_per_sequence == 0 {
            return Err(Error::InvalidArgument("need at least one clause".into()));
        }
        if 2 * self.hi > MAX_NUMBER {
            return Err(Error::InvalidArgument(format!(
                "sums up to {} exceed the representable vocabulary ({MAX_NUMBER})",
                2 * self.hi
            )));
        }
        Ok(())
    }
}

/// Number of tokens in one clause `a = x , b = y , a + b = z ;`.
pub const CLAUSE_LEN: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub sequences: Vec<Vec<usize>>,
    pub config: ArithmeticCorpusConfig,
}

fn clause_tokens(vocab: &Vocab, cfg: &ArithmeticCorpusConfig, x: u32, y: u32) -> Vec<usize> {
    let a = vocab.symbol(&cfg.var_a).unwrap();
    let b = vocab.symbol(&cfg.var_b).unwrap();
    let eq = vocab.symbol("=").unwrap();
    let plus = vocab.symbol("+").unwrap();
    let comma = vocab.symbol(",").unwrap();
    let semi = vocab.symbol(";").unwrap();
    vec![
        a,
        eq,
        vocab.number(x).unwrap(),
        comma,
        b,
        eq,
        vocab.number(y).unwrap(),
        comma,
        a,
        plus,
        b,
        eq,
        vocab.number(x + y).unwrap(),
        semi,
    ]
}

/// Sample `n_sequences` sequences with clause values uniform over the range.
pub fn gen_arithmetic(
    config: &ArithmeticCorpusConfig,
    n_sequences: usize,
    seed: u64,
) -> Result<Corpus> {
    config.validate()?;
    let vocab = Vocab::arithmetic(2 * config.hi, &config.var_a, &config.var_b)?;
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Init);
    let sequences = (0..n_sequences)
        .map(|_| {
            let mut seq = Vec::with_capacity(CLAUSE_LEN * config.clauses_per_sequence);
            for _ in 0..config.clauses_per_sequence {
                let x = rng.gen_range(config.lo..=config.hi);
                let y = rng.gen_range(config.lo..=config.hi);
                seq.extend(clause_tokens(&vocab, config, x, y));
            }
            seq
        })
        .collect();
    Ok(Corpus {
        vocab,
        sequences,
        config: config.clone(),
    })
}

/// Every single-clause sequence exactly once: the fully enumerable corpus.
pub fn gen_arithmetic_exhaustive(config: &ArithmeticCorpusConfig) -> Result<Corpus> {
    config.validate()?;
    if config.clauses_per_sequence != 1 {
        return Err(Error::InvalidArgument(
            "exhaustive enumeration covers single-clause sequences only".into(),
        ));
    }
    let vocab = Vocab::arithmetic(2 * config.hi, &config.var_a, &config.var_b)?;
    let mut sequences = Vec::new();
    for x in config.lo..=config.hi {
        for y in config.lo..=config.hi {
            sequences.push(clause_tokens(&vocab, config, x, y));
        }
    }
    Ok(Corpus {
        vocab,
        sequences,
        config: config.clone(),
    })
}

impl Corpus {
    /// Text form: a header line with the generator parameters, then one
    /// space-separated sequence per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#arith lo={} hi={} clauses={} vars={},{}\n",
            self.config.lo, self.config.hi, self.config.clauses_per_sequence,
            self.config.var_a, self.config.var_b
        );
        for seq in &self.sequences {
            out.push_str(&self.vocab.detokenize(seq));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Corpus> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty corpus file".into()))?;
        let rest = header
            .strip_prefix("#arith ")
            .ok_or_else(|| Error::InvalidArgument("missing #arith header".into()))?;
        let mut lo = None;
        let mut hi = None;
        let mut clauses = None;
        let mut vars = ("a".to_string(), "b".to_string());
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad header field {field}")))?;
            match key {
                "lo" => lo = Some(value.parse().map_err(|_| bad_header(field))?),
                "hi" => hi = Some(value.parse().map_err(|_| bad_header(field))?),
                "clauses" => clauses = Some(value.parse().map_err(|_| bad_header(field))?),
                "vars" => {
                    let (a, b) = value
                        .split_once(',')
                        .ok_or_else(|| bad_header(field))?;
                    vars = (a.to_string(), b.to_string());
                }
                _ => return Err(Error::InvalidArgument(format!("unknown header key {key}"))),
            }
        }
        let config = ArithmeticCorpusConfig {
            lo: lo.ok_or_else(|| bad_header("lo"))?,
            hi: hi.ok_or_else(|| bad_header("hi"))?,
            clauses_per_sequence: clauses.ok_or_else(|| bad_header("clauses"))?,
            var_a: vars.0,
            var_b: vars.1,
        };
        config.validate()?;
        let vocab = Vocab::arithmetic(2 * config.hi, &config.var_a, &config.var_b)?;
        let sequences = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| vocab.tokenize(l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            vocab,
            sequences,
            config,
        })
    }
}

fn bad_header(field: &str) -> Error {
    Error::InvalidArgument(format!("bad corpus header field {field}"))
}

/// One pattern slot: a concrete token or a masked wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(usize),
    Wildcard,
}

/// A token pattern with wildcard slots, predicting one wildcard slot.
///
/// The pattern slides over every window of every corpus sequence; a window
/// matches when all concrete slots agree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextQuery {
    pub pattern: Vec<Slot>,
    pub target: usize,
}

impl ContextQuery {
    pub fn new(pattern: Vec<Slot>, target: usize) -> Result<Self> {
        if target >= pattern.len() {
            return Err(Error::InvalidArgument(format!(
                "target slot {target} outside pattern of {}",
                pattern.len()
            )));
        }
        if !matches!(pattern[target], Slot::Wildcard) {
            return Err(Error::InvalidArgument(
                "target slot must be a wildcard".into(),
            ));
        }
        Ok(ContextQuery { pattern, target })
    }

    /// Parse a whitespace-separated pattern; `▁` (or `_`) is a wildcard.
    /// The target is the first wildcard.
    pub fn parse(vocab: &Vocab, text: &str) -> Result<Self> {
        let mut pattern = Vec::new();
        let mut target = None;
        for word in text.split_whitespace() {
            if word == "▁" || word == "_" {
                if target.is_none() {
                    target = Some(pattern.len());
                }
                pattern.push(Slot::Wildcard);
            } else {
                pattern.push(Slot::Token(vocab.symbol(word)?));
            }
        }
        let target =
            target.ok_or_else(|| Error::InvalidArgument("query has no wildcard".into()))?;
        ContextQuery::new(pattern, target)
    }

    /// The query induced by a corruption pattern: masked positions become
    /// wildcards and the given masked position is the target.
    pub fn from_mask_flags(tokens: &[usize], mask_flags: &[bool], target: usize) -> Result<Self> {
        if !mask_flags.get(target).copied().unwrap_or(false) {
            return Err(Error::InvalidArgument(
                "census target must be a masked position".into(),
            ));
        }
        let pattern = tokens
            .iter()
            .zip(mask_flags)
            .map(|(&t, &m)| if m { Slot::Wildcard } else { Slot::Token(t) })
            .collect();
        ContextQuery::new(pattern, target)
    }
}

/// Empirical conditional of the target slot over matching windows.
///
/// `matches == 0` is the distinguished empty result for contexts that never
/// occur.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalConditional {
    pub counts: BTreeMap<usize, u64>,
    pub matches: u64,
}

impl EmpiricalConditional {
    pub fn prob(&self, token: usize) -> f64 {
        if self.matches == 0 {
            return 0.0;
        }
        *self.counts.get(&token).unwrap_or(&0) as f64 / self.matches as f64
    }

    pub fn probs(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.counts
            .iter()
            .map(move |(&t, &c)| (t, c as f64 / self.matches as f64))
    }

    pub fn support(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches == 0
    }
}

/// Tally the target token over every corpus window matching the query.
pub fn empirical_conditional(
    sequences: &[Vec<usize>],
    query: &ContextQuery,
) -> Result<EmpiricalConditional> {
    if query.pattern.is_empty() {
        return Err(Error::InvalidArgument("empty query pattern".into()));
    }
    let plen = query.pattern.len();
    let mut counts = BTreeMap::new();
    let mut matches = 0u64;
    for seq in sequences {
        if seq.len() < plen {
            continue;
        }
        'windows: for start in 0..=(seq.len() - plen) {
            for (offset, slot) in query.pattern.iter().enumerate() {
                if let Slot::Token(want) = slot {
                    if seq[start + offset] != *want {
                        continue 'windows;
                    }
                }
            }
            *counts.entry(seq[start + query.target]).or_insert(0) += 1;
            matches += 1;
        }
    }
    Ok(EmpiricalConditional { counts, matches })
}

/// Candidate set of a conditional at threshold epsilon.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CandidateSetReport {
    pub epsilon: f64,
    /// Tokens with probability >= epsilon, ascending.
    pub members: Vec<usize>,
    pub k: usize,
    pub p_max: f64,
    /// Set when epsilon exceeds every probability (K = 0).
    pub degenerate: bool,
    /// The full conditional, for reporting.
    pub probs: Vec<(usize, f64)>,
}

pub fn candidate_set(dist: &EmpiricalConditional, epsilon: f64) -> Result<CandidateSetReport> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if dist.is_empty() {
        return Err(Error::InvalidArgument(
            "candidate set of an empty conditional".into(),
        ));
    }
    let probs: Vec<(usize, f64)> = dist.probs().collect();
    let members: Vec<usize> = probs
        .iter()
        .filter(|(_, p)| *p >= epsilon)
        .map(|&(t, _)| t)
        .collect();
    let p_max = probs.iter().map(|&(_, p)| p).fold(0.0, f64::max);
    Ok(CandidateSetReport {
        epsilon,
        k: members.len(),
        degenerate: members.is_empty(),
        members,
        p_max,
        probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Regime {
    Reasoning,
    Correlation,
    Noise,
}

/// Classification thresholds; the regimes are qualitative, so these are
/// exposed as configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeThresholds {
    /// Reasoning: K <= k_reasoning and p_max >= p_reasoning.
    pub k_reasoning: usize,
    pub p_reasoning: f64,
    /// Noise: K >= coverage * achievable targets and p_max <= 2/K.
    pub noise_coverage: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            k_reasoning: 2,
            p_reasoning: 0.7,
            noise_coverage: 0.8,
        }
    }
}

/// Label a candidate-set report given how many targets are achievable at
/// that slot (the marginal support).
pub fn classify_regime(
    report: &CandidateSetReport,
    achievable_targets: usize,
    thresholds: &RegimeThresholds,
) -> Result<Regime> {
    if report.degenerate {
        return Err(Error::InvalidArgument(
            "cannot classify a degenerate (K=0) report".into(),
        ));
    }
    if report.k <= thresholds.k_reasoning && report.p_max >= thresholds.p_reasoning {
        return Ok(Regime::Reasoning);
    }
    let coverage = report.k as f64 >= thresholds.noise_coverage * achievable_targets as f64;
    if coverage && report.p_max <= 2.0 / report.k as f64 {
        return Ok(Regime::Noise);
    }
    Ok(Regime::Correlation)
}

/// How the census corrupts sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskingMode {
    /// Full-sequence masking at corruption time t.
    Full { t: f64 },
    /// Clipped block corruption: rate u, random block of the given size.
    Block { block_size: usize, u: f64 },
}

/// Regime histogram over sampled masked contexts.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct RegimeCensus {
    pub reasoning: u64,
    pub correlation: u64,
    pub noise: u64,
    pub degenerate: u64,
    pub total: u64,
}

impl RegimeCensus {
    pub fn reasoning_fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.reasoning as f64 / self.total as f64
    }
}

/// Sample corruption patterns, classify the induced context of every masked
/// target, and aggregate regime counts.
pub fn mask_regime_census(
    corpus: &Corpus,
    mode: MaskingMode,
    n_samples: usize,
    epsilon: f64,
    thresholds: &RegimeThresholds,
    rng: &mut ChaCha8Rng,
) -> Result<RegimeCensus> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mask_id = corpus.vocab.mask_id();
    let mut census = RegimeCensus::default();
    // Achievable-target counts: marginal support per slot, cached per
    // (sequence length, slot).
    let mut marginal_support: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for _ in 0..n_samples {
        let seq = &corpus.sequences[rng.gen_range(0..corpus.sequences.len())];
        let sample = match mode {
            MaskingMode::Full { t } => corrupt_full(seq, t, mask_id, rng)?,
            MaskingMode::Block { block_size, u } => {
                let cfg = BlockClipConfig::new(block_size)?;
                let u_blk = clip_block_rate(u, block_size)?;
                let block = rng.gen_range(0..block_count(seq.len(), cfg));
                corrupt_block(seq, block, cfg, u_blk, u, mask_id, rng)?
            }
        };
        for target in sample.masked_positions() {
            let query = ContextQuery::from_mask_flags(seq, &sample.mask_flags, target)?;
            let conditional = empirical_conditional(&corpus.sequences, &query)?;
            let achievable = *marginal_support
                .entry((seq.len(), target))
                .or_insert_with(|| {
                    let marginal = ContextQuery::new(
                        vec![Slot::Wildcard; seq.len()],
                        target,
                    )
                    .expect("all-wildcard query");
                    empirical_conditional(&corpus.sequences, &marginal)
                        .map(|d| d.support())
                        .unwrap_or(0)
                });
            census.total += 1;
            let report = candidate_set(&conditional, epsilon)?;
            if report.degenerate {
                census.degenerate += 1;
                continue;
            }
            match classify_regime(&report, achievable, thresholds)? {
                Regime::Reasoning => census.reasoning += 1,
                Regime::Correlation => census.correlation += 1,
                Regime::Noise => census.noise += 1,
            }
        }
    }
    Ok(census)
}

/// Per-sequence answer prompts: everything up to and including the final
/// `=`, with the sum token as the gold continuation.
pub fn answer_prompts(corpus: &Corpus) -> Vec<(Vec<usize>, Vec<usize>)> {
    let eq = corpus.vocab.symbol("=").unwrap();
    corpus
        .sequences
        .iter()
        .filter_map(|seq| {
            let last_eq = seq.iter().rposition(|&t| t == eq)?;
            let gold = *seq.get(last_eq + 1)?;
            Some((seq[..=last_eq].to_vec(), vec![gold]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn one_clause_config() -> ArithmeticCorpusConfig {
        ArithmeticCorpusConfig::new(1, 4, 1)
    }

    #[test]
    fn small_range_generator_enumeration() {
        let cfg = ArithmeticCorpusConfig::new(1, 2, 1);
        let corpus = gen_arithmetic(&cfg, 200, 0).unwrap();
        let legal: Vec<String> = [(1, 1), (1, 2), (2, 1), (2, 2)]
            .iter()
            .map(|&(x, y)| format!("a = {x} , b = {y} , a + b = {} ;", x + y))
            .collect();
        for seq in &corpus.sequences {
            let text = corpus.vocab.detokenize(seq);
            assert!(legal.contains(&text), "unexpected sequence {text}");
        }
    }

    #[test]
    fn two_clause_range_produces_reference_sequence() {
        let cfg = ArithmeticCorpusConfig::new(1, 4, 2);
        let corpus = gen_arithmetic(&cfg, 10_000, 1).unwrap();
        let want = "a = 1 , b = 2 , a + b = 3 ; a = 3 , b = 4 , a + b = 7 ;";
        assert!(
            corpus
                .sequences
                .iter()
                .any(|s| corpus.vocab.detokenize(s) == want),
            "reference sequence not producible"
        );
    }

    #[test]
    fn sums_are_always_consistent() {
        let corpus = gen_arithmetic(&one_clause_config(), 10_000, 2).unwrap();
        let v = &corpus.vocab;
        for seq in &corpus.sequences {
            let x: u32 = v.name(seq[2]).parse().unwrap();
            let y: u32 = v.name(seq[6]).parse().unwrap();
            let z: u32 = v.name(seq[12]).parse().unwrap();
            assert_eq!(x + y, z);
        }
    }

    #[test]
    fn rejects_unrepresentable_ranges() {
        let cfg = ArithmeticCorpusConfig::new(1, MAX_NUMBER, 1);
        assert!(gen_arithmetic(&cfg, 1, 0).is_err());
    }

    #[test]
    fn corpus_text_round_trip() {
        let corpus = gen_arithmetic(&one_clause_config(), 50, 3).unwrap();
        let text = corpus.to_text();
        let back = Corpus::from_text(&text).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn clean_context_pins_the_sum() {
        let corpus = gen_arithmetic(&one_clause_config(), 5_000, 4).unwrap();
        let query = ContextQuery::parse(&corpus.vocab, "a = 1 , b = 2 , a + b = ▁").unwrap();
        let dist = empirical_conditional(&corpus.sequences, &query).unwrap();
        assert!(dist.matches > 0);
        assert_eq!(dist.prob(corpus.vocab.number(3).unwrap()), 1.0);
        let report = candidate_set(&dist, 0.5).unwrap();
        assert_eq!(report.k, 1);
        assert_eq!(report.members, vec![corpus.vocab.number(3).unwrap()]);
    }

    #[test]
    fn masked_evidence_spreads_mass_over_achievable_sums() {
        let corpus = gen_arithmetic_exhaustive(&one_clause_config()).unwrap();
        // Evidence for a and b hidden; only the trailing clause skeleton is
        // visible.
        let query = ContextQuery::parse(&corpus.vocab, "a + b = ▁ ;").unwrap();
        let dist = empirical_conditional(&corpus.sequences, &query).unwrap();
        // All achievable sums 2..=8 appear.
        assert_eq!(dist.support(), 7);
        let report = candidate_set(&dist, 0.01).unwrap();
        assert_eq!(report.k, 7);
    }

    #[test]
    fn never_occurring_context_is_empty() {
        let corpus = gen_arithmetic(&one_clause_config(), 100, 5).unwrap();
        // "a = 0" cannot occur: values start at 1.
        let query = ContextQuery::parse(&corpus.vocab, "a = 0 , b = ▁").unwrap();
        let dist = empirical_conditional(&corpus.sequences, &query).unwrap();
        assert!(dist.is_empty());
        assert!(candidate_set(&dist, 0.1).is_err());
    }

    #[test]
    fn candidate_set_edges() {
        let det = EmpiricalConditional {
            counts: [(3usize, 10u64)].into_iter().collect(),
            matches: 10,
        };
        let report = candidate_set(&det, 0.1).unwrap();
        assert_eq!(report.k, 1);
        assert_eq!(report.p_max, 1.0);

        let uniform7 = EmpiricalConditional {
            counts: (0..7usize).map(|t| (t, 1u64)).collect(),
            matches: 7,
        };
        assert_eq!(candidate_set(&uniform7, 0.1).unwrap().k, 7);

        let degenerate = candidate_set(&uniform7, 0.5).unwrap();
        assert_eq!(degenerate.k, 0);
        assert!(degenerate.degenerate);
        assert!(candidate_set(&uniform7, 0.0).is_err());
    }

    #[test]
    fn regime_classification() {
        let th = RegimeThresholds::default();
        let mk = |k: usize, p_max: f64| CandidateSetReport {
            epsilon: 0.1,
            members: (0..k).collect(),
            k,
            p_max,
            degenerate: false,
            probs: vec![],
        };
        assert_eq!(
            classify_regime(&mk(1, 1.0), 10, &th).unwrap(),
            Regime::Reasoning
        );
        // Near-uniform over all achievable targets.
        assert_eq!(
            classify_regime(&mk(10, 0.12), 10, &th).unwrap(),
            Regime::Noise
        );
        assert_eq!(
            classify_regime(&mk(4, 0.4), 10, &th).unwrap(),
            Regime::Correlation
        );
        let degenerate = CandidateSetReport {
            degenerate: true,
            ..mk(0, 0.0)
        };
        assert!(classify_regime(&degenerate, 10, &th).is_err());
    }

    #[test]
    fn sampled_marginal_matches_closed_form_triangle() {
        // Over uniform pairs in [1,4], the sum marginal is triangular:
        // counts 1,2,3,4,3,2,1 over sums 2..=8.
        let corpus = gen_arithmetic(&one_clause_config(), 40_000, 8).unwrap();
        let query = ContextQuery::parse(&corpus.vocab, "a + b = ▁ ;").unwrap();
        let dist = empirical_conditional(&corpus.sequences, &query).unwrap();
        let n = dist.matches as f64;
        for (sum, weight) in (2u32..=8).zip([1.0f64, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0]) {
            let p = weight / 16.0;
            let got = dist.prob(corpus.vocab.number(sum).unwrap());
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!(
                (got - p).abs() <= 3.0 * sigma + 1e-12,
                "sum {sum}: {got} vs {p}"
            );
        }
    }

    #[test]
    fn candidate_set_shrinks_under_added_evidence() {
        // Nested conditioning on the exhaustive corpus: revealing a token
        // never increases K at fixed epsilon.
        let corpus = gen_arithmetic_exhaustive(&one_clause_config()).unwrap();
        let full = corpus.vocab.tokenize("a = 2 , b = 3 , a + b = 5 ;").unwrap();
        let target = 12usize;
        let epsilon = 0.05;
        // Reveal slots one at a time, in a few different orders.
        let orders: [Vec<usize>; 3] = [
            (0..CLAUSE_LEN).filter(|&i| i != target).collect(),
            (0..CLAUSE_LEN).filter(|&i| i != target).rev().collect(),
            vec![8, 9, 10, 11, 13, 0, 1, 2, 3, 4, 5, 6, 7],
        ];
        for order in &orders {
            let mut pattern = vec![Slot::Wildcard; CLAUSE_LEN];
            let mut prev_k = usize::MAX;
            for &reveal in std::iter::once(&usize::MAX).chain(order.iter()) {
                if reveal != usize::MAX {
                    pattern[reveal] = Slot::Token(full[reveal]);
                }
                let query = ContextQuery::new(pattern.clone(), target).unwrap();
                let dist = empirical_conditional(&corpus.sequences, &query).unwrap();
                let report = candidate_set(&dist, epsilon).unwrap();
                assert!(
                    report.k <= prev_k,
                    "K grew from {prev_k} to {} after revealing slot {reveal}",
                    report.k
                );
                prev_k = report.k;
            }
            assert_eq!(prev_k, 1, "full evidence pins the sum");
        }
    }

    #[test]
    fn census_prefers_small_blocks_and_is_deterministic() {
        let corpus = gen_arithmetic(&one_clause_config(), 2_000, 7).unwrap();
        let th = RegimeThresholds::default();
        let census = |mode, seed| {
            let mut rng = rng::stream(seed, Stream::Census);
            mask_regime_census(&corpus, mode, 200, 0.05, &th, &mut rng).unwrap()
        };
        let block = census(
            MaskingMode::Block {
                block_size: 1,
                u: 0.5,
            },
            1,
        );
        let full = census(MaskingMode::Full { t: 0.8 }, 1);
        assert!(
            block.reasoning_fraction() > full.reasoning_fraction(),
            "block {} vs full {}",
            block.reasoning_fraction(),
            full.reasoning_fraction()
        );
        let again = census(MaskingMode::Full { t: 0.8 }, 1);
        assert_eq!(full, again, "census must be deterministic given the seed");
    }
}
