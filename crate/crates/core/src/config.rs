//! Flat key-value run configuration.
//!
//! Files are `key = value` lines with `#` comments and a mandatory
//! `schema_version`. Every key must be consumed by the parser; unknown keys
//! are errors, so a typo cannot silently misconfigure a run.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use crate::objectives::WarmupConfig;
use crate::trainer::{CurriculumStage, LrSchedule, Objective, OptimizerConfig};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;

/// Parsed key-value file that tracks which keys were consumed.
#[derive(Debug)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
    read: RefCell<BTreeSet<String>>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
        }
        let cfg = FlatConfig {
            entries,
            read: RefCell::new(BTreeSet::new()),
        };
        let version = cfg.require_u64("schema_version")?;
        if version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {version} unsupported (expected {SCHEMA_VERSION})"
            )));
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let value = self.entries.get(key)?;
        self.read.borrow_mut().insert(key.to_string());
        Some(value.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        self.parse_as(key, v)
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        self.parse_as(key, v)
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        self.parse_as(key, v)
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            Some(v) => Ok(Some(self.parse_as(key, v)?)),
            None => Ok(None),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            Some(v) => Ok(Some(self.parse_as(key, v)?)),
            None => Ok(None),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            Some(v) => Ok(Some(self.parse_as(key, v)?)),
            None => Ok(None),
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Reject any key never consumed.
    pub fn finish(self) -> Result<()> {
        let read = self.read.into_inner();
        let unknown: Vec<String> = self
            .entries
            .keys()
            .filter(|k| !read.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

/// A full training-run description, as read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub corpus_path: String,
    pub context_len: usize,
    pub batch_size: usize,
    /// Sequences held out of training for decoding evaluation.
    pub holdout: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub optimizer: OptimizerConfig,
    pub eval_every: u64,
    pub eval_block_sizes: Vec<usize>,
    pub compare_total_steps: Option<u64>,
    pub stages: Vec<CurriculumStage>,
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = FlatConfig::parse(text)?;
        let defaults = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            beta1: cfg.get_f64("optimizer.beta1")?.unwrap_or(defaults.beta1),
            beta2: cfg.get_f64("optimizer.beta2")?.unwrap_or(defaults.beta2),
            eps: cfg.get_f64("optimizer.eps")?.unwrap_or(defaults.eps),
            weight_decay: cfg
                .get_f64("optimizer.weight_decay")?
                .unwrap_or(defaults.weight_decay),
            clip_norm: cfg
                .get_f64("optimizer.clip_norm")?
                .unwrap_or(defaults.clip_norm),
        };
        let mut stages = Vec::new();
        for index in 0.. {
            let prefix = format!("stage.{index}");
            if !cfg.has(&format!("{prefix}.objective")) {
                break;
            }
            let objective = match cfg.require(&format!("{prefix}.objective"))? {
                "ar" => Objective::Ar,
                "ardllm" => Objective::ArDllm,
                "bidllm" => Objective::BiDllm,
                "blockdllm" => Objective::BlockDllm {
                    block_size: cfg.require_usize(&format!("{prefix}.block_size"))?,
                },
                other => {
                    return Err(Error::Config(format!(
                        "{prefix}.objective: unknown objective {other:?}"
                    )))
                }
            };
            let lr_peak = cfg.require_f64(&format!("{prefix}.lr_peak"))?;
            let lr_final = cfg
                .get_f64(&format!("{prefix}.lr_final"))?
                .unwrap_or(lr_peak);
            let warmup = match cfg.get_u64(&format!("{prefix}.warmup_steps"))? {
                Some(steps) => Some(
                    WarmupConfig::new(
                        cfg.get_f64(&format!("{prefix}.warmup_u_init"))?.unwrap_or(1e-3),
                        steps,
                    )?,
                ),
                None => None,
            };
            stages.push(CurriculumStage {
                name: cfg
                    .get(&format!("{prefix}.name"))
                    .map(str::to_string)
                    .unwrap_or_else(|| objective.name()),
                objective,
                steps: cfg.require_u64(&format!("{prefix}.steps"))?,
                lr: LrSchedule {
                    peak: lr_peak,
                    final_lr: lr_final,
                },
                warmup,
            });
        }
        if stages.is_empty() {
            return Err(Error::Config("no stages configured".into()));
        }
        let spec = RunSpec {
            corpus_path: cfg.require("data.corpus")?.to_string(),
            context_len: cfg.require_usize("data.context_len")?,
            batch_size: cfg.require_usize("data.batch_size")?,
            holdout: cfg.get_usize("data.holdout")?.unwrap_or(0),
            d_model: cfg.require_usize("model.d_model")?,
            n_layers: cfg.require_usize("model.n_layers")?,
            n_heads: cfg.require_usize("model.n_heads")?,
            max_len: cfg.require_usize("model.max_len")?,
            optimizer,
            eval_every: cfg.get_u64("eval.every")?.unwrap_or(0),
            eval_block_sizes: match cfg.get("eval.block_sizes") {
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("eval.block_sizes: bad entry {s}")))
                    })
                    .collect::<Result<_>>()?,
                None => vec![1],
            },
            compare_total_steps: cfg.get_u64("compare.total_steps")?,
            stages,
        };
        cfg.finish()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
# toy run
schema_version = 1
model.d_model = 32
model.n_layers = 2
model.n_heads = 2
model.max_len = 72
data.corpus = corpus.txt
data.context_len = 64
data.batch_size = 4
data.holdout = 16
stage.0.objective = ar
stage.0.steps = 100
stage.0.lr_peak = 0.003
stage.1.objective = blockdllm
stage.1.block_size = 4
stage.1.steps = 100
stage.1.lr_peak = 0.003
stage.1.lr_final = 0.0003
stage.1.warmup_steps = 50
compare.total_steps = 200
";

    #[test]
    fn parses_a_complete_run() {
        let spec = RunSpec::parse(GOOD).unwrap();
        assert_eq!(spec.stages.len(), 2);
        assert_eq!(spec.stages[0].objective, Objective::Ar);
        assert_eq!(
            spec.stages[1].objective,
            Objective::BlockDllm { block_size: 4 }
        );
        assert_eq!(spec.stages[1].lr.final_lr, 0.0003);
        assert_eq!(spec.stages[1].warmup.unwrap().warmup_steps, 50);
        assert_eq!(spec.compare_total_steps, Some(200));
        assert_eq!(spec.optimizer, OptimizerConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{GOOD}typo.key = 1\n");
        match RunSpec::parse(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("typo.key"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn schema_version_is_mandatory() {
        assert!(RunSpec::parse("model.d_model = 8\n").is_err());
        assert!(RunSpec::parse("schema_version = 2\n").is_err());
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(FlatConfig::parse("schema_version = 1\nx = 1\nx = 2\n").is_err());
        assert!(FlatConfig::parse("schema_version = 1\nnot a pair\n").is_err());
    }
}
