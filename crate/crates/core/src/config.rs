//! Pipeline configuration. Defaults are the full-scale hyperparameters;
//! desk-scale runs override dimensions and learning rates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cge::{CgeDims, Norm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgeConfig {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub norm: Norm,
    pub node_drop: f64,
    pub edge_drop: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temp: f64,
    pub lambda_cl: f64,
    pub lambda_edge: f64,
    pub neg_ratio: f64,
    pub patience: usize,
    pub epochs: usize,
}

impl Default for CgeConfig {
    fn default() -> Self {
        CgeConfig {
            input: 768,
            hidden: 1024,
            output: 768,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            norm: Norm::Batch,
            node_drop: 0.05,
            edge_drop: 0.05,
            batch_size: 128,
            lr: 1e-5,
            weight_decay: 0.01,
            temp: 0.3,
            lambda_cl: 0.6,
            lambda_edge: 0.4,
            neg_ratio: 0.5,
            patience: 20,
            epochs: 200,
        }
    }
}

impl CgeConfig {
    pub fn dims(&self) -> CgeDims {
        CgeDims {
            d_in: self.input,
            d_hidden: self.hidden,
            d_out: self.output,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            norm: self.norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub queries: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub cross_freq: usize,
    pub temp_init: f64,
    pub max_len: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            queries: 32,
            layers: 12,
            d_model: 768,
            heads: 12,
            ffn: 3072,
            cross_freq: 2,
            temp_init: 0.07,
            max_len: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub patience: usize,
    pub sched_patience: usize,
    pub sched_factor: f64,
    pub min_lr: f64,
    pub gtc: bool,
    pub gtm: bool,
    pub gtg: bool,
    pub hard_negatives: usize,
    pub finetune_cge: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            batch_size: 16,
            lr: 5e-7,
            weight_decay: 0.01,
            warmup_ratio: 0.01,
            epochs: 200,
            patience: 20,
            sched_patience: 2,
            sched_factor: 0.5,
            min_lr: 1e-10,
            gtc: true,
            gtm: true,
            gtg: true,
            hard_negatives: 3,
            finetune_cge: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub patience: usize,
    pub sched_patience: usize,
    pub sched_factor: f64,
    pub min_lr: f64,
    pub temperature: f64,
    pub rep_penalty: f64,
    pub max_new_tokens: usize,
    pub finetune_cge: bool,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            batch_size: 8,
            lr: 1e-6,
            weight_decay: 0.01,
            warmup_ratio: 0.01,
            epochs: 200,
            patience: 20,
            sched_patience: 2,
            sched_factor: 0.5,
            min_lr: 1e-10,
            temperature: 0.0,
            rep_penalty: 1.1,
            max_new_tokens: 128,
            finetune_cge: false,
        }
    }
}

/// The frozen decoder fixture that stands in for the code LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub context: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Tokens per pretraining step; each window is placed at a random
    /// offset so every position of the context is trained.
    pub pretrain_window: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_llm: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            context: 1024,
            pretrain_epochs: 20,
            pretrain_lr: 3e-3,
            pretrain_window: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub cge: CgeConfig,
    pub bridge: BridgeConfig,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub decoder: DecoderConfig,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be non-negative, got {v}")))
    }
}

fn rate(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must lie in [0, 1), got {v}")))
    }
}

fn at_least_one(name: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be at least 1")))
    }
}

fn divides(name: &str, width: usize, heads: usize) -> Result<()> {
    if heads > 0 && width % heads == 0 {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` = {width} is not divisible by {heads} heads")))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply `section.key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value: toml::Value = format!("v = {raw}")
                .parse::<toml::Table>()
                .map(|mut t| t.remove("v").unwrap())
                .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}` is not a config section")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                slot = table.entry(part.to_string()).or_insert(toml::Value::Table(Default::default()));
            }
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cge;
        for (n, v) in [
            ("cge.input", c.input),
            ("cge.hidden", c.hidden),
            ("cge.output", c.output),
            ("cge.layers", c.layers),
            ("cge.heads", c.heads),
            ("cge.batch_size", c.batch_size),
        ] {
            at_least_one(n, v)?;
        }
        divides("cge.hidden", c.hidden, c.heads)?;
        divides("cge.output", c.output, c.heads)?;
        rate("cge.dropout", c.dropout)?;
        rate("cge.node_drop", c.node_drop)?;
        rate("cge.edge_drop", c.edge_drop)?;
        positive("cge.temp", c.temp)?;
        non_negative("cge.lr", c.lr)?;
        non_negative("cge.weight_decay", c.weight_decay)?;
        non_negative("cge.lambda_cl", c.lambda_cl)?;
        non_negative("cge.lambda_edge", c.lambda_edge)?;
        non_negative("cge.neg_ratio", c.neg_ratio)?;

        let b = &self.bridge;
        for (n, v) in [
            ("bridge.queries", b.queries),
            ("bridge.layers", b.layers),
            ("bridge.d_model", b.d_model),
            ("bridge.heads", b.heads),
            ("bridge.ffn", b.ffn),
            ("bridge.cross_freq", b.cross_freq),
            ("bridge.max_len", b.max_len),
        ] {
            at_least_one(n, v)?;
        }
        divides("bridge.d_model", b.d_model, b.heads)?;
        positive("bridge.temp_init", b.temp_init)?;

        let s = &self.stage2;
        at_least_one("stage2.batch_size", s.batch_size)?;
        at_least_one("stage2.hard_negatives", s.hard_negatives)?;
        non_negative("stage2.lr", s.lr)?;
        non_negative("stage2.weight_decay", s.weight_decay)?;
        rate("stage2.warmup_ratio", s.warmup_ratio)?;
        positive("stage2.sched_factor", s.sched_factor)?;
        non_negative("stage2.min_lr", s.min_lr)?;

        let s = &self.stage3;
        at_least_one("stage3.batch_size", s.batch_size)?;
        non_negative("stage3.lr", s.lr)?;
        non_negative("stage3.weight_decay", s.weight_decay)?;
        rate("stage3.warmup_ratio", s.warmup_ratio)?;
        positive("stage3.sched_factor", s.sched_factor)?;
        non_negative("stage3.min_lr", s.min_lr)?;
        if s.temperature != 0.0 {
            return Err(Error::Config(format!(
                "`stage3.temperature` = {}: only greedy decoding (0) is supported",
                s.temperature
            )));
        }
        positive("stage3.rep_penalty", s.rep_penalty)?;

        let d = &self.decoder;
        for (n, v) in [
            ("decoder.d_llm", d.d_llm),
            ("decoder.layers", d.layers),
            ("decoder.heads", d.heads),
            ("decoder.ffn", d.ffn),
            ("decoder.context", d.context),
        ] {
            at_least_one(n, v)?;
        }
        divides("decoder.d_llm", d.d_llm, d.heads)?;
        non_negative("decoder.pretrain_lr", d.pretrain_lr)?;
        Ok(())
    }
}
