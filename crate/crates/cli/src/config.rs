//! TOML configuration file schema. Every section is optional; flags
//! override file values.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dualenc::encoder::EncoderConfig;
use dualenc::pipeline::TrainConfig;
use dualenc::synth::SynthConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub encoder: Option<EncoderSection>,
    pub train: Option<TrainSection>,
    pub synth: Option<SynthConfig>,
    pub search: Option<SearchSection>,
    pub bench: Option<BenchSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub vocab_size: Option<u32>,
    pub embed_dim: Option<usize>,
    pub layers_ctx: Option<usize>,
    pub layers_den: Option<usize>,
    pub layers_lex: Option<usize>,
    pub heads: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub share_global: Option<bool>,
}

impl EncoderSection {
    pub fn apply(&self, cfg: &mut EncoderConfig) {
        if let Some(v) = self.vocab_size {
            cfg.vocab_size = v;
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.layers_ctx {
            cfg.layers_ctx = v;
        }
        if let Some(v) = self.layers_den {
            cfg.layers_den = v;
        }
        if let Some(v) = self.layers_lex {
            cfg.layers_lex = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.max_seq_len {
            cfg.max_seq_len = v;
        }
        if let Some(v) = self.share_global {
            cfg.share_global = v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub batch_queries: Option<usize>,
    pub negatives_per_query: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub warmup_ratio: Option<f64>,
    pub lambda_flops: Option<f64>,
    pub steps: Option<usize>,
    pub use_distill: Option<bool>,
}

impl StageSection {
    fn apply(&self, sp: &mut dualenc::pipeline::StageParams) {
        if let Some(v) = self.batch_queries {
            sp.batch_queries = v;
        }
        if let Some(v) = self.negatives_per_query {
            sp.negatives_per_query = v;
        }
        if let Some(v) = self.lr {
            sp.lr = v;
        }
        if let Some(v) = self.seed {
            sp.seed = v;
        }
        if let Some(v) = self.warmup_ratio {
            sp.warmup_ratio = v;
        }
        if let Some(v) = self.lambda_flops {
            sp.lambda_flops = v;
        }
        if let Some(v) = self.steps {
            sp.steps = v;
        }
        if let Some(v) = self.use_distill {
            sp.use_distill = v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub warmup: Option<StageSection>,
    pub continual: Option<StageSection>,
    pub mining_top_n: Option<usize>,
    pub init_seed: Option<u64>,
    pub train_gate: Option<bool>,
    pub gate_seed: Option<u64>,
}

impl TrainSection {
    pub fn apply(&self, tc: &mut TrainConfig) {
        if let Some(s) = &self.warmup {
            s.apply(&mut tc.warmup);
        }
        if let Some(s) = &self.continual {
            s.apply(&mut tc.continual);
        }
        if let Some(v) = self.mining_top_n {
            tc.mining_top_n = v;
        }
        if let Some(v) = self.init_seed {
            tc.init_seed = v;
        }
        if let Some(v) = self.train_gate {
            tc.train_gate = v;
        }
        if let Some(v) = self.gate_seed {
            tc.gate_seed = v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub k_final: Option<usize>,
    pub k_uni: Option<usize>,
    pub scheme: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub trials: Option<usize>,
    /// Free-form machine descriptor recorded in the report.
    pub machine: Option<String>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}
