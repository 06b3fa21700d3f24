use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_context: usize,
}

impl ModelConfig {
    /// Two layers, eight-wide, four query heads sharing two KV heads.
    pub const TINY: ModelConfig = ModelConfig {
        layers: 2,
        hidden: 8,
        mlp_hidden: 16,
        q_heads: 4,
        kv_heads: 2,
        head_dim: 2,
        vocab: 32,
        max_context: 64,
    };

    /// Eight query heads over two KV heads, the 4:1 grouping of 64/8 models.
    pub const GQA: ModelConfig = ModelConfig {
        layers: 2,
        hidden: 16,
        mlp_hidden: 32,
        q_heads: 8,
        kv_heads: 2,
        head_dim: 2,
        vocab: 32,
        max_context: 64,
    };

    /// Six heads, for six-worker layouts such as SP=3 x TP=2.
    pub const HEX: ModelConfig = ModelConfig {
        layers: 2,
        hidden: 12,
        mlp_hidden: 24,
        q_heads: 6,
        kv_heads: 6,
        head_dim: 2,
        vocab: 32,
        max_context: 64,
    };

    /// An 8B-class shape. Only used through the analytic cost model; far too
    /// large to execute here.
    pub const SIM: ModelConfig = ModelConfig {
        layers: 32,
        hidden: 4096,
        mlp_hidden: 14336,
        q_heads: 32,
        kv_heads: 8,
        head_dim: 128,
        vocab: 128_256,
        max_context: 131_072,
    };

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.q_heads % self.kv_heads != 0 {
            return Err(Error::config(format!(
                "{} query heads cannot be grouped over {} kv heads",
                self.q_heads, self.kv_heads
            )));
        }
        if self.hidden != self.q_heads * self.head_dim {
            return Err(Error::config(format!(
                "hidden {} != q_heads {} x head_dim {}",
                self.hidden, self.q_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Query heads served by each KV head.
    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    /// KV head read by query head `q`: contiguous blocks of `group_size`.
    pub fn kv_head_of(&self, q: usize) -> usize {
        q / self.group_size()
    }

    /// Width of the fused QKV projection output.
    pub fn qkv_width(&self) -> usize {
        (self.q_heads + 2 * self.kv_heads) * self.head_dim
    }

    /// Elements in every transformer layer (QKV, O, MLP up and down).
    pub fn layer_elements(&self) -> usize {
        self.hidden * self.qkv_width()
            + self.q_heads * self.head_dim * self.hidden
            + 2 * self.hidden * self.mlp_hidden
    }

    pub fn with_kv_heads(mut self, kv_heads: usize) -> Self {
        self.kv_heads = kv_heads;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPreset {
    Tiny,
    Gqa,
    Hex,
    Sim,
}

impl ModelPreset {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Tiny => ModelConfig::TINY,
            ModelPreset::Gqa => ModelConfig::GQA,
            ModelPreset::Hex => ModelConfig::HEX,
            ModelPreset::Sim => ModelConfig::SIM,
        }
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ModelPreset::Tiny),
            "gqa" => Ok(ModelPreset::Gqa),
            "hex" => Ok(ModelPreset::Hex),
            "sim" => Ok(ModelPreset::Sim),
            other => Err(Error::config(format!("unknown model preset {other:?}"))),
        }
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ModelPreset::Tiny => "tiny",
            ModelPreset::Gqa => "gqa",
            ModelPreset::Hex => "hex",
            ModelPreset::Sim => "sim",
        };
        f.write_str(name)
    }
}

/// Degrees of sequence and tensor parallelism plus the shift threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub sp: usize,
    pub tp: usize,
    /// Batches with more tokens than this run in the base configuration.
    pub shift_threshold: usize,
}

impl ParallelConfig {
    /// Uses the default threshold of one token per worker.
    pub fn new(sp: usize, tp: usize) -> Result<Self> {
        Self::with_threshold(sp, tp, sp * tp)
    }

    pub fn with_threshold(sp: usize, tp: usize, shift_threshold: usize) -> Result<Self> {
        if sp == 0 || tp == 0 {
            return Err(Error::config("sp and tp must be at least 1"));
        }
        Ok(Self {
            sp,
            tp,
            shift_threshold,
        })
    }

    /// Total number of workers.
    pub fn p(&self) -> usize {
        self.sp * self.tp
    }

    /// The full-TP configuration over the same workers.
    pub fn shift(&self) -> ParallelConfig {
        ParallelConfig {
            sp: 1,
            tp: self.p(),
            shift_threshold: self.shift_threshold,
        }
    }
}

impl fmt::Display for ParallelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sp{}xtp{}", self.sp, self.tp)
    }
}
