use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SmithError};

/// How sentence-level and document-level representations are fused into
/// the final document vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Document-level representation only.
    Normal,
    SumConcat,
    MeanConcat,
    /// Attention-weighted sum of block representations, concatenated.
    Attention,
}

impl CombineMode {
    pub const ALL: [CombineMode; 4] = [
        CombineMode::Normal,
        CombineMode::SumConcat,
        CombineMode::MeanConcat,
        CombineMode::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CombineMode::Normal => "normal",
            CombineMode::SumConcat => "sum_concat",
            CombineMode::MeanConcat => "mean_concat",
            CombineMode::Attention => "attention",
        }
    }
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CombineMode {
    type Err = SmithError;

    fn from_str(s: &str) -> Result<Self> {
        CombineMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SmithError::Config(format!("unknown combine mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Sentence-level Transformer layers.
    pub l1: usize,
    /// Document-level Transformer layers.
    pub l2: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Token slots per sentence block, CLS included.
    pub block_len: usize,
    /// Maximum sentence blocks per document.
    pub max_blocks: usize,
    pub vocab_size: usize,
    pub combine_mode: CombineMode,
    pub attn_combine_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l1: 6,
            l2: 3,
            hidden: 256,
            heads: 4,
            block_len: 32,
            max_blocks: 48,
            vocab_size: 30522,
            combine_mode: CombineMode::Normal,
            attn_combine_dim: 256,
            dropout: 0.1,
        }
    }
}

const KEYS: [&str; 10] = [
    "L1",
    "L2",
    "H",
    "A",
    "Ls",
    "Ld",
    "vocab_size",
    "combine_mode",
    "dropout",
    "attn_combine_dim",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SmithError::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return err(format!(
                "H={} must be a positive multiple of A={}",
                self.hidden, self.heads
            ));
        }
        if self.block_len < 2 {
            return err(format!("Ls={} must be at least 2", self.block_len));
        }
        if self.max_blocks < 1 {
            return err("Ld must be at least 1".into());
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIAL {
            return err(format!(
                "vocab_size={} leaves no room for regular tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout={} must be in [0, 1)", self.dropout));
        }
        if self.combine_mode == CombineMode::Attention && self.attn_combine_dim == 0 {
            return err("attn_combine_dim must be positive".into());
        }
        Ok(())
    }

    /// Width of the final document vector.
    pub fn output_dim(&self) -> usize {
        match self.combine_mode {
            CombineMode::Normal => self.hidden,
            _ => 2 * self.hidden,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "L1={}\nL2={}\nH={}\nA={}\nLs={}\nLd={}\nvocab_size={}\ncombine_mode={}\ndropout={}\nattn_combine_dim={}\n",
            self.l1,
            self.l2,
            self.hidden,
            self.heads,
            self.block_len,
            self.max_blocks,
            self.vocab_size,
            self.combine_mode,
            self.dropout,
            self.attn_combine_dim,
        )
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored and
    /// keys not given keep their defaults.
    pub fn parse_key_values(text: &str) -> Result<Self> {
        Self::parse_with_defaults(text, ModelConfig::default())
    }

    /// Like [`parse_key_values`](Self::parse_key_values) with keys not given
    /// taken from `defaults`. An absent `attn_combine_dim` follows `H`.
    pub fn parse_with_defaults(text: &str, defaults: ModelConfig) -> Result<Self> {
        let mut cfg = defaults;
        let mut attn_dim_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SmithError::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |e: &dyn fmt::Display| SmithError::Config(format!("line {}: {key}: {e}", n + 1));
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
            match key {
                "L1" => cfg.l1 = int(value)?,
                "L2" => cfg.l2 = int(value)?,
                "H" => cfg.hidden = int(value)?,
                "A" => cfg.heads = int(value)?,
                "Ls" => cfg.block_len = int(value)?,
                "Ld" => cfg.max_blocks = int(value)?,
                "vocab_size" => cfg.vocab_size = int(value)?,
                "combine_mode" => cfg.combine_mode = value.parse()?,
                "dropout" => cfg.dropout = value.parse().map_err(|e| bad(&e))?,
                "attn_combine_dim" => {
                    cfg.attn_combine_dim = int(value)?;
                    attn_dim_set = true;
                }
                _ => {
                    return Err(SmithError::Config(format!(
                        "line {}: unknown key `{key}` (expected one of {KEYS:?})",
                        n + 1
                    )))
                }
            }
        }
        if !attn_dim_set {
            cfg.attn_combine_dim = cfg.hidden;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_defaults(path, ModelConfig::default())
    }

    pub fn load_with_defaults(path: &Path, defaults: ModelConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SmithError::io(format!("reading config {}", path.display()), e))?;
        Self::parse_with_defaults(&text, defaults)
    }
}
