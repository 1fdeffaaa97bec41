use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    /// Embedding width `E`.
    pub embed: usize,
    pub heads: usize,
    /// Per-head width `H`.
    pub head_dim: usize,
    /// FFN hidden width `F`.
    pub ffn: usize,
    /// Prompt length `L` processed by prefill.
    pub seq_len: usize,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
}

fn one() -> usize {
    1
}

fn default_vocab() -> usize {
    64
}

impl ModelShape {
    /// `E=32`, 4 heads of 8, `F=64`, `L=16`, 2 layers, 64-token vocabulary.
    pub fn toy() -> Self {
        Self { embed: 32, heads: 4, head_dim: 8, ffn: 64, seq_len: 16, batch: 1, layers: 2, vocab: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed", self.embed),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn", self.ffn),
            ("seq_len", self.seq_len),
            ("layers", self.layers),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model dimension {name} must be positive")));
        }
        if self.embed != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "embed {} != heads {} x head_dim {}",
                self.embed, self.heads, self.head_dim
            )));
        }
        if self.batch != 1 {
            return Err(Error::Config(format!("only batch 1 is simulated, got {}", self.batch)));
        }
        Ok(())
    }

    /// Bytes of one layer's weights.
    pub fn layer_weight_bytes(&self) -> u64 {
        let e = self.embed as u64;
        let f = self.ffn as u64;
        (4 * e * e + 2 * e * f + 2 * e) * crate::fabric::ELEM_BYTES
    }

    pub fn model_weight_bytes(&self) -> u64 {
        let e = self.embed as u64;
        let v = self.vocab as u64;
        self.layers as u64 * self.layer_weight_bytes() + (2 * v * e + e) * crate::fabric::ELEM_BYTES
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid() {
        ModelShape::toy().validate().unwrap();
        let mut s = ModelShape::toy();
        s.heads = 3;
        assert!(s.validate().is_err());
        s = ModelShape::toy();
        s.batch = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn parses_with_defaults() {
        let s: ModelShape = toml::from_str("embed = 16\nheads = 2\nhead_dim = 8\nffn = 32\nseq_len = 8\n").unwrap();
        assert_eq!((s.batch, s.layers, s.vocab), (1, 1, 64));
    }
}
