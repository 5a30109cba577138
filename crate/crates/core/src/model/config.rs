use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyperparameters. Defaults are the Small configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_length: usize,
    pub projection_dropout: f64,
    pub attention_dropout: f64,
    pub feedforward_multiplier: usize,
    /// Inclusive charge vocabulary.
    pub charge_range: (i32, i32),
    /// Inclusive spin-multiplicity vocabulary.
    pub spin_range: (u32, u32),
    pub ttau_layers: usize,
    pub ttau_hidden_multiplier: usize,
    /// Largest atomic number with an embedding row.
    pub max_atomic_number: u32,
    pub rope_base: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 384,
            num_layers: 8,
            num_heads: 6,
            context_length: 1024,
            projection_dropout: 0.01,
            attention_dropout: 0.0,
            feedforward_multiplier: 4,
            charge_range: (-10, 10),
            spin_range: (1, 10),
            ttau_layers: 2,
            ttau_hidden_multiplier: 2,
            max_atomic_number: 118,
            rope_base: 10000.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        Self { hidden_dim: 32, num_layers: 2, num_heads: 2, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim;
        let bad = |msg: String| Err(Error::Config(msg));
        if d == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return bad("hidden_dim, num_layers and num_heads must be positive".into());
        }
        if d % 2 != 0 {
            return bad(format!("hidden_dim {d} must be even"));
        }
        if d % self.num_heads != 0 {
            return bad(format!("hidden_dim {d} is not divisible by num_heads {}", self.num_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.context_length == 0 || self.context_length > crate::moldata::MAX_ATOMS {
            return bad(format!("context_length {} out of range", self.context_length));
        }
        for (name, p) in
            [("projection_dropout", self.projection_dropout), ("attention_dropout", self.attention_dropout)]
        {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} must lie in [0, 1)"));
            }
        }
        if self.feedforward_multiplier == 0 || self.ttau_hidden_multiplier == 0 || self.ttau_layers == 0 {
            return bad("feedforward and transformation-network sizes must be positive".into());
        }
        if self.charge_range.0 > self.charge_range.1 || self.spin_range.0 > self.spin_range.1 || self.spin_range.0 == 0
        {
            return bad(format!("invalid vocabularies: charge {:?}, spin {:?}", self.charge_range, self.spin_range));
        }
        if self.max_atomic_number == 0 {
            return bad("max_atomic_number must be positive".into());
        }
        if !(self.rope_base > 1.0) || !(self.layer_norm_eps > 0.0) {
            return bad("rope_base must exceed 1 and layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}
