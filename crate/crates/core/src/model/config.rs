use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Decoder-only transformer hyperparameters (GPT-2 layout).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub layernorm_eps: f32,
    pub tie_embeddings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Small,
    Medium,
}

impl Preset {
    pub fn config(self, vocab_size: usize) -> ModelConfig {
        let (n_layers, n_heads, d_model) = match self {
            Preset::Toy => (2, 4, 64),
            Preset::Small => (12, 12, 768),
            Preset::Medium => (24, 16, 1024),
        };
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            context_len: 1024,
            vocab_size,
            layernorm_eps: 1e-5,
            tie_embeddings: true,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::Small => "small",
            Preset::Medium => "medium",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "toy" => Ok(Preset::Toy),
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            other => Err(format!("unknown preset {other:?} (expected toy, small or medium)")),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("layers, heads and width must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len == 0 || self.vocab_size == 0 || self.d_ff == 0 {
            return bad("context, vocabulary and feed-forward sizes must be positive".into());
        }
        Ok(())
    }

    /// Every tensor the model needs, with its shape, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("wte".to_string(), vec![self.vocab_size, d]),
            ("wpe".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            out.extend([
                (p("ln_1.weight"), vec![d]),
                (p("ln_1.bias"), vec![d]),
                (p("attn.c_attn.weight"), vec![d, 3 * d]),
                (p("attn.c_attn.bias"), vec![3 * d]),
                (p("attn.c_proj.weight"), vec![d, d]),
                (p("attn.c_proj.bias"), vec![d]),
                (p("ln_2.weight"), vec![d]),
                (p("ln_2.bias"), vec![d]),
                (p("mlp.c_fc.weight"), vec![d, self.d_ff]),
                (p("mlp.c_fc.bias"), vec![self.d_ff]),
                (p("mlp.c_proj.weight"), vec![self.d_ff, d]),
                (p("mlp.c_proj.bias"), vec![d]),
            ]);
        }
        out.push(("ln_f.weight".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("lm_head.weight".to_string(), vec![self.vocab_size, d]));
        }
        out
    }
}
