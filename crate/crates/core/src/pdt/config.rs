use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::trajectory::TOKENS_PER_TRANSITION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdtConfig {
    pub blocks: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Feed-forward width inside each block, as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    /// Width of each of the action head's hidden layers.
    pub head_width: usize,
    pub head_layers: usize,
    pub context_k: usize,
    pub prompt_j: usize,
    pub prompt_h: usize,
    pub target_return: f64,
    /// Return-to-go tokens are divided by this before embedding.
    pub rtg_scale: f64,
    /// Continuous action targets are divided by this (the environment's move bound).
    pub action_scale: f64,
    pub continuous_loss_weight: f64,
    pub stop_loss_weight: f64,
    /// Use a separate positional table for prompt slots instead of the shared one.
    pub separate_prompt_positions: bool,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Default for PdtConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            heads: 1,
            embed_dim: 128,
            ffn_mult: 4,
            head_width: 128,
            head_layers: 2,
            context_k: 5,
            prompt_j: 1,
            prompt_h: 3,
            target_return: 10.0,
            rtg_scale: 10.0,
            action_scale: 0.5,
            continuous_loss_weight: 1.0,
            stop_loss_weight: 1.0,
            separate_prompt_positions: false,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
        }
    }
}

impl PdtConfig {
    /// The prompt-free decision transformer baseline.
    pub fn without_prompt(mut self) -> Self {
        self.prompt_j = 0;
        self
    }

    pub fn prompt_transitions(&self) -> usize {
        self.prompt_j * self.prompt_h
    }

    pub fn prompt_tokens(&self) -> usize {
        self.prompt_transitions() * TOKENS_PER_TRANSITION
    }

    pub fn max_seq_len(&self) -> usize {
        TOKENS_PER_TRANSITION * (self.prompt_transitions() + self.context_k)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Per-token input features: rtg, state, action, then one type flag per token kind.
    pub fn token_features(&self) -> usize {
        1 + self.state_dim + self.action_dim + TOKENS_PER_TRANSITION
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.context_k == 0 || self.blocks == 0 || self.embed_dim == 0 {
            return Err(Error::Config("context_k, blocks and embed_dim must be positive".into()));
        }
        if self.prompt_j > 0 && self.prompt_h == 0 {
            return Err(Error::Config("prompt_h must be positive when prompt_j > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_length() {
        let c = PdtConfig::default();
        assert_eq!(c.max_seq_len(), 24);
        assert_eq!(PdtConfig { prompt_j: 4, ..c.clone() }.max_seq_len(), 3 * (12 + 5));
        assert_eq!(c.clone().without_prompt().max_seq_len(), 15);
        assert!(PdtConfig { heads: 3, ..c }.validate().is_err());
    }
}
