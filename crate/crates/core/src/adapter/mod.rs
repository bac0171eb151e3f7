//! The trainable bidirectional adapter.
//!
//! Per window: reduce the frozen encoder's line states from `D` to `d`
//! with a learned projection, run `n` pre-norm Transformer encoder layers
//! with unmasked self-attention so every line sees every other line, then
//! map each line's final representation to a bugginess probability with a
//! sigmoid-activated dense head. With zero layers the model degenerates to a
//! per-line linear probe.
//!
//! All arithmetic is `f64`. Parameters are kept on the `f32` grid by
//! [`AdapterModel::round_to_f32`] so checkpoints (stored as `f32`) round-trip
//! exactly; the gradient checker works on unrounded copies.

mod backward;
mod checkpoint;
mod forward;
mod gradcheck;
mod params;

pub use backward::{backward, Gradients};
pub use checkpoint::{Checkpoint, SeedLineage, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, loss, ForwardTrace, Mode};
pub use gradcheck::{check_gradients, grad_check, GradCheckOptions, RELATIVE_FLOOR};
pub use params::{AdapterModel, AdapterParams, LayerParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    Sinusoidal,
    Learned,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Dimension of the frozen encoder's line states.
    pub input_dim: usize,
    /// Internal adapter dimension.
    pub model_dim: usize,
    /// Bidirectional encoder layers; 0 gives the linear-probe ablation.
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_multiplier: usize,
    pub dropout: f64,
    pub positional_encoding: PositionalEncoding,
    /// Table size for learned positions; ignored otherwise.
    pub max_positions: usize,
}

impl AdapterConfig {
    /// Two layers, eight heads, `d = 512`.
    pub fn full(input_dim: usize) -> Self {
        Self {
            input_dim,
            model_dim: 512,
            n_layers: 2,
            n_heads: 8,
            ff_multiplier: 4,
            dropout: 0.1,
            positional_encoding: PositionalEncoding::Sinusoidal,
            max_positions: crate::windowing::DEFAULT_CAPACITY,
        }
    }

    pub fn small(input_dim: usize, model_dim: usize, n_layers: usize, n_heads: usize) -> Self {
        Self { model_dim, n_layers, n_heads, ..Self::full(input_dim) }
    }

    /// No bidirectional layers: `sigmoid(S W_d w_b + b)` per line.
    pub fn linear_probe(input_dim: usize, model_dim: usize) -> Self {
        Self {
            n_layers: 0,
            n_heads: 1,
            positional_encoding: PositionalEncoding::None,
            ..Self::small(input_dim, model_dim, 0, 1)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.model_dim * self.ff_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.model_dim == 0 {
            return fail("input and model dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return fail(format!("model dimension {} is not divisible by {} heads", self.model_dim, self.n_heads));
        }
        if self.ff_multiplier == 0 {
            return fail("feed-forward multiplier must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.positional_encoding == PositionalEncoding::Learned && self.max_positions == 0 {
            return fail("learned positions need max_positions > 0".into());
        }
        Ok(())
    }
}
