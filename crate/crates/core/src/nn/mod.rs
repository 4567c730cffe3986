//! Reusable neural building blocks.

mod block;
mod conv;
mod linear;
mod lstm;

pub use block::{AttentionOutput, BlockConfig, BlockKind, BlockStack, ProjectionKind, TransformerBlock};
pub use conv::{TemporalConv, DEFAULT_KERNELS};
pub use linear::{LayerNorm, Linear, ScoreHead};
pub use lstm::{lstm_scan, LstmCell, MultiScaleLstm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed sinusoidal table: `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(…)`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width must be even, got {d}")));
    }
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, d, data)
}
