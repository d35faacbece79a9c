//! A miniature block-structured attention denoiser.
//!
//! The toy keeps the eight-block layout of the SDXL topology with fewer layers
//! per block. Each layer is a self-attention followed by a cross-attention over
//! a prompt embedding, both residual. Toy layer `l` of block `b` reuses the
//! adapter key stem of SDXL layer `l` in the same block, so adapters trained
//! here flow through the same extract / combine / merge tooling as real
//! checkpoints.

mod math;
mod model;
mod prompt;
mod sample;
mod train;

pub use math::{attention, Scalar};
pub use model::{EmbeddingSource, ToyModel, Trace};
pub use prompt::{label_signature, AblationPrompts, AblationScheme, PromptEncoder, PromptRouting};
pub use sample::{SyntheticFamily, SyntheticSample};
pub use train::{
    grad_check, pair_grid, reconstruction_loss, train_blora, AdamConfig, GradCheckReport, PairGrid, TrainOutcome,
    TrainSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{BlockId, BLOCK_COUNT, LAYER_COUNTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub token_dim: usize,
    pub head_count: usize,
    pub layer_counts: [usize; BLOCK_COUNT],
    pub prompt_dim: usize,
    /// Rows of a prompt embedding.
    pub prompt_tokens: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            token_dim: 16,
            head_count: 2,
            layer_counts: [1, 2, 2, 2, 2, 2, 2, 1],
            prompt_dim: 16,
            prompt_tokens: 4,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.token_dim == 0 || self.head_count == 0 || self.prompt_dim == 0 || self.prompt_tokens == 0 {
            return bad("toy dimensions must be >= 1".into());
        }
        if !self.token_dim.is_multiple_of(self.head_count) {
            return bad(format!(
                "token_dim {} not divisible by head_count {}",
                self.token_dim, self.head_count
            ));
        }
        for (b, (&n, &max)) in self.layer_counts.iter().zip(&LAYER_COUNTS).enumerate() {
            if n == 0 || n > max {
                return bad(format!("block W{b} layer count {n} outside 1..={max}"));
            }
        }
        Ok(())
    }

    /// `(block, layer)` for every toy layer in forward-pass order.
    pub fn layer_addresses(&self) -> Vec<(BlockId, usize)> {
        BlockId::ALL
            .into_iter()
            .flat_map(|b| (0..self.layer_counts[b.index()]).map(move |l| (b, l)))
            .collect()
    }
}
