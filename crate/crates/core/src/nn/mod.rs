//! Layers and the blocks built from them.

mod blocks;
mod layers;

pub use blocks::{
    fuse, one_branch_hidden, square_fusion, ActPlacement, BlockConfig, DemoBlock, FusionMode,
    OneBranchBlock, OneBranchStar, StarBlock,
};
pub use layers::{fold_batch_norm, BatchNorm, Conv2d, Init, LayerNorm, Linear};

use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, drop path active.
    Train,
    /// Running statistics, no stochasticity.
    Eval,
    /// Like eval, but each batch norm first overwrites its running
    /// statistics with the statistics of the batch it sees.
    Calibrate,
}

/// Per-pass settings threaded through every forward call.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    /// Source of drop-path draws.
    pub rng: Rng,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            rng: rng::stream(seed, rng::streams::DROP_PATH),
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: rng::stream(0, rng::streams::DROP_PATH),
        }
    }

    pub fn calibrate() -> Self {
        Self {
            mode: Mode::Calibrate,
            ..Self::eval()
        }
    }
}
