//! Training loop, optimizers, the moons dataset and the desk-scale experiments.

mod boundary;
mod data;
mod experiments;
mod fit;
mod optim;

pub use boundary::{boundary_eval, BoundaryGrid, GridSpec, Scorer};
pub use data::{eval_split, make_moons, MoonsDataset};
pub use fit::{accuracy, argmax_rows, logits, train, EpochRecord, History};
pub use optim::{adamw_step, cosine_lr, sgd_momentum_step, Optimizer, OptimizerKind, TrainRecipe};
pub use experiments::{
    ablate_activations, run_boundary_suite, thread_budget, AblationRow, MixedRun, SeedOutcome, SuiteConfig,
    SUITE_MODELS, THREADS_ENV,
};
