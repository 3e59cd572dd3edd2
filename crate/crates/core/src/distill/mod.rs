//! Trajectory matching: the normalized parameter-distance objective, the
//! differentiable student unroll with a learnable step size, and the
//! self-adaptive controller that grows the pool of matched teacher epochs
//! when a held-out matching loss shows a significant downward trend.

mod checkpoint;
mod objective;
mod stats;
mod stm;
mod syn;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use objective::{
    hypergradient, inner_unroll, match_loss, match_loss_var, unroll_params, Hypergradient, MatchLoss, MIN_DENOMINATOR,
};
pub use stats::{pearson_r, should_expand, Correlation};
pub use stm::{
    distill_step, mtt_baseline_step, run_mtt, run_stm, sample_start, validation_loss, DistillConfig, Expansion,
    HistoryEntry, StepInfo, Stm, StmResult, StmState, Termination,
};
pub use syn::{init_syn, InitMode, SynLeaves, SyntheticDataset, ALPHA_FLOOR};
