//! Prompt-adaptive bit allocation.

pub mod plan;
pub mod q2b;
pub mod t2q;
pub mod train;

pub use plan::{merge_bit_plans, BitPlan};
pub use q2b::{select_bits, select_index, BitProbabilities, Q2BParams, Q2BVars, Variant};
pub use t2q::{train_t2q, T2QFit, T2QModel, T2QTraining};
pub use train::{
    draw_batch, loss_scale, qlip_loss, qlip_loss_tape, qlip_objective, train_q2b, LayerCandidates,
    LossScale, ObjectiveEval, ObjectiveMode, Q2BBatch, Q2BData, Q2BLogRow, Q2BTraining,
};
