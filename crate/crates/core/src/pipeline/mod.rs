//! Staged training with earlier stages frozen, checkpoints, evaluation and
//! the ablation grid.
//!
//! Fused multi-contrast runs train synthesis, then registration, then
//! reconstruction; single-contrast and naive-concat runs train only
//! reconstruction. Each stage takes finalised checkpoints of the stages
//! before it and computes its inputs with those networks in inference mode.

mod ablation;
mod checkpoint;
mod data;
mod eval;
mod nets;
mod oracle;
mod plan;
mod train;

pub use ablation::{ablation_csv, run_ablation, run_cell, AblationRow, Cell, CellResult, ABLATION_HEADER};
pub use checkpoint::{Checkpoint, EpochRecord, RunLog, StepRow, STEP_HEADER};
pub use data::Prepared;
pub use eval::{evaluate, EvalReport, RecordMetric, ZERO_FILLED};
pub use nets::StageNets;
pub use oracle::{registration_oracle, OracleObjective, OracleReport, OracleSettings};
pub use plan::{ContrastMode, MaskSettings, NetSettings, StagePlan, TrainSettings};
pub use train::{train_all, train_stage};
