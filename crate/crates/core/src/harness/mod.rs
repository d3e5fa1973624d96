//! Training, evaluation and the experiment drivers built on top of them.

mod checkpoint;
mod config;
mod experiments;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, ParamEntry, CHECKPOINT_VERSION};
pub use config::{Profile, TrainConfig};
pub use experiments::{
    ablate, export_trace, grid_search, median, run_gradcheck, write_csv, AblationRow, AblationTable, GradCheckSummary,
    GridRow, Variant, DEFAULT_GRID_D1, DEFAULT_GRID_D2, DEFAULT_GRID_HEADS,
};
pub use optim::Adam;
pub use train::{evaluate, predict_all, train, EpochLog, TrainOutcome};
