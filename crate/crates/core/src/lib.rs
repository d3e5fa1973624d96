//! Hierarchical global-view sequence representation learning for binary risk
//! prediction.
//!
//! Each instance carries a multichannel time series and a static feature
//! vector. The model embeds a temporal correlation graph of the series with a
//! small CNN, encodes every channel with its own LSTM, pools each channel with
//! a time-decay / significance aware attention, refines the stacked
//! representations with multi-head self-attention and aggregates them under
//! the guidance of the instance-level view.
//!
//! Everything runs on the in-crate reverse-mode tape in [`ndtensor`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod battn;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gge;
pub mod harness;
pub mod ndtensor;
pub mod objective;
pub mod seqenc;

pub use data::{Dataset, InstanceRecord};
pub use error::{Error, Result};
pub use fusion::{ForwardMode, HgvModel, ModelConfig, Trace};
pub use harness::TrainConfig;
pub use ndtensor::{ParamStore, Tape, Tensor, Var};
pub use objective::MetricReport;
