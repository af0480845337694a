//! Regression markets: pricing and paying for features contributed by
//! support agents to a central agent's regression task.
//!
//! The pipeline runs bottom-up: [`data`] builds time-indexed datasets,
//! [`design`] expands them into model terms with ownership provenance,
//! [`batch`] and [`online`] fit every coalition of support features,
//! [`allocation`] turns coalition losses into shares, and [`market`] clears
//! the batch, online and out-of-sample mechanisms into a ledger.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocation;
pub mod batch;
pub mod data;
pub mod design;
pub mod error;
pub mod loss;
pub mod market;
pub mod online;
pub mod simulation;
pub mod table;
pub mod task;

pub use allocation::{AllocationPolicy, AllocationVector, LooVariant, ShapleyVariant};
pub use batch::{fit_batch, predict, FitResult};
pub use data::{AgentId, Dataset, Series};
pub use design::{AugmentedDesign, Coalition};
pub use error::{MarketError, Result};
pub use loss::{EwmaLoss, LossSpec};
pub use table::CoalitionLossTable;
