//! Tensor, sequence and shift parallelism for transformer inference,
//! executed over simulated workers.
//!
//! The crate runs a small transformer under any `(SP, TP)` layout, switches
//! between a sequence-parallel base layout and a full tensor-parallel shift
//! layout without touching the KV cache, and simulates serving traffic with an
//! analytic cost model derived from the same communication ledgers.

pub mod collectives;
pub mod config;
pub mod error;
pub mod model;
pub mod parallel;
pub mod shift;
pub mod sim;
pub mod tensor;
pub mod topology;

pub use collectives::{CollectiveKind, CommLedger, GroupKind, Ledgers};
pub use config::{ModelConfig, ModelPreset, ParallelConfig};
pub use error::{Error, Result};
pub use model::{Sequence, ShardedKvCache, TokenId, Weights};
pub use parallel::{Batch, BatchRow, ClusterCache, ParallelExecutor, RequestId};
pub use shift::{Branch, ShiftEngine, WeightFootprint};
pub use tensor::Matrix;
pub use topology::{Layout, Topology};
