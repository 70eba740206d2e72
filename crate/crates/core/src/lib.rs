//! Label-efficient evaluation of classifiers by adaptive importance
//! sampling.
//!
//! The crate is `no_std` (with `alloc`). It provides generalized
//! performance measures, score-based stratification, an online model of
//! the labelling oracle, asymptotically optimal proposals, and the
//! sampler/estimator loop that ties them together. IO, CLI and services
//! live in the companion `aiseval` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod alias;
pub mod error;
pub mod estimate;
pub mod history;
pub mod math;
pub mod measures;
pub mod model;
pub mod partition;
pub mod pool;
pub mod proposal;
pub mod sampler;

pub use error::{Error, Result};
pub use measures::{Measure, MeasureSpec, PredictionSource};
pub use partition::{Partition, PartitionTree};
pub use pool::{PoolItem, TestPool};
pub use estimate::EstimateReport;
pub use proposal::{LossTable, Proposal};
pub use sampler::{AisSampler, EvalContext, Oracle, SamplerConfig};
