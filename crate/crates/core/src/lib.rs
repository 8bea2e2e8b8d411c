//! Reversible-jump Hamiltonian Monte Carlo for Bayesian decision trees with
//! soft (logistic) splits.
//!
//! Two parameterisations are supported: [`Variant::Df`] keeps a discrete split
//! dimension per internal node, [`Variant::Dfi`] replaces it with a simplex
//! weighting all input dimensions.

pub mod config;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nuts;
pub mod rjsampler;
pub mod scalar;
pub mod special;
pub mod topology;
pub mod transforms;

pub use data::{Dataset, Task};
pub use metrics::{MetricsReport, Predictions};
pub use model::{Posterior, PriorConfig, TreeParams, Variant};
pub use rjsampler::{Chain, ChainSample, Move, MoveProbs, SamplerConfig, TreeState};
pub use scalar::Scalar;
pub use topology::{NodeId, PathInfo, TopologyError, TreeTopology};

pub type Dataset64 = Dataset<f64>;
pub type TreeParams64 = TreeParams<f64>;
pub type PriorConfig64 = PriorConfig<f64>;
pub type Posterior64<'a> = Posterior<'a, f64>;
