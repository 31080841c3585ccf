//! Desk-scale testbed for hierarchical multi-vehicle navigation.
//!
//! The crate couples a queue-based mesoscopic traffic simulator with a
//! two-level routing architecture: a global allocator that picks region
//! sequences over a Louvain partition of the road network, and local
//! navigators that pick intra-region edge paths toward the next region.
//! Policies are pluggable (greedy, featurized softmax, LLM endpoint), and
//! the softmax policy is trainable with group-relative policy optimization
//! over a dual individual/shared reward.
//!
//! Numeric kernels (path search costs, softmax policies, the policy
//! optimization math) are generic over [`scalar::Real`]; the simulator and
//! all file formats use the crate-level [`Scalar`] alias.

pub mod bench;
pub mod controller;
pub mod coop_opt;
pub mod mesosim;
pub mod netgraph;
pub mod observe;
pub mod partition;
pub mod plan;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod scenario;

/// Scalar type used by the simulator, the CLI, and every file format.
pub type Scalar = f64;

/// Crate version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
