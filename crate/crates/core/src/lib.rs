//! Item-to-item metric learning with a Siamese-kernel Gaussian process.
//!
//! The library covers the full pipeline:
//!
//! - [`data`]: interaction logs, multi-channel item meta data, time splits,
//!   surrogate rating targets, noisy pair annotations and co-interaction
//!   ground truth;
//! - [`siamese`]: per-channel feature towers, Mahalanobis channel
//!   distances, the sigmoid-aggregated ensemble distance, exact gradients
//!   and a contrastive baseline trainer;
//! - [`gp`]: the metric-parameterized kernel `exp(-D/2)`, Gram matrices,
//!   marginal-likelihood objective with analytic gradients, posterior
//!   prediction and a low-rank inducing-point path;
//! - [`ssl`]: self-supervised metric fitting by descending the GP negative
//!   log likelihood over surrogate targets;
//! - [`meta`]: per-user local losses and adaptation, exact and
//!   Taylor-approximated update Jacobians, and meta-training of the
//!   aggregation weights for fast personalization;
//! - [`eval`]: top-k ranking against the catalog scored by HR@K, MRR@K and
//!   NDCG@K;
//! - [`theory`]: synthetic oracle worlds and executable checks of the
//!   kernel/metric approximation bounds, the tail bound, the sample
//!   complexity threshold and the Gaussian quadratic-form identities;
//! - [`synth`]: deterministic synthetic worlds for demos and experiments.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod gp;
pub mod meta;
pub mod opt;
pub mod siamese;
pub mod ssl;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
