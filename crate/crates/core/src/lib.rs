//! Diversity-controlled ensembles of softmax classifiers.
//!
//! Each member `k` of an ensemble of `K` classifiers is trained on the
//! amended cross entropy
//!
//! ```text
//! e^k = H(p, q^k) - (λ / K) Σ_{j≠k} H(q^j, q^k)
//! ```
//!
//! whose gradient with respect to the member's logits is
//! `(1 - λ)(q^k - p) + λ(q̄ - p)`. `λ = 0` is ordinary independent training;
//! larger `λ` pushes members apart while pulling the ensemble average
//! towards the label.
//!
//! The crate provides the losses and their closed-form gradients
//! ([`losses`]), a small ReLU MLP with manual backpropagation ([`models`]),
//! the multi-model trainer and its regression analogue ([`ensemble`]), the
//! shared-trunk multi-head variant ([`smoc`]), data loading ([`data`]) and
//! evaluation ([`metrics`]).

pub mod data;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod smoc;

pub use data::{BatchPlan, Dataset, Targets};
pub use ensemble::{EnsembleState, RegressorEnsembleState};
pub use error::{AceError, IdxError, Result};
pub use losses::{AceCoefficients, NclCoefficients};
pub use metrics::{BvcReport, EvalReport};
pub use models::{MlpParams, MlpSpec, OptimizerConfig};
pub use numerics::{Logits, Matrix, ProbVector, SeededRng, Stream, Vector};
pub use smoc::SmocState;
