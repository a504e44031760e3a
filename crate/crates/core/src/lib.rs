//! Meta-learned mirror descent (MetaMD).
//!
//! Mirror descent generalizes gradient descent by measuring progress with a
//! Bregman divergence instead of the squared Euclidean distance. This crate
//! meta-learns that divergence — parameterized as a max over N diagonal
//! Mahalanobis quadratics — so that the induced optimizer converges fast on
//! new tasks drawn from the same family. It ships:
//!
//! - [`bregman`]: the learnable divergence family and the closed-form mirror
//!   step it induces;
//! - [`optim`]: the inner-loop training engine (MetaMD plus SGD, SGD-momentum,
//!   Adam, RMSprop baselines) with gradient-norm / plateau stopping;
//! - [`metatrain`]: the outer loop — forward-mode hypergradients through the
//!   unrolled inner loop, a reverse-mode oracle, and the meta-objective built
//!   from the regret bound;
//! - [`bounds`]: evaluators for the regret bound, its Lipschitz form, and the
//!   cross-task generalization bound;
//! - [`models`]: differentiable base learners (quadratics, Rosenbrock, linear
//!   classifier, MLP) with exact gradients and Hessian-vector products;
//! - [`tasks`]: task distributions (meta-quadratic family, rotated synthetic
//!   domains, IDX dataset ingestion) and leave-one-domain-out splits;
//! - [`tuner`]: grid search and a small GP-UCB Bayesian optimizer for
//!   baseline hyperparameters;
//! - [`numerics`]: dense vectors/matrices and deterministic, splittable RNG
//!   streams underpinning everything else.

pub mod bounds;
pub mod bregman;
pub mod metatrain;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod tasks;
pub mod tuner;

pub use bregman::{DiagonalMahalanobisSet, MirrorStepConfig};
pub use models::{Batch, BaseModel};
pub use numerics::{Matrix, RngStream, Vector};
pub use optim::{OptimizerKind, OptimizerSpec, StopReason, StoppingCriteria, Trajectory};
