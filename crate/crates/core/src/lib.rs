//! Desk-scale simulator for decentralized multi-task fine-tuning with
//! sparse, orthogonal low-rank adapters.
//!
//! The crate models a handful of wireless devices, each fine-tuning a frozen
//! toy layer stack on its own task through a low-rank adapter whose
//! expansion factor is sparsified by a magnitude mask and whose projection
//! factor stays a fixed seeded Gaussian. Devices cluster under a collision
//! budget, exchange masked expansions inside clusters every round and across
//! clusters on a fixed cadence, and serve all tasks through an implicit
//! mixture over the adapters they have collected.
//!
//! Module map:
//! * [`linalg`]: dense matrices, one-sided Jacobi SVD, spectral entropy.
//! * [`rng`]: the seeded generator and stream derivation every draw uses.
//! * [`adapter`]: adapter pairs, magnitude masks, task-aware refinement,
//!   the adapter bank and its mixture forward pass, checkpoint codec.
//! * [`sparsity`]: activation probes and entropy-driven sparsity budgets.
//! * [`collision`]: analytic mask-collision rates and the aggregation-gap
//!   bound check.
//! * [`wireless`]: fading channels, transmission delays, power control.
//! * [`topology`]: bottom-up clustering and per-round connection plans.
//! * [`sim`]: tasks, devices, training methods, the round loop, metrics.
//! * [`acceptance`]: the self-check suite exercised by `soldfl run --suite
//!   acceptance` and the `acceptance` integration test.
//!
//! Determinism: given the same experiment configuration and root seed, every
//! run produces byte-identical metrics. See [`rng`] for the stream scheme.

// Guards written as `!(x > 0.0)` are deliberate: unlike `x <= 0.0` they also
// reject NaN. Index-based loops stay where one index addresses several
// matrices or buffers at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acceptance;
pub mod adapter;
pub mod collision;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod sim;
pub mod sparsity;
pub mod topology;
pub mod wireless;

pub use error::{Error, Result};
