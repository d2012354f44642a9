//! PAC-Bayes risk certificates for stochastic neural networks.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`kl`]: the binary relative entropy, its numeric inversion, and five
//!    closed-form relaxations with exact inversions.
//! 2. [`atlas`]: side-by-side evaluation of all bound kinds over grids, with
//!    CSV emitters for tightness maps and per-risk curves.
//! 3. [`grad`]: implicit differentiation of the inverted kl bound, surrogate
//!    slope handling, and gradient modulation between bound families.
//! 4. [`net`]: a feedforward network with an independent Gaussian
//!    distribution per weight, pathwise reparameterized gradients, and the
//!    bounded losses the certificates require.
//! 5. [`data`], [`train`], [`cert`], [`checkpoint`]: dataset ingestion,
//!    bound-driven training, Monte Carlo certification, and posterior
//!    serialization behind the `pacbayes` command line tool.

pub mod atlas;
pub mod cert;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grad;
pub mod kl;
pub mod net;
pub mod train;

pub use error::{Error, Result};
pub use kl::{
    binary_kl, kl_inverse, kl_lower_bound, relaxed_bound, BoundKind, ComplexityBudget, RiskPair,
};
