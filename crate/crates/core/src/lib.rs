//! Variational inference for continuous-depth Bayesian neural networks
//! whose weights follow a stochastic differential equation.
//!
//! The generative model puts an Ornstein-Uhlenbeck prior on a weight
//! process `w_t` and lets a hidden state `h_t` (the "infinitely deep"
//! residual network) evolve under dynamics whose weights are `w_t`. The
//! approximate posterior is another SDE over the same Brownian motion
//! whose drift adds a learned residual to the prior drift; Girsanov's
//! theorem turns the path-space KL between the two into an ordinary
//! integral the solver accumulates alongside the state.
//!
//! The crate is organized bottom-up:
//!
//! - [`rng`] / [`brownian`]: counter-based noise and a virtual Brownian
//!   tree, so any subinterval of the driving path can be sampled
//!   consistently without storing it.
//! - [`tensor`] / [`autodiff`]: a small dense tensor and a reverse-mode
//!   tape with a stop-gradient primitive.
//! - [`nets`] / [`model`]: the hidden dynamics, the drift residual
//!   networks, and the bundled model.
//! - [`sde`]: Euler-Maruyama solvers (fixed and adaptive) over the
//!   augmented state, plus backprop-through-solver and adjoint gradients.
//! - [`variational`]: the path-space ELBO and the `standard` / `fullmc` /
//!   `stl` gradient estimators.
//! - [`likelihood`], [`data`], [`train`]: output likelihoods and
//!   calibration metrics, datasets, and the Adam training loop with JSON
//!   checkpoints.
//!
//! # Sampling a weight path
//!
//! ```
//! use sdebnn::brownian::{BrownianPath, SeedKey};
//! use sdebnn::likelihood::Likelihood;
//! use sdebnn::model::SdeBnnModel;
//! use sdebnn::nets::{ConstantDrift, DriftNet};
//! use sdebnn::sde::{solve, SolverConfig};
//! use sdebnn::tensor::Tensor;
//!
//! // OU prior with a zero drift residual: posterior == prior, KL == 0.
//! let model = SdeBnnModel::latent(
//!     DriftNet::Constant(ConstantDrift { dim: 1 }),
//!     Likelihood::Gaussian { scale: 1.0 },
//!     0.1,
//!     Tensor::vector(vec![1.0]),
//! );
//! let path = BrownianPath::new(SeedKey { seed: 0, path_id: 0 }, 1);
//! let traj = solve(&model, None, &path, &SolverConfig::fixed(64), true).unwrap();
//! assert_eq!(traj.final_state.kl, 0.0);
//! assert_eq!(traj.times.len(), 65);
//! ```
//!
//! # A single-path ELBO
//!
//! ```
//! use sdebnn::brownian::{BrownianPath, SeedKey};
//! use sdebnn::sde::{Estimator, SolverConfig};
//! use sdebnn::variational::{conjugate_toy, elbo_value, ElboData};
//!
//! let model = conjugate_toy(0.5, 0.3, 0.0);
//! let obs = [(1.0, 0.7)];
//! let path = BrownianPath::new(SeedKey { seed: 1, path_id: 0 }, 1);
//! let elbo = elbo_value(
//!     &model,
//!     Estimator::Standard,
//!     &ElboData::PathObs { observations: &obs },
//!     &path,
//!     &SolverConfig::fixed(32),
//!     1.0,
//! )
//! .unwrap();
//! assert!(elbo.value.is_finite());
//! assert!(elbo.kl >= 0.0);
//! ```

pub mod autodiff;
pub mod brownian;
pub mod data;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod nets;
pub mod rng;
pub mod sde;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};

/// Crate version embedded into output artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
