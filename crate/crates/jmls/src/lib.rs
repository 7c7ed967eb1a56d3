//! Exact two-filter smoothing for jump Markov linear systems.
//!
//! The smoothed hybrid distribution `p(x_k, z_k | y_{1:N})` of a JMLS is a
//! Gaussian mixture whose component count grows exponentially with the data
//! length. This crate implements the exact two-filter recursion — a forward
//! hybrid filter and a backward information filter over (possibly
//! non-integrable) likelihoods — together with the Kullback–Leibler mixture
//! reduction and range-space likelihood reduction that keep component counts
//! tractable, plus independent oracles (sequence enumeration, classical RTS,
//! quadrature) used to certify the implementation.

pub mod backward;
pub mod error;
pub mod forward;
pub mod likelihood;
pub mod linalg;
pub mod math;
pub mod mixture;
pub mod model;
pub mod oracle;
pub mod smoother;

pub use backward::{run_backward, BackwardState, ReductionTols};
pub use error::{Error, Result};
pub use forward::{run_forward, ForwardState, UNCAPPED};
pub use likelihood::{LikelihoodComponent, LikelihoodMixture};
pub use mixture::{GaussianComponent, GaussianMixture};
pub use model::{simulate, validate_model, Dataset, JmlsModel, ModeParams, Timing, Truth};
pub use smoother::{run_smoother, Caps, SmoothedState, SmootherOptions};
