//! One-shot face re-enactment driven by morphable-model proxies.
//!
//! The pipeline has three stages:
//!
//! 1. [`face_model`]: a procedural blendshape face model. Coefficients regressed
//!    from the source and driving images by [`encoder`] are mixed (geometry from
//!    the driving face, identity from the source) and rendered into textured
//!    proxies.
//! 2. [`correspondence`]: features extracted from the two proxies form a
//!    row-stochastic correlation matrix that warps any spatial representation of
//!    the source by a single matrix multiplication.
//! 3. [`synthesis`]: a generator refines the warped priors, with an
//!    attention-based fusion of the priors injected into its coarse levels via
//!    spatially-adaptive normalization, trained adversarially against a patch
//!    discriminator.
//!
//! [`losses`], [`training`], [`pipeline`] and [`metrics`] wire these together.

pub mod container;
pub mod correspondence;
pub mod encoder;
pub mod error;
pub mod face_model;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
