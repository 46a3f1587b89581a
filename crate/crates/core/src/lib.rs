//! Gaussian process hyperbolic dynamical models: latent variable models with Lorentz
//! hyperboloid latents, a marginalized dynamics prior, taxonomy stress regularization,
//! and trajectory generation through the learned latent space.
//!
//! Geometry, densities and kernels are generic over [`Real`]; models, training and
//! generation work in `f64`.

pub mod data;
pub mod error;
pub mod eval;
pub mod generate;
pub mod kernels;
pub mod manifold;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type LorentzPoint64 = manifold::LorentzPoint<f64>;
pub type LorentzPoint32 = manifold::LorentzPoint<f32>;
pub type TangentVector64 = manifold::TangentVector<f64>;
pub type TangentVector32 = manifold::TangentVector<f32>;
pub type WrappedGaussian64 = stats::WrappedGaussian<f64>;
pub type WrappedGaussian32 = stats::WrappedGaussian<f32>;
pub type KernelParams64 = kernels::KernelParams<f64>;
