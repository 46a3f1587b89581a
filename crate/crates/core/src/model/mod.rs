//! The four latent-variable models: GPLVM and GPDM in Euclidean space, GPHLVM and GPHDM
//! on the Lorentz model of hyperbolic space.
//!
//! All four share the likelihood `p(Y | X)` with one kernel across output dimensions.
//! The dynamical variants replace the iid latent prior with a GP prior over
//! within-trajectory steps, and all variants carry the taxonomy stress regularizer on
//! trajectory endpoints.

pub mod checkpoint;
pub mod geometry;
pub mod objective;
pub mod posterior;
pub mod train;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{KernelParams, KernelProfile};
use crate::manifold::raw;
use crate::optim::{BlockKind, ParameterBlock};

pub use checkpoint::Checkpoint;
pub use geometry::{Geometry, LatentGeometry};
pub use objective::{
    back_constrain, log_dynamics_prior, log_likelihood, stress_loss, LossBreakdown, ModelData,
};
pub use posterior::{decode, DynamicsPosterior, GpPosterior};
pub use train::{fit, initialize, train, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gplvm,
    Gpdm,
    Gphlvm,
    Gphdm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Gplvm, ModelKind::Gpdm, ModelKind::Gphlvm, ModelKind::Gphdm];

    pub fn geometry(self) -> Geometry {
        match self {
            ModelKind::Gplvm | ModelKind::Gpdm => Geometry::Euclidean,
            ModelKind::Gphlvm | ModelKind::Gphdm => Geometry::Hyperbolic,
        }
    }

    pub fn has_dynamics(self) -> bool {
        matches!(self, ModelKind::Gpdm | ModelKind::Gphdm)
    }

    pub fn from_parts(geometry: Geometry, dynamics: bool) -> Self {
        match (geometry, dynamics) {
            (Geometry::Euclidean, false) => ModelKind::Gplvm,
            (Geometry::Euclidean, true) => ModelKind::Gpdm,
            (Geometry::Hyperbolic, false) => ModelKind::Gphlvm,
            (Geometry::Hyperbolic, true) => ModelKind::Gphdm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gplvm => "GPLVM",
            ModelKind::Gpdm => "GPDM",
            ModelKind::Gphlvm => "GPHLVM",
            ModelKind::Gphdm => "GPHDM",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gplvm" => Ok(ModelKind::Gplvm),
            "gpdm" => Ok(ModelKind::Gpdm),
            "gphlvm" => Ok(ModelKind::Gphlvm),
            "gphdm" => Ok(ModelKind::Gphdm),
            _ => Err(Error::InvalidArgument(format!("unknown model `{s}` (gplvm, gpdm, gphlvm, gphdm)"))),
        }
    }
}

/// Weights of the loss `-b1 log p(Y|X) - b2 log p(X) + b3 stress(X)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub likelihood: f64,
    pub prior: f64,
    pub stress: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { likelihood: 1.0, prior: 1.0, stress: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub kernel_y: KernelParams<f64>,
    pub kernel_x: KernelParams<f64>,
    /// Observation noise variance, shared by all output dimensions.
    pub noise_y: f64,
    /// Dynamics noise variances per latent dimension, in local coordinates.
    pub noise_x: Vec<f64>,
}

impl Hyperparameters {
    pub fn initial(latent_dim: usize) -> Self {
        let k = KernelParams::new(1.0, 1.0).expect("unit kernel parameters are valid");
        Self { kernel_y: k, kernel_x: k, noise_y: 0.01, noise_x: vec![0.01; latent_dim] }
    }

    /// Number of positive scalars in the packed layout.
    pub fn packed_len(&self) -> usize {
        5 + self.noise_x.len()
    }

    /// `[kappa_y, var_y, noise_y, kappa_x, var_x, noise_x..]`.
    pub fn pack(&self) -> Vec<f64> {
        let mut v = vec![
            self.kernel_y.lengthscale,
            self.kernel_y.variance,
            self.noise_y,
            self.kernel_x.lengthscale,
            self.kernel_x.variance,
        ];
        v.extend_from_slice(&self.noise_x);
        v
    }

    pub fn unpack(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.packed_len() {
            return Err(Error::DimensionMismatch { expected: self.packed_len(), got: v.len() });
        }
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::NonFinite("hyperparameters must be positive and finite".into()));
        }
        self.kernel_y.lengthscale = v[0];
        self.kernel_y.variance = v[1];
        self.noise_y = v[2];
        self.kernel_x.lengthscale = v[3];
        self.kernel_x.variance = v[4];
        self.noise_x.copy_from_slice(&v[5..]);
        Ok(())
    }
}

/// Back-constraint weights `W` (`D x N`) and the lengthscale of the observation kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackConstraints {
    pub weights: DMatrix<f64>,
    pub lengthscale: f64,
}

/// Latent points, hyperparameters and loss settings of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub kind: ModelKind,
    pub latent_dim: usize,
    /// Ambient Lorentz coordinates (hyperbolic) or plain vectors (Euclidean), in stacked order.
    pub latents: Vec<DVector<f64>>,
    pub hyper: Hyperparameters,
    pub back: Option<BackConstraints>,
    pub weights: LossWeights,
    /// Spread of the isotropic latent prior.
    pub alpha: f64,
}

pub const BLOCK_LATENTS: &str = "latents";
pub const BLOCK_BACK: &str = "back_constraints";
pub const BLOCK_HYPER: &str = "hyperparameters";

impl LatentState {
    pub fn geometry(&self) -> LatentGeometry {
        LatentGeometry::new(self.kind.geometry(), self.latent_dim)
    }

    pub fn n_points(&self) -> usize {
        self.latents.len()
    }

    pub fn profile_y(&self) -> Result<KernelProfile> {
        KernelProfile::new(self.geometry().kernel_kind()?, &self.hyper.kernel_y)
    }

    pub fn profile_x(&self) -> Result<KernelProfile> {
        KernelProfile::new(self.geometry().kernel_kind()?, &self.hyper.kernel_x)
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let geo = self.geometry();
        geo.kernel_kind()?;
        if self.latents.len() != dataset.n_points() {
            return Err(Error::DimensionMismatch { expected: dataset.n_points(), got: self.latents.len() });
        }
        for x in &self.latents {
            if x.len() != geo.coord_len() {
                return Err(Error::DimensionMismatch { expected: geo.coord_len(), got: x.len() });
            }
            if geo.is_hyperbolic() {
                let residual = (raw::minkowski(x, x) + 1.0).abs();
                if residual > 1e-6 * x[0] * x[0] || x[0] <= 0.0 {
                    return Err(Error::OffManifold { residual });
                }
            }
        }
        if self.hyper.noise_x.len() != self.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.latent_dim, got: self.hyper.noise_x.len() });
        }
        self.hyper.kernel_y.validate()?;
        self.hyper.kernel_x.validate()?;
        if !(self.hyper.noise_y > 0.0) || self.hyper.noise_x.iter().any(|v| !(*v > 0.0)) || !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("noise variances and prior spread must be positive".into()));
        }
        if let Some(bc) = &self.back {
            if bc.weights.shape() != (self.latent_dim, dataset.n_points()) {
                return Err(Error::DimensionMismatch { expected: self.latent_dim * dataset.n_points(), got: bc.weights.len() });
            }
        }
        Ok(())
    }

    /// Optimizer blocks: latents (or back-constraint weights) and log-hyperparameters.
    pub fn to_blocks(&self, lr_latent: f64, lr_hyper: f64) -> Vec<ParameterBlock> {
        let first = match &self.back {
            Some(bc) => ParameterBlock {
                name: BLOCK_BACK.into(),
                kind: BlockKind::UnconstrainedReals,
                values: bc.weights.row_iter().map(|r| r.transpose()).collect(),
                lr: lr_latent,
            },
            None => ParameterBlock {
                name: BLOCK_LATENTS.into(),
                kind: match self.kind.geometry() {
                    Geometry::Hyperbolic => BlockKind::LorentzPoints,
                    Geometry::Euclidean => BlockKind::UnconstrainedReals,
                },
                values: self.latents.clone(),
                lr: lr_latent,
            },
        };
        vec![first, ParameterBlock::positive(BLOCK_HYPER, &self.hyper.pack()).with_lr(lr_hyper)]
    }

    /// Inverse of [`Self::to_blocks`]; back-constrained latents are recomputed from `data`.
    pub fn set_blocks(&mut self, blocks: &[ParameterBlock], data: &ModelData) -> Result<()> {
        let [first, hyper] = blocks else {
            return Err(Error::DimensionMismatch { expected: 2, got: blocks.len() });
        };
        match (&mut self.back, first.name.as_str()) {
            (Some(bc), BLOCK_BACK) => {
                if first.values.len() != self.latent_dim {
                    return Err(Error::DimensionMismatch { expected: self.latent_dim, got: first.values.len() });
                }
                for (d, row) in first.values.iter().enumerate() {
                    bc.weights.set_row(d, &row.transpose());
                }
            }
            (None, BLOCK_LATENTS) => self.latents = first.values.clone(),
            _ => return Err(Error::Format(format!("unexpected parameter block `{}`", first.name))),
        }
        self.hyper.unpack(&hyper.natural())?;
        if self.back.is_some() {
            self.latents = back_constrain(self, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
            assert_eq!(ModelKind::from_parts(k.geometry(), k.has_dynamics()), k);
            let j = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<ModelKind>(&j).unwrap(), k);
        }
        assert!("gp".parse::<ModelKind>().is_err());
    }

    #[test]
    fn hyperparameter_packing() {
        let mut h = Hyperparameters::initial(3);
        let mut v = h.pack();
        assert_eq!(v.len(), 8);
        v[6] = 0.5;
        h.unpack(&v).unwrap();
        assert_eq!(h.noise_x[1], 0.5);
        v[0] = -1.0;
        assert!(h.unpack(&v).is_err());
    }
}
