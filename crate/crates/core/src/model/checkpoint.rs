//! Self-contained JSON checkpoints: parameter blocks, settings, the training data and
//! the taxonomy.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::objective::ModelData;
use super::train::{TrainConfig, TrainReport};
use super::{BackConstraints, Hyperparameters, LatentState, LossWeights, ModelKind};
use crate::data::{Dataset, TaxonomyGraph, TaxonomySpec};
use crate::error::{Error, Result};
use crate::optim::ParameterBlock;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub crate_version: String,
    pub model: ModelKind,
    pub latent_dim: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub config_digest: String,
    pub dataset_digest: String,
    pub weights: LossWeights,
    pub alpha: f64,
    /// Lengthscale of the back-constraint kernel when back constraints are used.
    pub back_lengthscale: Option<f64>,
    pub blocks: Vec<ParameterBlock>,
    pub dataset: Dataset,
    pub taxonomy: TaxonomySpec,
    pub report: Option<TrainReport>,
}

impl Checkpoint {
    pub fn new(state: &LatentState, config: &TrainConfig, dataset: &Dataset, graph: &TaxonomyGraph, report: Option<TrainReport>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            model: state.kind,
            latent_dim: state.latent_dim,
            seed: config.seed,
            config: config.clone(),
            config_digest: config.digest(state.kind, state.latent_dim),
            dataset_digest: dataset.digest(),
            weights: state.weights,
            alpha: state.alpha,
            back_lengthscale: state.back.as_ref().map(|b| b.lengthscale),
            blocks: state.to_blocks(config.lr_latent, config.lr_hyper),
            dataset: dataset.clone(),
            taxonomy: graph.spec().clone(),
            report,
        }
    }

    pub fn graph(&self) -> Result<TaxonomyGraph> {
        TaxonomyGraph::new(self.taxonomy.clone())
    }

    /// Rebuilds the model state from the stored blocks.
    pub fn state(&self) -> Result<LatentState> {
        let graph = self.graph()?;
        let data = ModelData::new(&self.dataset, &graph)?;
        let n = self.dataset.n_points();
        let mut state = LatentState {
            kind: self.model,
            latent_dim: self.latent_dim,
            latents: vec![DVector::zeros(0); n],
            hyper: Hyperparameters::initial(self.latent_dim),
            back: self
                .back_lengthscale
                .map(|l| BackConstraints { weights: DMatrix::zeros(self.latent_dim, n), lengthscale: l }),
            weights: self.weights,
            alpha: self.alpha,
        };
        state.set_blocks(&self.blocks, &data)?;
        state.validate(&self.dataset)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(Error::Format(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Format("checkpoint has no version".into())),
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        if ck.dataset.digest() != ck.dataset_digest {
            return Err(Error::Format("checkpoint dataset does not match its digest".into()));
        }
        Ok(ck)
    }
}
