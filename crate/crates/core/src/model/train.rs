use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geometry::{Geometry, LatentGeometry};
use super::objective::{
    back_constrain, back_constraint_vjp, evaluate, evaluate_with_gradient, fit_back_constraints, LossBreakdown, ModelData,
};
use super::{BackConstraints, Hyperparameters, LatentState, LossWeights, ModelKind};
use crate::data::{graph_distance, Dataset, TaxonomyGraph};
use crate::error::{Error, Result};
use crate::optim::{minimize, BlockGrads, MinimizeConfig, ParameterBlock, StopReason, DEFAULT_LR_HYPER, DEFAULT_LR_LATENT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub patience: usize,
    pub grad_tol: f64,
    pub lr_latent: f64,
    pub lr_hyper: f64,
    pub weights: LossWeights,
    pub alpha: f64,
    pub back_constraints: bool,
    /// Random restarts of the endpoint stress embedding.
    pub init_restarts: usize,
    pub init_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            patience: 100,
            grad_tol: 1e-6,
            lr_latent: DEFAULT_LR_LATENT,
            lr_hyper: DEFAULT_LR_HYPER,
            weights: LossWeights::default(),
            alpha: 1.0,
            back_constraints: false,
            init_restarts: 5,
            init_iters: 1500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// SHA-256 of the model kind, latent dimension and this configuration.
    pub fn digest(&self, kind: ModelKind, latent_dim: usize) -> String {
        let mut h = Sha256::new();
        h.update(kind.name().as_bytes());
        h.update((latent_dim as u64).to_le_bytes());
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: LossBreakdown,
    pub result: LossBreakdown,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub runtime_secs: f64,
}

/// Lorentz boost sending `p` to the origin.
fn boost_to_origin(p: &DVector<f64>) -> DMatrix<f64> {
    let n = p.len();
    let mut b = DMatrix::identity(n, n);
    b[(0, 0)] = p[0];
    for i in 1..n {
        b[(0, i)] = -p[i];
        b[(i, 0)] = -p[i];
        for j in 1..n {
            b[(i, j)] += p[i] * p[j] / (1.0 + p[0]);
        }
    }
    b
}

fn stress_of(geo: &LatentGeometry, pts: &[DVector<f64>], target: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for a in 0..pts.len() {
        for b in 0..a {
            s += (target[(a, b)] - geo.distance(&pts[a], &pts[b])).powi(2);
        }
    }
    s
}

/// Points whose pairwise distances best match `target` (stress minimization with
/// restarts), moved so that their medoid sits at the origin.
pub fn embed_distances(
    geo: &LatentGeometry,
    target: &DMatrix<f64>,
    restarts: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let n = target.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, 0.5).expect("valid std");
    let mut best: Option<(f64, Vec<DVector<f64>>)> = None;
    for _ in 0..restarts.max(1) {
        let init: Vec<DVector<f64>> = (0..n)
            .map(|_| geo.from_origin(&DVector::from_fn(geo.dim, |_, _| spread.sample(&mut rng))))
            .collect();
        let block = match geo.geometry {
            Geometry::Hyperbolic => ParameterBlock::lorentz("nodes", init),
            Geometry::Euclidean => ParameterBlock {
                name: "nodes".into(),
                kind: crate::optim::BlockKind::UnconstrainedReals,
                values: init,
                lr: 0.0,
            },
        }
        .with_lr(0.05);
        let mut obj = |blocks: &[ParameterBlock]| -> Result<(f64, BlockGrads)> {
            let x = &blocks[0].values;
            let mut g: Vec<DVector<f64>> = x.iter().map(|p| DVector::zeros(p.len())).collect();
            for a in 0..n {
                for b in 0..a {
                    g[a] += geo.stress_term_grad(&x[a], &x[b], target[(a, b)]);
                    g[b] += geo.stress_term_grad(&x[b], &x[a], target[(a, b)]);
                }
            }
            Ok((stress_of(geo, x, target), vec![g]))
        };
        let cfg = MinimizeConfig { max_iters: iters, grad_tol: 1e-9, patience: 200, ..Default::default() };
        let res = minimize(&mut obj, vec![block], &cfg)?;
        if best.as_ref().is_none_or(|(s, _)| res.best_loss < *s) {
            best = Some((res.best_loss, res.blocks[0].values.clone()));
        }
    }
    let pts = best.expect("at least one restart").1;
    let medoid = (0..n)
        .min_by(|&a, &b| {
            let sa: f64 = pts.iter().map(|p| geo.distance(&pts[a], p)).sum();
            let sb: f64 = pts.iter().map(|p| geo.distance(&pts[b], p)).sum();
            sa.total_cmp(&sb)
        })
        .unwrap_or(0);
    let center = pts[medoid].clone();
    Ok(match geo.geometry {
        Geometry::Hyperbolic => {
            let b = boost_to_origin(&center);
            pts.iter()
                .map(|p| {
                    let mut q = &b * p;
                    crate::manifold::raw::renormalize(&mut q);
                    q
                })
                .collect()
        }
        Geometry::Euclidean => pts.iter().map(|p| p - &center).collect(),
    })
}

/// Endpoints from a stress embedding of their taxonomy nodes, intermediate points at
/// uniform geodesic fractions, unit kernels and small noise.
pub fn initialize(
    dataset: &Dataset,
    graph: &TaxonomyGraph,
    kind: ModelKind,
    latent_dim: usize,
    config: &TrainConfig,
) -> Result<LatentState> {
    dataset.validate(graph)?;
    let geo = LatentGeometry::new(kind.geometry(), latent_dim);
    geo.kernel_kind()?;
    if latent_dim == 0 {
        return Err(Error::InvalidArgument("latent dimension must be positive".into()));
    }
    let mut nodes: Vec<&str> = Vec::new();
    for l in dataset.start_labels.iter().chain(&dataset.end_labels) {
        if !nodes.contains(&l.as_str()) {
            nodes.push(l);
        }
    }
    let m = nodes.len();
    let mut target = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..a {
            let d = graph_distance(graph, nodes[a], nodes[b])? as f64;
            target[(a, b)] = d;
            target[(b, a)] = d;
        }
    }
    let emb = embed_distances(&geo, &target, config.init_restarts, config.init_iters, config.seed)?;
    let pos = |l: &str| &emb[nodes.iter().position(|n| *n == l).expect("label collected")];
    let mut latents = Vec::with_capacity(dataset.n_points());
    for (i, t) in dataset.trajectories.iter().enumerate() {
        latents.extend(geo.interpolate(pos(&dataset.start_labels[i]), pos(&dataset.end_labels[i]), t.nrows()));
    }
    let mut state = LatentState {
        kind,
        latent_dim,
        latents,
        hyper: Hyperparameters::initial(latent_dim),
        back: None,
        weights: config.weights,
        alpha: config.alpha,
    };
    if config.back_constraints {
        let data = ModelData::new(dataset, graph)?;
        let w = fit_back_constraints(&geo, &state.latents, &data, 1e-3)?;
        state.back = Some(BackConstraints { weights: w, lengthscale: data.bc_lengthscale });
        state.latents = back_constrain(&state, &data)?;
    }
    Ok(state)
}

/// Minimizes the training loss with Riemannian Adam from `state`.
pub fn train(state: &LatentState, dataset: &Dataset, graph: &TaxonomyGraph, config: &TrainConfig) -> Result<(LatentState, TrainReport)> {
    let start = Instant::now();
    state.validate(dataset)?;
    let data = ModelData::new(dataset, graph)?;
    let initial = evaluate(state, &data)?;
    let blocks = state.to_blocks(config.lr_latent, config.lr_hyper);
    let mut work = state.clone();
    let mut objective = |blocks: &[ParameterBlock]| -> Result<(f64, BlockGrads)> {
        work.set_blocks(blocks, &data)?;
        let (b, p) = evaluate_with_gradient(&work, &data)?;
        let first = if work.back.is_some() {
            let gw = back_constraint_vjp(&work, &data, &p.latents)?;
            gw.row_iter().map(|r| r.transpose()).collect()
        } else {
            p.latents
        };
        Ok((b.loss, vec![first, vec![DVector::from_vec(p.hyper)]]))
    };
    let cfg = MinimizeConfig { max_iters: config.max_iters, grad_tol: config.grad_tol, patience: config.patience, ..Default::default() };
    let res = minimize(&mut objective, blocks, &cfg)?;
    let mut out = state.clone();
    out.set_blocks(&res.blocks, &data)?;
    let result = evaluate(&out, &data)?;
    let report = TrainReport {
        initial,
        result,
        trace: res.trace,
        iterations: res.iterations,
        stop: res.stop,
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    Ok((out, report))
}

/// [`initialize`] followed by [`train`].
pub fn fit(
    dataset: &Dataset,
    graph: &TaxonomyGraph,
    kind: ModelKind,
    latent_dim: usize,
    config: &TrainConfig,
) -> Result<(LatentState, TrainReport)> {
    let init = initialize(dataset, graph, kind, latent_dim, config)?;
    train(&init, dataset, graph, config)
}
