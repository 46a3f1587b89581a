use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, TaxonomyGraph};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub trajectories_per_leaf: usize,
    pub points_per_trajectory: usize,
    pub output_dim: usize,
    pub noise_std: f64,
    /// Offset scale of depth-1 nodes from the rest posture; halved at every level.
    pub branch_scale: f64,
    /// Amplitude of the per-trajectory mid-course deviation.
    pub bump_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            trajectories_per_leaf: 2,
            points_per_trajectory: 30,
            output_dim: 8,
            noise_std: 0.01,
            branch_scale: 1.0,
            bump_scale: 0.1,
            seed: 0,
        }
    }
}

/// Postures for every taxonomy node: the root is the rest posture and each child adds
/// a random offset to its parent's posture. Offset directions are mutually orthogonal
/// while the output dimension allows it.
pub fn node_postures(graph: &TaxonomyGraph, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<HashMap<String, DVector<f64>>> {
    let dy = config.output_dim;
    let mut order: Vec<(usize, String)> =
        graph.nodes().iter().map(|n| Ok((graph.depth(n)?, n.clone()))).collect::<Result<_>>()?;
    order.sort();
    let mut out = HashMap::new();
    let mut used: Vec<DVector<f64>> = Vec::new();
    for (depth, node) in order {
        let posture = match graph.parent(&node)? {
            None => DVector::from_fn(dy, |_, _| 0.3 * Distribution::<f64>::sample(&StandardNormal, rng)),
            Some(p) => {
                let mut dir = DVector::from_fn(dy, |_, _| Distribution::<f64>::sample(&StandardNormal, rng));
                if used.len() < dy {
                    for u in &used {
                        dir -= u * u.dot(&dir);
                    }
                }
                let dir = dir.normalize();
                used.push(dir.clone());
                let scale = config.branch_scale * 0.5f64.powi(depth as i32 - 1);
                &out[&p] + dir * scale
            }
        };
        out.insert(node, posture);
    }
    Ok(out)
}

/// Smooth trajectories from the rest posture to each leaf posture.
///
/// The time profile is `3 tau^2 - 2 tau^3` plus a bump `4 tau (1 - tau)` along a random
/// direction, so noiseless trajectories start and end exactly at the postures.
pub fn synthesize(graph: &TaxonomyGraph, config: &SynthConfig) -> Result<Dataset> {
    if config.points_per_trajectory < super::MIN_TRAJECTORY_LEN || config.trajectories_per_leaf == 0 {
        return Err(Error::InvalidArgument("need at least 3 points and 1 trajectory per leaf".into()));
    }
    if config.output_dim == 0 || !(config.noise_std >= 0.0) {
        return Err(Error::InvalidArgument("output dimension and noise must be valid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let postures = node_postures(graph, config, &mut rng)?;
    let root = graph.root().to_string();
    let rest = &postures[&root];
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).expect("valid std");
    let t_len = config.points_per_trajectory;
    let mut trajs = Vec::new();
    let mut starts = Vec::new();
    let mut ends = Vec::new();
    for leaf in graph.leaves() {
        let target = &postures[&leaf];
        for _ in 0..config.trajectories_per_leaf {
            let bump = DVector::from_fn(config.output_dim, |_, _| config.bump_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            let y = DMatrix::from_fn(t_len, config.output_dim, |t, c| {
                let tau = t as f64 / (t_len - 1) as f64;
                let s = tau * tau * (3.0 - 2.0 * tau);
                rest[c] + (target[c] - rest[c]) * s + bump[c] * 4.0 * tau * (1.0 - tau)
            });
            let y = if config.noise_std > 0.0 { y.map(|v| v + noise.sample(&mut rng)) } else { y };
            trajs.push(y);
            starts.push(root.clone());
            ends.push(leaf.clone());
        }
    }
    let mut ds = Dataset::new(trajs, starts, ends)?;
    ds.center();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_and_invariants() {
        let g = TaxonomyGraph::binary_tree(3);
        let ds = synthesize(&g, &SynthConfig::default()).unwrap();
        assert_eq!(ds.n_trajectories(), 8);
        assert_eq!(ds.n_points(), 240);
        assert_eq!(ds.output_dim(), 8);
        ds.validate(&g).unwrap();
    }

    #[test]
    fn noiseless_trajectories_reach_targets() {
        let g = TaxonomyGraph::binary_tree(3);
        let cfg = SynthConfig { noise_std: 0.0, seed: 4, ..Default::default() };
        let ds = synthesize(&g, &cfg).unwrap();
        let postures = node_postures(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (i, t) in ds.trajectories.iter().enumerate() {
            let end = t.row(t.nrows() - 1).transpose() + &ds.offset;
            assert!((end - &postures[&ds.end_labels[i]]).amax() < 1e-12);
            let start = t.row(0).transpose() + &ds.offset;
            assert!((start - &postures["root"]).amax() < 1e-12);
        }
    }

    #[test]
    fn siblings_are_closer_than_cousins() {
        let g = TaxonomyGraph::binary_tree(3);
        for seed in 0..20 {
            let cfg = SynthConfig { seed, ..Default::default() };
            let p = node_postures(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let d = |a: &str, b: &str| (&p[a] - &p[b]).norm();
            let sib = d("root.0.0", "root.0.1").max(d("root.1.0", "root.1.1"));
            let cousin = d("root.0.0", "root.1.0")
                .min(d("root.0.0", "root.1.1"))
                .min(d("root.0.1", "root.1.0"))
                .min(d("root.0.1", "root.1.1"));
            assert!(sib < cousin, "seed {seed}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let g = TaxonomyGraph::binary_tree(3);
        let a = synthesize(&g, &SynthConfig { seed: 7, ..Default::default() }).unwrap();
        let b = synthesize(&g, &SynthConfig { seed: 7, ..Default::default() }).unwrap();
        let c = synthesize(&g, &SynthConfig { seed: 8, ..Default::default() }).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
