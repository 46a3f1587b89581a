//! Stress, mean squared jerk and reconstruction error, and the four-model comparison.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, TaxonomyGraph};
use crate::error::{Error, Result};
use crate::manifold::raw;
use crate::model::{decode, fit, Geometry, LatentGeometry, LatentState, ModelData, ModelKind, TrainConfig, TrainReport};

/// Mean squared jerk of the step lengths of one latent trajectory.
///
/// With `v_t = d(x_t, x_{t-1})` and `a_t = v_t - 2 v_{t-1} + v_{t-2}`, returns
/// `sum_{t >= 4} a_t^2 / (N - 4)` (1-based `t`), which needs `N >= 5` points.
pub fn msj(latents: &[DVector<f64>], geo: &LatentGeometry) -> Result<f64> {
    let n = latents.len();
    if n < 5 {
        return Err(Error::TooShort { len: n, min: 5 });
    }
    let v: Vec<f64> = latents.windows(2).map(|w| geo.distance(&w[1], &w[0])).collect();
    let sum: f64 = v.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2)).sum();
    Ok(sum / (n - 4) as f64)
}

pub fn trajectory_msjs(state: &LatentState, data: &ModelData) -> Result<Vec<f64>> {
    let geo = state.geometry();
    data.ranges.iter().map(|r| msj(&state.latents[r.clone()], &geo)).collect()
}

/// Squared reconstruction error of the posterior mean at the training latents, averaged
/// per trajectory over points and output dimensions.
pub fn trajectory_mses(state: &LatentState, data: &ModelData) -> Result<Vec<f64>> {
    let (mean, _) = decode(state, data, &state.latents)?;
    let err = (mean - &data.y).map(|e| e * e);
    Ok(data.ranges.iter().map(|r| err.rows(r.start, r.len()).mean()).collect())
}

/// Mean over all points and output dimensions of the squared reconstruction error.
pub fn reconstruction_mse(state: &LatentState, data: &ModelData) -> Result<f64> {
    let (mean, _) = decode(state, data, &state.latents)?;
    Ok((mean - &data.y).map(|e| e * e).mean())
}

/// `(d_graph - d_latent)^2` for every labelled endpoint pair.
pub fn pair_stresses(state: &LatentState, data: &ModelData) -> Vec<f64> {
    let geo = state.geometry();
    data.stress_pairs
        .iter()
        .map(|&(i, j, a)| (a - geo.distance(&state.latents[i], &state.latents[j])).powi(2))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std: var.sqrt(), count: n }
    }

    fn scaled(self, s: f64) -> Self {
        Self { mean: self.mean * s, std: self.std * s, count: self.count }
    }
}

/// Raw per-item populations of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Populations {
    pub stress: Vec<f64>,
    pub msj: Vec<f64>,
    pub mse: Vec<f64>,
}

pub fn populations(state: &LatentState, data: &ModelData) -> Result<Populations> {
    Ok(Populations { stress: pair_stresses(state, data), msj: trajectory_msjs(state, data)?, mse: trajectory_mses(state, data)? })
}

/// One table row: stress over pairs, MSJ and MSE over trajectories, the latter two x100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: ModelKind,
    pub geometry: Geometry,
    pub latent_dim: usize,
    pub stress: Summary,
    pub msj_x100: Summary,
    pub mse_x100: Summary,
    pub runtime_secs: f64,
}

impl ModelMetrics {
    pub fn from_populations(model: ModelKind, latent_dim: usize, pops: &[&Populations], runtime_secs: f64) -> Self {
        let cat = |f: fn(&Populations) -> &Vec<f64>| -> Vec<f64> { pops.iter().flat_map(|p| f(p).iter().copied()).collect() };
        Self {
            model,
            geometry: model.geometry(),
            latent_dim,
            stress: Summary::of(&cat(|p| &p.stress)),
            msj_x100: Summary::of(&cat(|p| &p.msj)).scaled(100.0),
            mse_x100: Summary::of(&cat(|p| &p.mse)).scaled(100.0),
            runtime_secs,
        }
    }

    pub fn label(&self) -> String {
        let space = match self.geometry {
            Geometry::Euclidean => "R",
            Geometry::Hyperbolic => "H",
        };
        format!("{} {}{}", self.model, space, self.latent_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub models: Vec<ModelKind>,
    pub latent_dims: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self { models: ModelKind::ALL.to_vec(), latent_dims: vec![2, 3], seeds: vec![0], train: TrainConfig::default() }
    }
}

impl ComparisonConfig {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// One trained variant of the comparison.
#[derive(Clone, Debug)]
pub struct ComparisonRun {
    pub model: ModelKind,
    pub latent_dim: usize,
    pub seed: u64,
    pub state: LatentState,
    pub report: TrainReport,
    pub populations: Populations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: String,
    pub config_digest: String,
    pub dataset_digest: String,
    pub seeds: Vec<u64>,
    /// Pooled over seeds, one row per model and latent dimension.
    pub rows: Vec<ModelMetrics>,
    /// One row per model, latent dimension and seed.
    pub per_seed: Vec<(u64, ModelMetrics)>,
    pub runtime_secs: f64,
}

fn fmt_summary(s: &Summary) -> String {
    format!("{:.2} ± {:.2}", s.mean, s.std)
}

impl MetricReport {
    pub fn row(&self, model: ModelKind, latent_dim: usize) -> Option<&ModelMetrics> {
        self.rows.iter().find(|r| r.model == model && r.latent_dim == latent_dim)
    }

    pub fn seed_row(&self, seed: u64, model: ModelKind, latent_dim: usize) -> Option<&ModelMetrics> {
        self.per_seed.iter().find(|(s, r)| *s == seed && r.model == model && r.latent_dim == latent_dim).map(|(_, r)| r)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>16} {:>18} {:>18} {:>10}", "model", "stress", "MSJ (x100)", "MSE (x100)", "time [s]");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>16} {:>18} {:>18} {:>10.1}",
                r.label(),
                fmt_summary(&r.stress),
                fmt_summary(&r.msj_x100),
                fmt_summary(&r.mse_x100),
                r.runtime_secs
            );
        }
        let _ = writeln!(out, "seeds {:?}  config {}  dataset {}", self.seeds, &self.config_digest[..12], &self.dataset_digest[..12]);
        let _ = writeln!(out, "gphdm {}  total {:.1} s", self.version, self.runtime_secs);
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model", "geometry", "latent_dim", "stress_mean", "stress_std", "msj_x100_mean", "msj_x100_std", "mse_x100_mean",
            "mse_x100_std", "runtime_secs", "config_digest", "version",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.model.name().to_string(),
                format!("{:?}", r.geometry).to_lowercase(),
                r.latent_dim.to_string(),
                r.stress.mean.to_string(),
                r.stress.std.to_string(),
                r.msj_x100.mean.to_string(),
                r.msj_x100.std.to_string(),
                r.mse_x100.mean.to_string(),
                r.mse_x100.std.to_string(),
                r.runtime_secs.to_string(),
                self.config_digest.clone(),
                self.version.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains every model and latent dimension for every seed (in parallel) and tabulates
/// the metrics.
pub fn run_comparison(dataset: &Dataset, graph: &TaxonomyGraph, config: &ComparisonConfig) -> Result<(MetricReport, Vec<ComparisonRun>)> {
    let start = Instant::now();
    let data = ModelData::new(dataset, graph)?;
    let mut jobs = Vec::new();
    for &seed in &config.seeds {
        for &dim in &config.latent_dims {
            for &model in &config.models {
                jobs.push((model, dim, seed));
            }
        }
    }
    let runs: Vec<ComparisonRun> = jobs
        .par_iter()
        .map(|&(model, latent_dim, seed)| {
            let cfg = TrainConfig { seed, ..config.train.clone() };
            let (state, report) = fit(dataset, graph, model, latent_dim, &cfg)?;
            let populations = populations(&state, &data)?;
            Ok(ComparisonRun { model, latent_dim, seed, state, report, populations })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    for &dim in &config.latent_dims {
        for &model in &config.models {
            let sel: Vec<&ComparisonRun> = runs.iter().filter(|r| r.model == model && r.latent_dim == dim).collect();
            let pops: Vec<&Populations> = sel.iter().map(|r| &r.populations).collect();
            let time: f64 = sel.iter().map(|r| r.report.runtime_secs).sum();
            rows.push(ModelMetrics::from_populations(model, dim, &pops, time));
            for r in &sel {
                per_seed.push((r.seed, ModelMetrics::from_populations(model, dim, &[&r.populations], r.report.runtime_secs)));
            }
        }
    }
    let report = MetricReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config.digest(),
        dataset_digest: dataset.digest(),
        seeds: config.seeds.clone(),
        rows,
        per_seed,
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, runs))
}

/// Latent coordinates as CSV: trajectory, step, label, ambient and Poincaré coordinates.
pub fn latents_csv(state: &LatentState, dataset: &Dataset) -> Result<String> {
    let geo = state.geometry();
    let mut w = csv::Writer::from_writer(Vec::new());
    let n = geo.coord_len();
    let mut header = vec!["trajectory".to_string(), "step".into(), "label".into()];
    header.extend((0..n).map(|i| format!("x{i}")));
    if geo.is_hyperbolic() {
        header.extend((0..geo.dim).map(|i| format!("p{i}")));
    }
    w.write_record(&header)?;
    for (k, r) in dataset.ranges().into_iter().enumerate() {
        let len = r.len();
        for (t, i) in r.enumerate() {
            let x = &state.latents[i];
            let label = if t == 0 {
                dataset.start_labels[k].clone()
            } else if t + 1 == len {
                dataset.end_labels[k].clone()
            } else {
                String::new()
            };
            let mut rec = vec![k.to_string(), t.to_string(), label];
            rec.extend(x.iter().map(|v| v.to_string()));
            if geo.is_hyperbolic() {
                rec.extend(raw::poincare(x).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};
    use crate::manifold::LorentzPoint;
    use crate::model::initialize;
    use proptest::prelude::*;

    #[test]
    fn msj_of_uniform_geodesic_is_zero() {
        let geo = LatentGeometry::new(Geometry::Hyperbolic, 2);
        let a = LorentzPoint::from_spatial(&[-1.0, 0.5]).into_coords();
        let b = LorentzPoint::from_spatial(&[2.0, -0.3]).into_coords();
        assert!(msj(&geo.interpolate(&a, &b, 9), &geo).unwrap() < 1e-12);
        assert!(msj(&geo.interpolate(&a, &b, 4), &geo).is_err());
    }

    #[test]
    fn msj_hand_computed() {
        // positions on a line with steps (1, 1, 2, 1, 1)
        let geo = LatentGeometry::new(Geometry::Euclidean, 1);
        let xs: Vec<DVector<f64>> = [0.0, 1.0, 2.0, 4.0, 5.0, 6.0].iter().map(|&v| DVector::from_element(1, v)).collect();
        // second differences of v are (1, -2, 1)
        assert!((msj(&xs, &geo).unwrap() - 6.0 / 2.0).abs() < 1e-15);
    }

    fn naive_msj(xs: &[DVector<f64>], geo: &LatentGeometry) -> f64 {
        let n = xs.len();
        let v = |t: usize| geo.distance(&xs[t - 1], &xs[t - 2]);
        let mut s = 0.0;
        for t in 4..=n {
            s += (v(t) - 2.0 * v(t - 1) + v(t - 2)).powi(2);
        }
        s / (n - 4) as f64
    }

    proptest! {
        #[test]
        fn msj_matches_naive_loop_and_is_isometry_invariant(
            coords in proptest::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 5..12),
            shift in (-1.0f64..1.0, -1.0f64..1.0),
        ) {
            let geo = LatentGeometry::new(Geometry::Hyperbolic, 2);
            let xs: Vec<DVector<f64>> = coords.iter().map(|&(a, b)| LorentzPoint::from_spatial(&[a, b]).into_coords()).collect();
            let m = msj(&xs, &geo).unwrap();
            prop_assert!((m - naive_msj(&xs, &geo)).abs() < 1e-10 * m.max(1.0));
            let o = raw::origin::<f64>(2);
            let p = LorentzPoint::from_spatial(&[shift.0, shift.1]).into_coords();
            let moved: Vec<DVector<f64>> = xs.iter().map(|x| raw::exp(&p, &raw::transport(&o, &p, &raw::log(&o, x)))).collect();
            prop_assert!((msj(&moved, &geo).unwrap() - m).abs() < 1e-8 * m.max(1.0));
        }
    }

    #[test]
    fn mse_matches_loop_and_grows_with_noise() {
        let g = TaxonomyGraph::binary_tree(2);
        let ds = synthesize(&g, &SynthConfig { points_per_trajectory: 6, ..Default::default() }).unwrap();
        let data = ModelData::new(&ds, &g).unwrap();
        let mut s = initialize(&ds, &g, ModelKind::Gphlvm, 2, &TrainConfig::default()).unwrap();
        let geo = s.geometry();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        for x in s.latents.iter_mut() {
            *x = geo.from_origin(&DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, -2.0..2.0)));
        }
        s.hyper.kernel_y.jitter = 0.0;
        s.hyper.kernel_y.lengthscale = 0.3;
        let mut last = -1.0;
        for noise in [1e-12, 1e-3, 1e-2, 1e-1, 1.0] {
            s.hyper.noise_y = noise;
            let mse = reconstruction_mse(&s, &data).unwrap();
            if noise == 1e-12 {
                assert!(mse < 1e-6, "{mse}");
            }
            assert!(mse >= last - 1e-12);
            last = mse;
        }
        let (mean, _) = decode(&s, &data, &s.latents).unwrap();
        let mut acc = 0.0;
        for i in 0..mean.nrows() {
            for j in 0..mean.ncols() {
                acc += (mean[(i, j)] - data.y[(i, j)]).powi(2);
            }
        }
        let loop_mse = acc / (mean.nrows() * mean.ncols()) as f64;
        assert!((reconstruction_mse(&s, &data).unwrap() - loop_mse).abs() < 1e-12);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.mean - 2.5).abs() < 1e-15);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).std, 0.0);
    }

    #[test]
    fn small_comparison_report_is_deterministic() {
        let g = TaxonomyGraph::binary_tree(2);
        let ds = synthesize(&g, &SynthConfig { points_per_trajectory: 8, ..Default::default() }).unwrap();
        let cfg = ComparisonConfig {
            latent_dims: vec![2],
            train: TrainConfig { max_iters: 15, ..Default::default() },
            ..Default::default()
        };
        let (a, runs) = run_comparison(&ds, &g, &cfg).unwrap();
        let (b, _) = run_comparison(&ds, &g, &cfg).unwrap();
        assert_eq!(a.rows.len(), 4);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.stress, y.stress);
            assert_eq!(x.msj_x100, y.msj_x100);
        }
        assert!(a.to_text().contains("GPHDM H2"));
        assert_eq!(a.to_csv().unwrap().lines().count(), 5);
        let back: MetricReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.rows, a.rows);
        let csv = latents_csv(&runs[0].state, &ds).unwrap();
        assert_eq!(csv.lines().count(), ds.n_points() + 1);
    }
}
