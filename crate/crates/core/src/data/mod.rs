//! Datasets, taxonomy graphs, trajectory files, preprocessing and synthetic data.

pub mod graph;
pub mod io;
pub mod preprocess;
pub mod synth;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use graph::{graph_distance, TaxonomyGraph, TaxonomySpec};
pub use io::{read_dataset_dir, write_dataset_dir, RawMetadata, RawTrajectory};
pub use preprocess::{preprocess, PreprocessConfig};
pub use synth::{synthesize, SynthConfig};

/// Minimum trajectory length accepted by the models.
pub const MIN_TRAJECTORY_LEN: usize = 3;

/// Centered trajectories with taxonomy labels on their endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// One `T_i x D_y` matrix per trajectory.
    pub trajectories: Vec<DMatrix<f64>>,
    pub start_labels: Vec<String>,
    pub end_labels: Vec<String>,
    /// Per-dimension mean removed during centering.
    pub offset: DVector<f64>,
}

impl Dataset {
    pub fn new(
        trajectories: Vec<DMatrix<f64>>,
        start_labels: Vec<String>,
        end_labels: Vec<String>,
    ) -> Result<Self> {
        let dy = trajectories.first().map(|t| t.ncols()).unwrap_or(0);
        let ds = Self { trajectories, start_labels, end_labels, offset: DVector::zeros(dy) };
        ds.check_shapes()?;
        Ok(ds)
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.trajectories.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset has no trajectories".into()));
        }
        if self.start_labels.len() != n || self.end_labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.start_labels.len().min(self.end_labels.len()) });
        }
        let dy = self.output_dim();
        for t in &self.trajectories {
            if t.ncols() != dy {
                return Err(Error::DimensionMismatch { expected: dy, got: t.ncols() });
            }
            if t.nrows() < MIN_TRAJECTORY_LEN {
                return Err(Error::TooShort { len: t.nrows(), min: MIN_TRAJECTORY_LEN });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("trajectory values".into()));
            }
        }
        Ok(())
    }

    /// Checks shapes, label membership and centering.
    pub fn validate(&self, graph: &TaxonomyGraph) -> Result<()> {
        self.check_shapes()?;
        for l in self.start_labels.iter().chain(&self.end_labels) {
            graph.node_index(l)?;
        }
        let means = self.column_means();
        let scale = self.stacked().amax().max(1.0);
        if means.amax() > 1e-9 * scale {
            return Err(Error::InvalidArgument(format!("dataset is not centered (max mean {:e})", means.amax())));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.trajectories[0].ncols()
    }

    pub fn n_points(&self) -> usize {
        self.trajectories.iter().map(|t| t.nrows()).sum()
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    /// Row ranges of each trajectory in the stacked matrix.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.trajectories
            .iter()
            .map(|t| {
                let r = start..start + t.nrows();
                start = r.end;
                r
            })
            .collect()
    }

    /// All observations stacked, `N x D_y`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, dy) = (self.n_points(), self.output_dim());
        let mut y = DMatrix::zeros(n, dy);
        for (t, r) in self.trajectories.iter().zip(self.ranges()) {
            y.rows_mut(r.start, r.len()).copy_from(t);
        }
        y
    }

    pub fn column_means(&self) -> DVector<f64> {
        let y = self.stacked();
        DVector::from_fn(y.ncols(), |j, _| y.column(j).mean())
    }

    /// Subtracts the global per-dimension mean; the removed mean accumulates in `offset`.
    pub fn center(&mut self) {
        let m = self.column_means();
        for t in &mut self.trajectories {
            for mut row in t.row_iter_mut() {
                row -= m.transpose();
            }
        }
        self.offset += m;
    }

    /// Labelled endpoints as `(point index, label)` in stacked order.
    pub fn labelled_points(&self) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for (i, r) in self.ranges().into_iter().enumerate() {
            out.push((r.start, self.start_labels[i].clone()));
            out.push((r.end - 1, self.end_labels[i].clone()));
        }
        out
    }

    /// SHA-256 over dimensions, values and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.trajectories.len() as u64).to_le_bytes());
        for (i, t) in self.trajectories.iter().enumerate() {
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    h.update(t[(r, c)].to_le_bytes());
                }
            }
            h.update(self.start_labels[i].as_bytes());
            h.update([0]);
            h.update(self.end_labels[i].as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

/// Appends every trajectory reversed in time, with start and end labels swapped.
pub fn augment_reverse(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    for (i, t) in dataset.trajectories.iter().enumerate() {
        let n = t.nrows();
        out.trajectories.push(DMatrix::from_fn(n, t.ncols(), |r, c| t[(n - 1 - r, c)]));
        out.start_labels.push(dataset.end_labels[i].clone());
        out.end_labels.push(dataset.start_labels[i].clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let a = DMatrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let b = DMatrix::from_fn(3, 2, |r, c| -((r + c) as f64));
        let mut d = Dataset::new(vec![a, b], vec!["x".into(), "y".into()], vec!["y".into(), "x".into()]).unwrap();
        d.center();
        d
    }

    #[test]
    fn centering_and_ranges() {
        let d = small();
        assert!(d.column_means().amax() < 1e-12);
        assert_eq!(d.ranges(), vec![0..4, 4..7]);
        assert_eq!(d.n_points(), 7);
        assert_eq!(d.labelled_points()[2], (4, "y".to_string()));
        assert_eq!(d.labelled_points()[3], (6, "x".to_string()));
    }

    #[test]
    fn reverse_augmentation() {
        let d = small();
        let a = augment_reverse(&d);
        assert_eq!(a.n_points(), 2 * d.n_points());
        assert_eq!(a.start_labels[2], d.end_labels[0]);
        assert_eq!(a.end_labels[2], d.start_labels[0]);
        assert_eq!(a.trajectories[2][(0, 1)], d.trajectories[0][(3, 1)]);
        let twice = augment_reverse(&a);
        let rr = &twice.trajectories[6];
        assert_eq!(rr, &d.trajectories[0]);
        assert!(a.column_means().amax() < 1e-12);
    }

    #[test]
    fn digest_is_sensitive() {
        let d = small();
        let mut e = d.clone();
        assert_eq!(d.digest(), e.digest());
        e.trajectories[0][(1, 1)] += 1e-12;
        assert_ne!(d.digest(), e.digest());
    }

    #[test]
    fn rejects_short_trajectories() {
        let a = DMatrix::zeros(2, 3);
        assert!(Dataset::new(vec![a], vec!["x".into()], vec!["x".into()]).is_err());
    }
}
