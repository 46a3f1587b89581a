//! Trajectory CSV files with JSON sidecars, and dataset directories.
//!
//! A trajectory `name.csv` (or `name.csv.gz`) has a header `t,q1,..,qD` and one row per
//! sample; its metadata lives in `name.json`. A dataset directory holds
//! `taxonomy.json`, a `trajectories/` folder and a `dataset.json` manifest.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Dataset, TaxonomyGraph};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMetadata {
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub grasp: String,
    pub start_label: String,
    pub end_label: String,
    /// Inclusive sample indices `[rest pose, grasp completion]`.
    #[serde(default)]
    pub trim: Option<[usize; 2]>,
    /// Set on files written from an already preprocessed dataset.
    #[serde(default)]
    pub processed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTrajectory {
    /// `T x D_y` joint values in radians.
    pub values: DMatrix<f64>,
    pub metadata: RawMetadata,
}

impl RawTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw trajectory contains NaN or infinite values".into()));
        }
        if !self.metadata.processed && self.values.nrows() < 10 {
            return Err(Error::TooShort { len: self.values.nrows(), min: 10 });
        }
        if !(self.metadata.sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some([a, b]) = self.metadata.trim {
            if a >= b || b >= self.values.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "trim [{a}, {b}] invalid for {} samples",
                    self.values.nrows()
                )));
            }
        }
        Ok(())
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads a text file, transparently decompressing `.gz` files.
pub fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    let f = File::open(path)?;
    if is_gz(path) {
        GzDecoder::new(BufReader::new(f)).read_to_string(&mut s)?;
    } else {
        BufReader::new(f).read_to_string(&mut s)?;
    }
    Ok(s)
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let name = csv.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(".gz").unwrap_or(name);
    let stem = stem.strip_suffix(".csv").unwrap_or(stem);
    csv.with_file_name(format!("{stem}.json"))
}

pub fn read_trajectory(csv_path: &Path) -> Result<RawTrajectory> {
    let text = read_text(csv_path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("t") || headers.len() < 2 {
        return Err(Error::Format(format!("{}: header must be `t,q1,..`", csv_path.display())));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("q{}", j + 1) {
            return Err(Error::Format(format!("{}: unexpected column `{h}`", csv_path.display())));
        }
    }
    let dy = headers.len() - 1;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for f in rec.iter().skip(1) {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number `{f}`", csv_path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    let values = DMatrix::from_row_slice(rows, dy, &data);
    let metadata: RawMetadata = serde_json::from_str(&read_text(&sidecar_path(csv_path))?)?;
    let t = RawTrajectory { values, metadata };
    t.validate()?;
    Ok(t)
}

pub fn write_trajectory(csv_path: &Path, traj: &RawTrajectory) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let dy = traj.values.ncols();
        let mut header = vec!["t".to_string()];
        header.extend((1..=dy).map(|j| format!("q{j}")));
        w.write_record(&header)?;
        for r in 0..traj.values.nrows() {
            let mut rec = vec![format!("{}", r as f64 / traj.metadata.sample_rate_hz)];
            rec.extend(traj.values.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    if is_gz(csv_path) {
        let mut enc = GzEncoder::new(File::create(csv_path)?, Compression::default());
        enc.write_all(&buf)?;
        enc.finish()?;
    } else {
        std::fs::write(csv_path, buf)?;
    }
    std::fs::write(sidecar_path(csv_path), serde_json::to_string_pretty(&traj.metadata)?)?;
    Ok(())
}

/// All trajectory files in `dir`, sorted by file name.
pub fn read_trajectory_dir(dir: &Path) -> Result<Vec<RawTrajectory>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            n.ends_with(".csv") || n.ends_with(".csv.gz")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no trajectory files in {}", dir.display())));
    }
    paths.iter().map(|p| read_trajectory(p)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    digest: String,
    n_trajectories: usize,
    output_dim: usize,
    offset: Vec<f64>,
    sample_rate_hz: f64,
}

/// Writes `taxonomy.json`, processed trajectory files and `dataset.json`.
pub fn write_dataset_dir(dir: &Path, dataset: &Dataset, graph: &TaxonomyGraph, sample_rate_hz: f64) -> Result<()> {
    let tdir = dir.join("trajectories");
    std::fs::create_dir_all(&tdir)?;
    graph.save(&dir.join("taxonomy.json"))?;
    for (i, t) in dataset.trajectories.iter().enumerate() {
        let raw = RawTrajectory {
            values: t.clone(),
            metadata: RawMetadata {
                sample_rate_hz,
                subject: String::new(),
                grasp: dataset.end_labels[i].clone(),
                start_label: dataset.start_labels[i].clone(),
                end_label: dataset.end_labels[i].clone(),
                trim: None,
                processed: true,
            },
        };
        write_trajectory(&tdir.join(format!("traj_{i:04}.csv")), &raw)?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        digest: dataset.digest(),
        n_trajectories: dataset.n_trajectories(),
        output_dim: dataset.output_dim(),
        offset: dataset.offset.iter().copied().collect(),
        sample_rate_hz,
    };
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset directory; raw (unprocessed) files go through [`super::preprocess`].
pub fn read_dataset_dir(dir: &Path, config: &super::PreprocessConfig) -> Result<(Dataset, TaxonomyGraph)> {
    let graph = TaxonomyGraph::load(&dir.join("taxonomy.json"))?;
    let raws = read_trajectory_dir(&dir.join("trajectories"))?;
    let manifest: Option<Manifest> = match read_text(&dir.join("dataset.json")) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    if let Some(m) = &manifest {
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported dataset manifest version {}", m.version)));
        }
    }
    let ds = match manifest {
        // a written dataset is already processed and centered
        Some(m) if raws.iter().all(|r| r.metadata.processed) => {
            for r in &raws {
                r.validate()?;
            }
            let mut ds = Dataset::new(
                raws.iter().map(|r| r.values.clone()).collect(),
                raws.iter().map(|r| r.metadata.start_label.clone()).collect(),
                raws.iter().map(|r| r.metadata.end_label.clone()).collect(),
            )?;
            if m.offset.len() != ds.output_dim() {
                return Err(Error::DimensionMismatch { expected: ds.output_dim(), got: m.offset.len() });
            }
            ds.offset = DVector::from_vec(m.offset);
            if ds.digest() != m.digest {
                return Err(Error::Format("dataset files do not match the manifest digest".into()));
            }
            ds
        }
        Some(m) => {
            let mut ds = super::preprocess(&raws, config)?;
            if m.offset.len() == ds.output_dim() {
                ds.offset += DVector::from_vec(m.offset);
            }
            ds
        }
        None => super::preprocess(&raws, config)?,
    };
    ds.validate(&graph)?;
    Ok((ds, graph))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> RawTrajectory {
        RawTrajectory {
            values: DMatrix::from_fn(12, 3, |r, c| (r as f64 * 0.1 + c as f64).sin()),
            metadata: RawMetadata {
                sample_rate_hz: 100.0,
                subject: "s1".into(),
                grasp: "lateral".into(),
                start_label: "root".into(),
                end_label: "root.0".into(),
                trim: Some([1, 10]),
                processed: false,
            },
        }
    }

    #[test]
    fn csv_round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.csv", "b.csv.gz"] {
            let p = dir.path().join(name);
            let t = raw();
            write_trajectory(&p, &t).unwrap();
            assert_eq!(read_trajectory(&p).unwrap(), t);
        }
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert!(text.starts_with("t,q1,q2,q3\n"));
        assert!(dir.path().join("b.json").exists());
        assert_eq!(read_trajectory_dir(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let mut t = raw();
        t.values[(2, 1)] = f64::NAN;
        write_trajectory(&p, &t).unwrap();
        assert!(read_trajectory(&p).is_err());
        std::fs::write(&p, "time,a\n0,1\n").unwrap();
        assert!(matches!(read_trajectory(&p), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_dir_round_trip_keeps_the_digest() {
        let g = TaxonomyGraph::binary_tree(2);
        let ds = crate::data::synthesize(&g, &Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &ds, &g, 100.0).unwrap();
        let (back, g2) = read_dataset_dir(dir.path(), &Default::default()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(g2.nodes(), g.nodes());
        let first = dir.path().join("trajectories").join("traj_0000.csv");
        let text = std::fs::read_to_string(&first).unwrap().replacen(",0.", ",1.", 1);
        std::fs::write(&first, text).unwrap();
        assert!(matches!(read_dataset_dir(dir.path(), &Default::default()), Err(Error::Format(_))));
    }
}
