use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::io::RawTrajectory;
use super::Dataset;
use crate::error::{Error, Result};

/// Shortest trajectory accepted after subsampling.
pub const MIN_PROCESSED_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub cutoff_hz: f64,
    /// `None` picks the smallest stride giving at most `target_max_points` samples.
    pub stride: Option<usize>,
    pub target_max_points: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { cutoff_hz: 5.0, stride: None, target_max_points: 40 }
    }
}

/// Second-order Butterworth low-pass coefficients `(b, a)` with `a[0] = 1`.
pub fn butterworth2(cutoff_hz: f64, sample_rate_hz: f64) -> Result<([f64; 3], [f64; 3])> {
    if !(cutoff_hz > 0.0 && cutoff_hz < 0.5 * sample_rate_hz) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
            0.5 * sample_rate_hz
        )));
    }
    let k = (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
    let s2 = std::f64::consts::SQRT_2;
    let norm = 1.0 / (1.0 + s2 * k + k * k);
    let b0 = k * k * norm;
    Ok(([b0, 2.0 * b0, b0], [1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - s2 * k + k * k) * norm]))
}

/// Direct form II transposed, starting from the steady state for `x[0]`.
fn lfilter_steady(b: &[f64; 3], a: &[f64; 3], x: &[f64]) -> Vec<f64> {
    let x0 = x[0];
    let mut z2 = (b[2] - a[2]) * x0;
    let mut z1 = (b[1] - a[1]) * x0 + z2;
    x.iter()
        .map(|&xi| {
            let y = b[0] * xi + z1;
            z1 = b[1] * xi - a[1] * y + z2;
            z2 = b[2] * xi - a[2] * y;
            y
        })
        .collect()
}

/// Zero-phase forward-backward filtering with odd reflection padding at both ends.
pub fn filtfilt(b: &[f64; 3], a: &[f64; 3], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let pad = 9.min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let fwd = lfilter_steady(b, a, &ext);
    let rev: Vec<f64> = fwd.into_iter().rev().collect();
    let back = lfilter_steady(b, a, &rev);
    back.into_iter().rev().skip(pad).take(n).collect()
}

fn stride_for(len: usize, config: &PreprocessConfig) -> usize {
    match config.stride {
        Some(s) => s.max(1),
        None => {
            let target = config.target_max_points.max(1);
            len.div_ceil(target).max(1)
        }
    }
}

/// Filter, trim, subsample and center raw recordings.
///
/// Files marked as processed are taken as they are and only take part in centering.
pub fn preprocess(raws: &[RawTrajectory], config: &PreprocessConfig) -> Result<Dataset> {
    if raws.is_empty() {
        return Err(Error::InvalidArgument("no trajectories to preprocess".into()));
    }
    let mut trajs = Vec::with_capacity(raws.len());
    let mut starts = Vec::new();
    let mut ends = Vec::new();
    for raw in raws {
        raw.validate()?;
        let m = &raw.metadata;
        let values = if m.processed {
            raw.values.clone()
        } else {
            let (b, a) = butterworth2(config.cutoff_hz, m.sample_rate_hz)?;
            let (t, dy) = raw.values.shape();
            let mut filtered = DMatrix::zeros(t, dy);
            for j in 0..dy {
                let col: Vec<f64> = raw.values.column(j).iter().copied().collect();
                filtered.set_column(j, &DVector::from_vec(filtfilt(&b, &a, &col)));
            }
            let [lo, hi] = m.trim.unwrap_or([0, t - 1]);
            let trimmed = filtered.rows(lo, hi - lo + 1).into_owned();
            let stride = stride_for(trimmed.nrows(), config);
            let idx: Vec<usize> = (0..trimmed.nrows()).step_by(stride).collect();
            DMatrix::from_fn(idx.len(), dy, |r, c| trimmed[(idx[r], c)])
        };
        if values.nrows() < MIN_PROCESSED_LEN {
            return Err(Error::TooShort { len: values.nrows(), min: MIN_PROCESSED_LEN });
        }
        trajs.push(values);
        starts.push(m.start_label.clone());
        ends.push(m.end_label.clone());
    }
    let mut ds = Dataset::new(trajs, starts, ends)?;
    ds.center();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::super::io::RawMetadata;
    use super::*;

    fn raw_from(values: DMatrix<f64>) -> RawTrajectory {
        RawTrajectory {
            values,
            metadata: RawMetadata {
                sample_rate_hz: 100.0,
                subject: String::new(),
                grasp: String::new(),
                start_label: "a".into(),
                end_label: "b".into(),
                trim: None,
                processed: false,
            },
        }
    }

    #[test]
    fn constant_signal_is_preserved_then_centered() {
        let (b, a) = butterworth2(5.0, 100.0).unwrap();
        let y = filtfilt(&b, &a, &vec![1.7; 50]);
        assert!(y.iter().all(|v| (v - 1.7).abs() < 1e-12));
        let ds = preprocess(&[raw_from(DMatrix::from_element(60, 2, 0.4))], &Default::default()).unwrap();
        assert!(ds.stacked().amax() < 1e-12);
        assert!((ds.offset[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn high_frequency_is_attenuated() {
        let (b, a) = butterworth2(5.0, 100.0).unwrap();
        let x: Vec<f64> = (0..400).map(|i| (2.0 * std::f64::consts::PI * 30.0 * i as f64 / 100.0).sin()).collect();
        let y = filtfilt(&b, &a, &x);
        let amp = y[50..350].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(amp < 0.1, "{amp}");
        let slow: Vec<f64> = (0..400).map(|i| (2.0 * std::f64::consts::PI * 0.5 * i as f64 / 100.0).sin()).collect();
        let ys = filtfilt(&b, &a, &slow);
        assert!(ys[100..300].iter().zip(&slow[100..300]).all(|(p, q)| (p - q).abs() < 0.02));
    }

    #[test]
    fn trims_subsamples_and_centers() {
        let mut r = raw_from(DMatrix::from_fn(300, 3, |t, c| (t as f64 * 0.01 + c as f64).cos()));
        r.metadata.trim = Some([20, 279]);
        let ds = preprocess(&[r.clone(), r], &Default::default()).unwrap();
        let len = ds.trajectories[0].nrows();
        assert!((30..=40).contains(&len), "{len}");
        assert!(ds.column_means().amax() < 1e-9);
    }

    #[test]
    fn second_pass_is_a_no_op() {
        let ds = preprocess(&[raw_from(DMatrix::from_fn(200, 2, |t, c| (t as f64 * 0.03 * (c + 1) as f64).sin()))], &Default::default()).unwrap();
        let again: Vec<RawTrajectory> = ds
            .trajectories
            .iter()
            .map(|t| {
                let mut r = raw_from(t.clone());
                r.metadata.processed = true;
                r
            })
            .collect();
        let ds2 = preprocess(&again, &Default::default()).unwrap();
        assert!((ds2.stacked() - ds.stacked()).amax() < 1e-9);
    }

    #[test]
    fn too_short_after_subsampling() {
        let cfg = PreprocessConfig { stride: Some(5), ..Default::default() };
        assert!(matches!(preprocess(&[raw_from(DMatrix::zeros(12, 1))], &cfg), Err(Error::TooShort { .. })));
    }
}
