//! Intensity normalisation: mean/variance whitening and percentile-landmark
//! histogram standardisation trained over a dataset.
//!
//! Both produce `f64` volumes. Masks restrict which voxels the statistics
//! are computed over; the resulting mapping is applied to every voxel.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::stats::{distinct_at_least, percentile_sorted, sorted};
use crate::volume::{DType, Volume};

/// Below this standard deviation an input is treated as constant.
pub const MIN_STD: f64 = 1e-8;
/// Minimum gap enforced between consecutive standard-scale landmarks.
pub const LANDMARK_EPS: f64 = 1e-6;
pub const STANDARD_RANGE: (f64, f64) = (0.0, 100.0);
pub const DEFAULT_PERCENTILES: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: Volume,
    /// Set when the input was degenerate and the output is not whitened.
    pub warning: Option<String>,
}

/// Subtracts the mean and divides by the sample standard deviation, both
/// computed over `mask` (or every voxel), per channel.
///
/// A channel whose standard deviation is below [`MIN_STD`] is only
/// mean-centred, which makes a constant mask region all zeros, and a warning
/// is returned.
pub fn meanvar_normalize(v: &Volume, mask: Option<&BinaryMask>) -> Result<Normalized> {
    let owned;
    let mask = match mask {
        Some(m) => m,
        None => {
            owned = BinaryMask::full(v.spatial_shape(), v.spacing());
            &owned
        }
    };
    let mut out = Vec::with_capacity(v.data().len());
    let mut warning = None;
    for c in 0..v.channels() {
        let values = mask.select(v, c)?;
        if values.is_empty() {
            return Err(Error::EmptyMask);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
        let std = if values.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        if std < MIN_STD || !std.is_finite() {
            warning = Some(format!(
                "channel {c}: intensity standard deviation {std:e} below {MIN_STD:e}; output only mean-centred"
            ));
            out.extend(v.channel(c).iter().map(|x| x - mean));
        } else {
            out.extend(v.channel(c).iter().map(|x| (x - mean) / std));
        }
    }
    Ok(Normalized { volume: v.with_data(out, DType::F64)?, warning })
}

/// Landmark model for one source: volume percentiles map onto
/// `standard_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramModel {
    pub source_name: String,
    pub landmark_percentiles: Vec<f64>,
    pub standard_scale: Vec<f64>,
}

/// One training volume, optionally restricted to a mask.
#[derive(Debug, Clone, Copy)]
pub struct TrainingVolume<'a> {
    pub subject_id: &'a str,
    pub volume: &'a Volume,
    pub mask: Option<&'a BinaryMask>,
}

pub fn validate_percentiles(percentiles: &[f64]) -> Result<()> {
    if percentiles.len() < 2 {
        return Err(Error::PreconditionViolation("at least two landmark percentiles are required".into()));
    }
    if percentiles.iter().any(|&p| !(p > 0.0 && p < 100.0)) {
        return Err(Error::PreconditionViolation(format!("percentiles must lie in (0, 100): {percentiles:?}")));
    }
    if percentiles.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::PreconditionViolation(format!("percentiles must be ascending: {percentiles:?}")));
    }
    Ok(())
}

fn masked_values(v: &Volume, mask: Option<&BinaryMask>) -> Result<Vec<f64>> {
    match mask {
        Some(m) => {
            let mut all = Vec::new();
            for c in 0..v.channels() {
                all.extend(m.select(v, c)?);
            }
            Ok(all)
        }
        None => Ok(v.data().to_vec()),
    }
}

/// Intensities of `v` at `percentiles`. Needs at least two distinct values
/// and distinct extreme landmarks.
pub fn volume_landmarks(subject: &str, v: &Volume, mask: Option<&BinaryMask>, percentiles: &[f64]) -> Result<Vec<f64>> {
    let values = sorted(masked_values(v, mask)?);
    if !distinct_at_least(&values, 2) {
        return Err(Error::DegenerateHistogram(subject.to_string()));
    }
    let landmarks: Vec<f64> = percentiles.iter().map(|&p| percentile_sorted(&values, p)).collect();
    if landmarks[landmarks.len() - 1] <= landmarks[0] {
        return Err(Error::DegenerateHistogram(subject.to_string()));
    }
    Ok(landmarks)
}

/// Learns the standard scale: each volume's landmarks are mapped affinely so
/// the lowest lands on 0 and the highest on 100, then averaged per landmark.
pub fn train_histogram_model(
    source_name: &str,
    volumes: &[TrainingVolume<'_>],
    percentiles: &[f64],
) -> Result<HistogramModel> {
    validate_percentiles(percentiles)?;
    if volumes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_volume: Vec<Vec<f64>> = volumes
        .par_iter()
        .map(|t| volume_landmarks(t.subject_id, t.volume, t.mask, percentiles))
        .collect::<Result<_>>()?;
    let (lo, hi) = STANDARD_RANGE;
    let mut scale = vec![0.0; percentiles.len()];
    for landmarks in &per_volume {
        let first = landmarks[0];
        let span = landmarks[landmarks.len() - 1] - first;
        for (s, l) in scale.iter_mut().zip(landmarks) {
            *s += lo + (l - first) / span * (hi - lo);
        }
    }
    let n = per_volume.len() as f64;
    for s in &mut scale {
        *s /= n;
    }
    for i in 1..scale.len() {
        if scale[i] <= scale[i - 1] {
            scale[i] = scale[i - 1] + LANDMARK_EPS;
        }
    }
    Ok(HistogramModel {
        source_name: source_name.to_string(),
        landmark_percentiles: percentiles.to_vec(),
        standard_scale: scale,
    })
}

/// Monotone piecewise-linear map through `(landmark, standard)` pairs,
/// extrapolated from the end segments.
#[derive(Debug, Clone)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    /// Repeated `xs` keep their first pairing. Needs two distinct `xs` and
    /// strictly increasing `ys`.
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let mut px: Vec<f64> = Vec::with_capacity(xs.len());
        let mut py: Vec<f64> = Vec::with_capacity(xs.len());
        for (&x, &y) in xs.iter().zip(ys) {
            if px.last().is_some_and(|&last| x <= last) {
                continue;
            }
            if py.last().is_some_and(|&last| y <= last) {
                return Err(Error::PreconditionViolation("standard scale must be strictly increasing".into()));
            }
            px.push(x);
            py.push(y);
        }
        if px.len() < 2 {
            return Err(Error::PreconditionViolation("need two distinct landmarks".into()));
        }
        Ok(PiecewiseLinear { xs: px, ys: py })
    }

    /// Each interior segment's output is clamped to its end values so the
    /// map stays non-decreasing under rounding.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let seg = |k: usize| {
            let (x0, x1, y0, y1) = (self.xs[k], self.xs[k + 1], self.ys[k], self.ys[k + 1]);
            (x0, y0, (y1 - y0) / (x1 - x0), y1)
        };
        if x < self.xs[0] {
            let (x0, y0, slope, _) = seg(0);
            return (y0 - (x0 - x) * slope).min(y0);
        }
        if x >= self.xs[n - 1] {
            let (_, _, slope, y1) = seg(n - 2);
            return (y1 + (x - self.xs[n - 1]) * slope).max(y1);
        }
        // last k with xs[k] <= x
        let k = self.xs.partition_point(|&b| b <= x) - 1;
        let (x0, y0, _, y1) = seg(k);
        let t = (x - x0) / (self.xs[k + 1] - x0);
        (y0 + t * (y1 - y0)).clamp(y0, y1)
    }
}

/// Maps `v`'s own landmarks (over `mask`, or all voxels) onto the model's
/// standard scale.
pub fn apply_histogram_model(v: &Volume, model: &HistogramModel, mask: Option<&BinaryMask>) -> Result<Volume> {
    validate_percentiles(&model.landmark_percentiles)?;
    if model.standard_scale.len() != model.landmark_percentiles.len() {
        return Err(Error::ModelFormat(format!(
            "source `{}`: {} percentiles but {} standard values",
            model.source_name,
            model.landmark_percentiles.len(),
            model.standard_scale.len()
        )));
    }
    let landmarks = volume_landmarks(&model.source_name, v, mask, &model.landmark_percentiles)?;
    let map = PiecewiseLinear::new(&landmarks, &model.standard_scale)?;
    let out = v.data().iter().map(|&x| map.eval(x)).collect();
    v.with_data(out, DType::F64)
}

/// Text form: one line per source, `source_name percentile:value ...`, with
/// values in shortest round-trip notation. Lines starting with `#` are
/// comments.
pub fn format_models(models: &[HistogramModel]) -> String {
    let mut out = String::from("# voxelpipe histogram model: source_name percentile:standard_value ...\n");
    for m in models {
        out.push_str(&m.source_name);
        for (p, s) in m.landmark_percentiles.iter().zip(&m.standard_scale) {
            let _ = write!(out, " {p}:{s}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_models(text: &str) -> Result<Vec<HistogramModel>> {
    let mut models: Vec<HistogramModel> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let name = tokens.next().unwrap_or_default().to_string();
        let mut percentiles = Vec::new();
        let mut scale = Vec::new();
        for tok in tokens {
            let bad = || Error::ModelFormat(format!("line {}: bad landmark `{tok}`", lineno + 1));
            let (p, s) = tok.split_once(':').ok_or_else(bad)?;
            percentiles.push(p.parse::<f64>().map_err(|_| bad())?);
            scale.push(s.parse::<f64>().map_err(|_| bad())?);
        }
        validate_percentiles(&percentiles)
            .map_err(|e| Error::ModelFormat(format!("line {}: {e}", lineno + 1)))?;
        if scale.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::ModelFormat(format!("line {}: standard scale not increasing", lineno + 1)));
        }
        if models.iter().any(|m| m.source_name == name) {
            return Err(Error::ModelFormat(format!("source `{name}` listed twice")));
        }
        models.push(HistogramModel { source_name: name, landmark_percentiles: percentiles, standard_scale: scale });
    }
    Ok(models)
}

pub fn write_models(path: impl AsRef<Path>, models: &[HistogramModel]) -> Result<()> {
    std::fs::write(path, format_models(models))?;
    Ok(())
}

pub fn read_models(path: impl AsRef<Path>) -> Result<Vec<HistogramModel>> {
    parse_models(&std::fs::read_to_string(path)?)
}
