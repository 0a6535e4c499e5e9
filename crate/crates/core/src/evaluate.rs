//! Segmentation and regression metrics, per subject and per label.
//!
//! Degenerate cases (empty masks, zero variance, absent labels) produce
//! `NaN` values tagged with a reason instead of errors, so a report over a
//! whole dataset never stops part way.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::stats::{percentile_sorted, sorted};
use crate::volume::Volume;

/// A metric value, or `NaN` with the reason it is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Value {
    pub value: f64,
    pub reason: Option<&'static str>,
}

impl Value {
    pub fn ok(value: f64) -> Self {
        Value { value, reason: None }
    }

    pub fn nan(reason: &'static str) -> Self {
        Value { value: f64::NAN, reason: Some(reason) }
    }

    fn ratio(num: f64, den: f64, reason: &'static str) -> Self {
        if den == 0.0 { Value::nan(reason) } else { Value::ok(num / den) }
    }

    pub fn is_nan(&self) -> bool {
        self.value.is_nan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = [dx, dy, dz].iter().filter(|d| **d != 0).count();
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::TwentySix => nonzero > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Six => "6",
            Connectivity::TwentySix => "26",
        })
    }
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceUnits {
    #[default]
    Mm,
    Voxels,
}

impl fmt::Display for DistanceUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceUnits::Mm => "mm",
            DistanceUnits::Voxels => "voxels",
        })
    }
}

impl FromStr for DistanceUnits {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "mm" => Ok(DistanceUnits::Mm),
            "voxels" => Ok(DistanceUnits::Voxels),
            other => Err(format!("distance units must be mm or voxels, got `{other}`")),
        }
    }
}

fn neighbour(shape: [usize; 3], p: [usize; 3], d: [isize; 3]) -> Option<[usize; 3]> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + d[a];
        if v < 0 || v >= shape[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

/// Mask voxels with at least one neighbour outside the mask or the volume.
pub fn border_voxels(mask: &BinaryMask, conn: Connectivity) -> Vec<usize> {
    let shape = mask.shape();
    let offsets = conn.offsets();
    (0..mask.len())
        .filter(|&i| mask.data()[i])
        .filter(|&i| {
            let p = mask.coords(i);
            offsets.iter().any(|&d| match neighbour(shape, p, d) {
                None => true,
                Some([x, y, z]) => !mask.get(x, y, z),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn overlap_counts(seg: &BinaryMask, reference: &BinaryMask) -> Result<OverlapCounts> {
    seg.check_same_shape(reference)?;
    let mut c = OverlapCounts::default();
    for (&s, &r) in seg.data().iter().zip(reference.data()) {
        match (s, r) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub counts: OverlapCounts,
    pub dice: Value,
    pub jaccard: Value,
    pub sensitivity: Value,
    pub specificity: Value,
    pub accuracy: Value,
}

pub fn overlap_metrics(seg: &BinaryMask, reference: &BinaryMask) -> Result<OverlapMetrics> {
    let c = overlap_counts(seg, reference)?;
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    Ok(OverlapMetrics {
        counts: c,
        dice: Value::ratio(2.0 * tp, 2.0 * tp + fp + fn_, "both_empty"),
        jaccard: Value::ratio(tp, tp + fp + fn_, "both_empty"),
        sensitivity: Value::ratio(tp, tp + fn_, "empty_reference"),
        specificity: Value::ratio(tn, tn + fp, "full_reference"),
        accuracy: Value::ok((tp + tn) / (tp + fp + fn_ + tn)),
    })
}

/// Squared distance transform of one line: `out[q] = min_p (s·(q − p))² + f[p]`,
/// by the lower envelope of parabolas. Infinite entries of `f` are skipped.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let xq = q as f64 * s;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let xp = p as f64 * s;
            let cross = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if cross <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(cross);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * s;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - v[k] as f64 * s;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in units of `spacing`) from every voxel to
/// the nearest voxel in `targets`; infinite when `targets` is empty.
pub fn squared_distance_transform(shape: [usize; 3], spacing: [f64; 3], targets: &[usize]) -> Vec<f64> {
    let n = shape.iter().product::<usize>();
    let mut grid = vec![f64::INFINITY; n];
    for &i in targets {
        grid[i] = 0.0;
    }
    let stride = [1, shape[0], shape[0] * shape[1]];
    let longest = *shape.iter().max().unwrap();
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest));
    for axis in 0..3 {
        let len = shape[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..shape[o2] {
            for i in 0..shape[o1] {
                let base = i * stride[o1] + j * stride[o2];
                for t in 0..len {
                    line[t] = grid[base + t * stride[axis]];
                }
                edt_line(&line[..len], spacing[axis], &mut out[..len], &mut v, &mut z);
                for t in 0..len {
                    grid[base + t * stride[axis]] = out[t];
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub mean_abs_distance: Value,
    pub hausdorff: Value,
    pub hausdorff95: Value,
}

impl SurfaceDistances {
    fn undefined(reason: &'static str) -> Self {
        SurfaceDistances { mean_abs_distance: Value::nan(reason), hausdorff: Value::nan(reason), hausdorff95: Value::nan(reason) }
    }
}

fn effective_spacing(mask: &BinaryMask, units: DistanceUnits) -> [f64; 3] {
    match units {
        DistanceUnits::Mm => mask.spacing(),
        DistanceUnits::Voxels => [1.0; 3],
    }
}

/// Distances from each border voxel of `from` to the border of `to`.
fn directed<'a>(from: &'a [usize], to_field: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    from.iter().map(move |&i| to_field[i].sqrt())
}

/// Both directed border-to-border distance sets, concatenated.
pub fn surface_distance_set(seg: &BinaryMask, reference: &BinaryMask, conn: Connectivity, units: DistanceUnits) -> Result<Vec<f64>> {
    seg.check_same_shape(reference)?;
    let spacing = effective_spacing(seg, units);
    let bs = border_voxels(seg, conn);
    let br = border_voxels(reference, conn);
    let ds = squared_distance_transform(seg.shape(), spacing, &bs);
    let dr = squared_distance_transform(seg.shape(), spacing, &br);
    Ok(directed(&bs, &dr).chain(directed(&br, &ds)).collect())
}

pub fn surface_distances(seg: &BinaryMask, reference: &BinaryMask, conn: Connectivity, units: DistanceUnits) -> Result<SurfaceDistances> {
    seg.check_same_shape(reference)?;
    if seg.is_empty() || reference.is_empty() {
        return Ok(SurfaceDistances::undefined("empty_mask"));
    }
    let d = sorted(surface_distance_set(seg, reference, conn, units)?);
    Ok(SurfaceDistances {
        mean_abs_distance: Value::ok(d.iter().sum::<f64>() / d.len() as f64),
        hausdorff: Value::ok(*d.last().unwrap()),
        hausdorff95: Value::ok(percentile_sorted(&d, 95.0)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMetrics {
    pub n_voxels: usize,
    pub volume_mm3: f64,
    /// Border voxel count.
    pub surface: usize,
    pub surface_volume_ratio: f64,
    pub compactness: f64,
    pub warning: Option<String>,
}

pub fn shape_metrics(mask: &BinaryMask, conn: Connectivity) -> ShapeMetrics {
    let n = mask.count();
    let [sx, sy, sz] = mask.spacing();
    if n == 0 {
        return ShapeMetrics {
            n_voxels: 0,
            volume_mm3: 0.0,
            surface: 0,
            surface_volume_ratio: 0.0,
            compactness: 0.0,
            warning: Some("empty mask: shape metrics set to zero".into()),
        };
    }
    let surface = border_voxels(mask, conn).len();
    ShapeMetrics {
        n_voxels: n,
        volume_mm3: n as f64 * sx * sy * sz,
        surface,
        surface_volume_ratio: surface as f64 / n as f64,
        compactness: (surface as f64).powf(1.5) / n as f64,
        warning: None,
    }
}

/// Component labels (0 for background, then 1..=count in scan order) and
/// the component count.
pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> (Vec<u32>, usize) {
    let shape = mask.shape();
    let offsets = conn.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..mask.len() {
        if !mask.data()[seed] || labels[seed] != 0 {
            continue;
        }
        count += 1;
        labels[seed] = count;
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            let p = mask.coords(i);
            for &d in &offsets {
                if let Some([x, y, z]) = neighbour(shape, p, d) {
                    let j = mask.index(x, y, z);
                    if mask.data()[j] && labels[j] == 0 {
                        labels[j] = count;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub reference_regions: usize,
    pub detected_regions: usize,
    /// Segmentation components with no reference overlap.
    pub false_positive_regions: usize,
    pub background_regions: usize,
    /// Background components holding no false-positive region.
    pub true_negative_regions: usize,
    pub detection_rate: Value,
    pub region_sensitivity: Value,
    pub region_specificity: Value,
    pub region_accuracy: Value,
}

/// Region-wise detection. A reference component counts as detected when
/// the segmentation covers some of it and at least `overlap_threshold` of
/// its voxels. Segmentation components touching no reference voxel are
/// false-positive regions; a background component (connected component of
/// the reference complement) is a true negative when it contains none.
pub fn region_metrics(seg: &BinaryMask, reference: &BinaryMask, overlap_threshold: f64, conn: Connectivity) -> Result<RegionMetrics> {
    seg.check_same_shape(reference)?;
    if !(0.0..=1.0).contains(&overlap_threshold) {
        return Err(Error::PreconditionViolation(format!("overlap threshold {overlap_threshold} outside [0, 1]")));
    }
    let (ref_labels, m) = connected_components(reference, conn);
    let mut size = vec![0usize; m + 1];
    let mut hit = vec![0usize; m + 1];
    for (i, &l) in ref_labels.iter().enumerate() {
        size[l as usize] += 1;
        if seg.data()[i] {
            hit[l as usize] += 1;
        }
    }
    let detected = (1..=m)
        .filter(|&l| hit[l] > 0 && hit[l] as f64 / size[l] as f64 >= overlap_threshold)
        .count();

    let (seg_labels, k) = connected_components(seg, conn);
    let mut touches_ref = vec![false; k + 1];
    for (i, &l) in seg_labels.iter().enumerate() {
        if l > 0 && reference.data()[i] {
            touches_ref[l as usize] = true;
        }
    }
    let background = BinaryMask::new(reference.data().iter().map(|r| !r).collect(), reference.shape(), reference.spacing())?;
    let (bg_labels, n_bg) = connected_components(&background, conn);
    let mut bg_has_fp = vec![false; n_bg + 1];
    for (i, &l) in seg_labels.iter().enumerate() {
        if l > 0 && !touches_ref[l as usize] {
            bg_has_fp[bg_labels[i] as usize] = true;
        }
    }
    let fp_regions = (1..=k).filter(|&l| !touches_ref[l]).count();
    let tn_bg = (1..=n_bg).filter(|&l| !bg_has_fp[l]).count();
    let rate = Value::ratio(detected as f64, m as f64, "no_reference_regions");
    Ok(RegionMetrics {
        reference_regions: m,
        detected_regions: detected,
        false_positive_regions: fp_regions,
        background_regions: n_bg,
        true_negative_regions: tn_bg,
        detection_rate: rate,
        region_sensitivity: rate,
        region_specificity: Value::ratio(tn_bg as f64, n_bg as f64, "no_background_regions"),
        region_accuracy: Value::ratio((detected + tn_bg) as f64, (m + n_bg) as f64, "no_regions"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub me: f64,
    pub rmse: f64,
}

/// Error of `pred − reference` over the mask (every channel) or all voxels.
pub fn regression_metrics(pred: &Volume, reference: &Volume, mask: Option<&BinaryMask>) -> Result<RegressionMetrics> {
    if pred.shape() != reference.shape() {
        return Err(Error::ShapeMismatch { left: pred.shape().to_vec(), right: reference.shape().to_vec() });
    }
    let (mut abs, mut sum, mut sq, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut add = |d: f64| {
        abs += d.abs();
        sum += d;
        sq += d * d;
        n += 1;
    };
    match mask {
        None => pred.data().iter().zip(reference.data()).for_each(|(p, r)| add(p - r)),
        Some(m) => {
            for c in 0..pred.channels() {
                let p = m.select(pred, c)?;
                let r = m.select(reference, c)?;
                p.iter().zip(&r).for_each(|(p, r)| add(p - r));
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let n = n as f64;
    Ok(RegressionMetrics { mae: abs / n, me: sum / n, rmse: (sq / n).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityStats {
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    /// Biased Fisher-Pearson coefficient `m3 / m2^1.5`.
    pub skewness: Value,
}

/// Statistics of channel 0 of `v` inside the mask.
pub fn intensity_stats(v: &Volume, mask: &BinaryMask) -> Result<IntensityStats> {
    let values = sorted(mask.select(v, 0)?);
    if values.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 == 0.0 { Value::nan("zero_variance") } else { Value::ok(m3 / m2.powf(1.5)) };
    Ok(IntensityStats {
        mean,
        q25: percentile_sorted(&values, 25.0),
        median: percentile_sorted(&values, 50.0),
        q75: percentile_sorted(&values, 75.0),
        skewness,
    })
}

pub const OVERLAP_METRICS: [&str; 5] = ["accuracy", "dice", "jaccard", "sensitivity", "specificity"];
pub const DISTANCE_METRICS: [&str; 3] = ["hausdorff", "hausdorff95", "mean_abs_distance"];
pub const SHAPE_METRICS: [&str; 5] = ["compactness", "n_voxels", "relative_volume_difference", "surface_volume_ratio", "volume_mm3"];
pub const REGION_METRICS: [&str; 5] =
    ["detection_rate", "false_positive_regions", "region_accuracy", "region_sensitivity", "region_specificity"];
pub const INTENSITY_METRICS: [&str; 5] = ["intensity_mean", "intensity_median", "intensity_q25", "intensity_q75", "intensity_skewness"];
pub const REGRESSION_METRICS: [&str; 3] = ["mae", "me", "rmse"];

/// Every metric name a report may contain.
pub fn registered_metrics() -> Vec<&'static str> {
    let mut all: Vec<&str> = OVERLAP_METRICS
        .iter()
        .chain(&DISTANCE_METRICS)
        .chain(&SHAPE_METRICS)
        .chain(&REGION_METRICS)
        .chain(&INTENSITY_METRICS)
        .chain(&REGRESSION_METRICS)
        .copied()
        .collect();
    all.sort_unstable();
    all
}

/// Segmentation metrics evaluated for every label.
pub fn default_segmentation_metrics() -> Vec<String> {
    OVERLAP_METRICS.iter().chain(&DISTANCE_METRICS).chain(&SHAPE_METRICS).chain(&REGION_METRICS).map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub metrics: Vec<String>,
    pub border_connectivity: Connectivity,
    pub region_connectivity: Connectivity,
    pub overlap_threshold: f64,
    pub units: DistanceUnits,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: default_segmentation_metrics(),
            border_connectivity: Connectivity::Six,
            region_connectivity: Connectivity::TwentySix,
            overlap_threshold: 0.0,
            units: DistanceUnits::Mm,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        let known = registered_metrics();
        if let Some(bad) = self.metrics.iter().find(|m| !known.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown metric `{bad}`")));
        }
        Ok(())
    }

    fn wants(&self, names: &[&str]) -> bool {
        self.metrics.iter().any(|m| names.contains(&m.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub subject_id: String,
    pub label: String,
    pub metric: String,
    pub value: Value,
}

fn label_key(label: &str) -> (u8, f64, &str) {
    match label.parse::<f64>() {
        Ok(v) => (0, v, label),
        Err(_) => (1, 0.0, label),
    }
}

/// Rows ordered by subject, label (numerically where possible) and metric.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "subject_id,label,metric,value,reason";

impl MetricReport {
    pub fn new(mut rows: Vec<MetricRow>) -> Self {
        rows.sort_by(|a, b| {
            let (ka, kb) = (label_key(&a.label), label_key(&b.label));
            a.subject_id
                .cmp(&b.subject_id)
                .then(ka.0.cmp(&kb.0))
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.cmp(kb.2))
                .then(a.metric.cmp(&b.metric))
        });
        MetricReport { rows }
    }

    pub fn extend(&mut self, rows: Vec<MetricRow>) {
        let mut all = std::mem::take(&mut self.rows);
        all.extend(rows);
        *self = MetricReport::new(all);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER.split(','))?;
        for r in &self.rows {
            let value = if r.value.value.is_nan() { "NaN".to_string() } else { r.value.value.to_string() };
            w.write_record([r.subject_id.as_str(), &r.label, &r.metric, &value, r.value.reason.unwrap_or("")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv()?.as_bytes())?;
        Ok(())
    }

    /// Median over subjects of each metric per label, ignoring NaN.
    pub fn medians(&self) -> BTreeMap<(String, String), f64> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let entry = groups.entry((r.label.clone(), r.metric.clone())).or_default();
            if !r.value.value.is_nan() {
                entry.push(r.value.value);
            }
        }
        groups
            .into_iter()
            .map(|(k, v)| {
                let m = if v.is_empty() { f64::NAN } else { percentile_sorted(&sorted(v), 50.0) };
                (k, m)
            })
            .collect()
    }

    /// Per-label medians in the layout of a summary table: one row per
    /// label, columns for Dice, relative volume difference, mean absolute
    /// distance and 95th percentile Hausdorff distance.
    pub fn median_table(&self) -> String {
        let medians = self.medians();
        let mut labels: Vec<&String> = medians.keys().map(|(l, _)| l).collect();
        labels.dedup();
        labels.sort_by(|a, b| {
            let (ka, kb) = (label_key(a), label_key(b));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(kb.2))
        });
        labels.dedup();
        let mut out = String::from("label");
        for c in TABLE_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for l in labels {
            out.push_str(l);
            for c in TABLE_COLUMNS {
                let v = medians.get(&(l.clone(), c.to_string())).copied().unwrap_or(f64::NAN);
                out.push(',');
                out.push_str(&if v.is_nan() { "NaN".to_string() } else { format!("{v}") });
            }
            out.push('\n');
        }
        out
    }
}

pub const TABLE_COLUMNS: [&str; 4] = ["dice", "relative_volume_difference", "mean_abs_distance", "hausdorff95"];

pub fn format_label(label: f64) -> String {
    format!("{label}")
}

/// Rows for one label of a segmentation against its reference.
pub fn evaluate_label(
    subject_id: &str,
    seg: &Volume,
    reference: &Volume,
    label: f64,
    image: Option<&Volume>,
    opts: &EvalOptions,
) -> Result<Vec<MetricRow>> {
    if seg.spatial_shape() != reference.spatial_shape() {
        return Err(Error::ShapeMismatch { left: seg.shape().to_vec(), right: reference.shape().to_vec() });
    }
    let s = BinaryMask::from_label(seg, label).with_spacing(reference.spacing());
    let r = BinaryMask::from_label(reference, label);
    let mut values: BTreeMap<&'static str, Value> = BTreeMap::new();
    if s.is_empty() && r.is_empty() {
        for m in registered_metrics() {
            values.insert(m, Value::nan("label_absent"));
        }
    } else {
        if opts.wants(&OVERLAP_METRICS) {
            let o = overlap_metrics(&s, &r)?;
            values.extend([
                ("dice", o.dice),
                ("jaccard", o.jaccard),
                ("sensitivity", o.sensitivity),
                ("specificity", o.specificity),
                ("accuracy", o.accuracy),
            ]);
        }
        if opts.wants(&DISTANCE_METRICS) {
            let d = surface_distances(&s, &r, opts.border_connectivity, opts.units)?;
            values.extend([
                ("mean_abs_distance", d.mean_abs_distance),
                ("hausdorff", d.hausdorff),
                ("hausdorff95", d.hausdorff95),
            ]);
        }
        if opts.wants(&SHAPE_METRICS) {
            let sh = shape_metrics(&s, opts.border_connectivity);
            let ref_volume = shape_metrics(&r, opts.border_connectivity).volume_mm3;
            let empty = |v: f64| if sh.n_voxels == 0 { Value { value: v, reason: Some("empty_mask") } } else { Value::ok(v) };
            values.extend([
                ("volume_mm3", empty(sh.volume_mm3)),
                ("n_voxels", Value::ok(sh.n_voxels as f64)),
                ("surface_volume_ratio", empty(sh.surface_volume_ratio)),
                ("compactness", empty(sh.compactness)),
                (
                    "relative_volume_difference",
                    Value::ratio(sh.volume_mm3 - ref_volume, ref_volume, "empty_reference"),
                ),
            ]);
        }
        if opts.wants(&REGION_METRICS) {
            let rg = region_metrics(&s, &r, opts.overlap_threshold, opts.region_connectivity)?;
            values.extend([
                ("detection_rate", rg.detection_rate),
                ("false_positive_regions", Value::ok(rg.false_positive_regions as f64)),
                ("region_sensitivity", rg.region_sensitivity),
                ("region_specificity", rg.region_specificity),
                ("region_accuracy", rg.region_accuracy),
            ]);
        }
        if opts.wants(&INTENSITY_METRICS) {
            let entries = match image {
                Some(img) if !s.is_empty() => {
                    let st = intensity_stats(img, &s)?;
                    [st.mean, st.median, st.q25, st.q75].map(Value::ok).to_vec().into_iter().chain([st.skewness]).collect()
                }
                Some(_) => vec![Value::nan("empty_mask"); 5],
                None => vec![Value::nan("no_image"); 5],
            };
            values.extend(INTENSITY_METRICS.iter().copied().zip(entries));
        }
    }
    Ok(opts
        .metrics
        .iter()
        .filter_map(|m| values.get_key_value(m.as_str()))
        .map(|(name, v)| MetricRow {
            subject_id: subject_id.to_string(),
            label: format_label(label),
            metric: name.to_string(),
            value: *v,
        })
        .collect())
}

/// Rows for every label of one subject.
pub fn evaluate_subject(
    subject_id: &str,
    seg: &Volume,
    reference: &Volume,
    labels: &[f64],
    image: Option<&Volume>,
    opts: &EvalOptions,
) -> Result<Vec<MetricRow>> {
    opts.validate()?;
    let mut rows = Vec::new();
    for &l in labels {
        rows.extend(evaluate_label(subject_id, seg, reference, l, image, opts)?);
    }
    Ok(rows)
}

/// Regression rows (label `all`) for one subject.
pub fn evaluate_regression(subject_id: &str, pred: &Volume, reference: &Volume, mask: Option<&BinaryMask>) -> Result<Vec<MetricRow>> {
    let r = regression_metrics(pred, reference, mask)?;
    Ok([("mae", r.mae), ("me", r.me), ("rmse", r.rmse)]
        .into_iter()
        .map(|(m, v)| MetricRow { subject_id: subject_id.into(), label: "all".into(), metric: m.into(), value: Value::ok(v) })
        .collect())
}

/// Labels present in either volume, excluding `background`.
pub fn present_labels(seg: &Volume, reference: &Volume, background: f64) -> Vec<f64> {
    let mut l = sorted(seg.channel(0).iter().chain(reference.channel(0)).copied().filter(|&v| v != background));
    l.dedup();
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::volume::{Affine, DType};
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(shape: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> BinaryMask {
        BinaryMask::from_fn(shape, spacing, |x, y, z| on.contains(&[x, y, z])).unwrap()
    }

    fn random_mask(rng: &mut impl Rng, shape: [usize; 3], p: f64) -> BinaryMask {
        BinaryMask::from_fn(shape, [1.0; 3], |_, _, _| rng.random_bool(p)).unwrap()
    }

    /// Distance from each border voxel of `a` to the closest border voxel
    /// of `b`, by exhaustive pairing.
    fn brute_directed(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
        let ba = border_voxels(a, Connectivity::Six);
        let bb = border_voxels(b, Connectivity::Six);
        ba.iter()
            .map(|&i| {
                let p = a.coords(i);
                bb.iter()
                    .map(|&j| {
                        let q = b.coords(j);
                        let d: [f64; 3] = std::array::from_fn(|k| (p[k] as f64 - q[k] as f64) * spacing[k]);
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn overlap_hand_example() {
        let s = mask([8; 3], [1.0; 3], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let r = mask([8; 3], [1.0; 3], &[[2, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0]]);
        let o = overlap_metrics(&s, &r).unwrap();
        assert_eq!(o.counts, OverlapCounts { tp: 2, fp: 2, fn_: 2, tn: 512 - 6 });
        assert_eq!(o.dice.value, 0.5);
        assert_eq!(o.jaccard.value, 1.0 / 3.0);
        assert_eq!(o.accuracy.value, 508.0 / 512.0);
        let e = BinaryMask::from_fn([2; 3], [1.0; 3], |_, _, _| false).unwrap();
        let o = overlap_metrics(&e, &e).unwrap();
        assert_eq!(o.dice.reason, Some("both_empty"));
        assert_eq!(o.jaccard.reason, Some("both_empty"));
        assert!(overlap_metrics(&e, &BinaryMask::full([2, 2, 3], [1.0; 3])).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = mask([5, 5, 2], [1.0; 3], &[[0, 0, 0]]);
        let b = mask([5, 5, 2], [1.0; 3], &[[3, 4, 0]]);
        let d = surface_distances(&a, &b, Connectivity::Six, DistanceUnits::Mm).unwrap();
        assert_eq!([d.mean_abs_distance.value, d.hausdorff.value, d.hausdorff95.value], [5.0; 3]);
        let a = mask([2, 2, 2], [1.0, 1.0, 2.0], &[[0, 0, 0]]);
        let b = mask([2, 2, 2], [1.0, 1.0, 2.0], &[[0, 0, 1]]);
        let d = surface_distances(&a, &b, Connectivity::Six, DistanceUnits::Mm).unwrap();
        assert_eq!(d.hausdorff.value, 2.0);
        let d = surface_distances(&a, &b, Connectivity::Six, DistanceUnits::Voxels).unwrap();
        assert_eq!(d.hausdorff.value, 1.0);
        let d = surface_distances(&a, &a, Connectivity::Six, DistanceUnits::Mm).unwrap();
        assert_eq!(d.hausdorff.value, 0.0);
        let e = mask([2, 2, 2], [1.0; 3], &[]);
        assert_eq!(surface_distances(&a, &e, Connectivity::Six, DistanceUnits::Mm).unwrap().hausdorff.reason, Some("empty_mask"));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = seeded(8);
        for _ in 0..30 {
            let shape = [rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10)];
            let spacing = [rng.random_range(0.3..3.0), rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)];
            let a = random_mask(&mut rng, shape, 0.3).with_spacing(spacing);
            let b = random_mask(&mut rng, shape, 0.3).with_spacing(spacing);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let fast = surface_distance_set(&a, &b, Connectivity::Six, DistanceUnits::Mm).unwrap();
            let mut slow = brute_directed(&a, &b, spacing);
            slow.extend(brute_directed(&b, &a, spacing));
            assert_eq!(fast.len(), slow.len());
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-9, "{f} vs {s}");
            }
        }
    }

    #[test]
    fn shape_examples() {
        let eight = BinaryMask::from_fn([2, 2, 2], [1.0, 1.0, 2.0], |_, _, _| true).unwrap();
        assert_eq!(shape_metrics(&eight, Connectivity::Six).volume_mm3, 16.0);
        let one = mask([3; 3], [1.0; 3], &[[1, 1, 1]]);
        let s = shape_metrics(&one, Connectivity::Six);
        assert_eq!((s.surface, s.surface_volume_ratio, s.compactness), (1, 1.0, 1.0));
        let cube = BinaryMask::from_fn([5; 3], [1.0; 3], |x, y, z| (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z)).unwrap();
        let s = shape_metrics(&cube, Connectivity::Six);
        assert_eq!(s.surface, 26);
        assert_eq!(s.surface_volume_ratio, 26.0 / 27.0);
        assert_eq!(s.compactness, 26f64.powf(1.5) / 27.0);
        let empty = shape_metrics(&mask([2; 3], [1.0; 3], &[]), Connectivity::Six);
        assert_eq!(empty.volume_mm3, 0.0);
        assert!(empty.warning.is_some());
    }

    #[test]
    fn components_by_connectivity() {
        let diag = mask([3; 3], [1.0; 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&diag, Connectivity::TwentySix).1, 1);
        assert_eq!(connected_components(&diag, Connectivity::Six).1, 2);
    }

    #[test]
    fn region_examples() {
        let two = |x0: usize| move |x: usize, y: usize, z: usize| (x0..x0 + 2).contains(&x) && y < 2 && z < 2;
        let r = BinaryMask::from_fn([6; 3], [1.0; 3], |x, y, z| two(0)(x, y, z) || two(4)(x, y, z)).unwrap();
        let s = BinaryMask::from_fn([6; 3], [1.0; 3], |x, y, z| x == 1 && y == 0 && z == 0).unwrap();
        let m = region_metrics(&s, &r, 0.0, Connectivity::TwentySix).unwrap();
        assert_eq!((m.reference_regions, m.detected_regions), (2, 1));
        assert_eq!(m.detection_rate.value, 0.5);
        let same = region_metrics(&r, &r, 0.0, Connectivity::TwentySix).unwrap();
        assert_eq!(same.detection_rate.value, 1.0);
        assert_eq!(same.false_positive_regions, 0);
        assert_eq!(same.region_specificity.value, 1.0);
        let empty = BinaryMask::from_fn([6; 3], [1.0; 3], |_, _, _| false).unwrap();
        assert_eq!(region_metrics(&empty, &r, 0.0, Connectivity::TwentySix).unwrap().detection_rate.value, 0.0);
        // a false positive blob far from both references
        let fp = BinaryMask::from_fn([6; 3], [1.0; 3], |x, y, z| two(0)(x, y, z) || (x, y, z) == (5, 5, 5)).unwrap();
        let m = region_metrics(&fp, &r, 0.0, Connectivity::TwentySix).unwrap();
        assert_eq!(m.false_positive_regions, 1);
        assert_eq!(m.background_regions, 1);
        assert_eq!(m.region_specificity.value, 0.0);
        assert_eq!(m.region_accuracy.value, 1.0 / 3.0);
        // threshold: one voxel of an eight-voxel component is 1/8 overlap
        assert_eq!(region_metrics(&s, &r, 0.5, Connectivity::TwentySix).unwrap().detected_regions, 0);
    }

    #[test]
    fn regression_examples() {
        let r = Volume::from_fn([4, 4, 4, 1], DType::F64, Affine::identity(), |x, y, z, _| (x * y + z) as f64).unwrap();
        let m = regression_metrics(&r, &r, None).unwrap();
        assert_eq!((m.mae, m.me, m.rmse), (0.0, 0.0, 0.0));
        let p = r.with_data(r.data().iter().map(|v| v - 2.5).collect(), DType::F64).unwrap();
        let m = regression_metrics(&p, &r, None).unwrap();
        assert_eq!((m.mae, m.me, m.rmse), (2.5, -2.5, 2.5));
        let mut rng = seeded(4);
        let a = r.with_data((0..64).map(|_| rng.random_range(-5.0..5.0)).collect(), DType::F64).unwrap();
        let (mut abs, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for i in 0..64 {
            let d = a.data()[i] - r.data()[i];
            abs += d.abs();
            sum += d;
            sq += d * d;
        }
        let m = regression_metrics(&a, &r, None).unwrap();
        assert!((m.mae - abs / 64.0).abs() < 1e-12 && (m.me - sum / 64.0).abs() < 1e-12 && (m.rmse - (sq / 64.0).sqrt()).abs() < 1e-12);
        let none = BinaryMask::from_fn([4; 3], [1.0; 3], |_, _, _| false).unwrap();
        assert!(matches!(regression_metrics(&a, &r, Some(&none)), Err(Error::EmptyMask)));
    }

    #[test]
    fn intensity_examples() {
        let v = Volume::from_spatial(vec![1.0, 2.0, 3.0, 4.0], [4, 1, 1], DType::F64, Affine::identity()).unwrap();
        let st = intensity_stats(&v, &BinaryMask::full([4, 1, 1], [1.0; 3])).unwrap();
        assert_eq!((st.mean, st.median, st.q25, st.q75), (2.5, 2.5, 1.75, 3.25));
        assert_eq!(st.skewness.value, 0.0);
        let v = Volume::from_spatial(vec![-1.0, 0.0, 1.0], [3, 1, 1], DType::F64, Affine::identity()).unwrap();
        assert_eq!(intensity_stats(&v, &BinaryMask::full([3, 1, 1], [1.0; 3])).unwrap().skewness.value, 0.0);
        let c = Volume::filled([3, 1, 1, 1], 7.0, DType::F64, Affine::identity()).unwrap();
        assert_eq!(intensity_stats(&c, &BinaryMask::full([3, 1, 1], [1.0; 3])).unwrap().skewness.reason, Some("zero_variance"));
        // skewed sample: {0, 0, 0, 4} has m2 = 3, m3 = 6 → 6 / 3^1.5
        let v = Volume::from_spatial(vec![0.0, 0.0, 0.0, 4.0], [4, 1, 1], DType::F64, Affine::identity()).unwrap();
        let g1 = intensity_stats(&v, &BinaryMask::full([4, 1, 1], [1.0; 3])).unwrap().skewness.value;
        assert!((g1 - 6.0 / 3f64.powf(1.5)).abs() < 1e-12);
    }

    fn labels(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume {
        Volume::from_fn([shape[0], shape[1], shape[2], 1], DType::U8, Affine::identity(), |x, y, z, _| f(x, y, z)).unwrap()
    }

    #[test]
    fn subject_report_rows() {
        let r = labels([8; 3], |x, _, _| if x < 3 { 1.0 } else if x > 5 { 2.0 } else { 0.0 });
        let rows = evaluate_subject("a", &r, &r, &[1.0, 2.0, 3.0], None, &EvalOptions::default()).unwrap();
        let report = MetricReport::new(rows);
        for l in ["1", "2"] {
            let dice = report.rows.iter().find(|x| x.label == l && x.metric == "dice").unwrap();
            assert_eq!(dice.value.value, 1.0);
            let rvd = report.rows.iter().find(|x| x.label == l && x.metric == "relative_volume_difference").unwrap();
            assert_eq!(rvd.value.value, 0.0);
        }
        assert!(report.rows.iter().filter(|x| x.label == "3").all(|x| x.value.reason == Some("label_absent")));
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("subject_id,label,metric,value,reason\n"));
        assert!(csv.contains("a,3,dice,NaN,label_absent\n"));
        let metrics: Vec<&str> = report.rows.iter().filter(|x| x.label == "1").map(|x| x.metric.as_str()).collect();
        let mut expect = metrics.clone();
        expect.sort_unstable();
        assert_eq!(metrics, expect);
        let table = report.median_table();
        assert_eq!(table.lines().next().unwrap(), "label,dice,relative_volume_difference,mean_abs_distance,hausdorff95");
        assert!(table.contains("\n1,1,0,0,0\n"));
    }

    #[test]
    fn report_orders_labels_numerically() {
        let row = |s: &str, l: &str, m: &str| MetricRow { subject_id: s.into(), label: l.into(), metric: m.into(), value: Value::ok(0.0) };
        let r = MetricReport::new(vec![row("b", "1", "dice"), row("a", "10", "dice"), row("a", "2", "jaccard"), row("a", "2", "dice")]);
        let order: Vec<(String, String, String)> = r.rows.iter().map(|x| (x.subject_id.clone(), x.label.clone(), x.metric.clone())).collect();
        assert_eq!(order[0], ("a".into(), "2".into(), "dice".into()));
        assert_eq!(order[1].2, "jaccard");
        assert_eq!(order[2].1, "10");
        assert_eq!(order[3].0, "b");
    }

    #[test]
    fn unknown_metric_rejected() {
        let r = labels([2; 3], |_, _, _| 1.0);
        let opts = EvalOptions { metrics: vec!["dicee".into()], ..Default::default() };
        assert!(evaluate_subject("a", &r, &r, &[1.0], None, &opts).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn metric_identities(seed in any::<u64>(), shape in prop::array::uniform3(1usize..9), p in 0.05f64..0.6) {
            let mut rng = seeded(seed);
            let a = random_mask(&mut rng, shape, p);
            let b = random_mask(&mut rng, shape, p);
            let ab = overlap_metrics(&a, &b).unwrap();
            let ba = overlap_metrics(&b, &a).unwrap();
            if !ab.jaccard.is_nan() {
                let j = ab.jaccard.value;
                prop_assert!((ab.dice.value - 2.0 * j / (1.0 + j)).abs() <= 1e-15);
            }
            prop_assert_eq!(ab.dice.value.to_bits(), ba.dice.value.to_bits());
            prop_assert_eq!(ab.counts.fp, ba.counts.fn_);
            if !(a.is_empty() || b.is_empty()) {
                let d = surface_distances(&a, &b, Connectivity::Six, DistanceUnits::Mm).unwrap();
                let e = surface_distances(&b, &a, Connectivity::Six, DistanceUnits::Mm).unwrap();
                prop_assert!(d.hausdorff95.value <= d.hausdorff.value);
                prop_assert!(d.mean_abs_distance.value <= d.hausdorff.value);
                prop_assert_eq!(d.hausdorff.value, e.hausdorff.value);
                prop_assert!((d.mean_abs_distance.value - e.mean_abs_distance.value).abs() < 1e-12);
                let a2 = a.clone().with_spacing([2.0; 3]);
                let b2 = b.clone().with_spacing([2.0; 3]);
                let d2 = surface_distances(&a2, &b2, Connectivity::Six, DistanceUnits::Mm).unwrap();
                prop_assert_eq!(d2.hausdorff.value, 2.0 * d.hausdorff.value);
                prop_assert_eq!(d2.hausdorff95.value, 2.0 * d.hausdorff95.value);
                prop_assert_eq!(d2.mean_abs_distance.value, 2.0 * d.mean_abs_distance.value);
            }
        }
    }
}
