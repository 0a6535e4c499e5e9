//! INI configuration for the command-line driver.
//!
//! Every key has a default, and a parsed [`PipelineConfig`] holds every
//! value explicitly, so [`PipelineConfig::to_ini`] writes a complete file
//! that parses back to an equal configuration. Relative paths are resolved
//! against the directory of the configuration file.
//!
//! Any section other than the fixed ones below defines an input source.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{Ini, ParseOption};

use crate::augment::{AugmentSpace, AugmentSpec};
use crate::dataset::SourceSpec;
use crate::error::{Error, Result};
use crate::evaluate::{default_segmentation_metrics, Connectivity, DistanceUnits, EvalOptions};
use crate::normalize::DEFAULT_PERCENTILES;
use crate::sample::GridSpec;
use crate::volume::{DType, Interpolation};

pub const SYSTEM: &str = "system";
pub const SAMPLER: &str = "sampler";
pub const AUGMENTATION: &str = "augmentation";
pub const NORMALISATION: &str = "normalisation";
pub const PARTITION: &str = "partition";
pub const EVALUATION: &str = "evaluation";
pub const INFERENCE: &str = "inference";

const FIXED_SECTIONS: [&str; 7] = [SYSTEM, SAMPLER, AUGMENTATION, NORMALISATION, PARTITION, EVALUATION, INFERENCE];
const SOURCE_KEYS: [&str; 4] = ["path_to_search", "filename_contains", "filename_not_contains", "interpolation"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Partition,
    NormaliseTrain,
    Sample,
    AggregateIdentity,
    Evaluate,
    Inspect,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Partition,
        Action::NormaliseTrain,
        Action::Sample,
        Action::AggregateIdentity,
        Action::Evaluate,
        Action::Inspect,
    ];
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Partition => "partition",
            Action::NormaliseTrain => "normalise-train",
            Action::Sample => "sample",
            Action::AggregateIdentity => "aggregate-identity",
            Action::Evaluate => "evaluate",
            Action::Inspect => "inspect",
        })
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Action::ALL
            .into_iter()
            .find(|a| a.to_string() == s.trim())
            .ok_or_else(|| format!("unknown action `{}`", s.trim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerName {
    Uniform,
    Weighted,
    Grid,
    Resize,
}

impl fmt::Display for SamplerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerName::Uniform => "uniform",
            SamplerName::Weighted => "weighted",
            SamplerName::Grid => "grid",
            SamplerName::Resize => "resize",
        })
    }
}

impl FromStr for SamplerName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "uniform" => Ok(SamplerName::Uniform),
            "weighted" => Ok(SamplerName::Weighted),
            "grid" => Ok(SamplerName::Grid),
            "resize" => Ok(SamplerName::Resize),
            other => Err(format!("unknown sampler `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NormType {
    Histogram,
    MeanVar,
}

impl fmt::Display for NormType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormType::Histogram => "histogram",
            NormType::MeanVar => "meanvar",
        })
    }
}

impl FromStr for NormType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "histogram" => Ok(NormType::Histogram),
            "meanvar" => Ok(NormType::MeanVar),
            other => Err(format!("unknown normalisation `{other}`")),
        }
    }
}

/// Output dtype of aggregated volumes: the source's own or a fixed one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputDType {
    Source,
    Fixed(DType),
}

impl fmt::Display for OutputDType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputDType::Source => f.write_str("source"),
            OutputDType::Fixed(d) => write!(f, "{d}"),
        }
    }
}

impl FromStr for OutputDType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim() {
            "source" => OutputDType::Source,
            "u8" => OutputDType::Fixed(DType::U8),
            "i16" => OutputDType::Fixed(DType::I16),
            "i32" => OutputDType::Fixed(DType::I32),
            "f32" => OutputDType::Fixed(DType::F32),
            "f64" => OutputDType::Fixed(DType::F64),
            other => return Err(format!("unknown dtype `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub action: Action,
    pub model_dir: PathBuf,
    pub seed: u64,
    pub num_lanes: usize,
    pub queue_capacity: usize,
    pub deterministic: bool,
    /// Subject table used instead of file discovery.
    pub dataset_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub sampler: SamplerName,
    /// Window size, or the target shape for the resize sampler.
    pub window_size: [usize; 3],
    pub border: [usize; 3],
    pub batch_size: usize,
    pub sample_per_volume: usize,
    pub weight_source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub spec: AugmentSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalisationConfig {
    pub types: Vec<NormType>,
    pub histogram_model: PathBuf,
    pub percentiles: Vec<f64>,
    /// Restrict statistics to voxels above the volume minimum.
    pub foreground_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationConfig {
    pub seg_source: String,
    pub ref_source: String,
    /// Source for intensity statistics; empty for none.
    pub image_source: String,
    /// Labels to evaluate; empty means every label present except background.
    pub labels: Vec<f64>,
    pub background: f64,
    pub metrics: Vec<String>,
    pub border_connectivity: Connectivity,
    pub region_connectivity: Connectivity,
    pub overlap_threshold: f64,
    pub distance_units: DistanceUnits,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub source: String,
    pub output_dir: PathBuf,
    pub output_dtype: OutputDType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub system: SystemConfig,
    pub sampler: SamplerConfig,
    pub augmentation: AugmentationConfig,
    pub normalisation: NormalisationConfig,
    pub partition: PartitionConfig,
    pub evaluation: EvaluationConfig,
    pub inference: InferenceConfig,
    /// Sorted by name.
    pub sources: Vec<SourceSpec>,
}

/// Raw `key → value` pairs of one section, consumed as they are read so
/// leftovers can be reported as unknown keys.
struct Section<'a> {
    name: &'a str,
    base: &'a Path,
    values: BTreeMap<String, String>,
}

impl<'a> Section<'a> {
    fn new(name: &'a str, base: &'a Path, values: Option<&BTreeMap<String, String>>) -> Self {
        Section { name, base, values: values.cloned().unwrap_or_default() }
    }

    fn type_error(&self, key: &str, value: &str, expected: &str) -> Error {
        Error::ConfigTypeError {
            section: self.name.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            expected: expected.to_string(),
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: T, expected: &str) -> Result<T> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|_| self.type_error(key, &v, expected)),
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        self.take_raw(key).map(|v| v.trim().to_string()).unwrap_or_else(|| default.to_string())
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool> {
        self.parsed(key, default, "true or false")
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>, expected: &str) -> Result<Vec<T>> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => split_list(&v)
                .into_iter()
                .map(|item| item.parse().map_err(|_| self.type_error(key, &v, expected)))
                .collect(),
        }
    }

    /// One value for all axes or three values.
    fn triple<T: FromStr + Copy>(&mut self, key: &str, default: [T; 3], expected: &str) -> Result<[T; 3]> {
        let Some(raw) = self.take_raw(key) else { return Ok(default) };
        let items: Vec<T> = split_list(&raw)
            .into_iter()
            .map(|item| item.parse().map_err(|_| self.type_error(key, &raw, expected)))
            .collect::<Result<_>>()?;
        match items.as_slice() {
            [v] => Ok([*v; 3]),
            [a, b, c] => Ok([*a, *b, *c]),
            _ => Err(self.type_error(key, &raw, expected)),
        }
    }

    fn pair(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        let Some(raw) = self.take_raw(key) else { return Ok(default) };
        let items: Vec<f64> = split_list(&raw)
            .into_iter()
            .map(|item| item.parse().map_err(|_| self.type_error(key, &raw, "two numbers lo, hi")))
            .collect::<Result<_>>()?;
        match items.as_slice() {
            [lo, hi] => Ok((*lo, *hi)),
            _ => Err(self.type_error(key, &raw, "two numbers lo, hi")),
        }
    }

    fn path(&mut self, key: &str, default: PathBuf) -> PathBuf {
        match self.take_raw(key) {
            None => default,
            Some(v) => resolve(self.base, v.trim()),
        }
    }

    fn optional_path(&mut self, key: &str) -> Option<PathBuf> {
        let v = self.take_raw(key)?;
        let v = v.trim();
        (!v.is_empty()).then(|| resolve(self.base, v))
    }

    fn finish(self) -> Result<()> {
        match self.values.into_keys().next() {
            None => Ok(()),
            Some(key) => Err(Error::UnknownConfigKey { section: self.name.to_string(), key }),
        }
    }
}

fn split_list(raw: &str) -> Vec<&str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = Path::new(value);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn join_list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn parse_flip_axes(s: &mut Section<'_>) -> Result<[bool; 3]> {
    let Some(raw) = s.take_raw("flip_axes") else { return Ok([false; 3]) };
    let mut axes = [false; 3];
    for item in split_list(&raw) {
        match item {
            "x" | "0" => axes[0] = true,
            "y" | "1" => axes[1] = true,
            "z" | "2" => axes[2] = true,
            _ => return Err(s.type_error("flip_axes", &raw, "a list of x, y, z")),
        }
    }
    Ok(axes)
}

fn format_flip_axes(axes: [bool; 3]) -> String {
    ["x", "y", "z"].iter().zip(axes).filter(|(_, on)| *on).map(|(a, _)| *a).collect::<Vec<_>>().join(", ")
}

/// Splits `section.key=value`.
pub fn parse_override(text: &str) -> Result<(String, String, String)> {
    let bad = || Error::Config(format!("override `{text}` is not of the form section.key=value"));
    let (lhs, value) = text.split_once('=').ok_or_else(bad)?;
    let (section, key) = lhs.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || key.is_empty() {
        return Err(bad());
    }
    Ok((section.trim().to_string(), key.trim().to_string(), value.trim().to_string()))
}

type RawConfig = BTreeMap<String, BTreeMap<String, String>>;

fn load_raw(text: &str) -> Result<RawConfig> {
    let opt = ParseOption { enabled_quote: false, enabled_escape: false, ..Default::default() };
    let ini = Ini::load_from_str_opt(text, opt).map_err(|e| Error::Config(e.to_string()))?;
    let mut raw: RawConfig = BTreeMap::new();
    for (section, props) in ini.iter() {
        match section {
            None => {
                if let Some((key, _)) = props.iter().next() {
                    return Err(Error::UnknownConfigKey { section: String::new(), key: key.to_string() });
                }
            }
            Some(name) => {
                let entry = raw.entry(name.trim().to_string()).or_default();
                for (k, v) in props.iter() {
                    entry.insert(k.trim().to_string(), v.to_string());
                }
            }
        }
    }
    Ok(raw)
}

impl PipelineConfig {
    /// Reads `path` and applies `section.key=value` overrides.
    pub fn parse(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(dir)?;
        Self::parse_str(&text, &base, overrides)
    }

    /// Parses configuration text, resolving relative paths against `base`.
    pub fn parse_str(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut raw = load_raw(text)?;
        for o in overrides {
            let (section, key, value) = parse_override(o)?;
            raw.entry(section).or_default().insert(key, value);
        }

        let mut s = Section::new(SYSTEM, base, raw.get(SYSTEM));
        let model_dir = s.path("model_dir", base.join("model"));
        let system = SystemConfig {
            action: s.parsed("action", Action::Inspect, "an action name")?,
            seed: s.parsed("seed", 0, "an unsigned integer")?,
            num_lanes: s.parsed("num_lanes", 1, "an unsigned integer")?,
            queue_capacity: s.parsed("queue_capacity", 8, "an unsigned integer")?,
            deterministic: s.boolean("deterministic", true)?,
            dataset_csv: s.optional_path("dataset_csv"),
            model_dir: model_dir.clone(),
        };
        s.finish()?;

        let mut s = Section::new(SAMPLER, base, raw.get(SAMPLER));
        let sampler = SamplerConfig {
            sampler: s.parsed("sampler", SamplerName::Uniform, "uniform, weighted, grid or resize")?,
            window_size: s.triple("window_size", [64; 3], "one or three positive integers")?,
            border: s.triple("border", [0; 3], "one or three integers")?,
            batch_size: s.parsed("batch_size", 1, "an unsigned integer")?,
            sample_per_volume: s.parsed("sample_per_volume", 1, "an unsigned integer")?,
            weight_source: s.string("weight_source", ""),
        };
        s.finish()?;

        let mut s = Section::new(AUGMENTATION, base, raw.get(AUGMENTATION));
        let defaults = AugmentSpec::default();
        let augmentation = AugmentationConfig {
            enabled: s.boolean("enabled", false)?,
            spec: AugmentSpec {
                flip_axes: parse_flip_axes(&mut s)?,
                rotation_range_deg: s.pair("rotation_range", defaults.rotation_range_deg)?,
                scale_range_pct: s.pair("scaling_percentage", defaults.scale_range_pct)?,
                seed: s.parsed("random_seed", system.seed, "an unsigned integer")?,
                space: s.parsed("space", AugmentSpace::Voxel, "voxel or world")?,
            },
        };
        s.finish()?;

        let mut s = Section::new(NORMALISATION, base, raw.get(NORMALISATION));
        let mut types: Vec<NormType> = s.list("types", Vec::new(), "a list of histogram, meanvar")?;
        types.sort();
        types.dedup();
        let normalisation = NormalisationConfig {
            types,
            histogram_model: s.path("histogram_model", model_dir.join("histogram_models.txt")),
            percentiles: s.list("percentiles", DEFAULT_PERCENTILES.to_vec(), "a list of numbers")?,
            foreground_only: s.boolean("foreground_only", false)?,
        };
        s.finish()?;

        let mut s = Section::new(PARTITION, base, raw.get(PARTITION));
        let partition = PartitionConfig {
            ratios: s.triple("ratios", [0.8, 0.1, 0.1], "three numbers")?,
            seed: s.parsed("seed", system.seed, "an unsigned integer")?,
            file: s.path("file", model_dir.join("partition.csv")),
        };
        s.finish()?;

        let mut s = Section::new(EVALUATION, base, raw.get(EVALUATION));
        let evaluation = EvaluationConfig {
            seg_source: s.string("seg_source", "inferred"),
            ref_source: s.string("ref_source", "label"),
            image_source: s.string("image_source", ""),
            labels: s.list("labels", Vec::new(), "a list of numbers")?,
            background: s.parsed("background", 0.0, "a number")?,
            metrics: s.list("metrics", default_segmentation_metrics(), "a list of metric names")?,
            border_connectivity: s.parsed("border_connectivity", Connectivity::Six, "6 or 26")?,
            region_connectivity: s.parsed("region_connectivity", Connectivity::TwentySix, "6 or 26")?,
            overlap_threshold: s.parsed("overlap_threshold", 0.0, "a number")?,
            distance_units: s.parsed("distance_units", DistanceUnits::Mm, "mm or voxels")?,
            output: s.path("output", model_dir.join("evaluation.csv")),
        };
        s.finish()?;

        let mut sources = Vec::new();
        for (name, values) in &raw {
            if FIXED_SECTIONS.contains(&name.as_str()) {
                continue;
            }
            let mut s = Section::new(name, base, Some(values));
            let path = s.optional_path("path_to_search").unwrap_or_default();
            let mut spec = SourceSpec::new(name.clone(), path);
            spec.filename_contains = s.list("filename_contains", Vec::new(), "a list of strings")?;
            spec.filename_not_contains = s.list("filename_not_contains", Vec::new(), "a list of strings")?;
            spec.interp = s.parsed("interpolation", Interpolation::Trilinear, "nearest or trilinear")?;
            s.finish()?;
            sources.push(spec);
        }

        let mut s = Section::new(INFERENCE, base, raw.get(INFERENCE));
        let default_source = sources.first().map(|src: &SourceSpec| src.name.clone()).unwrap_or_default();
        let inference = InferenceConfig {
            source: s.string("source", &default_source),
            output_dir: s.path("output_dir", model_dir.join("output")),
            output_dtype: s.parsed("output_dtype", OutputDType::Source, "source, u8, i16, i32, f32 or f64")?,
        };
        s.finish()?;

        let cfg = PipelineConfig { system, sampler, augmentation, normalisation, partition, evaluation, inference, sources };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks values that parse but cannot work together.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let sys = &self.system;
        if sys.num_lanes == 0 {
            return err("system.num_lanes must be at least 1".into());
        }
        let smp = &self.sampler;
        if smp.batch_size == 0 || sys.queue_capacity < smp.batch_size {
            return err(format!(
                "need system.queue_capacity ({}) >= sampler.batch_size ({}) >= 1",
                sys.queue_capacity, smp.batch_size
            ));
        }
        if smp.window_size.contains(&0) {
            return err("sampler.window_size must be positive".into());
        }
        if smp.sample_per_volume == 0 {
            return err("sampler.sample_per_volume must be at least 1".into());
        }
        if smp.sampler == SamplerName::Grid {
            GridSpec::new(smp.window_size, smp.border).map_err(|e| Error::Config(e.to_string()))?;
        }
        if smp.sampler == SamplerName::Weighted && !self.has_source(&smp.weight_source) {
            return err(format!("sampler.weight_source `{}` is not a defined source", smp.weight_source));
        }
        self.augmentation.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        let r = self.partition.ratios;
        if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err(format!("partition.ratios must be non-negative and sum to 1, got {r:?}"));
        }
        crate::normalize::validate_percentiles(&self.normalisation.percentiles).map_err(|e| Error::Config(e.to_string()))?;
        self.eval_options().validate()?;
        if !(0.0..=1.0).contains(&self.evaluation.overlap_threshold) {
            return err("evaluation.overlap_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn has_source(&self, name: &str) -> bool {
        self.sources.iter().any(|s| s.name == name)
    }

    pub fn source(&self, name: &str) -> Result<&SourceSpec> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("source `{name}` is not defined")))
    }

    pub fn eval_options(&self) -> EvalOptions {
        let e = &self.evaluation;
        EvalOptions {
            metrics: e.metrics.clone(),
            border_connectivity: e.border_connectivity,
            region_connectivity: e.region_connectivity,
            overlap_threshold: e.overlap_threshold,
            units: e.distance_units,
        }
    }

    pub fn augment_spec(&self) -> Option<AugmentSpec> {
        self.augmentation.enabled.then(|| self.augmentation.spec.clone())
    }

    /// Complete INI text with every key.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let p = |p: &Path| p.display().to_string();
        let mut section = |name: &str, entries: Vec<(&str, String)>| {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        };
        let sys = &self.system;
        section(SYSTEM, vec![
            ("action", sys.action.to_string()),
            ("model_dir", p(&sys.model_dir)),
            ("seed", sys.seed.to_string()),
            ("num_lanes", sys.num_lanes.to_string()),
            ("queue_capacity", sys.queue_capacity.to_string()),
            ("deterministic", sys.deterministic.to_string()),
            ("dataset_csv", sys.dataset_csv.as_deref().map(p).unwrap_or_default()),
        ]);
        let smp = &self.sampler;
        section(SAMPLER, vec![
            ("sampler", smp.sampler.to_string()),
            ("window_size", join_list(&smp.window_size)),
            ("border", join_list(&smp.border)),
            ("batch_size", smp.batch_size.to_string()),
            ("sample_per_volume", smp.sample_per_volume.to_string()),
            ("weight_source", smp.weight_source.clone()),
        ]);
        let aug = &self.augmentation;
        section(AUGMENTATION, vec![
            ("enabled", aug.enabled.to_string()),
            ("flip_axes", format_flip_axes(aug.spec.flip_axes)),
            ("rotation_range", join_list(&[aug.spec.rotation_range_deg.0, aug.spec.rotation_range_deg.1])),
            ("scaling_percentage", join_list(&[aug.spec.scale_range_pct.0, aug.spec.scale_range_pct.1])),
            ("random_seed", aug.spec.seed.to_string()),
            ("space", aug.spec.space.to_string()),
        ]);
        let norm = &self.normalisation;
        section(NORMALISATION, vec![
            ("types", join_list(&norm.types)),
            ("histogram_model", p(&norm.histogram_model)),
            ("percentiles", join_list(&norm.percentiles)),
            ("foreground_only", norm.foreground_only.to_string()),
        ]);
        let part = &self.partition;
        section(PARTITION, vec![
            ("ratios", join_list(&part.ratios)),
            ("seed", part.seed.to_string()),
            ("file", p(&part.file)),
        ]);
        let ev = &self.evaluation;
        section(EVALUATION, vec![
            ("seg_source", ev.seg_source.clone()),
            ("ref_source", ev.ref_source.clone()),
            ("image_source", ev.image_source.clone()),
            ("labels", join_list(&ev.labels)),
            ("background", ev.background.to_string()),
            ("metrics", ev.metrics.join(", ")),
            ("border_connectivity", ev.border_connectivity.to_string()),
            ("region_connectivity", ev.region_connectivity.to_string()),
            ("overlap_threshold", ev.overlap_threshold.to_string()),
            ("distance_units", ev.distance_units.to_string()),
            ("output", p(&ev.output)),
        ]);
        let inf = &self.inference;
        section(INFERENCE, vec![
            ("source", inf.source.clone()),
            ("output_dir", p(&inf.output_dir)),
            ("output_dtype", inf.output_dtype.to_string()),
        ]);
        for src in &self.sources {
            section(&src.name, vec![
                (SOURCE_KEYS[0], p(&src.path_to_search)),
                (SOURCE_KEYS[1], src.filename_contains.join(", ")),
                (SOURCE_KEYS[2], src.filename_not_contains.join(", ")),
                (SOURCE_KEYS[3], src.interp.to_string()),
            ]);
        }
        out
    }

    /// Writes `settings_<action>.ini` into the model directory.
    pub fn snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.system.model_dir)?;
        let path = self.system.model_dir.join(format!("settings_{}.ini", self.system.action));
        std::fs::write(&path, self.to_ini())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<PipelineConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        PipelineConfig::parse_str(text, Path::new("/data/exp"), &o)
    }

    #[test]
    fn defaults_are_materialised() {
        let c = parse("[sampler]\n", &[]).unwrap();
        assert_eq!(c.sampler.sampler, SamplerName::Uniform);
        assert_eq!(c.sampler.window_size, [64; 3]);
        assert_eq!(c.sampler.batch_size, 1);
        assert_eq!(c.partition.ratios, [0.8, 0.1, 0.1]);
        assert_eq!(c.system.model_dir, Path::new("/data/exp/model"));
        assert_eq!(c.partition.file, Path::new("/data/exp/model/partition.csv"));
        let text = c.to_ini();
        for key in ["window_size", "border", "queue_capacity", "rotation_range", "histogram_model", "metrics", "output_dtype"] {
            assert!(text.contains(&format!("\n{key} = ")), "{key}");
        }
    }

    #[test]
    fn overrides_win() {
        let c = parse("[system]\nseed = 1\n", &["system.seed=2"]).unwrap();
        assert_eq!(c.system.seed, 2);
        assert_eq!(c.partition.seed, 2);
        assert_eq!(c.augmentation.spec.seed, 2);
        let c = parse("[system]\nseed = 1\n[partition]\nseed = 5\n", &[]).unwrap();
        assert_eq!((c.system.seed, c.partition.seed), (1, 5));
        assert!(matches!(parse("", &["nodot=3"]), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_and_bad_types() {
        match parse("[sampler]\nwindw_size = 3\n", &[]) {
            Err(Error::UnknownConfigKey { section, key }) => assert_eq!((section.as_str(), key.as_str()), ("sampler", "windw_size")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("[image]\npath = x\n", &[]), Err(Error::UnknownConfigKey { .. })));
        assert!(matches!(parse("stray = 1\n", &[]), Err(Error::UnknownConfigKey { .. })));
        assert!(matches!(parse("[system]\nseed = -1\n", &[]), Err(Error::ConfigTypeError { .. })));
        assert!(matches!(parse("[sampler]\nwindow_size = 3, 4\n", &[]), Err(Error::ConfigTypeError { .. })));
        assert!(matches!(parse("[system]\ndeterministic = yes\n", &[]), Err(Error::ConfigTypeError { .. })));
        assert!(matches!(parse("[partition]\nratios = 0.5, 0.1, 0.1\n", &[]), Err(Error::Config(_))));
        assert!(matches!(parse("[sampler]\nsampler = weighted\n", &[]), Err(Error::Config(_))));
    }

    #[test]
    fn sources_and_paths() {
        let text = "# experiment\n[label]\npath_to_search = labels\nfilename_contains = _seg, lbl\ninterpolation = nearest\n\n\
                    [image]\npath_to_search = /abs/images\n";
        let c = parse(text, &[]).unwrap();
        assert_eq!(c.sources.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), vec!["image", "label"]);
        assert_eq!(c.sources[1].path_to_search, Path::new("/data/exp/labels"));
        assert_eq!(c.sources[1].filename_contains, vec!["_seg", "lbl"]);
        assert_eq!(c.sources[1].interp, Interpolation::Nearest);
        assert_eq!(c.sources[0].path_to_search, Path::new("/abs/images"));
        assert_eq!(c.inference.source, "image");
    }

    #[test]
    fn snapshot_is_a_fixed_point() {
        let text = "[system]\naction = sample\nseed = 9\nnum_lanes = 3\n[sampler]\nsampler = grid\nwindow_size = 8, 9, 10\nborder = 1\n\
                    [augmentation]\nenabled = true\nflip_axes = x, z\nrotation_range = -5.5, 7\n\
                    [normalisation]\ntypes = meanvar, histogram\n[evaluation]\nlabels = 1, 2.5\nmetrics = dice, hausdorff95\n\
                    [image]\npath_to_search = img\n";
        let c = parse(text, &[]).unwrap();
        let again = parse(&c.to_ini(), &[]).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_ini(), c.to_ini());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.ini");
        std::fs::write(&file, format!("[system]\nmodel_dir = {}\n", dir.path().join("m").display())).unwrap();
        let c = PipelineConfig::parse(&file, &[]).unwrap();
        let snap = c.snapshot().unwrap();
        assert_eq!(snap.file_name().unwrap(), "settings_inspect.ini");
        assert_eq!(PipelineConfig::parse(&snap, &[]).unwrap(), c);
    }
}
