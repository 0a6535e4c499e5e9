//! Runs one configured action end to end.
//!
//! Every run first writes the resolved configuration to
//! `settings_<action>.ini` in the model directory. Files written by a
//! failing action are removed before the error is returned.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, SecondsFormat, Utc};
use rayon::prelude::*;

use crate::aggregate::{write_output, OutputCanvas};
use crate::config::{Action, NormType, OutputDType, PipelineConfig, SamplerName};
use crate::dataset::{discover_subjects, load_manifest, partition, PartitionTable, Split, SubjectRecord};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_subject, present_labels, MetricReport};
use crate::mask::BinaryMask;
use crate::nifti::{read_nifti, read_volume, write_nifti};
use crate::normalize::{
    apply_histogram_model, format_models, meanvar_normalize, read_models, train_histogram_model, HistogramModel,
    TrainingVolume,
};
use crate::sample::{grid_positions, run_sampler, GridSpec, RunOptions, SampleSource, SamplerKind, SubjectVolumes, VolumeSampler};
use crate::volume::{Interpolation, Volume};

pub const LOG_ENV: &str = "VOXELPIPE_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Level::Debug => "DEBUG",
            Level::Info => "INFO",
            Level::Warn => "WARN",
            Level::Error => "ERROR",
        })
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "debug" => Ok(Level::Debug),
            "info" => Ok(Level::Info),
            "warn" | "warning" => Ok(Level::Warn),
            "error" => Ok(Level::Error),
            other => Err(format!("unknown log level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub timestamp: DateTime<Utc>,
    pub level: Level,
    pub message: String,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:<5} {}", self.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true), self.level, self.message)
    }
}

/// Every entry is kept; entries at or above `threshold` are also echoed to
/// stderr.
#[derive(Debug, Clone)]
pub struct RunLog {
    entries: Vec<LogEntry>,
    threshold: Level,
    echo: bool,
}

impl RunLog {
    pub fn new(threshold: Level, echo: bool) -> Self {
        RunLog { entries: Vec::new(), threshold, echo }
    }

    /// Echoing log whose threshold comes from `VOXELPIPE_LOG` (default info).
    pub fn from_env() -> Self {
        let threshold = std::env::var(LOG_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(Level::Info);
        RunLog::new(threshold, true)
    }

    /// Records without echoing.
    pub fn silent() -> Self {
        RunLog::new(Level::Debug, false)
    }

    pub fn log(&mut self, level: Level, message: impl Into<String>) {
        let entry = LogEntry { timestamp: Utc::now(), level, message: message.into() };
        if self.echo && level >= self.threshold {
            eprintln!("{entry}");
        }
        self.entries.push(entry);
    }

    pub fn debug(&mut self, message: impl Into<String>) {
        self.log(Level::Debug, message);
    }

    pub fn info(&mut self, message: impl Into<String>) {
        self.log(Level::Info, message);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.log(Level::Warn, message);
    }

    pub fn error(&mut self, message: impl Into<String>) {
        self.log(Level::Error, message);
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn at_level(&self, level: Level) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(move |e| e.level == level)
    }
}

/// Files written by the current action.
#[derive(Debug, Default)]
struct Artifacts {
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn prepare(path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(())
    }

    fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        Self::prepare(path)?;
        self.files.push(path.to_path_buf());
        std::fs::write(path, contents)?;
        Ok(())
    }

    fn write_volume(&mut self, path: &Path, v: &Volume) -> Result<()> {
        Self::prepare(path)?;
        self.files.push(path.to_path_buf());
        write_nifti(v, None, path)
    }

    fn remove_all(&self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub snapshot: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

/// Snapshots the configuration and runs its action. Tables meant for the
/// user go to `out`.
pub fn run(cfg: &PipelineConfig, out: &mut dyn Write, log: &mut RunLog) -> Result<RunOutcome> {
    let snapshot = cfg.snapshot()?;
    log.info(format!("action {}; configuration saved to {}", cfg.system.action, snapshot.display()));
    let mut artifacts = Artifacts::default();
    let result = match cfg.system.action {
        Action::Partition => run_partition(cfg, &mut artifacts, out, log),
        Action::NormaliseTrain => run_normalise_train(cfg, &mut artifacts, log),
        Action::Sample => run_sample(cfg, &mut artifacts, log),
        Action::AggregateIdentity => run_aggregate_identity(cfg, &mut artifacts, log),
        Action::Evaluate => run_evaluate(cfg, &mut artifacts, out, log),
        Action::Inspect => run_inspect(cfg, out, log),
    };
    match result {
        Ok(()) => {
            for f in &artifacts.files {
                log.debug(format!("wrote {}", f.display()));
            }
            log.info(format!("{} finished, {} files written", cfg.system.action, artifacts.files.len()));
            Ok(RunOutcome { snapshot, artifacts: artifacts.files })
        }
        Err(e) => {
            artifacts.remove_all();
            log.error(format!("{} failed: {e}", cfg.system.action));
            Err(e)
        }
    }
}

fn interps(cfg: &PipelineConfig) -> BTreeMap<String, Interpolation> {
    cfg.sources.iter().map(|s| (s.name.clone(), s.interp)).collect()
}

fn subjects(cfg: &PipelineConfig) -> Result<Vec<SubjectRecord>> {
    match &cfg.system.dataset_csv {
        Some(csv) => load_manifest(csv),
        None => {
            if cfg.sources.is_empty() {
                return Err(Error::Config("no input sources are defined".into()));
            }
            if let Some(s) = cfg.sources.iter().find(|s| s.path_to_search.as_os_str().is_empty()) {
                return Err(Error::Config(format!("source `{}` has no path_to_search", s.name)));
            }
            discover_subjects(&cfg.sources)
        }
    }
}

/// Subjects of `split` according to the partition file, or every subject
/// when no partition file exists.
fn split_subjects(cfg: &PipelineConfig, split: Split, log: &mut RunLog) -> Result<Vec<SubjectRecord>> {
    let all = subjects(cfg)?;
    if !cfg.partition.file.exists() {
        log.warn(format!("no partition file at {}; using all {} subjects", cfg.partition.file.display(), all.len()));
        return Ok(all);
    }
    let table = PartitionTable::read(&cfg.partition.file)?;
    let mut unlisted = 0;
    let chosen: Vec<SubjectRecord> = all
        .into_iter()
        .filter(|r| match table.split_of(&r.subject_id) {
            Some(s) => s == split,
            None => {
                unlisted += 1;
                false
            }
        })
        .collect();
    if unlisted > 0 {
        log.warn(format!("{unlisted} subjects are missing from the partition file and were skipped"));
    }
    log.info(format!("{} {split} subjects", chosen.len()));
    if chosen.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(chosen)
}

fn restrict(record: &SubjectRecord, names: &[&str]) -> Result<SubjectRecord> {
    let mut paths = BTreeMap::new();
    for &n in names {
        let p = record.path(n).ok_or_else(|| Error::MissingModality {
            subject: record.subject_id.clone(),
            source_name: n.to_string(),
        })?;
        paths.insert(n.to_string(), p.to_path_buf());
    }
    Ok(SubjectRecord { subject_id: record.subject_id.clone(), paths })
}

fn run_partition(cfg: &PipelineConfig, artifacts: &mut Artifacts, out: &mut dyn Write, log: &mut RunLog) -> Result<()> {
    let ids: Vec<String> = subjects(cfg)?.into_iter().map(|r| r.subject_id).collect();
    let table = partition(&ids, cfg.partition.ratios, cfg.partition.seed)?;
    artifacts.write(&cfg.partition.file, table.to_csv())?;
    let [tr, va, inf] = table.counts();
    log.info(format!("partitioned {} subjects: {tr} training, {va} validation, {inf} inference", ids.len()));
    writeln!(out, "training\t{tr}\nvalidation\t{va}\ninference\t{inf}")?;
    Ok(())
}

/// Sources normalised by intensity: those resampled with trilinear
/// interpolation.
fn intensity_sources(cfg: &PipelineConfig, records: &[SubjectRecord]) -> Vec<String> {
    let interps = interps(cfg);
    let mut names: Vec<String> = records
        .first()
        .map(|r| r.paths.keys().cloned().collect())
        .unwrap_or_default();
    names.retain(|n| interps.get(n).copied().unwrap_or_default() == Interpolation::Trilinear);
    names
}

fn norm_mask(cfg: &PipelineConfig, v: &Volume) -> Option<BinaryMask> {
    cfg.normalisation.foreground_only.then(|| BinaryMask::foreground(v))
}

fn run_normalise_train(cfg: &PipelineConfig, artifacts: &mut Artifacts, log: &mut RunLog) -> Result<()> {
    let records = split_subjects(cfg, Split::Training, log)?;
    let sources = intensity_sources(cfg, &records);
    if sources.is_empty() {
        return Err(Error::Config("no intensity sources (interpolation = trilinear) to normalise".into()));
    }
    let mut models = Vec::new();
    for name in &sources {
        let loaded: Vec<(String, Volume, Option<BinaryMask>)> = records
            .par_iter()
            .map(|r| {
                let path = r.path(name).ok_or_else(|| Error::MissingModality {
                    subject: r.subject_id.clone(),
                    source_name: name.clone(),
                })?;
                let v = read_volume(path)?;
                let m = norm_mask(cfg, &v);
                Ok((r.subject_id.clone(), v, m))
            })
            .collect::<Result<_>>()?;
        let training: Vec<TrainingVolume<'_>> = loaded
            .iter()
            .map(|(id, v, m)| TrainingVolume { subject_id: id, volume: v, mask: m.as_ref() })
            .collect();
        let model = train_histogram_model(name, &training, &cfg.normalisation.percentiles)?;
        log.info(format!("trained histogram model for `{name}` on {} volumes", training.len()));
        models.push(model);
    }
    artifacts.write(&cfg.normalisation.histogram_model, format_models(&models))?;
    Ok(())
}

/// Applies the configured normalisations to every intensity source.
struct Normaliser {
    types: Vec<NormType>,
    models: Vec<HistogramModel>,
    foreground_only: bool,
    intensity: Vec<String>,
    warnings: Mutex<Vec<String>>,
}

impl Normaliser {
    fn new(cfg: &PipelineConfig, intensity: Vec<String>) -> Result<Self> {
        let types = cfg.normalisation.types.clone();
        let models = if types.contains(&NormType::Histogram) {
            let models = read_models(&cfg.normalisation.histogram_model)?;
            for name in &intensity {
                if !models.iter().any(|m| &m.source_name == name) {
                    return Err(Error::ModelFormat(format!("no histogram model for source `{name}`")));
                }
            }
            models
        } else {
            Vec::new()
        };
        Ok(Normaliser { types, models, foreground_only: cfg.normalisation.foreground_only, intensity, warnings: Mutex::new(Vec::new()) })
    }

    fn apply(&self, subject: &mut SubjectVolumes) -> Result<()> {
        for (name, src) in subject.sources.iter_mut() {
            if !self.intensity.contains(name) {
                continue;
            }
            let mask = self.foreground_only.then(|| BinaryMask::foreground(&src.volume));
            let mut v = src.volume.clone();
            if self.types.contains(&NormType::Histogram) {
                let model = self.models.iter().find(|m| &m.source_name == name).expect("checked in new");
                v = apply_histogram_model(&v, model, mask.as_ref())?;
            }
            if self.types.contains(&NormType::MeanVar) {
                let n = meanvar_normalize(&v, mask.as_ref())?;
                if let Some(w) = n.warning {
                    self.warnings.lock().unwrap_or_else(|e| e.into_inner()).push(format!("{} / {name}: {w}", subject.subject_id));
                }
                v = n.volume;
            }
            src.volume = v;
        }
        Ok(())
    }

    fn drain_warnings(&self, log: &mut RunLog) {
        let mut w = self.warnings.lock().unwrap_or_else(|e| e.into_inner());
        w.sort();
        for msg in w.drain(..) {
            log.warn(msg);
        }
    }
}

fn run_options(cfg: &PipelineConfig) -> RunOptions {
    RunOptions {
        lanes: cfg.system.num_lanes,
        queue_capacity: cfg.system.queue_capacity,
        batch_size: cfg.sampler.batch_size,
        deterministic: cfg.system.deterministic,
    }
}

fn sampler_kind(cfg: &PipelineConfig) -> Result<SamplerKind> {
    let s = &cfg.sampler;
    Ok(match s.sampler {
        SamplerName::Uniform => SamplerKind::Uniform { window: s.window_size, per_volume: s.sample_per_volume },
        SamplerName::Weighted => SamplerKind::Weighted {
            window: s.window_size,
            per_volume: s.sample_per_volume,
            weight_source: s.weight_source.clone(),
        },
        SamplerName::Grid => SamplerKind::Grid(GridSpec::new(s.window_size, s.border).map_err(|e| Error::Config(e.to_string()))?),
        SamplerName::Resize => SamplerKind::Resize { target: s.window_size },
    })
}

fn samples_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.system.model_dir.join("samples")
}

/// Removes sample files left by an earlier run.
fn clear_samples(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if (name.starts_with("sample_") && name.ends_with(".nii.gz")) || name == "index.csv" {
            std::fs::remove_file(&path)?;
        }
    }
    Ok(())
}

fn run_sample(cfg: &PipelineConfig, artifacts: &mut Artifacts, log: &mut RunLog) -> Result<()> {
    let records = split_subjects(cfg, Split::Training, log)?;
    let normaliser = Arc::new(Normaliser::new(cfg, intensity_sources(cfg, &records))?);
    let interps = interps(cfg);
    let count = records.len();
    let norm = Arc::clone(&normaliser);
    let loader = move |i: usize| {
        let mut s = SubjectVolumes::load(&records[i], &interps)?;
        norm.apply(&mut s)?;
        Ok(s)
    };
    let sampler = VolumeSampler::from_loader(count, loader, sampler_kind(cfg)?, cfg.system.seed).with_augmentation(cfg.augment_spec());
    let dir = samples_dir(cfg);
    clear_samples(&dir)?;
    let mut index = String::from("sample,subject_id,source,start_x,start_y,start_z,window_x,window_y,window_z,pad_x,pad_y,pad_z,flips,euler_deg,scale\n");
    let mut seq = 0usize;
    let mut stream = run_sampler(Arc::new(sampler) as Arc<dyn SampleSource>, run_options(cfg))?;
    for batch in stream.by_ref() {
        for s in batch? {
            for (source, patch) in &s.patches {
                let name = format!("sample_{seq:05}_{}_{source}.nii.gz", s.subject_id);
                artifacts.write_volume(&dir.join(&name), patch)?;
                let (flips, euler, scale) = match &s.transform_applied {
                    Some(t) => (
                        t.flips.map(|f| if f { "1" } else { "0" }).join(""),
                        t.euler_deg.map(|a| a.to_string()).join(" "),
                        t.scale.to_string(),
                    ),
                    None => (String::new(), String::new(), String::new()),
                };
                let [sx, sy, sz] = s.spatial_start;
                let [wx, wy, wz] = s.window_size;
                let [px, py, pz] = s.pad_applied;
                index.push_str(&format!(
                    "{seq},{},{source},{sx},{sy},{sz},{wx},{wy},{wz},{px},{py},{pz},{flips},{euler},{scale}\n",
                    s.subject_id
                ));
            }
            seq += 1;
        }
    }
    log.debug(format!("largest observed queue length {}", stream.max_queue_len()));
    normaliser.drain_warnings(log);
    artifacts.write(&dir.join("index.csv"), index)?;
    log.info(format!("wrote {seq} samples to {}", dir.display()));
    Ok(())
}

struct Pending {
    canvas: OutputCanvas,
    remaining: usize,
    original: Volume,
    header: crate::nifti::NiftiHeader,
}

fn run_aggregate_identity(cfg: &PipelineConfig, artifacts: &mut Artifacts, log: &mut RunLog) -> Result<()> {
    let source = cfg.source(&cfg.inference.source)?.name.clone();
    let records: Vec<SubjectRecord> = split_subjects(cfg, Split::Inference, log)?
        .iter()
        .map(|r| restrict(r, &[source.as_str()]))
        .collect::<Result<_>>()?;
    let grid = GridSpec::new(cfg.sampler.window_size, cfg.sampler.border).map_err(|e| Error::Config(e.to_string()))?;
    let paths: HashMap<String, PathBuf> = records.iter().map(|r| (r.subject_id.clone(), r.paths[&source].clone())).collect();
    let sampler = VolumeSampler::from_records(records, interps(cfg), SamplerKind::Grid(grid), cfg.system.seed);
    let mut pending: HashMap<String, Pending> = HashMap::new();
    let mut finished = Vec::new();
    let mut stream = run_sampler(Arc::new(sampler) as Arc<dyn SampleSource>, run_options(cfg))?;
    for batch in stream.by_ref() {
        for w in batch? {
            if !pending.contains_key(&w.subject_id) {
                let (original, header) = read_nifti(&paths[&w.subject_id])?;
                let dtype = match cfg.inference.output_dtype {
                    OutputDType::Source => original.dtype(),
                    OutputDType::Fixed(d) => d,
                };
                let canvas = OutputCanvas::new(&w.subject_id, &original, original.channels(), dtype, grid)?;
                let remaining = grid_positions(original.spatial_shape(), &grid).len();
                pending.insert(w.subject_id.clone(), Pending { canvas, remaining, original, header });
            }
            let p = pending.get_mut(&w.subject_id).expect("inserted above");
            p.canvas.grid_aggregate(&w.patches[&source], w.spatial_start)?;
            p.remaining -= 1;
            if p.remaining == 0 {
                let p = pending.remove(&w.subject_id).expect("present");
                let out = p.canvas.finalize()?;
                let expected = p.original.cast(out.dtype());
                let differing = out.data().iter().zip(expected.data()).filter(|(a, b)| a != b).count();
                if differing > 0 {
                    return Err(Error::Sampler(format!(
                        "subject `{}`: aggregated output differs from its input at {differing} voxels",
                        w.subject_id
                    )));
                }
                std::fs::create_dir_all(&cfg.inference.output_dir)?;
                let path = crate::aggregate::output_path(&cfg.inference.output_dir, &w.subject_id);
                artifacts.files.push(path.clone());
                write_output(&out, Some(&p.header), &cfg.inference.output_dir, &w.subject_id)?;
                finished.push(w.subject_id.clone());
            }
        }
    }
    if let Some(id) = pending.keys().next() {
        return Err(Error::IncompleteCoverage(pending[id].canvas.missing()));
    }
    log.info(format!("aggregated {} subjects into {}", finished.len(), cfg.inference.output_dir.display()));
    Ok(())
}

fn run_evaluate(cfg: &PipelineConfig, artifacts: &mut Artifacts, out: &mut dyn Write, log: &mut RunLog) -> Result<()> {
    let ev = &cfg.evaluation;
    let mut names = vec![ev.seg_source.as_str(), ev.ref_source.as_str()];
    if !ev.image_source.is_empty() {
        names.push(ev.image_source.as_str());
    }
    let records: Vec<SubjectRecord> = subjects(cfg)?.iter().map(|r| restrict(r, &names)).collect::<Result<_>>()?;
    let opts = cfg.eval_options();
    let per_subject: Vec<Vec<crate::evaluate::MetricRow>> = records
        .par_iter()
        .map(|r| {
            let seg = read_volume(r.path(&ev.seg_source).expect("restricted"))?;
            let reference = read_volume(r.path(&ev.ref_source).expect("restricted"))?;
            let image = match ev.image_source.as_str() {
                "" => None,
                name => Some(read_volume(r.path(name).expect("restricted"))?),
            };
            let labels = if ev.labels.is_empty() { present_labels(&seg, &reference, ev.background) } else { ev.labels.clone() };
            evaluate_subject(&r.subject_id, &seg, &reference, &labels, image.as_ref(), &opts)
        })
        .collect::<Result<_>>()?;
    let report = MetricReport::new(per_subject.into_iter().flatten().collect());
    let nan = report.rows.iter().filter(|r| r.value.reason.is_some()).count();
    if nan > 0 {
        log.warn(format!("{nan} metric values are undefined (NaN); see the reason column"));
    }
    artifacts.write(&ev.output, report.to_csv()?)?;
    log.info(format!("evaluated {} subjects; report at {}", records.len(), ev.output.display()));
    write!(out, "{}", report.median_table())?;
    Ok(())
}

fn run_inspect(cfg: &PipelineConfig, out: &mut dyn Write, log: &mut RunLog) -> Result<()> {
    let records = subjects(cfg)?;
    let rows: Vec<Vec<String>> = records
        .par_iter()
        .map(|r| {
            r.paths
                .iter()
                .map(|(source, path)| {
                    let v = read_volume(path)?;
                    let fmt3 = |a: [String; 3]| a.join("x");
                    let sh = v.shape();
                    let shape = if sh[3] > 1 { format!("{}x{}", fmt3(v.spatial_shape().map(|d| d.to_string())), sh[3]) } else { fmt3(v.spatial_shape().map(|d| d.to_string())) };
                    let mean = v.data().iter().sum::<f64>() / v.data().len() as f64;
                    Ok(format!(
                        "{}\t{source}\t{shape}\t{}\t{}\t{}\t{}\t{mean:.4}",
                        r.subject_id,
                        fmt3(v.spacing().map(|s| format!("{s:.4}"))),
                        v.dtype(),
                        v.min(),
                        v.max()
                    ))
                })
                .collect::<Result<Vec<String>>>()
        })
        .collect::<Result<_>>()?;
    writeln!(out, "subject_id\tsource\tshape\tspacing_mm\tdtype\tmin\tmax\tmean")?;
    for line in rows.into_iter().flatten() {
        writeln!(out, "{line}")?;
    }
    log.info(format!("inspected {} subjects", records.len()));
    Ok(())
}
