//! Window samplers and the multi-lane sample queue.
//!
//! Samplers turn a subject's co-registered volumes into [`WindowSample`]s:
//! uniform random windows, windows centred on voxels drawn from a weight
//! map, a systematic grid that covers the whole volume, or the whole volume
//! resized to a fixed shape. [`run_sampler`] runs a [`SampleSource`] on
//! worker lanes feeding a bounded queue and hands out batches.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::augment::{apply_transform, sample_transform, AugmentSpec, SampledTransform};
use crate::dataset::SubjectRecord;
use crate::error::{Error, Result};
use crate::nifti::read_volume;
use crate::rng::{substream, PipelineRng};
use crate::volume::{crop, pad_asymmetric, resample, scaling, Interpolation, PadMode, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct SourceVolume {
    pub volume: Volume,
    pub interp: Interpolation,
}

/// All sources of one subject, sharing a spatial shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectVolumes {
    pub subject_id: String,
    pub sources: BTreeMap<String, SourceVolume>,
}

impl SubjectVolumes {
    pub fn new(subject_id: impl Into<String>) -> Self {
        SubjectVolumes { subject_id: subject_id.into(), sources: BTreeMap::new() }
    }

    pub fn with(mut self, name: impl Into<String>, volume: Volume, interp: Interpolation) -> Self {
        self.sources.insert(name.into(), SourceVolume { volume, interp });
        self
    }

    /// Reads every source of `record` from disk.
    pub fn load(record: &SubjectRecord, interps: &BTreeMap<String, Interpolation>) -> Result<Self> {
        let mut out = SubjectVolumes::new(&record.subject_id);
        for (name, path) in &record.paths {
            let interp = interps.get(name).copied().unwrap_or_default();
            out = out.with(name.clone(), read_volume(path)?, interp);
        }
        Ok(out)
    }

    /// Common spatial shape of the sources.
    pub fn spatial_shape(&self) -> Result<[usize; 3]> {
        let mut shapes = self.sources.values().map(|s| s.volume.spatial_shape());
        let first = shapes.next().ok_or_else(|| {
            Error::PreconditionViolation(format!("subject `{}` has no sources", self.subject_id))
        })?;
        for s in shapes {
            if s != first {
                return Err(Error::ShapeMismatch { left: first.to_vec(), right: s.to_vec() });
            }
        }
        Ok(first)
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.sources.values().next().map(|s| s.volume.spacing()).unwrap_or([1.0; 3])
    }

    fn augmented(&self, augment: Option<&mut Augmenter>) -> Result<(BTreeMap<String, Volume>, Option<SampledTransform>)> {
        let shape = self.spatial_shape()?;
        match augment {
            None => Ok((self.sources.iter().map(|(k, s)| (k.clone(), s.volume.clone())).collect(), None)),
            Some(aug) => {
                let t = sample_transform(&aug.spec, &mut aug.rng, shape, self.spacing())?;
                let mut out = BTreeMap::new();
                for (name, s) in &self.sources {
                    out.insert(name.clone(), apply_transform(&s.volume, &t, s.interp)?);
                }
                Ok((out, Some(t)))
            }
        }
    }
}

/// Augmentation settings with their own random stream, so transform draws
/// do not shift window positions.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub spec: AugmentSpec,
    rng: PipelineRng,
}

impl Augmenter {
    /// Stream `task` of the generator seeded by `spec.seed`.
    pub fn new(spec: AugmentSpec, task: u64) -> Self {
        let rng = substream(spec.seed, task);
        Augmenter { spec, rng }
    }
}

/// One window cut from every source of a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub subject_id: String,
    pub patches: BTreeMap<String, Volume>,
    /// Window origin in the padded volume.
    pub spatial_start: [usize; 3],
    pub window_size: [usize; 3],
    /// Padding added before the original volume on each axis, so the window
    /// origin in original coordinates is `spatial_start - pad_applied`.
    pub pad_applied: [usize; 3],
    pub transform_applied: Option<SampledTransform>,
}

fn check_window(window: [usize; 3]) -> Result<()> {
    if window.contains(&0) {
        return Err(Error::PreconditionViolation(format!("window {window:?} must be positive")));
    }
    Ok(())
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::PreconditionViolation("sample count must be at least 1".into()));
    }
    Ok(())
}

/// Pads sources too small for `window` by edge replication, splitting the
/// deficit with the smaller half before.
fn pad_to_window(patches: BTreeMap<String, Volume>, shape: [usize; 3], window: [usize; 3]) -> ([usize; 3], BTreeMap<String, Volume>) {
    let deficit: [usize; 3] = std::array::from_fn(|a| window[a].saturating_sub(shape[a]));
    let before = deficit.map(|d| d / 2);
    let after: [usize; 3] = std::array::from_fn(|a| deficit[a] - before[a]);
    let padded = patches
        .into_iter()
        .map(|(k, v)| (k, pad_asymmetric(&v, before, after, PadMode::EdgeReplicate)))
        .collect();
    (before, padded)
}

fn cut(
    subject_id: &str,
    volumes: &BTreeMap<String, Volume>,
    start: [usize; 3],
    window: [usize; 3],
    pad_applied: [usize; 3],
    transform: &Option<SampledTransform>,
) -> Result<WindowSample> {
    let mut patches = BTreeMap::new();
    for (name, v) in volumes {
        patches.insert(name.clone(), crop(v, start, window)?);
    }
    Ok(WindowSample {
        subject_id: subject_id.to_string(),
        patches,
        spatial_start: start,
        window_size: window,
        pad_applied,
        transform_applied: transform.clone(),
    })
}

/// `count` windows with starts uniform over every valid position. One
/// augmentation draw (if any) is shared by all windows and sources of the
/// call.
pub fn uniform_sample<R: Rng + ?Sized>(
    subject: &SubjectVolumes,
    window: [usize; 3],
    count: usize,
    rng: &mut R,
    augment: Option<&mut Augmenter>,
) -> Result<Vec<WindowSample>> {
    check_window(window)?;
    check_count(count)?;
    let shape = subject.spatial_shape()?;
    let (volumes, transform) = subject.augmented(augment)?;
    let (pad_before, volumes) = pad_to_window(volumes, shape, window);
    let extent: [usize; 3] = std::array::from_fn(|a| shape[a].max(window[a]));
    (0..count)
        .map(|_| {
            let start: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=extent[a] - window[a]));
            cut(&subject.subject_id, &volumes, start, window, pad_before, &transform)
        })
        .collect()
}

/// `count` windows whose centre voxel `start + window / 2` is drawn with
/// probability proportional to channel 0 of source `weight_source`. Starts
/// are clamped so windows stay inside the volume.
pub fn weighted_sample<R: Rng + ?Sized>(
    subject: &SubjectVolumes,
    weight_source: &str,
    window: [usize; 3],
    count: usize,
    rng: &mut R,
    augment: Option<&mut Augmenter>,
) -> Result<Vec<WindowSample>> {
    check_window(window)?;
    check_count(count)?;
    if !subject.sources.contains_key(weight_source) {
        return Err(Error::MissingModality {
            subject: subject.subject_id.clone(),
            source_name: weight_source.to_string(),
        });
    }
    let shape = subject.spatial_shape()?;
    let (volumes, transform) = subject.augmented(augment)?;
    let weights = volumes[weight_source].channel(0);
    if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeightMap(format!("weight {bad} is negative or not finite")));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::InvalidWeightMap(e.to_string()))?;
    let (pad_before, volumes) = pad_to_window(volumes, shape, window);
    let extent: [usize; 3] = std::array::from_fn(|a| shape[a].max(window[a]));
    (0..count)
        .map(|_| {
            let i = dist.sample(rng);
            let centre = [i % shape[0], (i / shape[0]) % shape[1], i / (shape[0] * shape[1])];
            let start: [usize; 3] = std::array::from_fn(|a| {
                (centre[a] + pad_before[a]).saturating_sub(window[a] / 2).min(extent[a] - window[a])
            });
            cut(&subject.subject_id, &volumes, start, window, pad_before, &transform)
        })
        .collect()
}

/// Window size and the margin on each side that is discarded on
/// aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub window: [usize; 3],
    pub border: [usize; 3],
}

impl GridSpec {
    pub fn new(window: [usize; 3], border: [usize; 3]) -> Result<Self> {
        let g = GridSpec { window, border };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.window[a] < 2 * self.border[a] + 1 {
                return Err(Error::PreconditionViolation(format!(
                    "grid window {:?} leaves no interior with border {:?}",
                    self.window, self.border
                )));
            }
        }
        Ok(())
    }

    /// Voxels kept from each window along each axis.
    pub fn stride(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.window[a] - 2 * self.border[a])
    }

    /// Padding `(before, after)` that makes every interior fit inside the
    /// padded volume.
    pub fn padding(&self, shape: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let after = std::array::from_fn(|a| {
            self.border[a] + self.window[a].saturating_sub(shape[a] + 2 * self.border[a])
        });
        (self.border, after)
    }

    pub fn padded_extent(&self, shape: [usize; 3]) -> [usize; 3] {
        let (before, after) = self.padding(shape);
        std::array::from_fn(|a| shape[a] + before[a] + after[a])
    }
}

fn axis_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + window <= extent).collect();
    let last = extent - window;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Window starts in padded coordinates, ordered with x varying fastest.
/// Interiors `[start + border, start + window - border)` cover the original
/// volume; only the last window on each axis may overlap its neighbour.
pub fn grid_positions(shape: [usize; 3], g: &GridSpec) -> Vec<[usize; 3]> {
    let extent = g.padded_extent(shape);
    let stride = g.stride();
    let per_axis: [Vec<usize>; 3] = std::array::from_fn(|a| axis_starts(extent[a], g.window[a], stride[a]));
    let mut out = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Every grid window of the subject, in [`grid_positions`] order.
pub fn grid_sample(subject: &SubjectVolumes, g: &GridSpec) -> Result<Vec<WindowSample>> {
    g.validate()?;
    let shape = subject.spatial_shape()?;
    let (before, after) = g.padding(shape);
    let padded: BTreeMap<String, Volume> = subject
        .sources
        .iter()
        .map(|(k, s)| (k.clone(), pad_asymmetric(&s.volume, before, after, PadMode::EdgeReplicate)))
        .collect();
    grid_positions(shape, g)
        .into_iter()
        .map(|start| cut(&subject.subject_id, &padded, start, g.window, before, &None))
        .collect()
}

/// Resampling that maps a `from`-shaped grid onto a `to`-shaped one.
pub fn resize_affine(from: [usize; 3], to: [usize; 3]) -> crate::volume::Affine {
    scaling(std::array::from_fn(|a| from[a] as f64 / to[a] as f64))
}

/// The whole subject resampled to `target`, each source with its own
/// interpolation.
pub fn resize_sample(
    subject: &SubjectVolumes,
    target: [usize; 3],
    augment: Option<&mut Augmenter>,
) -> Result<WindowSample> {
    check_window(target)?;
    let shape = subject.spatial_shape()?;
    let (volumes, transform) = subject.augmented(augment)?;
    let t = resize_affine(shape, target);
    let mut patches = BTreeMap::new();
    for (name, v) in volumes {
        let resized = if shape == target { v } else { resample(&v, &t, target, subject.sources[&name].interp, None)? };
        patches.insert(name, resized);
    }
    Ok(WindowSample {
        subject_id: subject.subject_id.clone(),
        patches,
        spatial_start: [0; 3],
        window_size: target,
        pad_applied: [0; 3],
        transform_applied: transform,
    })
}

/// Work split into independent tasks. Task order defines the
/// deterministic output order.
pub trait SampleSource: Send + Sync {
    fn num_tasks(&self) -> usize;
    fn produce(&self, task: usize) -> Result<Vec<WindowSample>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum SamplerKind {
    Uniform { window: [usize; 3], per_volume: usize },
    Weighted { window: [usize; 3], per_volume: usize, weight_source: String },
    Grid(GridSpec),
    Resize { target: [usize; 3] },
}

type Loader = dyn Fn(usize) -> Result<SubjectVolumes> + Send + Sync;

/// One task per subject. Task `i` draws windows from random stream
/// `(seed, i)` and augmentations from stream `(augment.seed, i)`.
pub struct VolumeSampler {
    count: usize,
    loader: Box<Loader>,
    pub kind: SamplerKind,
    pub seed: u64,
    pub augment: Option<AugmentSpec>,
}

impl VolumeSampler {
    pub fn from_volumes(subjects: Vec<SubjectVolumes>, kind: SamplerKind, seed: u64) -> Self {
        let count = subjects.len();
        VolumeSampler { count, loader: Box::new(move |i| Ok(subjects[i].clone())), kind, seed, augment: None }
    }

    /// Loads each subject from disk inside its task.
    pub fn from_records(
        records: Vec<SubjectRecord>,
        interps: BTreeMap<String, Interpolation>,
        kind: SamplerKind,
        seed: u64,
    ) -> Self {
        let count = records.len();
        VolumeSampler {
            count,
            loader: Box::new(move |i| SubjectVolumes::load(&records[i], &interps)),
            kind,
            seed,
            augment: None,
        }
    }

    /// Subjects produced by `loader(task)` for `task` in `0..count`.
    pub fn from_loader(
        count: usize,
        loader: impl Fn(usize) -> Result<SubjectVolumes> + Send + Sync + 'static,
        kind: SamplerKind,
        seed: u64,
    ) -> Self {
        VolumeSampler { count, loader: Box::new(loader), kind, seed, augment: None }
    }

    pub fn with_augmentation(mut self, spec: Option<AugmentSpec>) -> Self {
        self.augment = spec;
        self
    }
}

impl SampleSource for VolumeSampler {
    fn num_tasks(&self) -> usize {
        self.count
    }

    fn produce(&self, task: usize) -> Result<Vec<WindowSample>> {
        let subject = (self.loader)(task)?;
        let mut rng: PipelineRng = substream(self.seed, task as u64);
        let mut augmenter = self.augment.clone().map(|spec| Augmenter::new(spec, task as u64));
        let aug = augmenter.as_mut();
        match &self.kind {
            SamplerKind::Uniform { window, per_volume } => uniform_sample(&subject, *window, *per_volume, &mut rng, aug),
            SamplerKind::Weighted { window, per_volume, weight_source } => {
                weighted_sample(&subject, weight_source, *window, *per_volume, &mut rng, aug)
            }
            SamplerKind::Grid(g) => grid_sample(&subject, g),
            SamplerKind::Resize { target } => Ok(vec![resize_sample(&subject, *target, aug)?]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub lanes: usize,
    pub queue_capacity: usize,
    pub batch_size: usize,
    /// Enqueue tasks strictly in task order, so the batch stream does not
    /// depend on thread timing.
    pub deterministic: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { lanes: 1, queue_capacity: 8, batch_size: 1, deterministic: true }
    }
}

struct Shared {
    cancel: AtomicBool,
    turn: Mutex<usize>,
    turn_changed: Condvar,
    max_queue_len: AtomicUsize,
}

impl Shared {
    fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
        let _guard = self.turn.lock().unwrap_or_else(|e| e.into_inner());
        self.turn_changed.notify_all();
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Blocks until `task` may enqueue; false if cancelled meanwhile.
    fn wait_turn(&self, task: usize) -> bool {
        let mut turn = self.turn.lock().unwrap_or_else(|e| e.into_inner());
        while *turn != task {
            if self.cancelled() {
                return false;
            }
            turn = self.turn_changed.wait(turn).unwrap_or_else(|e| e.into_inner());
        }
        !self.cancelled()
    }

    fn advance_turn(&self) {
        let mut turn = self.turn.lock().unwrap_or_else(|e| e.into_inner());
        *turn += 1;
        self.turn_changed.notify_all();
    }
}

fn lane_main(
    lane: usize,
    lanes: usize,
    source: Arc<dyn SampleSource>,
    tx: Sender<Result<WindowSample>>,
    shared: Arc<Shared>,
    deterministic: bool,
) {
    let send = |item: Result<WindowSample>| -> bool {
        if tx.send(item).is_err() {
            return false;
        }
        shared.max_queue_len.fetch_max(tx.len(), Ordering::SeqCst);
        true
    };
    for task in (lane..source.num_tasks()).step_by(lanes) {
        if shared.cancelled() {
            return;
        }
        let produced = source.produce(task);
        if deterministic && !shared.wait_turn(task) {
            return;
        }
        match produced {
            Ok(samples) => {
                for s in samples {
                    if shared.cancelled() || !send(Ok(s)) {
                        return;
                    }
                }
            }
            Err(e) => {
                send(Err(e));
                shared.cancel();
                return;
            }
        }
        if deterministic {
            shared.advance_turn();
        }
    }
}

/// Batches read from the sample queue. Dropping the stream stops the lanes.
pub struct BatchStream {
    rx: Option<Receiver<Result<WindowSample>>>,
    handles: Vec<JoinHandle<()>>,
    shared: Arc<Shared>,
    batch_size: usize,
    finished: bool,
}

impl BatchStream {
    /// Largest queue length any lane observed right after enqueuing.
    pub fn max_queue_len(&self) -> usize {
        self.shared.max_queue_len.load(Ordering::SeqCst)
    }

    fn shutdown(&mut self) -> Result<()> {
        self.shared.cancel();
        if let Some(rx) = self.rx.take() {
            // unblock lanes waiting on a full queue
            while rx.try_recv().is_ok() {}
            drop(rx);
        }
        let mut panicked = false;
        for h in self.handles.drain(..) {
            panicked |= h.join().is_err();
        }
        if panicked {
            return Err(Error::Sampler("a sampling lane panicked".into()));
        }
        Ok(())
    }
}

impl Iterator for BatchStream {
    type Item = Result<Vec<WindowSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let rx = self.rx.as_ref()?;
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            match rx.recv() {
                Ok(Ok(sample)) => batch.push(sample),
                Ok(Err(e)) => {
                    self.finished = true;
                    let _ = self.shutdown();
                    return Some(Err(e));
                }
                Err(_) => {
                    // every lane has exited
                    self.finished = true;
                    if let Err(e) = self.shutdown() {
                        return Some(Err(e));
                    }
                    break;
                }
            }
        }
        if batch.is_empty() { None } else { Some(Ok(batch)) }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Starts `lanes` worker threads; task `i` runs on lane `i % lanes`.
pub fn run_sampler(source: Arc<dyn SampleSource>, opts: RunOptions) -> Result<BatchStream> {
    if opts.lanes == 0 || opts.batch_size == 0 || opts.queue_capacity < opts.batch_size {
        return Err(Error::PreconditionViolation(format!(
            "need lanes >= 1 and queue_capacity >= batch_size >= 1, got {opts:?}"
        )));
    }
    let (tx, rx) = bounded(opts.queue_capacity);
    let shared = Arc::new(Shared {
        cancel: AtomicBool::new(false),
        turn: Mutex::new(0),
        turn_changed: Condvar::new(),
        max_queue_len: AtomicUsize::new(0),
    });
    let mut handles = Vec::with_capacity(opts.lanes);
    for lane in 0..opts.lanes {
        let (source, tx, shared) = (Arc::clone(&source), tx.clone(), Arc::clone(&shared));
        let deterministic = opts.deterministic;
        let handle = std::thread::Builder::new()
            .name(format!("sampler-lane-{lane}"))
            .spawn(move || lane_main(lane, opts.lanes, source, tx, shared, deterministic))?;
        handles.push(handle);
    }
    Ok(BatchStream { rx: Some(rx), handles, shared, batch_size: opts.batch_size, finished: false })
}
