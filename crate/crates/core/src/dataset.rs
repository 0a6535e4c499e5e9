//! Subject discovery, CSV manifests and seeded train/validation/inference
//! partitioning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::volume::Interpolation;

/// Extensions stripped from file names when deriving subject ids, longest
/// first so `.nii.gz` wins over `.gz`.
const KNOWN_EXTENSIONS: [&str; 4] = [".nii.gz", ".nii", ".hdr", ".csv"];
const RATIO_TOLERANCE: f64 = 1e-9;

/// One named input source (e.g. `image`, `label`) and how to find its files.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub name: String,
    pub path_to_search: PathBuf,
    pub filename_contains: Vec<String>,
    pub filename_not_contains: Vec<String>,
    pub interp: Interpolation,
}

impl SourceSpec {
    pub fn new(name: impl Into<String>, path_to_search: impl Into<PathBuf>) -> Self {
        SourceSpec {
            name: name.into(),
            path_to_search: path_to_search.into(),
            filename_contains: Vec::new(),
            filename_not_contains: Vec::new(),
            interp: Interpolation::Trilinear,
        }
    }

    pub fn contains(mut self, pattern: impl Into<String>) -> Self {
        self.filename_contains.push(pattern.into());
        self
    }

    pub fn not_contains(mut self, pattern: impl Into<String>) -> Self {
        self.filename_not_contains.push(pattern.into());
        self
    }

    pub fn interp(mut self, interp: Interpolation) -> Self {
        self.interp = interp;
        self
    }

    fn matches(&self, file_name: &str) -> bool {
        self.filename_contains.iter().all(|p| file_name.contains(p.as_str()))
            && !self.filename_not_contains.iter().any(|p| !p.is_empty() && file_name.contains(p.as_str()))
    }

    /// Subject id for a matching file name, or `None` if the file is not an
    /// image this source can read.
    pub fn subject_id(&self, file_name: &str) -> Option<String> {
        let lower = file_name.to_ascii_lowercase();
        let ext = KNOWN_EXTENSIONS.iter().find(|e| lower.ends_with(*e))?;
        let mut stem = file_name[..file_name.len() - ext.len()].to_string();
        for pattern in self.filename_contains.iter().filter(|p| !p.is_empty()) {
            stem = stem.replace(pattern.as_str(), "");
        }
        Some(stem.trim_end_matches(['-', '_', '.']).to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub paths: BTreeMap<String, PathBuf>,
}

impl SubjectRecord {
    pub fn path(&self, source: &str) -> Option<&Path> {
        self.paths.get(source).map(PathBuf::as_path)
    }
}

/// Finds every subject that has one file per source.
///
/// Files are matched across sources by subject id (file name minus the
/// source's `filename_contains` patterns and extension, with trailing `-`,
/// `_` and `.` trimmed). The result is sorted by subject id.
pub fn discover_subjects(specs: &[SourceSpec]) -> Result<Vec<SubjectRecord>> {
    let mut seen_names = BTreeSet::new();
    for spec in specs {
        if !seen_names.insert(spec.name.as_str()) {
            return Err(Error::Config(format!("source `{}` defined twice", spec.name)));
        }
    }
    let mut per_source: Vec<BTreeMap<String, PathBuf>> = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&spec.path_to_search)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if !spec.matches(&name) {
                continue;
            }
            let Some(id) = spec.subject_id(&name) else { continue };
            if id.is_empty() {
                return Err(Error::EmptySubjectId(path));
            }
            if let Some(first) = found.get(&id) {
                return Err(Error::AmbiguousMatch {
                    source_name: spec.name.clone(),
                    subject: id,
                    first: first.clone(),
                    second: path,
                });
            }
            found.insert(id, path);
        }
        per_source.push(found);
    }
    let all_ids: BTreeSet<&String> = per_source.iter().flat_map(|m| m.keys()).collect();
    let mut records = Vec::with_capacity(all_ids.len());
    for id in all_ids {
        let mut paths = BTreeMap::new();
        for (spec, found) in specs.iter().zip(&per_source) {
            match found.get(id) {
                Some(p) => {
                    paths.insert(spec.name.clone(), p.clone());
                }
                None => {
                    return Err(Error::MissingModality {
                        subject: id.clone(),
                        source_name: spec.name.clone(),
                    })
                }
            }
        }
        records.push(SubjectRecord { subject_id: id.clone(), paths });
    }
    Ok(records)
}

/// Reads a manifest CSV: a header of `subject_id` followed by one column per
/// source, then one row per subject. Relative paths resolve against the
/// manifest's directory. Records keep row order.
pub fn load_manifest(csv_path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let csv_path = csv_path.as_ref();
    let base = csv_path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("subject_id") || headers.len() < 2 {
        return Err(Error::Csv(format!(
            "{}: header must be `subject_id,<source>,...`",
            csv_path.display()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let id = row.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Csv(format!("{}: row {row_no} has no subject_id", csv_path.display())));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateSubject(id));
        }
        let mut paths = BTreeMap::new();
        for (col, name) in headers.iter().enumerate().skip(1) {
            let cell = row.get(col).unwrap_or("");
            let missing = || Error::ManifestPathMissing { row: row_no, column: name.to_string() };
            if cell.is_empty() {
                return Err(missing());
            }
            let p = Path::new(cell);
            let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            if !p.is_file() {
                return Err(missing());
            }
            paths.insert(name.to_string(), p);
        }
        records.push(SubjectRecord { subject_id: id, paths });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Training,
    Validation,
    Inference,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Training, Split::Validation, Split::Inference];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Training => "training",
            Split::Validation => "validation",
            Split::Inference => "inference",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "training" => Ok(Split::Training),
            "validation" => Ok(Split::Validation),
            "inference" => Ok(Split::Inference),
            other => Err(Error::Csv(format!("unknown split `{other}`"))),
        }
    }
}

/// Assignment of every subject to exactly one split. Rows are kept sorted by
/// subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTable {
    pub rows: Vec<(String, Split)>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl PartitionTable {
    pub fn subjects(&self, split: Split) -> Vec<&str> {
        self.rows.iter().filter(|(_, s)| *s == split).map(|(id, _)| id.as_str()).collect()
    }

    pub fn split_of(&self, subject: &str) -> Option<Split> {
        self.rows
            .binary_search_by(|(id, _)| id.as_str().cmp(subject))
            .ok()
            .map(|i| self.rows[i].1)
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for (_, s) in &self.rows {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,split\n");
        for (id, split) in &self.rows {
            out.push_str(&format!("{id},{split}\n"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Loads a partition CSV. Seed and ratios are not stored in the file, so
    /// the returned table carries seed 0 and the observed split fractions.
    pub fn read(path: impl AsRef<Path>) -> Result<PartitionTable> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or("").to_string();
            let split: Split = rec.get(1).unwrap_or("").parse()?;
            rows.push((id, split));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateSubject(w[0].0.clone()));
            }
        }
        let n = rows.len().max(1) as f64;
        let mut table = PartitionTable { rows, seed: 0, ratios: [0.0; 3] };
        let counts = table.counts();
        table.ratios = counts.map(|c| c as f64 / n);
        Ok(table)
    }
}

/// Shuffles subjects with a seeded PRNG and splits them by `ratios`
/// (training, validation, inference). Validation and inference receive
/// `floor(n · ratio)` subjects; training takes the rest.
///
/// Input order does not matter: ids are sorted before shuffling.
pub fn partition(subjects: &[String], ratios: [f64; 3], seed: u64) -> Result<PartitionTable> {
    if subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::PreconditionViolation(format!("ratios must be non-negative, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > RATIO_TOLERANCE {
        return Err(Error::PreconditionViolation(format!("ratios must sum to 1, got {sum}")));
    }
    let mut ids: Vec<String> = subjects.to_vec();
    ids.sort();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DuplicateSubject(w[0].clone()));
        }
    }
    let n = ids.len();
    // n·ratio can land a hair below an integer (e.g. 100 · 0.29)
    let count = |r: f64| ((n as f64 * r) + RATIO_TOLERANCE).floor() as usize;
    let n_val = count(ratios[1]);
    let n_inf = count(ratios[2]);
    let n_train = n - n_val - n_inf;

    let mut shuffled = ids;
    shuffled.shuffle(&mut seeded(seed));
    let mut rows: Vec<(String, Split)> = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Training
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Inference
            };
            (id, split)
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(PartitionTable { rows, seed, ratios })
}
