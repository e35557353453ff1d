//! Core domain types, the on-disk dataset format, and fold assignment.
//!
//! A [`Dataset`] is a set of subjects, each with exactly two calibration
//! recordings (200 cm first, 75 cm second) and one or more random-saccade task
//! recordings, split into train/test with a k-fold partition of the test
//! subjects. On disk a dataset is a `manifest.csv` plus one samples CSV per
//! recording; gaze floats are rendered with 9 significant digits (the
//! synthesizer emits values already quantized to that grid, so save -> load is
//! the identity on every bit), timestamps at full precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Dir;

pub const SAMPLE_RATE_HZ: f64 = 72.0;
/// Tolerance on the nominal 1/72 s timestamp step.
pub const T_STEP_TOL_S: f64 = 1e-9;
/// Calibration recordings must present at least this many distinct targets.
pub const MIN_CALIBRATION_TARGETS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Calibration,
    RandomSaccade,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Calibration => "calibration",
            Task::RandomSaccade => "random_saccade",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "calibration" => Some(Task::Calibration),
            "random_saccade" => Some(Task::RandomSaccade),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One 72 Hz sample. Invalid samples (blinks) carry NaN gaze with the target
/// trace intact.
#[derive(Debug, Clone, Copy)]
pub struct GazeSample {
    pub t: f64,
    pub left: Dir,
    pub right: Dir,
    pub target: Dir,
    pub valid: bool,
}

impl GazeSample {
    fn bit_eq(&self, other: &GazeSample) -> bool {
        self.t.to_bits() == other.t.to_bits()
            && dir_bits(self.left) == dir_bits(other.left)
            && dir_bits(self.right) == dir_bits(other.right)
            && dir_bits(self.target) == dir_bits(other.target)
            && self.valid == other.valid
    }
}

fn dir_bits(d: Dir) -> [u64; 2] {
    [d[0].to_bits(), d[1].to_bits()]
}

/// A maximal run of constant stimulus target: one dwell of the jumping dot.
#[derive(Debug, Clone, Copy)]
pub struct Dwell {
    /// First sample index of the run.
    pub start: usize,
    /// One past the last sample index.
    pub end: usize,
    pub target: Dir,
}

#[derive(Debug, Clone)]
pub struct Recording {
    pub subject_id: String,
    pub recording_id: String,
    pub task: Task,
    pub target_depth_cm: u32,
    pub sample_rate_hz: f64,
    pub samples: Vec<GazeSample>,
}

impl Recording {
    /// All target runs, including the final (unterminated) one.
    pub fn dwells(&self) -> Vec<Dwell> {
        let mut out = Vec::new();
        let mut start = 0usize;
        for i in 1..=self.samples.len() {
            let boundary = i == self.samples.len()
                || dir_bits(self.samples[i].target) != dir_bits(self.samples[start].target);
            if boundary {
                out.push(Dwell {
                    start,
                    end: i,
                    target: self.samples[start].target,
                });
                start = i;
            }
        }
        out
    }

    /// Dwells whose end is known: every run except the final one, whose true
    /// scheduled length cannot be recovered from the trace. Using only closed
    /// dwells keeps calibration and quality metrics invariant to trailing
    /// appended samples.
    pub fn closed_dwells(&self) -> Vec<Dwell> {
        let mut d = self.dwells();
        d.pop();
        d
    }

    /// Per-eye optical series: `[left, right]`, NaN where invalid.
    pub fn optical_series(&self) -> [Vec<Dir>; 2] {
        let left = self.samples.iter().map(|s| s.left).collect();
        let right = self.samples.iter().map(|s| s.right).collect();
        [left, right]
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    fn distinct_target_count(&self) -> usize {
        self.dwells()
            .iter()
            .map(|d| dir_bits(d.target))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn validate(&self) -> Result<()> {
        let nominal = 1.0 / self.sample_rate_hz;
        for (i, s) in self.samples.iter().enumerate() {
            if i > 0 {
                let dt = s.t - self.samples[i - 1].t;
                if dt <= 0.0 || (dt - nominal).abs() > T_STEP_TOL_S {
                    return Err(Error::validation(format!(
                        "recording {}: timestamp step {} at sample {} is not the nominal {}",
                        self.recording_id, dt, i, nominal
                    )));
                }
            }
            if s.valid {
                for v in s.left.iter().chain(s.right.iter()) {
                    if !v.is_finite() || v.abs() > 90.0 {
                        return Err(Error::validation(format!(
                            "recording {}: gaze value {} out of [-90, 90] at sample {}",
                            self.recording_id, v, i
                        )));
                    }
                }
            } else if !s.left.iter().chain(s.right.iter()).all(|v| v.is_nan()) {
                return Err(Error::validation(format!(
                    "recording {}: invalid sample {} must carry NaN gaze",
                    self.recording_id, i
                )));
            }
            for v in s.target.iter() {
                if !v.is_finite() || v.abs() > 90.0 {
                    return Err(Error::validation(format!(
                        "recording {}: target value {} out of [-90, 90] at sample {}",
                        self.recording_id, v, i
                    )));
                }
            }
        }
        if self.target_depth_cm != 75 && self.target_depth_cm != 200 {
            return Err(Error::validation(format!(
                "recording {}: target depth {} cm not in {{75, 200}}",
                self.recording_id, self.target_depth_cm
            )));
        }
        if self.task == Task::Calibration && self.distinct_target_count() < MIN_CALIBRATION_TARGETS
        {
            return Err(Error::validation(format!(
                "calibration recording {} has {} distinct dwell targets, need >= {}",
                self.recording_id,
                self.distinct_target_count(),
                MIN_CALIBRATION_TARGETS
            )));
        }
        Ok(())
    }

    fn bit_eq(&self, other: &Recording) -> bool {
        self.subject_id == other.subject_id
            && self.recording_id == other.recording_id
            && self.task == other.task
            && self.target_depth_cm == other.target_depth_cm
            && self.samples.len() == other.samples.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// Exactly two: `[0]` fitted-depth 200 cm, `[1]` 75 cm.
    pub calibration_recordings: Vec<Recording>,
    /// Random-saccade recordings at 200 cm stimulus depth.
    pub task_recordings: Vec<Recording>,
}

impl SubjectRecord {
    pub fn calibration_at(&self, depth_cm: u32) -> Result<&Recording> {
        self.calibration_recordings
            .iter()
            .find(|r| r.target_depth_cm == depth_cm)
            .ok_or_else(|| {
                Error::validation(format!(
                    "subject {} has no {} cm calibration recording",
                    self.subject_id, depth_cm
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.calibration_recordings.len() != 2
            || self.calibration_recordings[0].target_depth_cm != 200
            || self.calibration_recordings[1].target_depth_cm != 75
        {
            return Err(Error::validation(format!(
                "subject {} must have exactly two calibration recordings ordered 200 cm then 75 cm",
                self.subject_id
            )));
        }
        if self.task_recordings.is_empty() {
            return Err(Error::validation(format!(
                "subject {} has no task recordings",
                self.subject_id
            )));
        }
        for r in self.all_recordings() {
            if r.subject_id != self.subject_id {
                return Err(Error::validation(format!(
                    "recording {} belongs to {} but is filed under {}",
                    r.recording_id, r.subject_id, self.subject_id
                )));
            }
            r.validate()?;
        }
        for r in &self.calibration_recordings {
            if r.task != Task::Calibration {
                return Err(Error::validation(format!(
                    "recording {} filed as calibration but tagged {}",
                    r.recording_id,
                    r.task.as_str()
                )));
            }
        }
        for r in &self.task_recordings {
            if r.task != Task::RandomSaccade || r.target_depth_cm != 200 {
                return Err(Error::validation(format!(
                    "task recording {} must be a random-saccade recording at 200 cm",
                    r.recording_id
                )));
            }
        }
        Ok(())
    }

    pub fn all_recordings(&self) -> impl Iterator<Item = &Recording> {
        self.calibration_recordings
            .iter()
            .chain(self.task_recordings.iter())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub split: BTreeMap<String, Split>,
    /// Fold index per test subject.
    pub folds: BTreeMap<String, u32>,
}

impl Dataset {
    pub fn subject(&self, id: &str) -> Result<&SubjectRecord> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| Error::validation(format!("unknown subject {id}")))
    }

    pub fn subject_ids_in(&self, split: Split) -> Vec<&str> {
        self.subjects
            .iter()
            .filter(|s| self.split.get(&s.subject_id) == Some(&split))
            .map(|s| s.subject_id.as_str())
            .collect()
    }

    pub fn fold_count(&self) -> usize {
        self.folds
            .values()
            .map(|&f| f as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn subjects_in_fold(&self, fold: u32) -> Vec<&str> {
        self.subjects
            .iter()
            .filter(|s| self.folds.get(&s.subject_id) == Some(&fold))
            .map(|s| s.subject_id.as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut recording_ids = BTreeSet::new();
        for subject in &self.subjects {
            subject.validate()?;
            if !self.split.contains_key(&subject.subject_id) {
                return Err(Error::validation(format!(
                    "subject {} has no split assignment",
                    subject.subject_id
                )));
            }
            for r in subject.all_recordings() {
                if !recording_ids.insert(r.recording_id.clone()) {
                    return Err(Error::validation(format!(
                        "duplicate recording_id {}",
                        r.recording_id
                    )));
                }
            }
        }
        let ids: BTreeSet<_> = self.subjects.iter().map(|s| s.subject_id.as_str()).collect();
        if ids.len() != self.subjects.len() {
            return Err(Error::validation("duplicate subject_id".to_string()));
        }
        for (id, split) in &self.split {
            if !ids.contains(id.as_str()) {
                return Err(Error::validation(format!(
                    "split references unknown subject {id}"
                )));
            }
            match split {
                Split::Test => {
                    if !self.folds.contains_key(id) {
                        return Err(Error::validation(format!(
                            "test subject {id} has no fold"
                        )));
                    }
                }
                Split::Train => {
                    if self.folds.contains_key(id) {
                        return Err(Error::validation(format!(
                            "train subject {id} must not carry a fold"
                        )));
                    }
                }
            }
        }
        if !self.folds.is_empty() {
            let k = self.fold_count();
            let mut sizes = vec![0usize; k];
            for &f in self.folds.values() {
                sizes[f as usize] += 1;
            }
            let (min, max) = (
                *sizes.iter().min().expect("k >= 1"),
                *sizes.iter().max().expect("k >= 1"),
            );
            if min == 0 || max - min > 1 {
                return Err(Error::validation(format!(
                    "fold sizes {sizes:?} do not partition test subjects evenly"
                )));
            }
        }
        Ok(())
    }

    /// Bitwise structural equality, NaN-tolerant (compares float bits).
    pub fn bit_eq(&self, other: &Dataset) -> bool {
        self.split == other.split
            && self.folds == other.folds
            && self.subjects.len() == other.subjects.len()
            && self.subjects.iter().zip(&other.subjects).all(|(a, b)| {
                a.subject_id == b.subject_id
                    && a.calibration_recordings.len() == b.calibration_recordings.len()
                    && a.task_recordings.len() == b.task_recordings.len()
                    && a.all_recordings()
                        .zip(b.all_recordings())
                        .all(|(x, y)| x.bit_eq(y))
            })
    }
}

/// Assigns test subjects to `k` folds by seeded shuffle then round-robin.
pub fn assign_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::validation(format!("fold count {k} must be >= 2")));
    }
    let mut test_ids: Vec<String> = dataset
        .subject_ids_in(Split::Test)
        .into_iter()
        .map(str::to_string)
        .collect();
    if test_ids.is_empty() {
        return Err(Error::validation("no test subjects to fold".to_string()));
    }
    if test_ids.len() < k {
        return Err(Error::validation(format!(
            "{} test subjects cannot fill {} folds",
            test_ids.len(),
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    test_ids.shuffle(&mut rng);
    let mut out = dataset.clone();
    out.folds = test_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), (i % k) as u32))
        .collect();
    Ok(out)
}

const MANIFEST_HEADER: &str = "subject_id,recording_id,task,target_depth_cm,split,fold,samples_file";
const SAMPLES_HEADER: &str = "t,left_opt_yaw,left_opt_pitch,right_opt_yaw,right_opt_pitch,tgt_yaw,tgt_pitch,valid";

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(',') || id.contains('\n') || id.contains('\r') {
        return Err(Error::validation(format!(
            "identifier {id:?} must be non-empty and free of commas/newlines"
        )));
    }
    Ok(())
}

fn render_samples(rec: &Recording) -> String {
    let mut out = String::with_capacity(64 * (rec.samples.len() + 1));
    out.push_str(SAMPLES_HEADER);
    out.push('\n');
    for s in &rec.samples {
        // Timestamps keep full precision so the 1/72 s step survives the trip;
        // gaze floats use the 9-significant-digit interface representation.
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.t,
            crate::util::format_sig9(s.left[0]),
            crate::util::format_sig9(s.left[1]),
            crate::util::format_sig9(s.right[0]),
            crate::util::format_sig9(s.right[1]),
            crate::util::format_sig9(s.target[0]),
            crate::util::format_sig9(s.target[1]),
            u8::from(s.valid),
        );
    }
    out
}

/// Writes `manifest.csv` plus `samples/<recording_id>.csv` under `root`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    let samples_dir = root.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for subject in &dataset.subjects {
        check_id(&subject.subject_id)?;
        let split = dataset.split[&subject.subject_id];
        let fold = match split {
            Split::Train => String::new(),
            Split::Test => dataset.folds[&subject.subject_id].to_string(),
        };
        for rec in subject.all_recordings() {
            check_id(&rec.recording_id)?;
            let rel = format!("samples/{}.csv", rec.recording_id);
            let _ = writeln!(
                manifest,
                "{},{},{},{},{},{},{}",
                subject.subject_id,
                rec.recording_id,
                rec.task.as_str(),
                rec.target_depth_cm,
                split.as_str(),
                fold,
                rel
            );
            let path = root.join(&rel);
            write_atomic(&path, render_samples(rec).as_bytes())?;
        }
    }
    write_atomic(&root.join("manifest.csv"), manifest.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_float(field: &str, file: &Path, line: usize) -> Result<f64> {
    if field == "nan" {
        return Ok(f64::NAN);
    }
    field
        .parse::<f64>()
        .map_err(|_| Error::malformed(file, line, format!("bad float {field:?}")))
}

/// Loads a dataset saved by [`save_dataset`] and validates every invariant.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        Some((_, h)) => {
            return Err(Error::malformed(
                &manifest_path,
                1,
                format!("unexpected manifest header {h:?}"),
            ))
        }
        None => return Err(Error::malformed(&manifest_path, 1, "empty manifest")),
    }

    struct Row {
        subject_id: String,
        recording_id: String,
        task: Task,
        depth: u32,
        split: Split,
        fold: Option<u32>,
        samples_file: String,
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::malformed(
                &manifest_path,
                lineno,
                format!("expected 7 columns, got {}", cols.len()),
            ));
        }
        let task = Task::parse(cols[2])
            .ok_or_else(|| Error::malformed(&manifest_path, lineno, format!("unknown task {:?}", cols[2])))?;
        let split = Split::parse(cols[4]).ok_or_else(|| {
            Error::malformed(&manifest_path, lineno, format!("unknown split {:?}", cols[4]))
        })?;
        let depth = cols[3].parse::<u32>().map_err(|_| {
            Error::malformed(&manifest_path, lineno, format!("bad depth {:?}", cols[3]))
        })?;
        let fold = if cols[5].is_empty() {
            None
        } else {
            Some(cols[5].parse::<u32>().map_err(|_| {
                Error::malformed(&manifest_path, lineno, format!("bad fold {:?}", cols[5]))
            })?)
        };
        rows.push(Row {
            subject_id: cols[0].to_string(),
            recording_id: cols[1].to_string(),
            task,
            depth,
            split,
            fold,
            samples_file: cols[6].to_string(),
        });
    }

    let mut subject_order: Vec<String> = Vec::new();
    let mut by_subject: BTreeMap<String, Vec<&Row>> = BTreeMap::new();
    for row in &rows {
        if !by_subject.contains_key(&row.subject_id) {
            subject_order.push(row.subject_id.clone());
        }
        by_subject.entry(row.subject_id.clone()).or_default().push(row);
    }

    let mut subjects = Vec::new();
    let mut split = BTreeMap::new();
    let mut folds = BTreeMap::new();
    for subject_id in &subject_order {
        let rows = &by_subject[subject_id];
        let first_split = rows[0].split;
        let first_fold = rows[0].fold;
        for r in rows {
            if r.split != first_split || r.fold != first_fold {
                return Err(Error::validation(format!(
                    "subject {subject_id} has inconsistent split/fold rows"
                )));
            }
        }
        split.insert(subject_id.clone(), first_split);
        match (first_split, first_fold) {
            (Split::Test, Some(f)) => {
                folds.insert(subject_id.clone(), f);
            }
            (Split::Test, None) => {
                return Err(Error::validation(format!(
                    "test subject {subject_id} has no fold"
                )))
            }
            (Split::Train, Some(_)) => {
                return Err(Error::validation(format!(
                    "train subject {subject_id} must not carry a fold"
                )))
            }
            (Split::Train, None) => {}
        }

        let mut calibration_recordings = Vec::new();
        let mut task_recordings = Vec::new();
        for row in rows {
            let samples_path = root.join(&row.samples_file);
            if !samples_path.is_file() {
                return Err(Error::validation(format!(
                    "samples file missing for recording {}: {}",
                    row.recording_id,
                    samples_path.display()
                )));
            }
            let rec = load_samples(
                &samples_path,
                row.subject_id.clone(),
                row.recording_id.clone(),
                row.task,
                row.depth,
            )?;
            match row.task {
                Task::Calibration => calibration_recordings.push(rec),
                Task::RandomSaccade => task_recordings.push(rec),
            }
        }
        subjects.push(SubjectRecord {
            subject_id: subject_id.clone(),
            calibration_recordings,
            task_recordings,
        });
    }

    let dataset = Dataset {
        subjects,
        split,
        folds,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn load_samples(
    path: &Path,
    subject_id: String,
    recording_id: String,
    task: Task,
    target_depth_cm: u32,
) -> Result<Recording> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SAMPLES_HEADER => {}
        Some((_, h)) => {
            return Err(Error::malformed(
                path,
                1,
                format!("unexpected samples header {h:?}"),
            ))
        }
        None => return Err(Error::malformed(path, 1, "empty samples file")),
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::malformed(
                path,
                lineno,
                format!("expected 8 columns, got {}", cols.len()),
            ));
        }
        let valid = match cols[7] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::malformed(
                    path,
                    lineno,
                    format!("bad valid flag {other:?}"),
                ))
            }
        };
        samples.push(GazeSample {
            t: parse_float(cols[0], path, lineno)?,
            left: [
                parse_float(cols[1], path, lineno)?,
                parse_float(cols[2], path, lineno)?,
            ],
            right: [
                parse_float(cols[3], path, lineno)?,
                parse_float(cols[4], path, lineno)?,
            ],
            target: [
                parse_float(cols[5], path, lineno)?,
                parse_float(cols[6], path, lineno)?,
            ],
            valid,
        });
    }
    Ok(Recording {
        subject_id,
        recording_id,
        task,
        target_depth_cm,
        sample_rate_hz: SAMPLE_RATE_HZ,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::quantize_sig9;

    fn toy_recording(subject: &str, id: &str, task: Task, depth: u32, n_targets: usize) -> Recording {
        // Distinct targets spaced 1 deg apart, 20 samples per dwell.
        let mut samples = Vec::new();
        let mut i = 0usize;
        for k in 0..n_targets {
            let target = [quantize_sig9(k as f64 - 5.0), quantize_sig9(1.0)];
            for _ in 0..20 {
                let t = i as f64 / SAMPLE_RATE_HZ;
                let g = [
                    quantize_sig9(target[0] + 0.01),
                    quantize_sig9(target[1] - 0.01),
                ];
                samples.push(GazeSample {
                    t,
                    left: g,
                    right: g,
                    target,
                    valid: true,
                });
                i += 1;
            }
        }
        Recording {
            subject_id: subject.to_string(),
            recording_id: id.to_string(),
            task,
            target_depth_cm: depth,
            sample_rate_hz: SAMPLE_RATE_HZ,
            samples,
        }
    }

    fn toy_dataset() -> Dataset {
        let mut subjects = Vec::new();
        let mut split = BTreeMap::new();
        let mut folds = BTreeMap::new();
        for (i, id) in ["a", "b", "c", "d"].iter().enumerate() {
            subjects.push(SubjectRecord {
                subject_id: id.to_string(),
                calibration_recordings: vec![
                    toy_recording(id, &format!("{id}_cal200"), Task::Calibration, 200, 12),
                    toy_recording(id, &format!("{id}_cal75"), Task::Calibration, 75, 12),
                ],
                task_recordings: vec![toy_recording(
                    id,
                    &format!("{id}_task0"),
                    Task::RandomSaccade,
                    200,
                    12,
                )],
            });
            if i < 2 {
                split.insert(id.to_string(), Split::Train);
            } else {
                split.insert(id.to_string(), Split::Test);
                folds.insert(id.to_string(), (i - 2) as u32);
            }
        }
        Dataset {
            subjects,
            split,
            folds,
        }
    }

    #[test]
    fn dwell_runs_are_detected() {
        let rec = toy_recording("a", "r", Task::Calibration, 200, 10);
        let dwells = rec.dwells();
        assert_eq!(dwells.len(), 10);
        assert!(dwells.iter().all(|d| d.end - d.start == 20));
        assert_eq!(rec.closed_dwells().len(), 9);
    }

    #[test]
    fn validate_accepts_toy_and_rejects_wrong_depth_order() {
        let ds = toy_dataset();
        ds.validate().unwrap();
        let mut bad = ds.clone();
        bad.subjects[0].calibration_recordings.swap(0, 1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn validate_rejects_few_calibration_targets() {
        let rec = toy_recording("a", "r", Task::Calibration, 200, 8);
        assert!(rec.validate().is_err());
        let rec = toy_recording("a", "r", Task::RandomSaccade, 200, 8);
        rec.validate().unwrap();
    }

    #[test]
    fn validate_rejects_non_monotone_time() {
        let mut rec = toy_recording("a", "r", Task::Calibration, 200, 10);
        rec.samples[5].t = rec.samples[4].t;
        assert!(rec.validate().is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy_dataset();
        // Exercise the NaN path: blink two samples.
        let rec = &mut ds.subjects[0].task_recordings[0];
        for i in 3..5 {
            rec.samples[i].left = [f64::NAN, f64::NAN];
            rec.samples[i].right = [f64::NAN, f64::NAN];
            rec.samples[i].valid = false;
        }
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(ds.bit_eq(&loaded));
        // Idempotence: a second save produces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        let a = std::fs::read(dir.path().join("manifest.csv")).unwrap();
        let b = std::fs::read(dir2.path().join("manifest.csv")).unwrap();
        assert_eq!(a, b);
        let fa = std::fs::read(dir.path().join("samples/a_task0.csv")).unwrap();
        let fb = std::fs::read(dir2.path().join("samples/a_task0.csv")).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn file_count_matches_recordings() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        let n = std::fs::read_dir(dir.path().join("samples")).unwrap().count();
        assert_eq!(n, 12); // 4 subjects x 3 recordings
    }

    #[test]
    fn unknown_task_string_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        let manifest = dir.path().join("manifest.csv");
        let text = std::fs::read_to_string(&manifest)
            .unwrap()
            .replace("random_saccade", "pursuit");
        std::fs::write(&manifest, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unknown task"), "{err}");
    }

    #[test]
    fn missing_samples_file_names_recording() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("samples/b_task0.csv")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("b_task0"), "{err}");
    }

    #[test]
    fn corrupt_float_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        let f = dir.path().join("samples/a_cal200.csv");
        let text = std::fs::read_to_string(&f).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[3] = "not,a,valid,row".to_string();
        std::fs::write(&f, lines.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a_cal200.csv") && msg.contains(":4:"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn duplicate_recording_id_is_validation_error() {
        let mut ds = toy_dataset();
        ds.subjects[0].task_recordings[0].recording_id = "a_cal200".to_string();
        let dir = tempfile::tempdir().unwrap();
        let err = save_dataset(&ds, dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate recording_id"), "{err}");
    }

    #[test]
    fn fold_assignment_partitions_evenly_and_deterministically() {
        // 20 test subjects for an even 10-fold split.
        let ds = {
            let mut subjects = Vec::new();
            let mut split = BTreeMap::new();
            for i in 0..20 {
                let id = format!("t{i:02}");
                subjects.push(SubjectRecord {
                    subject_id: id.clone(),
                    calibration_recordings: vec![
                        toy_recording(&id, &format!("{id}_c200"), Task::Calibration, 200, 12),
                        toy_recording(&id, &format!("{id}_c75"), Task::Calibration, 75, 12),
                    ],
                    task_recordings: vec![toy_recording(
                        &id,
                        &format!("{id}_t0"),
                        Task::RandomSaccade,
                        200,
                        12,
                    )],
                });
                split.insert(id, Split::Test);
            }
            Dataset {
                subjects,
                split,
                folds: BTreeMap::new(),
            }
        };
        let a = assign_folds(&ds, 10, 99).unwrap();
        let b = assign_folds(&ds, 10, 99).unwrap();
        assert_eq!(a.folds, b.folds);
        let mut sizes = vec![0usize; 10];
        for &f in a.folds.values() {
            sizes[f as usize] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 2));
        a.validate().unwrap();
        // Different seed, different shuffle (overwhelmingly likely).
        let c = assign_folds(&ds, 10, 100).unwrap();
        assert_ne!(a.folds, c.folds);
        // Too many folds for the test population.
        assert!(assign_folds(&ds, 21, 1).is_err());
    }
}
