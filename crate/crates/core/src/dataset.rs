//! Labelled sample sets: task label spaces, the 5-to-2 occupancy remap,
//! stratified or grouped train/test splits, minority oversampling and the
//! `DASS` binary format.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::binio::{read_file, write_atomic, Reader};
use crate::error::{invalid, Error, Result};
use crate::framing::{anchors_around, fit_track_lines, FramedTrack, LabeledSample, SampleShape, TrackFit};
use crate::rng;
use crate::sim::{Direction, LabelKind, TruthRow};

pub const DATASET_MAGIC: &[u8; 4] = b"DASS";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Occupancy5,
    Occupancy2,
    Size2,
}

impl Task {
    /// Class names in label-index order.
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Occupancy5 => &["1p", "2p", "3p", "4p", "5p"],
            Task::Occupancy2 => &["LOV", "HOV"],
            Task::Size2 => &["Small", "Large"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    fn code(self) -> u8 {
        match self {
            Task::Occupancy5 => 0,
            Task::Occupancy2 => 1,
            Task::Size2 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Task::Occupancy5),
            1 => Ok(Task::Occupancy2),
            2 => Ok(Task::Size2),
            _ => Err(Error::Corrupt(format!("unknown task code {c}"))),
        }
    }

    /// Class index of an occupancy φ (1..=5) or size ω (1..=2) label.
    pub fn class_of(self, raw: u8) -> Result<u8> {
        let idx = match self {
            Task::Occupancy5 if (1..=5).contains(&raw) => raw - 1,
            Task::Occupancy2 if (1..=5).contains(&raw) => u8::from(raw >= 3),
            Task::Size2 if (1..=2).contains(&raw) => raw - 1,
            _ => return Err(invalid(format!("label {raw} is not valid for task {self}"))),
        };
        Ok(idx)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Occupancy5 => "occupancy5",
            Task::Occupancy2 => "occupancy2",
            Task::Size2 => "size2",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "occupancy5" | "occ5" => Ok(Task::Occupancy5),
            "occupancy2" | "occ2" | "hov" => Ok(Task::Occupancy2),
            "size2" | "size" => Ok(Task::Size2),
            _ => Err(invalid(format!(
                "unknown task {s:?}; expected occupancy5, occupancy2 or size2"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    task: Task,
    samples: Vec<LabeledSample>,
}

impl LabeledDataset {
    /// Checks that labels fit the task and all samples share one shape.
    pub fn new(task: Task, samples: Vec<LabeledSample>) -> Result<Self> {
        let k = task.num_classes();
        if let Some(s) = samples.iter().find(|s| s.label as usize >= k) {
            return Err(invalid(format!(
                "label {} out of range for task {task} ({k} classes)",
                s.label
            )));
        }
        if let Some(first) = samples.first() {
            if let Some(s) = samples.iter().find(|s| s.shape != first.shape) {
                return Err(invalid(format!(
                    "mixed sample shapes {:?} and {:?}",
                    first.shape, s.shape
                )));
            }
            if let Some(s) = samples.iter().find(|s| s.values.len() != s.shape.len()) {
                return Err(invalid(format!(
                    "sample with {} values does not match shape {:?}",
                    s.values.len(),
                    s.shape
                )));
            }
        }
        Ok(LabeledDataset { task, samples })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        self.task.class_names()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<LabeledSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> Option<SampleShape> {
        self.samples.first().map(|s| s.shape)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.task.num_classes()];
        for s in &self.samples {
            counts[s.label as usize] += 1;
        }
        counts
    }

    pub fn concat(mut self, other: LabeledDataset) -> Result<Self> {
        if self.task != other.task {
            return Err(invalid(format!(
                "cannot join {} and {} datasets",
                self.task, other.task
            )));
        }
        self.samples.extend(other.samples);
        LabeledDataset::new(self.task, self.samples)
    }

    fn with_samples(&self, samples: Vec<LabeledSample>) -> Self {
        LabeledDataset {
            task: self.task,
            samples,
        }
    }
}

/// LOV = {1p, 2p}, HOV = {3p, 4p, 5p}.
pub fn remap_occupancy_binary(ds: &LabeledDataset) -> Result<LabeledDataset> {
    if ds.task != Task::Occupancy5 {
        return Err(invalid(format!("remap needs an occupancy5 dataset, got {}", ds.task)));
    }
    let samples = ds
        .samples
        .iter()
        .map(|s| LabeledSample {
            label: u8::from(s.label >= 2),
            ..s.clone()
        })
        .collect();
    Ok(LabeledDataset {
        task: Task::Occupancy2,
        samples,
    })
}

pub fn imbalance_ratio_from_counts(counts: &[usize]) -> Result<f64> {
    if counts.len() != 2 {
        return Err(invalid(format!("imbalance ratio needs 2 classes, got {}", counts.len())));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(i.to_string()));
    }
    let (lo, hi) = (counts[0].min(counts[1]), counts[0].max(counts[1]));
    Ok(lo as f64 / hi as f64)
}

pub fn imbalance_ratio(ds: &LabeledDataset) -> Result<f64> {
    imbalance_ratio_from_counts(&ds.class_counts()).map_err(|e| match e {
        Error::EmptyClass(i) => {
            Error::EmptyClass(ds.class_names()[i.parse::<usize>().unwrap()].to_string())
        }
        other => other,
    })
}

/// Appends seeded with-replacement duplicates of the minority class until
/// both classes have the majority count.
pub fn oversample_minority(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    imbalance_ratio(ds)?;
    let counts = ds.class_counts();
    let minority = if counts[0] < counts[1] { 0u8 } else { 1u8 };
    let deficit = counts[1 - minority as usize] - counts[minority as usize];
    let members: Vec<&LabeledSample> = ds.samples.iter().filter(|s| s.label == minority).collect();
    let mut r = rng::stream(seed, rng::TAG_OVERSAMPLE, 0);
    let mut samples = ds.samples.clone();
    samples.extend((0..deficit).map(|_| members[r.gen_range(0..members.len())].clone()));
    Ok(ds.with_samples(samples))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
    /// Keeps every sample of one pass on the same side.
    pub grouped: bool,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            seed,
            stratified: true,
            grouped: false,
        }
    }
}

/// Pass identity as recoverable from a stored sample. The dataset format
/// has no track id, so one pass is one (label, direction, speed) triple.
fn group_key(s: &LabeledSample) -> (u8, u8, u64) {
    let dir = match s.direction {
        None => 0,
        Some(Direction::East) => 1,
        Some(Direction::West) => 2,
    };
    (s.label, dir, s.speed_kmh.to_bits())
}

/// Takes whole groups, in shuffled order, while doing so moves the running
/// count closer to `target`.
fn take_groups(groups: &[Vec<usize>], target: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for g in groups {
        let n = train.len();
        if n + g.len() <= target || (target > n && n + g.len() - target < target - n) {
            train.extend_from_slice(g);
        } else {
            test.extend_from_slice(g);
        }
    }
    (train, test)
}

pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(invalid(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    if ds.is_empty() {
        return Err(invalid("cannot split an empty dataset"));
    }
    let mut r = rng::stream(spec.seed, rng::TAG_SPLIT, 0);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut r);

    let strata: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = vec![Vec::new(); ds.task.num_classes()];
        for &i in &order {
            by_class[ds.samples[i].label as usize].push(i);
        }
        by_class
    } else {
        vec![order]
    };

    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for stratum in strata {
        let target = (spec.train_fraction * stratum.len() as f64).round() as usize;
        if spec.grouped {
            let mut groups: BTreeMap<(u8, u8, u64), Vec<usize>> = BTreeMap::new();
            for &i in &stratum {
                groups.entry(group_key(&ds.samples[i])).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
            groups.shuffle(&mut r);
            let (a, b) = take_groups(&groups, target);
            train_idx.extend(a);
            test_idx.extend(b);
        } else {
            train_idx.extend_from_slice(&stratum[..target]);
            test_idx.extend_from_slice(&stratum[target..]);
        }
    }
    let pick = |idx: &[usize]| ds.with_samples(idx.iter().map(|&i| ds.samples[i].clone()).collect());
    Ok((pick(&train_idx), pick(&test_idx)))
}

/// LOV from the single-occupant side, HOV from the five-occupant side, both
/// truncated to the smaller count (first samples kept).
pub fn build_independent_occupancy(
    one_passenger: &[LabeledSample],
    five_passengers: &[LabeledSample],
) -> Result<LabeledDataset> {
    let n = one_passenger.len().min(five_passengers.len());
    if n == 0 {
        return Err(Error::EmptyClass(
            if one_passenger.is_empty() { "LOV" } else { "HOV" }.into(),
        ));
    }
    let relabel = |s: &LabeledSample, label: u8| LabeledSample {
        label,
        ..s.clone()
    };
    let samples = one_passenger[..n]
        .iter()
        .map(|s| relabel(s, 0))
        .chain(five_passengers[..n].iter().map(|s| relabel(s, 1)))
        .collect();
    LabeledDataset::new(Task::Occupancy2, samples)
}

/// How framing lines are recovered from ground truth: anchors every `step`
/// bins across `range`, jittered by `noise_rms` shots, then refitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorOptions {
    pub range: (usize, usize),
    pub step: usize,
    pub noise_rms: f64,
    pub seed: u64,
}

impl Default for AnchorOptions {
    fn default() -> Self {
        AnchorOptions {
            range: crate::framing::DEFAULT_BIN_RANGE,
            step: crate::framing::ANCHOR_STEP,
            noise_rms: 0.0,
            seed: 0,
        }
    }
}

/// Framed tracks labelled in `task`'s class space. Occupancy tasks keep
/// occupancy-labelled tracks only; the size task labels every controlled
/// track by its vehicle's size class. Interferers keep their exact lines
/// and are flagged as noise.
pub fn frame_from_truth(rows: &[TruthRow], task: Task, anchors: &AnchorOptions) -> Result<Vec<FramedTrack>> {
    let wanted = match task {
        Task::Occupancy5 | Task::Occupancy2 => LabelKind::Occupancy,
        Task::Size2 => LabelKind::Size,
    };
    let mut out = Vec::new();
    for row in rows {
        let exact = TrackFit {
            c1: row.c1,
            c2: row.c2,
            c3: row.c3,
            c4: row.c4,
            fit_residual_rms: 0.0,
        };
        let (fit, label, noise) = if row.label_kind == LabelKind::Noise {
            (exact, 0, true)
        } else if row.label_kind == wanted || task == Task::Size2 {
            let label = if task == Task::Size2 { row.size_class.omega() } else { row.label };
            let mut r = rng::stream(anchors.seed, rng::TAG_ANCHOR, row.track_id as u64);
            let points = anchors_around(&exact, anchors.range, anchors.step, anchors.noise_rms, &mut r)?;
            (fit_track_lines(&points)?, task.class_of(label)?, false)
        } else {
            continue;
        };
        out.push(FramedTrack {
            fit,
            label,
            direction: Some(row.direction),
            speed_kmh: row.speed_kmh,
            noise,
        });
    }
    if out.iter().all(|t| t.noise) {
        return Err(invalid(format!("no {wanted} tracks in the truth file for task {task}")));
    }
    Ok(out)
}

fn direction_code(d: Option<Direction>) -> u8 {
    match d {
        None => 0,
        Some(Direction::East) => 1,
        Some(Direction::West) => 2,
    }
}

impl LabeledDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.samples.iter().map(|s| 24 + 4 * s.values.len()).sum();
        let mut out = Vec::with_capacity(11 + payload);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(self.task.code());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for s in &self.samples {
            out.push(s.label);
            out.extend_from_slice(&(s.bin as u32).to_le_bytes());
            out.push(direction_code(s.direction));
            out.extend_from_slice(&(s.speed_kmh as f32).to_le_bytes());
            match s.shape {
                SampleShape::OneD { len } => {
                    out.push(1);
                    out.extend_from_slice(&(len as u32).to_le_bytes());
                }
                SampleShape::TwoD { rows, len } => {
                    out.push(2);
                    out.extend_from_slice(&(rows as u32).to_le_bytes());
                    out.extend_from_slice(&(len as u32).to_le_bytes());
                }
            }
            for &v in &s.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Payloads are stored as f32, so values round-trip at f32 precision;
    /// `raw_len` is not stored and reads back as 0.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "dataset");
        r.magic(DATASET_MAGIC)?;
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "dataset",
                version,
            });
        }
        let task = Task::from_code(r.u8()?)?;
        let count = r.u32()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let label = r.u8()?;
            let bin = r.u32()? as usize;
            let direction = match r.u8()? {
                0 => None,
                1 => Some(Direction::East),
                2 => Some(Direction::West),
                c => return Err(Error::Corrupt(format!("unknown direction code {c}"))),
            };
            let speed_kmh = r.f32()? as f64;
            let shape = match r.u8()? {
                1 => SampleShape::OneD {
                    len: r.u32()? as usize,
                },
                2 => SampleShape::TwoD {
                    rows: r.u32()? as usize,
                    len: r.u32()? as usize,
                },
                d => return Err(Error::Corrupt(format!("sample with {d} dimensions"))),
            };
            let n = shape.len();
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("sample too large".into()))?)?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            samples.push(LabeledSample {
                values,
                shape,
                label,
                bin,
                direction,
                speed_kmh,
                raw_len: 0,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        LabeledDataset::new(task, samples).map_err(|e| Error::Corrupt(e.to_string()))
    }

    /// One metadata row per sample; payloads are omitted.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("index,label,class,bin,direction,speed_kmh,shape,raw_len\n");
        let names = self.class_names();
        for (i, s) in self.samples.iter().enumerate() {
            let dir = match s.direction {
                None => "none".to_string(),
                Some(d) => d.to_string(),
            };
            let shape = match s.shape {
                SampleShape::OneD { len } => format!("{len}"),
                SampleShape::TwoD { rows, len } => format!("{rows}x{len}"),
            };
            let _ = writeln!(
                out,
                "{i},{},{},{},{dir},{},{shape},{}",
                s.label, names[s.label as usize], s.bin, s.speed_kmh, s.raw_len
            );
        }
        out
    }
}

pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    write_atomic(path, &ds.to_bytes())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::from_bytes(&read_file(path)?)
}
