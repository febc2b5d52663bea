//! Accuracy reports, confusion matrices and the occupancy/size tables.

use std::fmt::Write as _;

use crate::dataset::{LabeledDataset, Task};
use crate::error::{invalid, Error, Result};
use crate::models::Arch;
use crate::nn::Network;

/// Printed for empty table cells and classes without samples.
pub const MISSING: &str = "—";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Role {
    /// Held-out part of the training recordings.
    #[default]
    Test,
    /// Recordings never seen in training.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub dataset_name: String,
    pub role: Role,
    pub arch: Option<Arch>,
    /// Trained on an oversampled (IR = 1) set.
    pub oversampled: bool,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub overall_acc: f64,
    /// `None` for classes with no samples.
    pub per_class_acc: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn from_confusion(task: Task, dataset_name: &str, confusion: Vec<Vec<usize>>) -> Result<Self> {
        let t = task.num_classes();
        if confusion.len() != t || confusion.iter().any(|r| r.len() != t) {
            return Err(invalid(format!("confusion matrix must be {t}x{t} for task {task}")));
        }
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..t).map(|c| confusion[c][c]).sum();
        let per_class_acc = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            task,
            dataset_name: dataset_name.to_string(),
            role: Role::Test,
            arch: None,
            oversampled: false,
            confusion,
            overall_acc: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            per_class_acc,
        })
    }

    pub fn from_predictions(task: Task, dataset_name: &str, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(invalid("truth and prediction lists differ in length"));
        }
        let t = task.num_classes();
        let mut confusion = vec![vec![0; t]; t];
        for (&a, &p) in truth.iter().zip(predicted) {
            if a >= t || p >= t {
                return Err(invalid(format!("class index out of range for task {task}")));
            }
            confusion[a][p] += 1;
        }
        EvalReport::from_confusion(task, dataset_name, confusion)
    }

    pub fn with_context(mut self, role: Role, arch: Option<Arch>, oversampled: bool) -> Self {
        self.role = role;
        self.arch = arch;
        self.oversampled = oversampled;
        self
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Samples whose truth is class `c`.
    pub fn support(&self, c: usize) -> usize {
        self.confusion[c].iter().sum()
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        self.task.class_names()
    }
}

/// Predicts every sample in evaluation mode (dropout off).
pub fn evaluate(net: &Network, ds: &LabeledDataset, dataset_name: &str) -> Result<EvalReport> {
    let t = ds.task().num_classes();
    if net.num_classes() != t {
        return Err(Error::ClassCountMismatch {
            net: net.num_classes(),
            task: t,
        });
    }
    let xs: Vec<&[f64]> = ds.samples().iter().map(|s| &s.values[..]).collect();
    let predicted: Vec<usize> = net.predict_many(&xs)?.into_iter().map(|p| p.label).collect();
    let truth: Vec<usize> = ds.samples().iter().map(|s| s.label as usize).collect();
    EvalReport::from_predictions(ds.task(), dataset_name, &truth, &predicted)
}

/// Unweighted mean of the reports' overall accuracies.
pub fn independent_average(reports: &[EvalReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(invalid("independent average needs at least one report"));
    }
    Ok(reports.iter().map(|r| r.overall_acc).sum::<f64>() / reports.len() as f64)
}

/// Integer percent, half-up. Values within 1e-9 below a half are treated
/// as the half, so means like (0.56 + 0.69) / 2 print 63.
pub fn percent(acc: f64) -> String {
    format!("{}", (acc * 100.0 + 0.5 + 1e-9).floor() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableLayout {
    /// Columns: task (5-way, 2-way, oversampled 2-way) x architecture.
    OccupancyTable,
    /// One block per report: a title line and `Avg .. (Large: .., Small: ..)`.
    SizeTable,
}

const OCC_COLUMNS: [(Task, bool, &str); 3] = [
    (Task::Occupancy5, false, "5-way"),
    (Task::Occupancy2, false, "2-way"),
    (Task::Occupancy2, true, "2-way IR=1"),
];
const ARCHS: [Arch; 2] = [Arch::OneD, Arch::TwoD];
const CELL: usize = 6;
const LABEL: usize = 16;

fn cell_value(reports: &[&EvalReport]) -> String {
    if reports.is_empty() {
        MISSING.to_string()
    } else {
        let mean = reports.iter().map(|r| r.overall_acc).sum::<f64>() / reports.len() as f64;
        percent(mean)
    }
}

fn pad(s: &str, width: usize) -> String {
    let n = s.chars().count();
    format!("{s}{}", " ".repeat(width.saturating_sub(n)))
}

fn occupancy_table(reports: &[EvalReport]) -> String {
    let in_cell = |r: &EvalReport, col: usize, arch: Arch| {
        let (task, over, _) = OCC_COLUMNS[col];
        r.task == task && r.oversampled == over && r.arch == Some(arch)
    };
    let mut independent: Vec<&str> = Vec::new();
    for r in reports.iter().filter(|r| r.role == Role::Independent) {
        if !independent.contains(&r.dataset_name.as_str()) {
            independent.push(&r.dataset_name);
        }
    }

    let mut out = String::new();
    let mut line = pad("", LABEL);
    for (_, _, name) in OCC_COLUMNS {
        line.push_str(&pad(name, 2 * CELL));
    }
    let _ = writeln!(out, "{}", line.trim_end());
    let mut line = pad("", LABEL);
    for _ in OCC_COLUMNS {
        for a in ARCHS {
            line.push_str(&pad(&a.to_string().to_uppercase(), CELL));
        }
    }
    let _ = writeln!(out, "{}", line.trim_end());

    // A cell holding several reports shows their unweighted mean.
    let mut row = |label: &str, pick: &dyn Fn(&EvalReport) -> bool| {
        let mut line = pad(label, LABEL);
        for col in 0..OCC_COLUMNS.len() {
            for a in ARCHS {
                let hits: Vec<&EvalReport> = reports.iter().filter(|r| in_cell(r, col, a) && pick(r)).collect();
                line.push_str(&pad(&cell_value(&hits), CELL));
            }
        }
        let _ = writeln!(out, "{}", line.trim_end());
    };
    row("Acc (test)", &|r| r.role == Role::Test);
    for name in &independent {
        row(name, &|r| r.role == Role::Independent && r.dataset_name == *name);
    }
    row("Ind. Avg", &|r| r.role == Role::Independent);
    out
}

/// `Avg 92 (Large: 89, Small: 94)`: classes listed by name.
pub fn size_line(r: &EvalReport) -> String {
    let mut classes: Vec<(&str, Option<f64>)> = r.class_names().iter().copied().zip(r.per_class_acc.iter().copied()).collect();
    classes.sort_by(|a, b| a.0.cmp(b.0));
    let parts: Vec<String> = classes
        .iter()
        .map(|(n, a)| format!("{n}: {}", a.map_or(MISSING.to_string(), percent)))
        .collect();
    format!("Avg {} ({})", percent(r.overall_acc), parts.join(", "))
}

fn size_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let sizes: Vec<&EvalReport> = reports.iter().filter(|r| r.task == Task::Size2).collect();
    if sizes.is_empty() {
        let _ = writeln!(out, "Size classification");
        let _ = writeln!(out, "Avg {MISSING} (Large: {MISSING}, Small: {MISSING})");
        return out;
    }
    for r in sizes {
        let arch = r.arch.map_or(MISSING.to_string(), |a| a.to_string().to_uppercase());
        let role = match r.role {
            Role::Test => "test",
            Role::Independent => "independent",
        };
        let _ = writeln!(out, "Size classification, {arch}, {role}: {}", r.dataset_name);
        let _ = writeln!(out, "{}", size_line(r));
    }
    out
}

pub fn render_table(reports: &[EvalReport], layout: TableLayout) -> String {
    match layout {
        TableLayout::OccupancyTable => occupancy_table(reports),
        TableLayout::SizeTable => size_table(reports),
    }
}

/// `report.csv`: one row per class plus an `all` row, full precision.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("task,dataset,class,accuracy,support\n");
    for r in reports {
        let _ = writeln!(out, "{},{},all,{},{}", r.task, csv_field(&r.dataset_name), r.overall_acc, r.total());
        for (c, name) in r.class_names().iter().enumerate() {
            let acc = r.per_class_acc[c].map_or("n/a".to_string(), |a| a.to_string());
            let _ = writeln!(out, "{},{},{name},{acc},{}", r.task, csv_field(&r.dataset_name), r.support(c));
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Rows of a parsed `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub task: String,
    pub dataset: String,
    pub class: String,
    pub accuracy: Option<f64>,
    pub support: usize,
}

/// Parses what `reports_csv` writes (dataset names without quotes).
pub fn parse_reports_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("task,dataset,class,accuracy,support") {
        return Err(Error::Corrupt("report.csv header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Corrupt(format!("report.csv line {}: {l:?}", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(CsvRow {
                task: f[0].to_string(),
                dataset: f[1].to_string(),
                class: f[2].to_string(),
                accuracy: if f[3] == "n/a" {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad())?)
                },
                support: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
