//! The task x language grid, per-cell dataset sizes and TLP selection.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where a task sits in the representation hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Token-level labels (POS/NER-like).
    Shallow,
    /// One label per sequence (QA/NLI/PA-like).
    Deep,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Shallow => f.write_str("shallow"),
            TaskKind::Deep => f.write_str("deep"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shallow" => Ok(TaskKind::Shallow),
            "deep" => Ok(TaskKind::Deep),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// What the task head predicts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Output {
    Classes(usize),
    /// Real-valued sequence target; scored as accuracy within `tolerance`.
    Scalar { tolerance: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Accuracy,
    F1,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Accuracy => f.write_str("accuracy"),
            MetricKind::F1 => f.write_str("f1"),
        }
    }
}

impl FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "f1" => Ok(MetricKind::F1),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskId {
    pub name: String,
    pub kind: TaskKind,
    pub output: Output,
    pub metric: MetricKind,
}

impl TaskId {
    pub fn shallow(name: &str, classes: usize) -> Self {
        TaskId {
            name: name.to_string(),
            kind: TaskKind::Shallow,
            output: Output::Classes(classes),
            metric: MetricKind::Accuracy,
        }
    }

    pub fn deep(name: &str, classes: usize, metric: MetricKind) -> Self {
        TaskId {
            name: name.to_string(),
            kind: TaskKind::Deep,
            output: Output::Classes(classes),
            metric,
        }
    }

    pub fn deep_scalar(name: &str, tolerance: f64) -> Self {
        TaskId {
            name: name.to_string(),
            kind: TaskKind::Deep,
            output: Output::Scalar { tolerance },
            metric: MetricKind::Accuracy,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self.output {
            Output::Classes(n) => Some(n),
            Output::Scalar { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LanguageId(pub String);

impl LanguageId {
    pub fn new(name: &str) -> Self {
        LanguageId(name.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One available cell. `task` and `language` index the owning grid's lists;
/// `index` is the position in the grid's linearisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TlpId {
    pub index: usize,
    pub task: usize,
    pub language: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SelectionMode {
    LangLimited(String),
    TaskLimited(String),
    All,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMode::LangLimited(l) => write!(f, "lang:{l}"),
            SelectionMode::TaskLimited(t) => write!(f, "task:{t}"),
            SelectionMode::All => f.write_str("all"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "all" => Ok(SelectionMode::All),
            Some(("lang", l)) if !l.is_empty() => Ok(SelectionMode::LangLimited(l.to_string())),
            Some(("task", t)) if !t.is_empty() => Ok(SelectionMode::TaskLimited(t.to_string())),
            _ => Err(format!("expected `all`, `lang:<language>` or `task:<task>`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TlpSelection {
    pub mode: SelectionMode,
    pub resolved: Vec<TlpId>,
}

impl TlpSelection {
    pub fn contains(&self, tlp: TlpId) -> bool {
        self.resolved.contains(&tlp)
    }

    pub fn len(&self) -> usize {
        self.resolved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolved.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TlpGrid {
    tasks: Vec<TaskId>,
    languages: Vec<LanguageId>,
    availability: Vec<Vec<bool>>,
    tlps: Vec<TlpId>,
    sizes: Vec<usize>,
    total: usize,
}

impl TlpGrid {
    /// Builds a grid; cells are linearised row-major (tasks outer,
    /// languages inner). `sizes` must be zero exactly where a cell is absent.
    pub fn new(
        tasks: Vec<TaskId>,
        languages: Vec<LanguageId>,
        availability: Vec<Vec<bool>>,
        sizes: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if availability.len() != tasks.len() || sizes.len() != tasks.len() {
            return Err(Error::Grid(format!(
                "{} tasks but {} availability rows and {} size rows",
                tasks.len(),
                availability.len(),
                sizes.len()
            )));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Grid(format!("duplicate task `{}`", t.name)));
            }
            if t.kind == TaskKind::Shallow && t.classes().is_none() {
                return Err(Error::Grid(format!("shallow task `{}` needs class labels", t.name)));
            }
            if matches!(t.classes(), Some(n) if n < 2) {
                return Err(Error::Grid(format!("task `{}` needs at least 2 classes", t.name)));
            }
        }
        for (i, l) in languages.iter().enumerate() {
            if languages[..i].contains(l) {
                return Err(Error::Grid(format!("duplicate language `{l}`")));
            }
        }

        let mut tlps = Vec::new();
        let mut flat_sizes = Vec::new();
        for (ti, (avail_row, size_row)) in availability.iter().zip(&sizes).enumerate() {
            if avail_row.len() != languages.len() || size_row.len() != languages.len() {
                return Err(Error::Grid(format!(
                    "row for task `{}` has {} / {} entries, expected {}",
                    tasks[ti].name,
                    avail_row.len(),
                    size_row.len(),
                    languages.len()
                )));
            }
            for (li, (&available, &size)) in avail_row.iter().zip(size_row).enumerate() {
                let cell = format!("{}.{}", tasks[ti].name, languages[li]);
                match (available, size) {
                    (true, 0) => return Err(Error::Grid(format!("nonpositive size for {cell}"))),
                    (false, s) if s != 0 => {
                        return Err(Error::Grid(format!("size given for missing cell {cell}")))
                    }
                    (true, s) => {
                        tlps.push(TlpId {
                            index: tlps.len(),
                            task: ti,
                            language: li,
                        });
                        flat_sizes.push(s);
                    }
                    (false, _) => {}
                }
            }
        }
        if tlps.is_empty() {
            return Err(Error::Grid("no available cells".into()));
        }
        let total = flat_sizes.iter().sum();
        Ok(TlpGrid {
            tasks,
            languages,
            availability,
            tlps,
            sizes: flat_sizes,
            total,
        })
    }

    /// Every task available in every language, all with the same size.
    pub fn dense(tasks: Vec<TaskId>, languages: Vec<LanguageId>, size: usize) -> Result<Self> {
        let availability = vec![vec![true; languages.len()]; tasks.len()];
        let sizes = vec![vec![size; languages.len()]; tasks.len()];
        Self::new(tasks, languages, availability, sizes)
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn languages(&self) -> &[LanguageId] {
        &self.languages
    }

    pub fn tlps(&self) -> &[TlpId] {
        &self.tlps
    }

    pub fn len(&self) -> usize {
        self.tlps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tlps.is_empty()
    }

    pub fn is_available(&self, task: usize, language: usize) -> bool {
        self.availability
            .get(task)
            .and_then(|row| row.get(language))
            .copied()
            .unwrap_or(false)
    }

    pub fn tlp(&self, index: usize) -> Result<TlpId> {
        self.tlps.get(index).copied().ok_or(Error::TlpIndex {
            index,
            len: self.tlps.len(),
        })
    }

    pub fn task(&self, tlp: TlpId) -> &TaskId {
        &self.tasks[tlp.task]
    }

    pub fn language(&self, tlp: TlpId) -> &LanguageId {
        &self.languages[tlp.language]
    }

    /// `"<task>.<language>"`, unique within the grid.
    pub fn label(&self, tlp: TlpId) -> String {
        format!("{}.{}", self.tasks[tlp.task].name, self.languages[tlp.language])
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn language_index(&self, name: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l.0 == name)
            .ok_or_else(|| Error::UnknownLanguage(name.to_string()))
    }

    pub fn find(&self, task: &str, language: &str) -> Result<TlpId> {
        let t = self.task_index(task)?;
        let l = self.language_index(language)?;
        self.tlps
            .iter()
            .copied()
            .find(|x| x.task == t && x.language == l)
            .ok_or_else(|| Error::Grid(format!("cell {task}.{language} is not available")))
    }

    pub fn find_label(&self, label: &str) -> Result<TlpId> {
        let (task, language) = label
            .split_once('.')
            .ok_or_else(|| Error::Grid(format!("TLP label `{label}` is not <task>.<language>")))?;
        self.find(task, language)
    }

    pub fn size(&self, tlp: TlpId) -> usize {
        self.sizes[tlp.index]
    }

    /// Training-set size of TLP `i` over the total across the grid.
    pub fn dataset_fraction(&self, i: usize) -> Result<f64> {
        let tlp = self.tlp(i)?;
        Ok(self.sizes[tlp.index] as f64 / self.total as f64)
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.sizes
            .iter()
            .map(|&s| s as f64 / self.total as f64)
            .collect()
    }

    /// Fractions restricted to (and renormalised over) a subset of TLPs.
    pub fn fractions_of(&self, tlps: &[TlpId]) -> Vec<f64> {
        let total: usize = tlps.iter().map(|t| self.sizes[t.index]).sum();
        tlps.iter()
            .map(|t| self.sizes[t.index] as f64 / total as f64)
            .collect()
    }

    pub fn select(&self, mode: &SelectionMode) -> Result<TlpSelection> {
        let resolved: Vec<TlpId> = match mode {
            SelectionMode::All => self.tlps.clone(),
            SelectionMode::LangLimited(lang) => {
                let l = self.language_index(lang)?;
                self.tlps.iter().copied().filter(|t| t.language == l).collect()
            }
            SelectionMode::TaskLimited(task) => {
                let ti = self.task_index(task)?;
                self.tlps.iter().copied().filter(|t| t.task == ti).collect()
            }
        };
        if resolved.is_empty() {
            return Err(Error::EmptySelection(mode.to_string()));
        }
        Ok(TlpSelection {
            mode: mode.clone(),
            resolved,
        })
    }
}

/// Training-set sizes of the five-task, six-language benchmark matrix
/// (rows NLI, QA, POS, NER, PA; columns en, hi, es, de, fr, zh), in examples.
/// `None` marks a cell with no dataset.
pub const BENCHMARK_SIZES: [[Option<u32>; 6]; 5] = [
    [Some(392_000), None, Some(392_000), Some(392_000), Some(392_000), None],
    [Some(88_000), Some(82_400), Some(81_800), Some(80_000), None, None],
    [Some(21_200), Some(13_300), Some(28_400), Some(166_000), None, Some(7_900)],
    [Some(20_000), Some(5_000), Some(20_000), Some(20_000), Some(20_000), Some(20_000)],
    [Some(49_400), None, Some(49_400), Some(49_400), Some(49_400), Some(49_400)],
];

pub const BENCHMARK_LANGUAGES: [&str; 6] = ["en", "hi", "es", "de", "fr", "zh"];

/// Task declarations matching the benchmark rows: NLI (3-way), QA
/// (binary, F1), POS and NER (token-level), PA (binary).
pub fn benchmark_tasks(shallow_classes: usize) -> Vec<TaskId> {
    vec![
        TaskId::deep("NLI", 3, MetricKind::Accuracy),
        TaskId::deep("QA", 2, MetricKind::F1),
        TaskId::shallow("POS", shallow_classes),
        TaskId::shallow("NER", shallow_classes),
        TaskId::deep("PA", 2, MetricKind::Accuracy),
    ]
}

/// The benchmark-shaped grid with sizes divided by `scale` (rounded, at
/// least one example per available cell).
pub fn benchmark_grid(tasks: Vec<TaskId>, scale: f64) -> Result<TlpGrid> {
    if tasks.len() != BENCHMARK_SIZES.len() {
        return Err(Error::Grid(format!(
            "benchmark grid has {} task rows, got {} task declarations",
            BENCHMARK_SIZES.len(),
            tasks.len()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::Grid(format!("scale must be positive, got {scale}")));
    }
    let availability = BENCHMARK_SIZES
        .iter()
        .map(|row| row.iter().map(Option::is_some).collect())
        .collect();
    let sizes = BENCHMARK_SIZES
        .iter()
        .map(|row| {
            row.iter()
                .map(|s| s.map_or(0, |n| ((n as f64 / scale).round() as usize).max(1)))
                .collect()
        })
        .collect();
    let languages = BENCHMARK_LANGUAGES.iter().map(|l| LanguageId::new(l)).collect();
    TlpGrid::new(tasks, languages, availability, sizes)
}
