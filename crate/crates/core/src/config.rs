//! Flat `section.key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a default,
//! unknown keys are rejected and parse errors name the offending key.
//! [`ExperimentConfig::to_text`] writes the canonical form, which is also
//! what the run hash is computed over.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, MtlConfig};
use crate::grid::{benchmark_grid, benchmark_tasks, LanguageId, MetricKind, SelectionMode, TaskId, TaskKind, TlpGrid};
use crate::meta::MetaConfig;
use crate::model::{Activation, InnerOptimizer, InnerOptimizerConfig};
use crate::sampling::{SamplingStrategy, Temperature};
use crate::synth::GeneratorSpec;

/// The configuration bundled with the library.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.conf");

#[derive(Clone, Debug, PartialEq)]
pub enum GridDecl {
    /// The five-task, six-language benchmark matrix scaled down by `scale`.
    Benchmark { scale: f64, shallow_classes: usize },
    Custom {
        tasks: Vec<TaskId>,
        languages: Vec<String>,
        /// Row per task; `None` marks a missing cell.
        sizes: Vec<Vec<Option<usize>>>,
    },
}

impl GridDecl {
    pub fn build(&self) -> Result<TlpGrid> {
        match self {
            GridDecl::Benchmark { scale, shallow_classes } => benchmark_grid(benchmark_tasks(*shallow_classes), *scale),
            GridDecl::Custom { tasks, languages, sizes } => TlpGrid::new(
                tasks.clone(),
                languages.iter().map(|l| LanguageId::new(l)).collect(),
                sizes.iter().map(|r| r.iter().map(Option::is_some).collect()).collect(),
                sizes.iter().map(|r| r.iter().map(|s| s.unwrap_or(0)).collect()).collect(),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Meta,
    Baseline,
    Mtl,
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "meta" => Ok(ModelKind::Meta),
            "baseline" => Ok(ModelKind::Baseline),
            "mtl" => Ok(ModelKind::Mtl),
            other => Err(format!("expected meta, baseline or mtl, got `{other}`")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Meta => "meta",
            ModelKind::Baseline => "baseline",
            ModelKind::Mtl => "mtl",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridDecl,
    pub external_languages: Vec<String>,
    pub generator: GeneratorSpec,
    pub widths: [usize; 2],
    pub head_hidden: usize,
    pub activation: Activation,
    pub model: ModelKind,
    pub selection: SelectionMode,
    pub threads: usize,
    pub zero_shot: bool,
    pub meta: MetaConfig,
    /// `a`-`d` under the mdds sampler.
    pub mdds_setting: Option<String>,
    /// `TASK.lang` the mdds setting is built around.
    pub mdds_target: Option<String>,
    pub finetune: FinetuneConfig,
    pub mtl: MtlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse(DEFAULT_CONFIG).expect("bundled config parses")
    }
}

fn builtin() -> ExperimentConfig {
    ExperimentConfig {
        seed: 0,
        grid: GridDecl::Benchmark {
            scale: 1000.0,
            shallow_classes: 4,
        },
        external_languages: vec!["ja".into(), "ru".into(), "ar".into()],
        generator: GeneratorSpec::default(),
        widths: [24, 24],
        head_hidden: 16,
        activation: Activation::Tanh,
        model: ModelKind::Meta,
        selection: SelectionMode::All,
        threads: 0,
        zero_shot: true,
        meta: MetaConfig::default(),
        mdds_setting: None,
        mdds_target: None,
        finetune: FinetuneConfig::default(),
        mtl: MtlConfig::default(),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

/// `NAME:shallow:CLASSES`, `NAME:deep:CLASSES:METRIC` or
/// `NAME:scalar:TOLERANCE`.
fn parse_task(key: &str, s: &str) -> Result<TaskId> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    let bad = || Error::config(key, format!("bad task declaration `{s}`"));
    match parts.as_slice() {
        [name, "shallow", n] => Ok(TaskId::shallow(name, n.parse().map_err(|_| bad())?)),
        [name, "deep", n, metric] => Ok(TaskId::deep(
            name,
            n.parse().map_err(|_| bad())?,
            metric.parse::<MetricKind>().map_err(|_| bad())?,
        )),
        [name, "scalar", tol] => Ok(TaskId::deep_scalar(name, tol.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

fn task_text(t: &TaskId) -> String {
    match (t.kind, t.output) {
        (TaskKind::Shallow, crate::grid::Output::Classes(n)) => format!("{}:shallow:{n}", t.name),
        (_, crate::grid::Output::Classes(n)) => format!("{}:deep:{n}:{}", t.name, t.metric),
        (_, crate::grid::Output::Scalar { tolerance }) => format!("{}:scalar:{tolerance}", t.name),
    }
}

/// Rows separated by `;`, cells by `,`, `-` for a missing cell.
fn parse_sizes(key: &str, s: &str) -> Result<Vec<Vec<Option<usize>>>> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|c| match c.trim() {
                    "-" => Ok(None),
                    v => parse_value::<usize>(key, v).map(Some),
                })
                .collect()
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

struct Pending {
    preset: String,
    scale: f64,
    shallow_classes: usize,
    tasks: Vec<TaskId>,
    languages: Vec<String>,
    sizes: Vec<Vec<Option<usize>>>,
    sampler: String,
    tau: Temperature,
    psi_lr: f64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&Self::pairs(text)?)
    }

    fn pairs(text: &str) -> Result<BTreeMap<String, String>> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key = value, got `{line}`")))?;
            let k = k.trim().to_string();
            if pairs.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(k, "set more than once"));
            }
        }
        Ok(pairs)
    }

    /// This configuration with `key = value` lines from `text` replacing
    /// the corresponding settings.
    pub fn with_overrides(&self, text: &str) -> Result<Self> {
        let mut pairs = Self::pairs(&self.to_text())?;
        pairs.extend(Self::pairs(text)?);
        Self::from_pairs(&pairs)
    }

    /// Applies `key = value` overrides on top of the built-in defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = builtin();
        let mut p = Pending {
            preset: "benchmark".into(),
            scale: 1000.0,
            shallow_classes: 4,
            tasks: Vec::new(),
            languages: Vec::new(),
            sizes: Vec::new(),
            sampler: "temperature".into(),
            tau: Temperature::Finite(5.0),
            psi_lr: 0.1,
        };
        for (key, value) in pairs {
            c.set(&mut p, key, value)?;
        }
        c.grid = match p.preset.as_str() {
            "benchmark" => GridDecl::Benchmark {
                scale: p.scale,
                shallow_classes: p.shallow_classes,
            },
            "custom" => GridDecl::Custom {
                tasks: p.tasks,
                languages: p.languages,
                sizes: p.sizes,
            },
            other => return Err(Error::config("grid.preset", format!("expected benchmark or custom, got `{other}`"))),
        };
        c.meta.sampler = match p.sampler.as_str() {
            "temperature" => SamplingStrategy::Temperature(p.tau),
            "mdds" => SamplingStrategy::MultiDds { psi_lr: p.psi_lr },
            other => return Err(Error::config("meta.sampler", format!("expected temperature or mdds, got `{other}`"))),
        };
        c.meta.seed = c.seed;
        c.finetune.seed = c.seed;
        c.mtl.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, p: &mut Pending, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse_value(k, v)?,
            "grid.preset" => p.preset = v.to_string(),
            "grid.scale" => p.scale = parse_value(k, v)?,
            "grid.shallow_classes" => p.shallow_classes = parse_value(k, v)?,
            "grid.tasks" => p.tasks = v.split(',').map(|t| parse_task(k, t.trim())).collect::<Result<_>>()?,
            "grid.languages" => p.languages = parse_list(k, v)?,
            "grid.sizes" => p.sizes = parse_sizes(k, v)?,
            "grid.external" => self.external_languages = parse_list(k, v)?,
            "data.d_in" => self.generator.d_in = parse_value(k, v)?,
            "data.latent_dim" => self.generator.latent_dim = parse_value(k, v)?,
            "data.shallow_len" => self.generator.shallow_len = parse_value(k, v)?,
            "data.deep_len" => self.generator.deep_len = parse_value(k, v)?,
            "data.noise" => self.generator.noise = parse_value(k, v)?,
            "data.token_spread" => self.generator.token_spread = parse_value(k, v)?,
            "data.shift_scale" => self.generator.shift_scale = parse_value(k, v)?,
            "data.dev_size" => self.generator.dev_size = parse_value(k, v)?,
            "data.test_size" => self.generator.test_size = parse_value(k, v)?,
            "data.pivot" => self.generator.pivot = v.to_string(),
            "model.widths" => {
                let w: Vec<usize> = parse_list(k, v)?;
                self.widths = w
                    .try_into()
                    .map_err(|_| Error::config(k, "expected exactly two widths"))?;
            }
            "model.head_hidden" => self.head_hidden = parse_value(k, v)?,
            "model.activation" => self.activation = parse_value(k, v)?,
            "run.model" => self.model = parse_value(k, v)?,
            "run.selection" => self.selection = parse_value(k, v)?,
            "run.threads" => self.threads = parse_value(k, v)?,
            "run.zero_shot" => self.zero_shot = parse_bool(k, v)?,
            "meta.m" => self.meta.m = parse_value(k, v)?,
            "meta.k" => self.meta.k = parse_value(k, v)?,
            "meta.beta" => self.meta.beta = parse_value(k, v)?,
            "meta.epochs" => self.meta.epochs = parse_value(k, v)?,
            "meta.iterations_per_epoch" => {
                self.meta.iterations_per_epoch = match v {
                    "auto" => None,
                    n => Some(parse_value(k, n)?),
                }
            }
            "meta.batch_size" => self.meta.batch_size = parse_value(k, v)?,
            "meta.sampler" => p.sampler = v.to_string(),
            "meta.tau" => p.tau = parse_value(k, v)?,
            "meta.psi_lr" => p.psi_lr = parse_value(k, v)?,
            "meta.mdds_setting" => self.mdds_setting = (v != "none").then(|| v.to_string()),
            "meta.mdds_target" => self.mdds_target = (v != "none").then(|| v.to_string()),
            "inner.optimizer" => self.meta.inner.kind = parse_value::<InnerOptimizer>(k, v)?,
            "inner.lr" => self.meta.inner.lr = parse_value(k, v)?,
            "inner.weight_decay" => self.meta.inner.weight_decay = parse_value(k, v)?,
            "inner.beta1" => self.meta.inner.beta1 = parse_value(k, v)?,
            "inner.beta2" => self.meta.inner.beta2 = parse_value(k, v)?,
            "inner.eps" => self.meta.inner.eps = parse_value(k, v)?,
            "inner.dropout" => self.meta.inner.dropout = parse_value(k, v)?,
            "finetune.lrs" => {
                let lrs: Vec<f64> = parse_list(k, v)?;
                self.finetune.lrs = lrs
                    .try_into()
                    .map_err(|_| Error::config(k, "expected exactly two learning rates"))?;
            }
            "finetune.epochs_shallow" => self.finetune.epochs_shallow = parse_value(k, v)?,
            "finetune.epochs_deep" => self.finetune.epochs_deep = parse_value(k, v)?,
            "finetune.task_epochs" => {
                self.finetune.task_epochs = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        let (t, n) = s
                            .split_once(':')
                            .ok_or_else(|| Error::config(k, format!("expected TASK:EPOCHS, got `{s}`")))?;
                        Ok((t.trim().to_string(), parse_value(k, n.trim())?))
                    })
                    .collect::<Result<_>>()?;
            }
            "finetune.epoch_scale" => self.finetune.epoch_scale = parse_value(k, v)?,
            "finetune.batch_size" => self.finetune.batch_size = parse_value(k, v)?,
            "finetune.weight_decay" => self.finetune.optimizer.weight_decay = parse_value(k, v)?,
            "finetune.dropout" => self.finetune.optimizer.dropout = parse_value(k, v)?,
            "mtl.lr" => self.mtl.lr = parse_value(k, v)?,
            "mtl.epochs" => self.mtl.epochs = parse_value(k, v)?,
            "mtl.batch_size" => self.mtl.batch_size = parse_value(k, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Cross-checks that need more than one key.
    pub fn validate(&self) -> Result<()> {
        self.generator
            .validate()
            .map_err(|e| Error::config("data", e.to_string()))?;
        let grid = self.grid.build().map_err(|e| Error::config("grid", e.to_string()))?;
        grid.select(&self.selection)
            .map_err(|e| Error::config("run.selection", e.to_string()))?;
        for l in &self.external_languages {
            if grid.languages().iter().any(|g| g.as_str() == l) {
                return Err(Error::config("grid.external", format!("`{l}` is already a grid language")));
            }
        }
        if self.widths.contains(&0) || self.head_hidden == 0 {
            return Err(Error::config("model.widths", "widths must be positive"));
        }
        let mdds = matches!(self.meta.sampler, SamplingStrategy::MultiDds { .. });
        match (mdds, &self.mdds_setting, &self.mdds_target) {
            (true, Some(s), Some(t)) => {
                let target = grid
                    .find_label(t)
                    .map_err(|e| Error::config("meta.mdds_target", e.to_string()))?;
                crate::meta::resolve_mdds_setting(s, &grid, target)
                    .map_err(|e| Error::config("meta.mdds_setting", e.to_string()))?;
            }
            (true, _, _) => {
                return Err(Error::config(
                    "meta.mdds_setting",
                    "the mdds sampler needs meta.mdds_setting and meta.mdds_target",
                ))
            }
            (false, None, None) => {}
            (false, _, _) => {
                return Err(Error::config("meta.mdds_setting", "only valid with meta.sampler = mdds"));
            }
        }
        let mut meta = self.meta.clone();
        if mdds {
            meta.dev = Some(crate::meta::DevBinding::LangLimited(String::new()));
        }
        meta.validate().map_err(|e| Error::config("meta", e.to_string()))?;
        self.finetune
            .validate()
            .map_err(|e| Error::config("finetune", e.to_string()))?;
        if !(self.mtl.lr > 0.0) || self.mtl.batch_size == 0 {
            return Err(Error::config("mtl", "learning rate and batch size must be positive"));
        }
        Ok(())
    }

    /// Canonical `key = value` text with every key spelled out.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        match &self.grid {
            GridDecl::Benchmark { scale, shallow_classes } => {
                put("grid.preset", "benchmark".into());
                put("grid.scale", scale.to_string());
                put("grid.shallow_classes", shallow_classes.to_string());
            }
            GridDecl::Custom { tasks, languages, sizes } => {
                put("grid.preset", "custom".into());
                put("grid.tasks", tasks.iter().map(task_text).collect::<Vec<_>>().join(","));
                put("grid.languages", join(languages));
                let rows: Vec<String> = sizes
                    .iter()
                    .map(|r| {
                        r.iter()
                            .map(|c| c.map_or("-".to_string(), |n| n.to_string()))
                            .collect::<Vec<_>>()
                            .join(",")
                    })
                    .collect();
                put("grid.sizes", rows.join(";"));
            }
        }
        put("grid.external", join(&self.external_languages));
        let g = &self.generator;
        put("data.d_in", g.d_in.to_string());
        put("data.latent_dim", g.latent_dim.to_string());
        put("data.shallow_len", g.shallow_len.to_string());
        put("data.deep_len", g.deep_len.to_string());
        put("data.noise", g.noise.to_string());
        put("data.token_spread", g.token_spread.to_string());
        put("data.shift_scale", g.shift_scale.to_string());
        put("data.dev_size", g.dev_size.to_string());
        put("data.test_size", g.test_size.to_string());
        put("data.pivot", g.pivot.clone());
        put("model.widths", join(&self.widths));
        put("model.head_hidden", self.head_hidden.to_string());
        put("model.activation", self.activation.to_string());
        put("run.model", self.model.to_string());
        put("run.selection", self.selection.to_string());
        put("run.threads", self.threads.to_string());
        put("run.zero_shot", self.zero_shot.to_string());
        let m = &self.meta;
        put("meta.m", m.m.to_string());
        put("meta.k", m.k.to_string());
        put("meta.beta", m.beta.to_string());
        put("meta.epochs", m.epochs.to_string());
        put(
            "meta.iterations_per_epoch",
            m.iterations_per_epoch.map_or("auto".into(), |n| n.to_string()),
        );
        put("meta.batch_size", m.batch_size.to_string());
        match m.sampler {
            SamplingStrategy::Temperature(t) => {
                put("meta.sampler", "temperature".into());
                put("meta.tau", t.to_string());
            }
            SamplingStrategy::MultiDds { psi_lr } => {
                put("meta.sampler", "mdds".into());
                put("meta.psi_lr", psi_lr.to_string());
            }
        }
        put("meta.mdds_setting", self.mdds_setting.clone().unwrap_or("none".into()));
        put("meta.mdds_target", self.mdds_target.clone().unwrap_or("none".into()));
        let i: &InnerOptimizerConfig = &m.inner;
        put("inner.optimizer", i.kind.to_string());
        put("inner.lr", i.lr.to_string());
        put("inner.weight_decay", i.weight_decay.to_string());
        put("inner.beta1", i.beta1.to_string());
        put("inner.beta2", i.beta2.to_string());
        put("inner.eps", i.eps.to_string());
        put("inner.dropout", i.dropout.to_string());
        let f = &self.finetune;
        put("finetune.lrs", join(&f.lrs));
        put("finetune.epochs_shallow", f.epochs_shallow.to_string());
        put("finetune.epochs_deep", f.epochs_deep.to_string());
        put(
            "finetune.task_epochs",
            f.task_epochs
                .iter()
                .map(|(t, n)| format!("{t}:{n}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        put("finetune.epoch_scale", f.epoch_scale.to_string());
        put("finetune.batch_size", f.batch_size.to_string());
        put("finetune.weight_decay", f.optimizer.weight_decay.to_string());
        put("finetune.dropout", f.optimizer.dropout.to_string());
        put("mtl.lr", self.mtl.lr.to_string());
        put("mtl.epochs", self.mtl.epochs.to_string());
        put("mtl.batch_size", self.mtl.batch_size.to_string());
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
