//! End-to-end runs: data generation, training, fine-tuning, evaluation and
//! the CSV artifacts that record them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::{Error, Result};
use crate::finetune::{evaluate, finetune, train_baseline, train_mtl_baseline, zero_shot_eval, EvalReport, TlpRef};
use crate::grid::{LanguageId, MetricKind, TlpGrid, TlpId};
use crate::meta::{meta_train, resolve_mdds_setting, MetaResult};
use crate::model::{ModelSpec, Network, ParameterVector};
use crate::sampling::{temperature_probs, SamplingStrategy, Temperature};
use crate::store::DataStore;
use crate::synth::{generate_grid, Split};

/// Version of every CSV layout written here.
pub const SCHEMA_VERSION: u32 = 1;

/// Generated data, model and initial parameters for one configuration.
pub struct Setup {
    pub config: ExperimentConfig,
    pub grid: TlpGrid,
    /// Every grid task crossed with the external languages.
    pub external: Option<TlpGrid>,
    pub store: DataStore,
    pub network: Network,
    pub init: ParameterVector,
}

impl Setup {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid.build()?;
        let mut datasets = generate_grid(&grid, &config.generator, config.seed)?;
        let external = if config.external_languages.is_empty() {
            None
        } else {
            let ext = TlpGrid::dense(
                grid.tasks().to_vec(),
                config.external_languages.iter().map(|l| LanguageId::new(l)).collect(),
                config.generator.dev_size,
            )?;
            datasets.extend(generate_grid(&ext, &config.generator, config.seed)?);
            Some(ext)
        };
        let spec = ModelSpec {
            activation: config.activation,
            ..ModelSpec::for_tasks(config.generator.d_in, config.widths, config.head_hidden, grid.tasks())
        };
        let network = Network::new(spec)?;
        let init = network.init_params(config.seed);
        Ok(Setup {
            config,
            grid,
            external,
            store: DataStore::new(datasets),
            network,
            init,
        })
    }

    /// Resolves a label of either the training grid or the external grid.
    pub fn tlp_ref<'a>(&'a self, label: &'a str) -> Result<TlpRef<'a>> {
        let (grid, tlp) = match self.grid.find_label(label) {
            Ok(t) => (&self.grid, t),
            Err(e) => match &self.external {
                Some(ext) => (ext, ext.find_label(label).map_err(|_| e)?),
                None => return Err(e),
            },
        };
        TlpRef::new(&self.network, label, grid.task(tlp))
    }

    /// The training selection, with the mdds setting applied when present.
    pub fn meta_plan(&self) -> Result<(crate::meta::MetaConfig, String)> {
        let cfg = &self.config;
        let mut meta = cfg.meta.clone();
        meta.selection = cfg.selection.clone();
        meta.parallel = cfg.threads != 1;
        let mut name = "meta".to_string();
        if let (Some(setting), Some(target)) = (&cfg.mdds_setting, &cfg.mdds_target) {
            let s = resolve_mdds_setting(setting, &self.grid, self.grid.find_label(target)?)?;
            meta.selection = s.train;
            meta.dev = Some(s.dev);
            name = s.name.to_string();
        }
        Ok((meta, name))
    }

    pub fn selection(&self) -> Result<Vec<TlpId>> {
        Ok(self.grid.select(&self.meta_plan()?.0.selection)?.resolved)
    }

    /// External TLPs whose task is trained by the selection.
    pub fn zero_shot_targets(&self, selection: &[TlpId]) -> Vec<String> {
        let Some(ext) = &self.external else {
            return Vec::new();
        };
        ext.tlps()
            .iter()
            .filter(|&&e| selection.iter().any(|&s| self.grid.task(s).name == ext.task(e).name))
            .map(|&e| ext.label(e))
            .collect()
    }

    pub fn training_languages(&self, selection: &[TlpId]) -> Vec<&str> {
        let mut langs: Vec<&str> = selection.iter().map(|&t| self.grid.language(t).as_str()).collect();
        langs.sort_unstable();
        langs.dedup();
        langs
    }

    pub fn language_of<'a>(&self, label: &'a str) -> &'a str {
        label.rsplit_once('.').map_or(label, |(_, l)| l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub model: String,
    pub selection: String,
    pub sampler: String,
    pub tlp: String,
    pub split: Split,
    pub metric: MetricKind,
    pub value: f64,
    pub zero_shot: bool,
}

pub const RESULTS_HEADER: &str = "schema_version,model,selection,sampler,tlp,split,metric,value,zero_shot";

impl ResultRow {
    fn from_report(model: &str, selection: &str, sampler: &str, r: EvalReport) -> Self {
        ResultRow {
            model: model.to_string(),
            selection: selection.to_string(),
            sampler: sampler.to_string(),
            tlp: r.tlp,
            split: r.split,
            metric: r.metric,
            value: r.value,
            zero_shot: r.zero_shot,
        }
    }

    fn csv(&self) -> String {
        format!(
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{}",
            self.model,
            self.selection,
            self.sampler,
            self.tlp,
            self.split.name(),
            self.metric,
            self.value,
            self.zero_shot
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = |m: String| Error::Format {
            what: "results.csv row".into(),
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, got {}: `{line}`", f.len())));
        }
        if f[0] != SCHEMA_VERSION.to_string() {
            return Err(bad(format!("unsupported schema version `{}`", f[0])));
        }
        let split = match f[5] {
            "train" => Split::Train,
            "dev" => Split::Dev,
            "test" => Split::Test,
            s => return Err(bad(format!("unknown split `{s}`"))),
        };
        Ok(ResultRow {
            model: f[1].into(),
            selection: f[2].into(),
            sampler: f[3].into(),
            tlp: f[4].into(),
            split,
            metric: MetricKind::from_str(f[6]).map_err(bad)?,
            value: f[7].parse().map_err(|e| bad(format!("value `{}`: {e}", f[7])))?,
            zero_shot: f[8] == "true",
        })
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Format {
            what: "results.csv".into(),
            message: "unexpected header".into(),
        });
    }
    lines.filter(|l| !l.is_empty()).map(ResultRow::parse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Generate data only.
    Data,
    /// Stop after meta or multi-task training.
    Train,
    All,
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "data" => Ok(Stage::Data),
            "train" => Ok(Stage::Train),
            "all" => Ok(Stage::All),
            other => Err(format!("expected data, train or all, got `{other}`")),
        }
    }
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub meta: Option<MetaResult>,
    /// Trained shared parameters (meta or multi-task).
    pub params: Option<ParameterVector>,
}

fn sampler_name(s: &SamplingStrategy) -> String {
    s.to_string()
}

fn evaluate_splits(
    setup: &Setup,
    params: &[f64],
    label: &str,
    model: &str,
    selection: &str,
    sampler: &str,
) -> Result<Vec<ResultRow>> {
    let t = setup.tlp_ref(label)?;
    [Split::Dev, Split::Test]
        .iter()
        .map(|&split| {
            let r = evaluate(&setup.network, &setup.store, params, t, split)?;
            Ok(ResultRow::from_report(model, selection, sampler, r))
        })
        .collect()
}

fn zero_shot_rows(
    setup: &Setup,
    params: &[f64],
    selection: &[TlpId],
    model: &str,
    sel_name: &str,
    sampler: &str,
) -> Result<Vec<ResultRow>> {
    if !setup.config.zero_shot {
        return Ok(Vec::new());
    }
    let langs = setup.training_languages(selection);
    setup
        .zero_shot_targets(selection)
        .iter()
        .map(|label| {
            let t = setup.tlp_ref(label)?;
            let r = zero_shot_eval(
                &setup.network,
                &setup.store,
                params,
                t,
                setup.language_of(label),
                &langs,
                Split::Test,
            )?;
            Ok(ResultRow::from_report(model, sel_name, sampler, r))
        })
        .collect()
}

/// Runs the configured pipeline up to `stage`.
pub fn execute(setup: &Setup, stage: Stage) -> Result<RunOutput> {
    if stage == Stage::Data {
        return Ok(RunOutput::default());
    }
    let cfg = &setup.config;
    let (meta_cfg, meta_name) = setup.meta_plan()?;
    let selection = setup.grid.select(&meta_cfg.selection)?.resolved;
    let labels: Vec<String> = selection.iter().map(|&t| setup.grid.label(t)).collect();
    let sel_name = meta_cfg.selection.to_string();
    let net = &setup.network;
    let store = &setup.store;
    let mut out = RunOutput::default();

    match cfg.model {
        ModelKind::Meta => {
            let result = meta_train(&meta_cfg, &setup.grid, store, net, &setup.init)?;
            let theta = result.params.clone();
            let sampler = sampler_name(&meta_cfg.sampler);
            out.params = Some(theta.clone());
            out.meta = Some(result);
            if stage == Stage::All {
                let tuned: Vec<Vec<ResultRow>> = labels
                    .par_iter()
                    .map(|label| {
                        let t = setup.tlp_ref(label)?;
                        let ft = finetune(net, store, &theta, t, &cfg.finetune)?;
                        evaluate_splits(setup, &ft.params, label, &meta_name, &sel_name, &sampler)
                    })
                    .collect::<Result<_>>()?;
                out.rows = tuned.into_iter().flatten().collect();
                out.rows
                    .extend(zero_shot_rows(setup, &theta.values, &selection, &meta_name, &sel_name, &sampler)?);
            }
        }
        ModelKind::Baseline => {
            if stage == Stage::All {
                let rows: Vec<Vec<ResultRow>> = labels
                    .par_iter()
                    .map(|label| {
                        let t = setup.tlp_ref(label)?;
                        let b = train_baseline(net, store, &setup.init, t, &cfg.finetune)?;
                        evaluate_splits(setup, &b.params, label, "baseline", &sel_name, "-")
                    })
                    .collect::<Result<_>>()?;
                out.rows = rows.into_iter().flatten().collect();
            }
        }
        ModelKind::Mtl => {
            let refs = labels.iter().map(|l| setup.tlp_ref(l)).collect::<Result<Vec<_>>>()?;
            let theta = train_mtl_baseline(net, store, &setup.init, &refs, &cfg.mtl)?;
            if stage == Stage::All {
                for label in &labels {
                    out.rows
                        .extend(evaluate_splits(setup, &theta.values, label, "mtl", &sel_name, "-")?);
                }
                out.rows
                    .extend(zero_shot_rows(setup, &theta.values, &selection, "mtl", &sel_name, "-")?);
            }
            out.params = Some(theta);
        }
    }
    Ok(out)
}

/// Runs `f` on a pool with `threads` workers (0 keeps the global pool).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config("run.threads", e.to_string()))?;
    Ok(pool.install(f))
}

pub fn sampler_trace_csv(result: &MetaResult, grid: &TlpGrid) -> String {
    let mut s = String::from("schema_version,iteration,tlp,psi,prob,reward\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &result.sampler_trace {
        let label = grid.tlp(r.tlp).map(|t| grid.label(t)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{SCHEMA_VERSION},{},{label},{},{},{}",
            r.iteration,
            opt(r.psi),
            r.prob,
            opt(r.reward)
        );
    }
    s
}

pub fn inner_loss_csv(result: &MetaResult, grid: &TlpGrid) -> String {
    let mut s = String::from("schema_version,iteration,slot,tlp,step,loss\n");
    for r in &result.inner_losses {
        let label = grid.tlp(r.tlp).map(|t| grid.label(t)).unwrap_or_default();
        let _ = writeln!(s, "{SCHEMA_VERSION},{},{},{label},{},{}", r.iteration, r.slot, r.step, r.loss);
    }
    s
}

pub fn write_params(dir: &Path, params: &ParameterVector) -> Result<()> {
    let bytes: Vec<u8> = params.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write(dir, "params.bin", &bytes)?;
    let mut seg = String::new();
    for s in params.segments.iter() {
        let _ = writeln!(seg, "{} {} {}", s.name, s.offset, s.len);
    }
    write(dir, "params.seg", seg.as_bytes())
}

/// Reads `params.bin` and checks `params.seg` against the network layout.
pub fn read_params(dir: &Path, network: &Network) -> Result<ParameterVector> {
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let seg_path = dir.join("params.seg");
    let seg = fs::read_to_string(&seg_path).map_err(|e| Error::io(&seg_path, e))?;
    let expected: String = network
        .segments()
        .iter()
        .map(|s| format!("{} {} {}\n", s.name, s.offset, s.len))
        .collect();
    if seg != expected {
        return Err(Error::Format {
            what: "params.seg".into(),
            message: "segment table does not match the configured model".into(),
        });
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            what: "params.bin".into(),
            message: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    network.from_values(values)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn manifest(cfg: &ExperimentConfig, status: &str, started: u64, wall: Option<f64>, files: &[&str]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "schema_version = {SCHEMA_VERSION}");
    let _ = writeln!(s, "status = {status}");
    let _ = writeln!(s, "config_hash = {}", cfg.hash());
    let _ = writeln!(s, "code_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "started_unix = {started}");
    if let Some(w) = wall {
        let _ = writeln!(s, "wall_clock_secs = {w:.3}");
    }
    let _ = writeln!(s, "files = {}", files.join(","));
    s
}

/// Runs `config` and writes every artifact into `out`.
pub fn run(config: ExperimentConfig, out: &Path, stage: Stage) -> Result<RunOutput> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = unix_now();
    let clock = Instant::now();
    write(out, "manifest.txt", manifest(&config, "running", started, None, &[]).as_bytes())?;
    write(out, "config.txt", config.to_text().as_bytes())?;
    let threads = config.threads;
    let setup = with_threads(threads, || Setup::new(config))??;
    let result = with_threads(threads, || execute(&setup, stage))??;

    let mut files = vec!["manifest.txt", "config.txt"];
    if stage == Stage::All {
        write(out, "results.csv", results_csv(&result.rows).as_bytes())?;
        files.push("results.csv");
    }
    if let Some(meta) = &result.meta {
        write(out, "sampler_trace.csv", sampler_trace_csv(meta, &setup.grid).as_bytes())?;
        write(out, "inner_loss.csv", inner_loss_csv(meta, &setup.grid).as_bytes())?;
        files.extend(["sampler_trace.csv", "inner_loss.csv"]);
    }
    if let Some(p) = &result.params {
        write_params(out, p)?;
        files.extend(["params.bin", "params.seg"]);
    }
    let wall = clock.elapsed().as_secs_f64();
    write(
        out,
        "manifest.txt",
        manifest(&setup.config, "complete", started, Some(wall), &files).as_bytes(),
    )?;
    Ok(result)
}

/// Evaluation-only replay of a finished run: reloads its configuration and
/// parameters, regenerates the data and scores the stored parameters
/// without fine-tuning. Writes `eval.csv` into the run directory.
pub fn replay(run_dir: &Path) -> Result<Vec<ResultRow>> {
    let config = ExperimentConfig::load(&run_dir.join("config.txt"))?;
    let threads = config.threads;
    let setup = with_threads(threads, || Setup::new(config))??;
    let params = read_params(run_dir, &setup.network)?;
    let (meta_cfg, name) = setup.meta_plan()?;
    let model = match setup.config.model {
        ModelKind::Meta => name,
        other => other.to_string(),
    };
    let sampler = match setup.config.model {
        ModelKind::Meta => sampler_name(&meta_cfg.sampler),
        _ => "-".into(),
    };
    let sel_name = meta_cfg.selection.to_string();
    let selection = setup.selection()?;
    let mut rows = Vec::new();
    for &t in &selection {
        rows.extend(evaluate_splits(&setup, &params.values, &setup.grid.label(t), &model, &sel_name, &sampler)?);
    }
    rows.extend(zero_shot_rows(&setup, &params.values, &selection, &model, &sel_name, &sampler)?);
    write(run_dir, "eval.csv", results_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Sampling probability of every TLP under each temperature, one row per
/// (TLP, tau).
pub fn export_tau_table(grid: &TlpGrid, taus: &[Temperature]) -> Result<String> {
    let q = grid.fractions();
    let mut s = String::from("schema_version,tlp,tau,prob\n");
    for &tau in taus {
        let p = temperature_probs(&q, tau)?;
        for (&t, prob) in grid.tlps().iter().zip(p) {
            let _ = writeln!(s, "{SCHEMA_VERSION},{},{tau},{prob}", grid.label(t));
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub model: String,
    pub selection: String,
    pub sampler: String,
    pub tlp: String,
    pub split: Split,
    pub zero_shot: bool,
    pub value: f64,
    pub best_baseline: String,
    pub baseline_value: f64,
    pub delta: f64,
}

pub const DELTA_HEADER: &str =
    "schema_version,model,selection,sampler,tlp,split,zero_shot,value,best_baseline,baseline_value,delta";

pub fn deltas_csv(rows: &[DeltaRow]) -> String {
    let mut s = format!("{DELTA_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.selection,
            r.sampler,
            r.tlp,
            r.split.name(),
            r.zero_shot,
            r.value,
            r.best_baseline,
            r.baseline_value,
            r.delta
        );
    }
    s
}

type RowKey = (String, Split, bool);

/// Metric differences of every row in `runs` against the best baseline row
/// for the same (TLP, split, zero-shot) key.
pub fn compare_rows(baselines: &[Vec<ResultRow>], runs: &[Vec<ResultRow>]) -> Result<Vec<DeltaRow>> {
    let mut best: BTreeMap<RowKey, (f64, String)> = BTreeMap::new();
    for rows in baselines {
        for r in rows {
            let key = (r.tlp.clone(), r.split, r.zero_shot);
            let name = format!("{}/{}", r.model, r.selection);
            let entry = best.entry(key).or_insert((f64::NEG_INFINITY, String::new()));
            if r.value > entry.0 {
                *entry = (r.value, name);
            }
        }
    }
    let mut out = Vec::new();
    for rows in runs {
        for r in rows {
            let key = (r.tlp.clone(), r.split, r.zero_shot);
            let (b, name) = best.get(&key).ok_or_else(|| Error::Format {
                what: "comparison".into(),
                message: format!("no baseline row for {} ({})", r.tlp, r.split.name()),
            })?;
            out.push(DeltaRow {
                model: r.model.clone(),
                selection: r.selection.clone(),
                sampler: r.sampler.clone(),
                tlp: r.tlp.clone(),
                split: r.split,
                zero_shot: r.zero_shot,
                value: r.value,
                best_baseline: name.clone(),
                baseline_value: *b,
                delta: r.value - b,
            });
        }
    }
    Ok(out)
}

fn grid_fingerprint(dir: &Path) -> Result<String> {
    let path = dir.join("config.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .filter(|l| l.starts_with("grid.") || l.starts_with("data.") || l.starts_with("seed"))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn load_results(dir: &Path) -> Result<Vec<ResultRow>> {
    let path = dir.join("results.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_results(&text)
}

/// Compares run directories against baseline run directories. All runs must
/// share the grid, data and seed settings.
pub fn compare(baselines: &[PathBuf], runs: &[PathBuf]) -> Result<Vec<DeltaRow>> {
    let all: Vec<&PathBuf> = baselines.iter().chain(runs).collect();
    let Some(first) = all.first() else {
        return Ok(Vec::new());
    };
    let reference = grid_fingerprint(first)?;
    for d in &all[1..] {
        if grid_fingerprint(d)? != reference {
            return Err(Error::Format {
                what: "comparison".into(),
                message: format!("{} and {} use different grids", first.display(), d.display()),
            });
        }
    }
    let b = baselines.iter().map(|d| load_results(d)).collect::<Result<Vec<_>>>()?;
    let r = runs.iter().map(|d| load_results(d)).collect::<Result<Vec<_>>>()?;
    compare_rows(&b, &r)
}
