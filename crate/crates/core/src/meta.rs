//! Reptile meta-training over a selection of TLPs.
//!
//! Each iteration draws `m` TLPs from the sampler, adapts a copy of the
//! shared parameters for `k` inner steps on each, and moves the shared
//! parameters toward the mean of the adapted copies. Under MultiDDS the
//! sampler logits are then updated from cosine rewards between each TLP's
//! training gradient and the dev gradient.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{SelectionMode, TlpGrid, TlpId};
use crate::model::{Dropout, InnerOptimizerConfig, InnerOptimizerState, Network, ParameterVector};
use crate::rng::stream;
use crate::sampling::{reward, SamplerState, SamplingStrategy};
use crate::store::DataStore;
use crate::synth::Split;

/// Where the mDDS dev gradient comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DevBinding {
    /// A single TLP, by label (`TASK.lang`).
    TargetTlp(String),
    LangLimited(String),
    TaskLimited(String),
}

impl DevBinding {
    pub fn resolve(&self, grid: &TlpGrid) -> Result<Vec<TlpId>> {
        match self {
            DevBinding::TargetTlp(label) => Ok(vec![grid.find_label(label)?]),
            DevBinding::LangLimited(l) => Ok(grid.select(&SelectionMode::LangLimited(l.clone()))?.resolved),
            DevBinding::TaskLimited(t) => Ok(grid.select(&SelectionMode::TaskLimited(t.clone()))?.resolved),
        }
    }
}

impl fmt::Display for DevBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DevBinding::TargetTlp(t) => write!(f, "tlp:{t}"),
            DevBinding::LangLimited(l) => write!(f, "lang:{l}"),
            DevBinding::TaskLimited(t) => write!(f, "task:{t}"),
        }
    }
}

impl FromStr for DevBinding {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            Some(("tlp", t)) if !t.is_empty() => Ok(DevBinding::TargetTlp(t.to_string())),
            Some(("lang", l)) if !l.is_empty() => Ok(DevBinding::LangLimited(l.to_string())),
            Some(("task", t)) if !t.is_empty() => Ok(DevBinding::TaskLimited(t.to_string())),
            _ => Err(format!("expected `tlp:<TASK.lang>`, `lang:<language>` or `task:<task>`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub m: usize,
    pub k: usize,
    pub beta: f64,
    pub epochs: usize,
    /// Overrides the derived epoch length when set.
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub inner: InnerOptimizerConfig,
    pub selection: SelectionMode,
    pub sampler: SamplingStrategy,
    pub dev: Option<DevBinding>,
    pub seed: u64,
    /// Run the inner loops of an iteration on the rayon pool.
    pub parallel: bool,
    /// Keep a copy of θ after every iteration.
    pub record_params: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            m: 8,
            k: 3,
            beta: 1.0,
            epochs: 5,
            iterations_per_epoch: None,
            batch_size: 8,
            inner: InnerOptimizerConfig::default(),
            selection: SelectionMode::All,
            sampler: SamplingStrategy::Temperature(crate::sampling::Temperature::Finite(5.0)),
            dev: None,
            seed: 0,
            parallel: true,
            record_params: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 {
            return Err(Error::MetaConfig(format!("m and k must be >= 1 (m={}, k={})", self.m, self.k)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::MetaConfig(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::MetaConfig("batch size must be >= 1".into()));
        }
        let mdds = matches!(self.sampler, SamplingStrategy::MultiDds { .. });
        if mdds != self.dev.is_some() {
            return Err(Error::MetaConfig(
                "a dev binding is required with the mdds sampler and only with it".into(),
            ));
        }
        self.inner.validate()
    }

    /// Iterations that consume roughly one pass over `examples` training
    /// examples.
    pub fn derived_iterations(&self, examples: usize) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| examples.div_ceil(self.m * self.k * self.batch_size).max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerLossRecord {
    pub iteration: usize,
    pub slot: usize,
    pub tlp: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerRecord {
    pub iteration: usize,
    pub tlp: usize,
    pub psi: Option<f64>,
    pub prob: f64,
    pub reward: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetaResult {
    pub params: ParameterVector,
    pub iterations: usize,
    pub inner_losses: Vec<InnerLossRecord>,
    pub sampler_trace: Vec<SamplerRecord>,
    /// θ after each iteration, when requested.
    pub param_history: Vec<Vec<f64>>,
    pub optimizer: InnerOptimizerState,
    pub sampler: SamplerState,
}

/// `k` inner updates from a private copy of `theta`. Returns the adapted
/// parameters and the loss before each step.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop(
    network: &Network,
    store: &DataStore,
    theta: &[f64],
    task: usize,
    label: &str,
    k: usize,
    batch_size: usize,
    opt: &mut InnerOptimizerState,
    seed: u64,
    stream_path: &[u64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut params = theta.to_vec();
    let mut batch_rng = stream(seed, "batches", stream_path);
    let mut drop_rng = stream(seed, "dropout", stream_path);
    let mut losses = Vec::with_capacity(k);
    for _ in 0..k {
        let batch = store.sample_batch(label, Split::Train, batch_size, &mut batch_rng)?;
        let p = opt.dropout();
        let dropout = (p > 0.0).then_some(Dropout { p, rng: &mut drop_rng });
        let (loss, grad) = network.gradient(&params, task, &batch, dropout)?;
        opt.inner_step(&mut params, &grad.values)?;
        losses.push(loss);
    }
    Ok((params, losses))
}

/// `θ + (β/m) Σ (θ_i − θ)`.
pub fn reptile_step(theta: &[f64], adapted: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    if adapted.is_empty() {
        return Err(Error::MetaConfig("reptile step needs at least one adapted vector".into()));
    }
    if let Some(bad) = adapted.iter().find(|a| a.len() != theta.len()) {
        return Err(Error::Dimension(format!(
            "adapted parameters have {} values, expected {}",
            bad.len(),
            theta.len()
        )));
    }
    let scale = beta / adapted.len() as f64;
    Ok((0..theta.len())
        .map(|j| {
            let delta: f64 = adapted.iter().map(|a| a[j] - theta[j]).sum();
            theta[j] + scale * delta
        })
        .collect())
}

/// Training and dev collections for one of the four mDDS settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MddsSetting {
    pub train: SelectionMode,
    pub dev: DevBinding,
    pub name: &'static str,
}

/// Settings `a`–`d` relative to a target TLP.
pub fn resolve_mdds_setting(setting: &str, grid: &TlpGrid, target: TlpId) -> Result<MddsSetting> {
    let task = grid.task(target).name.clone();
    let lang = grid.language(target).as_str().to_string();
    let label = grid.label(target);
    let (train, dev, name) = match setting {
        "a" => (SelectionMode::LangLimited(lang), DevBinding::TargetTlp(label), "mDDS"),
        "b" => (SelectionMode::TaskLimited(task), DevBinding::TargetTlp(label), "mDDS"),
        "c" => (SelectionMode::All, DevBinding::LangLimited(lang), "mDDS-Lang"),
        "d" => (SelectionMode::All, DevBinding::TaskLimited(task), "mDDS-Task"),
        other => return Err(Error::UnknownSetting(other.to_string())),
    };
    Ok(MddsSetting { train, dev, name })
}

struct SlotOutcome {
    params: Vec<f64>,
    losses: Vec<f64>,
    opt: InnerOptimizerState,
}

/// Runs the full meta-training loop from `init`.
pub fn meta_train(
    config: &MetaConfig,
    grid: &TlpGrid,
    store: &DataStore,
    network: &Network,
    init: &ParameterVector,
) -> Result<MetaResult> {
    config.validate()?;
    if init.len() != network.num_params() {
        return Err(Error::Dimension(format!(
            "initial parameters have {} values, network has {}",
            init.len(),
            network.num_params()
        )));
    }
    let selection = grid.select(&config.selection)?;
    let tlps = &selection.resolved;
    let labels: Vec<String> = tlps.iter().map(|&t| grid.label(t)).collect();
    let heads = tlps
        .iter()
        .map(|&t| network.head_index(&grid.task(t).name))
        .collect::<Result<Vec<_>>>()?;
    for l in &labels {
        if !store.contains(l) {
            return Err(Error::MissingDataset(l.clone()));
        }
    }
    let dev_tlps = match &config.dev {
        Some(b) => b.resolve(grid)?,
        None => Vec::new(),
    };
    let dev_meta = dev_tlps
        .iter()
        .map(|&t| Ok((grid.label(t), network.head_index(&grid.task(t).name)?)))
        .collect::<Result<Vec<_>>>()?;

    let q = grid.fractions_of(tlps);
    let mut sampler = SamplerState::new(config.sampler, &q)?;
    let examples: usize = tlps.iter().map(|&t| grid.size(t)).sum();
    let iterations = config.epochs * config.derived_iterations(examples);

    let mut theta = init.values.clone();
    let mut opt = InnerOptimizerState::new(config.inner, theta.len());
    let mut inner_losses = Vec::new();
    let mut sampler_trace = Vec::new();
    let mut param_history = Vec::new();

    for it in 0..iterations {
        let mut draw_rng = stream(config.seed, "sampler", &[it as u64]);
        let slots = sampler.sample(config.m, &mut draw_rng)?;

        let run_slot = |(slot, &s): (usize, &usize)| -> Result<SlotOutcome> {
            let mut o = opt.clone();
            let (params, losses) = inner_loop(
                network,
                store,
                &theta,
                heads[s],
                &labels[s],
                config.k,
                config.batch_size,
                &mut o,
                config.seed,
                &[it as u64, slot as u64],
            )?;
            Ok(SlotOutcome { params, losses, opt: o })
        };
        let outcomes: Vec<SlotOutcome> = if config.parallel {
            slots.par_iter().enumerate().map(run_slot).collect::<Result<_>>()?
        } else {
            slots.iter().enumerate().map(run_slot).collect::<Result<_>>()?
        };

        for (slot, (o, &s)) in outcomes.iter().zip(&slots).enumerate() {
            for (step, &loss) in o.losses.iter().enumerate() {
                inner_losses.push(InnerLossRecord {
                    iteration: it,
                    slot,
                    tlp: tlps[s].index,
                    step,
                    loss,
                });
            }
        }
        let adapted: Vec<Vec<f64>> = outcomes.iter().map(|o| o.params.clone()).collect();
        opt = outcomes.into_iter().last().expect("m >= 1").opt;
        theta = reptile_step(&theta, &adapted, config.beta)?;

        let rewards = if matches!(config.sampler, SamplingStrategy::MultiDds { .. }) {
            let r = compute_rewards(config, network, store, &theta, &heads, &labels, &dev_meta, it)?;
            sampler.update(&r)?;
            Some(r)
        } else {
            None
        };
        for (j, &t) in tlps.iter().enumerate() {
            sampler_trace.push(SamplerRecord {
                iteration: it,
                tlp: t.index,
                psi: sampler.psi.as_ref().map(|p| p[j]),
                prob: sampler.probs[j],
                reward: rewards.as_ref().map(|r| r[j]),
            });
        }
        if config.record_params {
            param_history.push(theta.clone());
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::MetaConfig(format!("parameters diverged at iteration {it}")));
        }
    }

    Ok(MetaResult {
        params: init.with_values(theta),
        iterations,
        inner_losses,
        sampler_trace,
        param_history,
        optimizer: opt,
        sampler,
    })
}

#[allow(clippy::too_many_arguments)]
fn compute_rewards(
    config: &MetaConfig,
    network: &Network,
    store: &DataStore,
    theta: &[f64],
    heads: &[usize],
    labels: &[String],
    dev: &[(String, usize)],
    it: usize,
) -> Result<Vec<f64>> {
    let mut g_dev = vec![0.0; theta.len()];
    for (j, (label, head)) in dev.iter().enumerate() {
        let mut rng = stream(config.seed, "dev", &[it as u64, j as u64]);
        let batch = store.sample_batch(label, Split::Dev, config.batch_size, &mut rng)?;
        let (_, g) = network.gradient(theta, *head, &batch, None)?;
        for (a, b) in g_dev.iter_mut().zip(&g.values) {
            *a += b / dev.len() as f64;
        }
    }
    let one = |j: usize| -> Result<f64> {
        let mut rng = stream(config.seed, "reward", &[it as u64, j as u64]);
        let batch = store.sample_batch(&labels[j], Split::Train, config.batch_size, &mut rng)?;
        let (_, g) = network.gradient(theta, heads[j], &batch, None)?;
        reward(&g_dev, &g.values)
    };
    if config.parallel {
        (0..labels.len()).into_par_iter().map(one).collect()
    } else {
        (0..labels.len()).map(one).collect()
    }
}
