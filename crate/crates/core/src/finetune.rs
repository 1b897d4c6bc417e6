//! Per-TLP fine-tuning, metric evaluation, zero-shot scoring and the
//! single-TLP and multi-task baselines.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::grid::{MetricKind, Output, TaskId, TaskKind};
use crate::model::{Dropout, InnerOptimizerConfig, InnerOptimizerState, Network, ParameterVector, Prediction};
use crate::rng::{stream, tag};
use crate::store::DataStore;
use crate::synth::{Example, Split, Target};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Learning-rate candidates; the one with the better dev metric wins and
    /// ties go to the smaller rate.
    pub lrs: [f64; 2],
    pub epochs_shallow: usize,
    pub epochs_deep: usize,
    /// Per-task epoch overrides by task name.
    pub task_epochs: BTreeMap<String, usize>,
    /// Multiplies every epoch count.
    pub epoch_scale: usize,
    pub batch_size: usize,
    /// Optimizer settings other than the learning rate.
    pub optimizer: InnerOptimizerConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lrs: [1e-2, 1e-3],
            epochs_shallow: 10,
            epochs_deep: 5,
            task_epochs: BTreeMap::from([("QA".to_string(), 2)]),
            epoch_scale: 1,
            batch_size: 8,
            optimizer: InnerOptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lrs.iter().all(|&lr| lr > 0.0) {
            return Err(Error::MetaConfig(format!("fine-tune learning rates must be positive, got {:?}", self.lrs)));
        }
        if self.batch_size == 0 {
            return Err(Error::MetaConfig("fine-tune batch size must be >= 1".into()));
        }
        self.optimizer.validate()
    }

    pub fn epochs_for(&self, task: &TaskId) -> usize {
        let base = self.task_epochs.get(&task.name).copied().unwrap_or(match task.kind {
            TaskKind::Shallow => self.epochs_shallow,
            TaskKind::Deep => self.epochs_deep,
        });
        base * self.epoch_scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tlp: String,
    pub split: Split,
    pub metric: MetricKind,
    pub value: f64,
    pub count: usize,
    pub zero_shot: bool,
}

/// Everything needed to train or score one TLP.
#[derive(Clone, Copy, Debug)]
pub struct TlpRef<'a> {
    pub label: &'a str,
    pub task: &'a TaskId,
    pub head: usize,
}

impl<'a> TlpRef<'a> {
    pub fn new(network: &Network, label: &'a str, task: &'a TaskId) -> Result<Self> {
        Ok(TlpRef {
            label,
            task,
            head: network.head_index(&task.name)?,
        })
    }
}

/// Metric of `params` on `examples`, computed from the network's
/// predictions. Token accuracy for shallow tasks; accuracy or F1 for
/// sequence classification; within-tolerance rate for scalar targets.
pub fn score(network: &Network, params: &[f64], head: usize, task: &TaskId, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptySplit {
            tlp: task.name.clone(),
            split: "evaluation".into(),
        });
    }
    let preds: Vec<Prediction> = examples.iter().map(|e| network.predict(params, head, e)).collect();
    match (task.kind, task.output, task.metric) {
        (TaskKind::Shallow, ..) => {
            let (mut hit, mut total) = (0usize, 0usize);
            for (p, e) in preds.iter().zip(examples) {
                if let (Prediction::Tokens(p), Target::Tokens(t)) = (p, &e.target) {
                    hit += p.iter().zip(t).filter(|(a, b)| a == b).count();
                    total += t.len();
                }
            }
            Ok(hit as f64 / total as f64)
        }
        (TaskKind::Deep, Output::Scalar { tolerance }, _) => {
            let hit = preds
                .iter()
                .zip(examples)
                .filter(|(p, e)| match (p, &e.target) {
                    (Prediction::Scalar(y), Target::Scalar(t)) => (y - t).abs() <= tolerance,
                    _ => false,
                })
                .count();
            Ok(hit as f64 / examples.len() as f64)
        }
        (TaskKind::Deep, Output::Classes(n), metric) => {
            let pairs: Vec<(usize, usize)> = preds
                .iter()
                .zip(examples)
                .filter_map(|(p, e)| match (p, &e.target) {
                    (Prediction::Class(y), Target::Class(t)) => Some((*y, *t)),
                    _ => None,
                })
                .collect();
            Ok(match metric {
                MetricKind::Accuracy => pairs.iter().filter(|(y, t)| y == t).count() as f64 / pairs.len() as f64,
                MetricKind::F1 => f1(&pairs, n),
            })
        }
    }
}

/// F1 of class 1 for binary labels, macro F1 otherwise. A class with no
/// true positives scores 0.
pub fn f1(pairs: &[(usize, usize)], classes: usize) -> f64 {
    let class_f1 = |c: usize| {
        let tp = pairs.iter().filter(|&&(y, t)| y == c && t == c).count() as f64;
        let pred = pairs.iter().filter(|&&(y, _)| y == c).count() as f64;
        let gold = pairs.iter().filter(|&&(_, t)| t == c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            let (p, r) = (tp / pred, tp / gold);
            2.0 * p * r / (p + r)
        }
    };
    if classes == 2 {
        class_f1(1)
    } else {
        (0..classes).map(class_f1).sum::<f64>() / classes as f64
    }
}

pub fn evaluate(network: &Network, store: &DataStore, params: &[f64], tlp: TlpRef<'_>, split: Split) -> Result<EvalReport> {
    let data = store.read_all(tlp.label, split)?;
    if data.is_empty() {
        return Err(Error::EmptySplit {
            tlp: tlp.label.to_string(),
            split: split.name().to_string(),
        });
    }
    Ok(EvalReport {
        tlp: tlp.label.to_string(),
        split,
        metric: tlp.task.metric,
        value: score(network, params, tlp.head, tlp.task, data)?,
        count: data.len(),
        zero_shot: false,
    })
}

/// Scores `params` on an external TLP without any training on it.
pub fn zero_shot_eval(
    network: &Network,
    store: &DataStore,
    params: &[f64],
    tlp: TlpRef<'_>,
    language: &str,
    training_languages: &[&str],
    split: Split,
) -> Result<EvalReport> {
    if training_languages.contains(&language) {
        return Err(Error::NotExternal(tlp.label.to_string()));
    }
    let mut report = evaluate(network, store, params, tlp, split)?;
    report.zero_shot = true;
    Ok(report)
}

/// Trains on the concatenation of `tlps` for `epochs` passes with one
/// AdamW state. Every epoch is a fresh shuffle of all (TLP, example) pairs
/// cut into batches; a batch may mix TLPs, in which case its gradient is the
/// size-weighted sum of the per-head gradients.
fn train(
    network: &Network,
    store: &DataStore,
    init: &[f64],
    tlps: &[TlpRef<'_>],
    optimizer: InnerOptimizerConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    path: &[u64],
) -> Result<Vec<f64>> {
    let mut params = init.to_vec();
    let mut opt = InnerOptimizerState::new(optimizer, params.len());
    let sizes = tlps
        .iter()
        .map(|t| store.split_len(t.label, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let mut drop_rng = stream(seed, "finetune-dropout", path);
    for epoch in 0..epochs {
        let mut rng = stream(seed, "finetune", &[path, &[epoch as u64]].concat());
        for batch in mtl_batch_plan(&sizes, batch_size, &mut rng) {
            let mut grad = vec![0.0; params.len()];
            for (j, t) in tlps.iter().enumerate() {
                let idx: Vec<usize> = batch.iter().filter(|(k, _)| *k == j).map(|&(_, i)| i).collect();
                if idx.is_empty() {
                    continue;
                }
                let examples = store.read(t.label, Split::Train, &idx)?;
                let p = optimizer.dropout;
                let dropout = (p > 0.0).then_some(Dropout { p, rng: &mut drop_rng });
                let (_, g) = network.gradient(&params, t.head, &examples, dropout)?;
                let w = idx.len() as f64 / batch.len() as f64;
                for (a, b) in grad.iter_mut().zip(&g.values) {
                    *a += w * b;
                }
            }
            opt.inner_step(&mut params, &grad)?;
        }
    }
    Ok(params)
}

/// One epoch over the concatenation of datasets with the given sizes:
/// a shuffled list of `(dataset, example)` pairs cut into batches.
pub fn mtl_batch_plan<R: rand::Rng + ?Sized>(sizes: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<(usize, usize)>> {
    let mut all: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| (0..n).map(move |i| (j, i)))
        .collect();
    all.shuffle(rng);
    all.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub params: Vec<f64>,
    pub lr: f64,
    pub dev_metric: f64,
    /// `(lr, dev metric)` for each candidate.
    pub candidates: Vec<(f64, f64)>,
}

/// Fine-tunes `init` on one TLP with each learning-rate candidate and keeps
/// the one with the higher dev metric.
pub fn finetune(
    network: &Network,
    store: &DataStore,
    init: &ParameterVector,
    tlp: TlpRef<'_>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let epochs = cfg.epochs_for(tlp.task);
    let mut lrs = cfg.lrs;
    lrs.sort_by(f64::total_cmp);
    let mut best: Option<FinetuneOutcome> = None;
    let mut candidates = Vec::new();
    for &lr in &lrs {
        let opt = InnerOptimizerConfig { lr, ..cfg.optimizer };
        let params = train(
            network,
            store,
            &init.values,
            &[tlp],
            opt,
            epochs,
            cfg.batch_size,
            cfg.seed,
            &[tag(tlp.label)],
        )?;
        let dev = evaluate(network, store, &params, tlp, Split::Dev)?.value;
        candidates.push((lr, dev));
        if best.as_ref().is_none_or(|b| dev > b.dev_metric) {
            best = Some(FinetuneOutcome {
                params,
                lr,
                dev_metric: dev,
                candidates: Vec::new(),
            });
        }
    }
    let mut out = best.expect("two candidates");
    out.candidates = candidates;
    Ok(out)
}

/// Per-TLP baseline: the fine-tuning recipe applied to a fresh
/// initialisation, touching only this TLP's data.
pub fn train_baseline(
    network: &Network,
    store: &DataStore,
    init: &ParameterVector,
    tlp: TlpRef<'_>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    finetune(network, store, init, tlp, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtlConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: InnerOptimizerConfig,
    pub seed: u64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            lr: 5e-3,
            epochs: 5,
            batch_size: 8,
            optimizer: InnerOptimizerConfig::default(),
            seed: 0,
        }
    }
}

/// Multi-task baseline over the shuffled concatenation of `tlps`.
pub fn train_mtl_baseline(
    network: &Network,
    store: &DataStore,
    init: &ParameterVector,
    tlps: &[TlpRef<'_>],
    cfg: &MtlConfig,
) -> Result<ParameterVector> {
    if tlps.is_empty() {
        return Err(Error::EmptySelection("mtl".into()));
    }
    let opt = InnerOptimizerConfig { lr: cfg.lr, ..cfg.optimizer };
    opt.validate()?;
    let path: Vec<u64> = tlps.iter().map(|t| tag(t.label)).collect();
    let params = train(network, store, &init.values, tlps, opt, cfg.epochs, cfg.batch_size, cfg.seed, &path)?;
    Ok(init.with_values(params))
}

#[cfg(test)]
mod tests;
