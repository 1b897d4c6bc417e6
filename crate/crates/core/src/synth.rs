//! Synthetic task-language datasets.
//!
//! Every sequence is first drawn in a language-free latent space and then
//! rendered into token vectors through a per-language linear map plus shift.
//! Shallow tasks label each token by a linear readout of its latent vector,
//! so the input-space decision rule moves with the language map. Deep tasks
//! label the whole sequence by a nonlinear function of the norm of the mean
//! latent; the maps are orthonormal, so that norm survives rendering and the
//! same deep task looks alike in every language.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::grid::{Output, TaskId, TaskKind, TlpGrid, TlpId};
use crate::rng::{stream, tag, StreamRng};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    /// Token vector width.
    pub d_in: usize,
    /// Width of the language-free latent space (<= `d_in`).
    pub latent_dim: usize,
    pub shallow_len: usize,
    pub deep_len: usize,
    /// Std of isotropic noise added to rendered tokens.
    pub noise: f64,
    /// Std of per-token latent scatter around a deep sequence's centre.
    pub token_spread: f64,
    /// Std of the per-language shift vector.
    pub shift_scale: f64,
    pub dev_size: usize,
    pub test_size: usize,
    /// Language rendered by the identity map.
    pub pivot: String,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            d_in: 8,
            latent_dim: 4,
            shallow_len: 8,
            deep_len: 16,
            noise: 0.05,
            token_spread: 1.0,
            shift_scale: 0.1,
            dev_size: 100,
            test_size: 100,
            pivot: "en".to_string(),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Dimension(m.to_string()));
        if self.d_in == 0 || self.latent_dim < 2 || self.latent_dim > self.d_in {
            return bad("need 2 <= latent_dim <= d_in");
        }
        if self.shallow_len == 0 || self.deep_len == 0 {
            return bad("sequence lengths must be positive");
        }
        if !(self.noise >= 0.0 && self.token_spread >= 0.0 && self.shift_scale >= 0.0) {
            return bad("noise, token_spread and shift_scale must be >= 0");
        }
        if self.dev_size == 0 || self.test_size == 0 {
            return bad("dev and test splits must be nonempty");
        }
        Ok(())
    }

    pub fn seq_len(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Shallow => self.shallow_len,
            TaskKind::Deep => self.deep_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// One class per token.
    Tokens(Vec<usize>),
    Class(usize),
    Scalar(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Row-major `len x d_in` token matrix.
    pub tokens: Vec<f64>,
    pub len: usize,
    pub target: Target,
}

impl Example {
    pub fn token(&self, t: usize) -> &[f64] {
        let d = self.tokens.len() / self.len;
        &self.tokens[t * d..(t + 1) * d]
    }
}

/// Linear map `x = matrix * z + shift` from latent to token space.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageTransform {
    pub matrix: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl LanguageTransform {
    pub fn apply(&self, latent: &[f64], out: &mut [f64]) {
        let z = DVector::from_column_slice(latent);
        let x = &self.matrix * z + &self.shift;
        out.copy_from_slice(x.as_slice());
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.matrix.clone().singular_values();
        sv.max() / sv.min()
    }
}

/// The pivot language gets the identity embedding and no shift; every other
/// language gets orthonormal columns from a Haar-random rotation.
pub fn generate_language_transform(language: &str, spec: &GeneratorSpec, seed: u64) -> LanguageTransform {
    let (d, k) = (spec.d_in, spec.latent_dim);
    if language == spec.pivot {
        return LanguageTransform {
            matrix: DMatrix::identity(d, k),
            shift: DVector::zeros(d),
        };
    }
    let mut rng = stream(seed, "language", &[tag(language)]);
    let gauss = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let matrix = q.columns(0, k).into_owned();
    let shift = DVector::from_fn(d, |_, _| spec.shift_scale * rng.sample::<f64, _>(StandardNormal));
    LanguageTransform { matrix, shift }
}

/// Language-independent labelling rule of one task.
#[derive(Clone, Debug)]
pub enum TaskFunction {
    /// Token class = argmax of `readout * z_t`; the rows form a regular
    /// polygon in a random plane so classes are equiprobable.
    Shallow { readout: DMatrix<f64> },
    /// `u = F(|mean z|^2 / var)` with `F` the chi-square CDF is uniform on
    /// [0, 1). Classes are equal-width bands of `u` relabelled by `order`;
    /// scalar targets are a phase-shifted sine of `u`.
    Deep {
        output: Output,
        order: Vec<usize>,
        phase: f64,
        variance: f64,
        chi: ChiSquared,
    },
}

impl TaskFunction {
    pub fn new(task: &TaskId, spec: &GeneratorSpec, seed: u64) -> Self {
        let mut rng = stream(seed, "task", &[tag(&task.name)]);
        match task.kind {
            TaskKind::Shallow => {
                let classes = task.classes().expect("shallow tasks have classes");
                let k = spec.latent_dim;
                let gauss = DMatrix::from_fn(k, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
                let plane = gauss.qr().q();
                let offset: f64 = rng.random::<f64>() * TAU;
                let readout = DMatrix::from_fn(classes, k, |c, j| {
                    let angle = offset + TAU * c as f64 / classes as f64;
                    angle.cos() * plane[(j, 0)] + angle.sin() * plane[(j, 1)]
                });
                TaskFunction::Shallow { readout }
            }
            TaskKind::Deep => TaskFunction::Deep {
                output: task.output,
                order: {
                    let mut order: Vec<usize> = (0..task.classes().unwrap_or(1)).collect();
                    order.shuffle(&mut rng);
                    order
                },
                phase: rng.random::<f64>(),
                variance: 1.0 + spec.token_spread.powi(2) / spec.deep_len as f64,
                chi: ChiSquared::new(spec.latent_dim as f64).expect("positive dof"),
            },
        }
    }

    pub fn token_label(&self, latent: &[f64]) -> usize {
        match self {
            TaskFunction::Shallow { readout } => {
                let z = DVector::from_column_slice(latent);
                (readout * z).argmax().0
            }
            TaskFunction::Deep { .. } => panic!("token labels only exist for shallow tasks"),
        }
    }

    /// Sequence target from the `len x latent_dim` latent matrix (row-major).
    pub fn sequence_target(&self, latents: &[f64], latent_dim: usize) -> Target {
        match self {
            TaskFunction::Shallow { .. } => Target::Tokens(
                latents
                    .chunks(latent_dim)
                    .map(|z| self.token_label(z))
                    .collect(),
            ),
            TaskFunction::Deep {
                output,
                order,
                phase,
                variance,
                chi,
            } => {
                let len = (latents.len() / latent_dim) as f64;
                let mut mean = vec![0.0; latent_dim];
                for z in latents.chunks(latent_dim) {
                    for (m, v) in mean.iter_mut().zip(z) {
                        *m += v / len;
                    }
                }
                let sq: f64 = mean.iter().map(|m| m * m).sum();
                let u = chi.cdf(sq / variance);
                match *output {
                    Output::Classes(n) => Target::Class(order[((u * n as f64) as usize).min(n - 1)]),
                    Output::Scalar { .. } => Target::Scalar((TAU * (u + phase)).sin()),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug)]
pub struct TlpDataset {
    pub tlp: TlpId,
    pub label: String,
    pub task: TaskId,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl TlpDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Draws a latent sequence: independent tokens for shallow tasks, a shared
/// centre plus per-token scatter for deep tasks.
pub fn sample_latents(kind: TaskKind, spec: &GeneratorSpec, rng: &mut StreamRng) -> Vec<f64> {
    let k = spec.latent_dim;
    let len = spec.seq_len(kind);
    match kind {
        TaskKind::Shallow => (0..len * k).map(|_| rng.sample(StandardNormal)).collect(),
        TaskKind::Deep => {
            let centre: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            (0..len * k)
                .map(|i| centre[i % k] + spec.token_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
    }
}

/// Renders latents into tokens and appends noise of scale `spec.noise`.
pub fn render(latents: &[f64], transform: &LanguageTransform, spec: &GeneratorSpec, rng: &mut StreamRng) -> Vec<f64> {
    let (d, k) = (spec.d_in, spec.latent_dim);
    let len = latents.len() / k;
    let mut tokens = vec![0.0; len * d];
    for (z, x) in latents.chunks(k).zip(tokens.chunks_mut(d)) {
        transform.apply(z, x);
        if spec.noise > 0.0 {
            for v in x.iter_mut() {
                *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    tokens
}

fn generate_split(
    task: &TaskId,
    function: &TaskFunction,
    transform: &LanguageTransform,
    spec: &GeneratorSpec,
    n: usize,
    rng: &mut StreamRng,
) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let latents = sample_latents(task.kind, spec, rng);
            let target = function.sequence_target(&latents, spec.latent_dim);
            let tokens = render(&latents, transform, spec, rng);
            Example {
                len: spec.seq_len(task.kind),
                tokens,
                target,
            }
        })
        .collect()
}

/// Generates train/dev/test for one grid cell. Each split has its own
/// stream, so splits never share draws and the dataset is a pure function of
/// `(grid cell, spec, seed)`.
pub fn generate_tlp_dataset(grid: &TlpGrid, tlp: TlpId, spec: &GeneratorSpec, seed: u64) -> Result<TlpDataset> {
    spec.validate()?;
    let tlp = grid.tlp(tlp.index)?;
    let task = grid.task(tlp).clone();
    let language = grid.language(tlp).as_str();
    let label = grid.label(tlp);
    let function = TaskFunction::new(&task, spec, seed);
    let transform = generate_language_transform(language, spec, seed);
    let sizes = [grid.size(tlp), spec.dev_size, spec.test_size];
    let mut splits: Vec<Vec<Example>> = Split::ALL
        .iter()
        .zip(sizes)
        .map(|(split, n)| {
            let mut rng = stream(seed, "data", &[tag(&label), split.stream_id()]);
            generate_split(&task, &function, &transform, spec, n, &mut rng)
        })
        .collect();
    let test = splits.pop().unwrap();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(TlpDataset {
        tlp,
        label,
        task,
        train,
        dev,
        test,
    })
}

/// Generates every cell of `grid` (in parallel, order preserved).
pub fn generate_grid(grid: &TlpGrid, spec: &GeneratorSpec, seed: u64) -> Result<Vec<TlpDataset>> {
    grid.tlps()
        .par_iter()
        .map(|&t| generate_tlp_dataset(grid, t, spec, seed))
        .collect()
}
