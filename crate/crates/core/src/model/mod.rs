//! Shared two-layer token encoder with one output head per task.
//!
//! Tokens pass through the encoder independently. Shallow heads classify
//! every encoded token; deep heads mean-pool the encoded sequence and apply
//! a one-hidden-layer readout. All parameters live in one flat vector whose
//! segment table names the encoder and each task head.

mod optim;

pub use optim::{sgd_step, InnerOptimizer, InnerOptimizerConfig, InnerOptimizerState};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{Output, TaskId, TaskKind};
use crate::rng::{stream, StreamRng};
use crate::synth::{Example, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through pre-activation `a` and output `h`.
    #[inline]
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub task: String,
    pub kind: TaskKind,
    pub output: Output,
}

impl HeadSpec {
    fn out_dim(&self) -> usize {
        match self.output {
            Output::Classes(n) => n,
            Output::Scalar { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub d_in: usize,
    pub widths: [usize; 2],
    /// Hidden width of each deep head.
    pub head_hidden: usize,
    pub activation: Activation,
    pub heads: Vec<HeadSpec>,
}

impl ModelSpec {
    pub fn for_tasks(d_in: usize, widths: [usize; 2], head_hidden: usize, tasks: &[TaskId]) -> Self {
        ModelSpec {
            d_in,
            widths,
            head_hidden,
            activation: Activation::Tanh,
            heads: tasks
                .iter()
                .map(|t| HeadSpec {
                    task: t.name.clone(),
                    kind: t.kind,
                    output: t.output,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameters plus the segment table that partitions them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub segments: Arc<Vec<Segment>>,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ParameterVector {
            values,
            segments: Arc::clone(&self.segments),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient { values: vec![0.0; len] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Inverted dropout on both encoder layers.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut StreamRng,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Tokens(Vec<usize>),
    Class(usize),
    Scalar(f64),
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    /// `out = W x + b`
    #[inline]
    fn forward(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &p[self.w..self.w + self.rows * self.cols];
        let b = &p[self.b..self.b + self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * self.cols..(r + 1) * self.cols];
            *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients for upstream `dy` and writes `dx`.
    #[inline]
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        for (r, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let gw = &mut grad[self.w + r * self.cols..self.w + (r + 1) * self.cols];
            for (g, &xv) in gw.iter_mut().zip(x) {
                *g += d * xv;
            }
            grad[self.b + r] += d;
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            let w = &p[self.w..self.w + self.rows * self.cols];
            for (r, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[r * self.cols..(r + 1) * self.cols];
                for (o, &wv) in dx.iter_mut().zip(row) {
                    *o += d * wv;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum HeadLayout {
    Token(Dense),
    Pooled { hidden: Dense, out: Dense },
}

/// A model spec with its parameter layout resolved.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    layer1: Dense,
    layer2: Dense,
    heads: Vec<HeadLayout>,
    segments: Arc<Vec<Segment>>,
    len: usize,
}

struct Scratch {
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let [w1, w2] = spec.widths;
        if spec.d_in == 0 || w1 == 0 || w2 == 0 || spec.head_hidden == 0 {
            return Err(Error::Dimension("model widths must be positive".into()));
        }
        if spec.heads.is_empty() {
            return Err(Error::Dimension("model needs at least one head".into()));
        }
        let mut cursor = 0;
        let mut dense = |rows: usize, cols: usize| {
            let d = Dense {
                w: cursor,
                b: cursor + rows * cols,
                rows,
                cols,
            };
            cursor += d.len();
            d
        };
        let layer1 = dense(w1, spec.d_in);
        let layer2 = dense(w2, w1);
        let mut segments = vec![Segment {
            name: "encoder".into(),
            offset: 0,
            len: layer1.len() + layer2.len(),
        }];
        let mut heads = Vec::with_capacity(spec.heads.len());
        for h in &spec.heads {
            if h.kind == TaskKind::Shallow && !matches!(h.output, Output::Classes(_)) {
                return Err(Error::Dimension(format!("shallow head `{}` must classify", h.task)));
            }
            let start = layer1.len() + layer2.len() + segments[1..].iter().map(|s| s.len).sum::<usize>();
            let layout = match h.kind {
                TaskKind::Shallow => HeadLayout::Token(dense(h.out_dim(), w2)),
                TaskKind::Deep => HeadLayout::Pooled {
                    hidden: dense(spec.head_hidden, w2),
                    out: dense(h.out_dim(), spec.head_hidden),
                },
            };
            let len = match &layout {
                HeadLayout::Token(d) => d.len(),
                HeadLayout::Pooled { hidden, out } => hidden.len() + out.len(),
            };
            segments.push(Segment {
                name: format!("head:{}", h.task),
                offset: start,
                len,
            });
            heads.push(layout);
        }
        Ok(Network {
            spec,
            layer1,
            layer2,
            heads,
            segments: Arc::new(segments),
            len: cursor,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.len
    }

    pub fn segments(&self) -> &Arc<Vec<Segment>> {
        &self.segments
    }

    pub fn head_index(&self, task: &str) -> Result<usize> {
        self.spec
            .heads
            .iter()
            .position(|h| h.task == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn zeros(&self) -> ParameterVector {
        ParameterVector {
            values: vec![0.0; self.len],
            segments: Arc::clone(&self.segments),
        }
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = stream(seed, "init", &[]);
        let mut p = self.zeros();
        let mut fill = |d: &Dense, rng: &mut StreamRng| {
            let scale = (1.0 / d.cols as f64).sqrt();
            for v in &mut p.values[d.w..d.w + d.rows * d.cols] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(&self.layer1, &mut rng);
        fill(&self.layer2, &mut rng);
        for h in &self.heads {
            match h {
                HeadLayout::Token(d) => fill(d, &mut rng),
                HeadLayout::Pooled { hidden, out } => {
                    fill(hidden, &mut rng);
                    fill(out, &mut rng);
                }
            }
        }
        p
    }

    pub fn from_values(&self, values: Vec<f64>) -> Result<ParameterVector> {
        if values.len() != self.len {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.len,
                values.len()
            )));
        }
        Ok(ParameterVector {
            values,
            segments: Arc::clone(&self.segments),
        })
    }

    fn check(&self, params: &[f64], task: usize, batch: &[&Example]) -> Result<()> {
        if params.len() != self.len {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.len,
                params.len()
            )));
        }
        let head = self.spec.heads.get(task).ok_or_else(|| {
            Error::Dimension(format!("head index {task} out of range ({} heads)", self.spec.heads.len()))
        })?;
        if batch.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        for ex in batch {
            if ex.len == 0 || ex.tokens.len() != ex.len * self.spec.d_in {
                return Err(Error::Dimension(format!(
                    "example has {} token values for length {} and d_in {}",
                    ex.tokens.len(),
                    ex.len,
                    self.spec.d_in
                )));
            }
            let ok = match (&ex.target, head.kind, head.output) {
                (Target::Tokens(labels), TaskKind::Shallow, Output::Classes(n)) => {
                    labels.len() == ex.len && labels.iter().all(|&c| c < n)
                }
                (Target::Class(c), TaskKind::Deep, Output::Classes(n)) => *c < n,
                (Target::Scalar(y), TaskKind::Deep, Output::Scalar { .. }) => y.is_finite(),
                _ => false,
            };
            if !ok {
                return Err(Error::Dimension(format!(
                    "example target does not match head `{}`",
                    head.task
                )));
            }
        }
        Ok(())
    }

    fn scratch(&self, len: usize) -> Scratch {
        let [w1, w2] = self.spec.widths;
        Scratch {
            a1: vec![0.0; len * w1],
            h1: vec![0.0; len * w1],
            a2: vec![0.0; len * w2],
            h2: vec![0.0; len * w2],
            m1: vec![1.0; len * w1],
            m2: vec![1.0; len * w2],
        }
    }

    fn encode(&self, params: &[f64], ex: &Example, s: &mut Scratch, dropout: &mut Option<Dropout<'_>>) {
        let [w1, w2] = self.spec.widths;
        let act = self.spec.activation;
        let d = self.spec.d_in;
        if let Some(dr) = dropout.as_mut() {
            if dr.p > 0.0 {
                let keep = 1.0 / (1.0 - dr.p);
                for m in s.m1[..ex.len * w1].iter_mut().chain(s.m2[..ex.len * w2].iter_mut()) {
                    *m = if dr.rng.random::<f64>() < dr.p { 0.0 } else { keep };
                }
            }
        }
        for t in 0..ex.len {
            let x = &ex.tokens[t * d..(t + 1) * d];
            let a1 = &mut s.a1[t * w1..(t + 1) * w1];
            self.layer1.forward(params, x, a1);
            for i in 0..w1 {
                s.h1[t * w1 + i] = act.apply(a1[i]) * s.m1[t * w1 + i];
            }
            let a2 = &mut s.a2[t * w2..(t + 1) * w2];
            self.layer2.forward(params, &s.h1[t * w1..(t + 1) * w1], a2);
            for i in 0..w2 {
                s.h2[t * w2 + i] = act.apply(a2[i]) * s.m2[t * w2 + i];
            }
        }
    }

    /// Mean loss of `batch` under head `task`: token cross-entropy for
    /// shallow heads, sequence cross-entropy or squared error for deep ones.
    pub fn forward_loss(&self, params: &[f64], task: usize, batch: &[&Example]) -> Result<f64> {
        self.check(params, task, batch)?;
        Ok(self.run(params, task, batch, None, None))
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn gradient(
        &self,
        params: &[f64],
        task: usize,
        batch: &[&Example],
        dropout: Option<Dropout<'_>>,
    ) -> Result<(f64, Gradient)> {
        self.check(params, task, batch)?;
        let mut grad = Gradient::zeros(self.len);
        let loss = self.run(params, task, batch, Some(&mut grad.values), dropout);
        Ok((loss, grad))
    }

    fn run(
        &self,
        params: &[f64],
        task: usize,
        batch: &[&Example],
        mut grad: Option<&mut Vec<f64>>,
        mut dropout: Option<Dropout<'_>>,
    ) -> f64 {
        let [w1, w2] = self.spec.widths;
        let act = self.spec.activation;
        let d = self.spec.d_in;
        let head = &self.heads[task];
        let max_len = batch.iter().map(|e| e.len).max().unwrap_or(0);
        let mut s = self.scratch(max_len);
        let mut dh2 = vec![0.0; max_len * w2];
        let mut da2 = vec![0.0; w2];
        let mut dh1 = vec![0.0; w1];
        let mut da1 = vec![0.0; w1];
        let mut total = 0.0;

        let n_tokens: usize = batch.iter().map(|e| e.len).sum();
        let mut logits = Vec::new();

        for ex in batch {
            self.encode(params, ex, &mut s, &mut dropout);
            let len = ex.len;
            match (head, &ex.target) {
                (HeadLayout::Token(out), Target::Tokens(labels)) => {
                    let norm = 1.0 / n_tokens as f64;
                    logits.resize(out.rows, 0.0);
                    for t in 0..len {
                        let h = &s.h2[t * w2..(t + 1) * w2];
                        out.forward(params, h, &mut logits);
                        total += softmax_xent(&mut logits, labels[t]) * norm;
                        if let Some(g) = grad.as_deref_mut() {
                            logits.iter_mut().for_each(|v| *v *= norm);
                            out.backward(params, h, &logits, g, Some(&mut dh2[t * w2..(t + 1) * w2]));
                        }
                    }
                }
                (HeadLayout::Pooled { hidden, out }, target) => {
                    let norm = 1.0 / batch.len() as f64;
                    let mut pooled = vec![0.0; w2];
                    for t in 0..len {
                        for (p, h) in pooled.iter_mut().zip(&s.h2[t * w2..(t + 1) * w2]) {
                            *p += h / len as f64;
                        }
                    }
                    let mut ah = vec![0.0; hidden.rows];
                    hidden.forward(params, &pooled, &mut ah);
                    let gh: Vec<f64> = ah.iter().map(|&a| act.apply(a)).collect();
                    let mut o = vec![0.0; out.rows];
                    out.forward(params, &gh, &mut o);
                    let dout = match target {
                        Target::Class(c) => {
                            total += softmax_xent(&mut o, *c) * norm;
                            o.iter().map(|v| v * norm).collect::<Vec<_>>()
                        }
                        Target::Scalar(y) => {
                            let e = o[0] - y;
                            total += e * e * norm;
                            vec![2.0 * e * norm]
                        }
                        Target::Tokens(_) => unreachable!("validated by check"),
                    };
                    if let Some(g) = grad.as_deref_mut() {
                        let mut dg = vec![0.0; hidden.rows];
                        out.backward(params, &gh, &dout, g, Some(&mut dg));
                        let dah: Vec<f64> = dg
                            .iter()
                            .zip(ah.iter().zip(&gh))
                            .map(|(dg, (&a, &h))| dg * act.derivative(a, h))
                            .collect();
                        let mut dp = vec![0.0; w2];
                        hidden.backward(params, &pooled, &dah, g, Some(&mut dp));
                        for t in 0..len {
                            for (dst, v) in dh2[t * w2..(t + 1) * w2].iter_mut().zip(&dp) {
                                *dst = v / len as f64;
                            }
                        }
                    }
                }
                _ => unreachable!("validated by check"),
            }

            if let Some(g) = grad.as_deref_mut() {
                for t in 0..len {
                    for i in 0..w2 {
                        let k = t * w2 + i;
                        let h = act.apply(s.a2[k]);
                        da2[i] = dh2[k] * s.m2[k] * act.derivative(s.a2[k], h);
                    }
                    let h1 = &s.h1[t * w1..(t + 1) * w1];
                    self.layer2.backward(params, h1, &da2, g, Some(&mut dh1));
                    for i in 0..w1 {
                        let k = t * w1 + i;
                        let h = act.apply(s.a1[k]);
                        da1[i] = dh1[i] * s.m1[k] * act.derivative(s.a1[k], h);
                    }
                    let x = &ex.tokens[t * d..(t + 1) * d];
                    self.layer1.backward(params, x, &da1, g, None);
                }
            }
        }
        total
    }

    pub fn predict(&self, params: &[f64], task: usize, ex: &Example) -> Prediction {
        let w2 = self.spec.widths[1];
        let act = self.spec.activation;
        let mut s = self.scratch(ex.len);
        self.encode(params, ex, &mut s, &mut None);
        match &self.heads[task] {
            HeadLayout::Token(out) => {
                let mut logits = vec![0.0; out.rows];
                Prediction::Tokens(
                    (0..ex.len)
                        .map(|t| {
                            out.forward(params, &s.h2[t * w2..(t + 1) * w2], &mut logits);
                            argmax(&logits)
                        })
                        .collect(),
                )
            }
            HeadLayout::Pooled { hidden, out } => {
                let mut pooled = vec![0.0; w2];
                for t in 0..ex.len {
                    for (p, h) in pooled.iter_mut().zip(&s.h2[t * w2..(t + 1) * w2]) {
                        *p += h / ex.len as f64;
                    }
                }
                let mut ah = vec![0.0; hidden.rows];
                hidden.forward(params, &pooled, &mut ah);
                ah.iter_mut().for_each(|a| *a = act.apply(*a));
                let mut o = vec![0.0; out.rows];
                out.forward(params, &ah, &mut o);
                match self.spec.heads[task].output {
                    Output::Classes(_) => Prediction::Class(argmax(&o)),
                    Output::Scalar { .. } => Prediction::Scalar(o[0]),
                }
            }
        }
    }
}

/// Replaces `logits` with `softmax - onehot(label)` and returns the loss.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    let loss = -(logits[label] / z).ln();
    for v in logits.iter_mut() {
        *v /= z;
    }
    logits[label] -= 1.0;
    loss
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
