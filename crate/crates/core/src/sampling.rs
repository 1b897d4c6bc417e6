//! Multinomial sampling over TLPs.
//!
//! Two strategies: temperature sampling, a fixed distribution proportional
//! to `q_i^(1/tau)`, and MultiDDS, where `P(i) = softmax(psi)_i` and `psi` is
//! trained by REINFORCE with rewards `cos(g_dev, g_train(i))`.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    Finite(f64),
    Infinite,
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Temperature::Finite(t) => write!(f, "{t}"),
            Temperature::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Temperature {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inf" | "infinity" => Ok(Temperature::Infinite),
            _ => s
                .parse::<f64>()
                .map_err(|e| format!("bad temperature `{s}`: {e}"))
                .and_then(|t| {
                    if t.is_infinite() && t > 0.0 {
                        Ok(Temperature::Infinite)
                    } else if t >= 1.0 {
                        Ok(Temperature::Finite(t))
                    } else {
                        Err(format!("temperature must be >= 1, got {s}"))
                    }
                }),
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Probability("empty".into()));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Probability(format!("negative or non-finite entry in {p:?}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Probability(format!("sums to {sum}")));
    }
    Ok(())
}

/// `P(i) = q_i^(1/tau) / sum_k q_k^(1/tau)`. `tau = 1` returns `q` as given,
/// `tau = inf` returns the exact uniform vector.
pub fn temperature_probs(q: &[f64], tau: Temperature) -> Result<Vec<f64>> {
    check_distribution(q)?;
    match tau {
        Temperature::Infinite => Ok(vec![1.0 / q.len() as f64; q.len()]),
        Temperature::Finite(t) if t < 1.0 || t.is_nan() => Err(Error::Temperature(t)),
        Temperature::Finite(t) if t == 1.0 => Ok(q.to_vec()),
        Temperature::Finite(t) => {
            let logs: Vec<f64> = q.iter().map(|x| x.ln() / t).collect();
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            Ok(w.into_iter().map(|x| x / z).collect())
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax_probs(psi: &[f64]) -> Vec<f64> {
    let max = psi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = psi.iter().map(|p| (p - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Logits whose softmax reproduces `q`: `psi_i = ln q_i`.
pub fn init_psi(q: &[f64]) -> Result<Vec<f64>> {
    check_distribution(q)?;
    if q.iter().any(|&x| x <= 0.0) {
        return Err(Error::Probability("init_psi needs strictly positive q".into()));
    }
    Ok(q.iter().map(|x| x.ln()).collect())
}

/// Cosine similarity; zero whenever either vector is zero.
pub fn reward(g_dev: &[f64], g_train: &[f64]) -> Result<f64> {
    if g_dev.len() != g_train.len() {
        return Err(Error::Dimension(format!(
            "reward over gradients of length {} and {}",
            g_dev.len(),
            g_train.len()
        )));
    }
    let dot: f64 = g_dev.iter().zip(g_train).map(|(a, b)| a * b).sum();
    let na: f64 = g_dev.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = g_train.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `d_psi = sum_i R_i * grad_psi log softmax(psi)_i`, using
/// `d log P(i) / d psi_j = [i = j] - P(j)`.
pub fn reinforce_gradient(psi: &[f64], rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() != psi.len() {
        return Err(Error::RewardLength {
            expected: psi.len(),
            got: rewards.len(),
        });
    }
    let probs = softmax_probs(psi);
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .zip(&probs)
        .map(|(r, p)| r - p * total)
        .collect())
}

/// One plain gradient-ascent step on `psi` along the REINFORCE direction.
pub fn reinforce_update(psi: &[f64], rewards: &[f64], lr: f64) -> Result<Vec<f64>> {
    let d = reinforce_gradient(psi, rewards)?;
    Ok(psi.iter().zip(&d).map(|(p, g)| p + lr * g).collect())
}

/// `m` i.i.d. categorical draws (with replacement).
pub fn sample_tlps<R: Rng + ?Sized>(probs: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_distribution(probs)?;
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Probability(e.to_string()))?;
    Ok((0..m).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingStrategy {
    Temperature(Temperature),
    MultiDds { psi_lr: f64 },
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::Temperature(t) => write!(f, "temp({t})"),
            SamplingStrategy::MultiDds { .. } => f.write_str("mdds"),
        }
    }
}

/// The live sampling distribution over the selected TLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub strategy: SamplingStrategy,
    /// Present only under MultiDDS.
    pub psi: Option<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl SamplerState {
    /// Initialises from the dataset fractions `q` of the selected TLPs.
    pub fn new(strategy: SamplingStrategy, q: &[f64]) -> Result<Self> {
        match strategy {
            SamplingStrategy::Temperature(tau) => Ok(SamplerState {
                strategy,
                psi: None,
                probs: temperature_probs(q, tau)?,
            }),
            SamplingStrategy::MultiDds { psi_lr } => {
                if !(psi_lr >= 0.0) {
                    return Err(Error::MetaConfig(format!("psi learning rate {psi_lr}")));
                }
                let psi = init_psi(q)?;
                let probs = softmax_probs(&psi);
                Ok(SamplerState {
                    strategy,
                    psi: Some(psi),
                    probs,
                })
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<usize>> {
        sample_tlps(&self.probs, m, rng)
    }

    /// Applies one REINFORCE step; a no-op under temperature sampling.
    pub fn update(&mut self, rewards: &[f64]) -> Result<()> {
        if let (SamplingStrategy::MultiDds { psi_lr }, Some(psi)) = (self.strategy, self.psi.as_mut()) {
            *psi = reinforce_update(psi, rewards, psi_lr)?;
            self.probs = softmax_probs(psi);
        }
        Ok(())
    }
}
