//! Simulated multiple-treatment data with tunable assignment bias.
//!
//! `x ~ N(0, I_d)`, assignment `t ~ Categorical(softmax(kappa * W x))`,
//! potential outcomes `y_k = 10 * sigmoid(u_k . x) + v . x + eps`,
//! `eps ~ N(0, 0.1^2)`. `W`, `u_k` and `v` are drawn once per seed.
//!
//! Every random quantity comes from its own ChaCha stream, so changing
//! `kappa` only changes the assignments and changing `n` only extends the
//! sample sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const OUTCOME_NOISE_SD: f64 = 0.1;
pub const OUTCOME_AMPLITUDE: f64 = 10.0;
/// Standard deviation of each entry of `u_k` is `OUTCOME_WEIGHT_SCALE / sqrt(d)`.
pub const OUTCOME_WEIGHT_SCALE: f64 = 2.0;

const STREAM_PARAMS: u64 = 0;
const STREAM_COVARIATES: u64 = 1;
const STREAM_ASSIGNMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Fixed generator parameters for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDgp {
    d: usize,
    k: usize,
    /// Assignment weights, row-major `k x d`.
    assignment: Vec<f64>,
    /// Per-treatment outcome weights, row-major `k x d`.
    outcome: Vec<f64>,
    /// Shared linear outcome term.
    shared: Vec<f64>,
}

impl SyntheticDgp {
    pub fn new(d: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || k < 2 {
            return Err(Error::invalid("need d >= 1 and K >= 2"));
        }
        let mut rng = stream(seed, STREAM_PARAMS);
        let sd = 1.0 / (d as f64).sqrt();
        let assignment = normals(&mut rng, k * d, sd);
        let outcome = normals(&mut rng, k * d, OUTCOME_WEIGHT_SCALE * sd);
        let shared = normals(&mut rng, d, sd);
        Ok(Self {
            d,
            k,
            assignment,
            outcome,
            shared,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn row<'a>(m: &'a [f64], d: usize, k: usize) -> &'a [f64] {
        &m[k * d..(k + 1) * d]
    }

    /// True assignment probabilities `softmax(kappa * W x)`.
    pub fn assignment_probs(&self, x: &[f64], kappa: f64) -> Vec<f64> {
        let scores: Vec<f64> = (0..self.k)
            .map(|k| kappa * dot(Self::row(&self.assignment, self.d, k), x))
            .collect();
        softmax(&scores)
    }

    /// Noise-free potential outcomes.
    pub fn expected_outcomes(&self, x: &[f64]) -> Vec<f64> {
        let base = dot(&self.shared, x);
        (0..self.k)
            .map(|k| OUTCOME_AMPLITUDE * sigmoid(dot(Self::row(&self.outcome, self.d, k), x)) + base)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Inverse-CDF draw from a probability vector.
fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the final partial sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Generates `n` samples with ids `0..n`.
pub fn generate_synthetic<T: Scalar>(n: usize, d: usize, k: usize, kappa: f64, seed: u64) -> Result<Dataset<T>> {
    if d == 0 || k < 2 {
        return Err(Error::invalid("need d >= 1 and K >= 2"));
    }
    if n < 10 * k {
        return Err(Error::invalid(format!("need n >= 10 * K = {}, got {n}", 10 * k)));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::invalid("kappa must be finite and non-negative"));
    }
    let dgp = SyntheticDgp::new(d, k, seed)?;
    let mut cov_rng = stream(seed, STREAM_COVARIATES);
    let mut assign_rng = stream(seed, STREAM_ASSIGNMENT);
    let mut noise_rng = stream(seed, STREAM_NOISE);

    let mut samples = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let x = normals(&mut cov_rng, d, 1.0);
        let u: f64 = assign_rng.random();
        let t = categorical(&dgp.assignment_probs(&x, kappa), u);
        let y_all: Vec<T> = dgp
            .expected_outcomes(&x)
            .into_iter()
            .zip(normals(&mut noise_rng, k, OUTCOME_NOISE_SD))
            .map(|(m, e)| T::lit(m + e))
            .collect();
        samples.push(Sample {
            id,
            x: x.into_iter().map(T::lit).collect(),
            t,
            y_factual: y_all[t],
            y_all: Some(y_all),
        });
    }
    let mut ds = Dataset::new(samples, d, k)?;
    ds.kappa = Some(kappa);
    ds.seed = Some(seed);
    Ok(ds)
}
