//! Samples, datasets, the synthetic generator and the data splits.

mod csv_io;
mod split;
mod synthetic;

use std::collections::HashSet;

pub use csv_io::{read_csv, write_csv};
pub use split::{split, SplitSpec, Splits};
pub use synthetic::{generate_synthetic, SyntheticDgp};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::scalar::Scalar;

/// One unit: covariates, factual treatment index and outcome, and (for
/// simulated data) all potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: u64,
    pub x: Vec<T>,
    pub t: usize,
    pub y_factual: T,
    pub y_all: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<Sample<T>>,
    d: usize,
    k: usize,
    /// Assignment-bias strength, for generated data.
    pub kappa: Option<f64>,
    /// Generator seed, for generated data.
    pub seed: Option<u64>,
}

impl<T: Scalar> Dataset<T> {
    /// Validates and wraps samples sharing `d` covariates and `k` treatments.
    pub fn new(samples: Vec<Sample<T>>, d: usize, k: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("covariate dimension must be positive"));
        }
        if k < 2 {
            return Err(Error::invalid("at least two treatments required"));
        }
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.x.len() != d {
                return Err(Error::invalid(format!("sample {} has {} covariates, expected {d}", s.id, s.x.len())));
            }
            if s.t >= k {
                return Err(Error::invalid(format!("sample {} has treatment {} outside [0, {k})", s.id, s.t)));
            }
            if let Some(y) = &s.y_all {
                if y.len() != k {
                    return Err(Error::invalid(format!("sample {} has {} potential outcomes, expected {k}", s.id, y.len())));
                }
                if y[s.t] != s.y_factual {
                    return Err(Error::invalid(format!("sample {}: oracle outcome disagrees with factual outcome", s.id)));
                }
            }
            if !ids.insert(s.id) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            samples,
            d,
            k,
            kappa: None,
            seed: None,
        })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of covariates.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of treatments.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn has_oracle(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.y_all.is_some())
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// New dataset with the samples at the given positions, in that order.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            samples: positions.iter().map(|&i| self.samples[i].clone()).collect(),
            d: self.d,
            k: self.k,
            kappa: self.kappa,
            seed: self.seed,
        }
    }

    /// Covariates as an `n x d` matrix.
    pub fn covariates(&self) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.len() * self.d);
        for s in &self.samples {
            data.extend_from_slice(&s.x);
        }
        Matrix::from_vec(self.len(), self.d, data).expect("validated shapes")
    }

    pub fn treatments(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Oracle outcomes as an `n x k` matrix.
    pub fn oracle_outcomes(&self) -> Result<Matrix<T>> {
        let mut data = Vec::with_capacity(self.len() * self.k);
        for s in &self.samples {
            let y = s
                .y_all
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("sample {} has no oracle outcomes", s.id)))?;
            data.extend_from_slice(y);
        }
        Matrix::from_vec(self.len(), self.k, data)
    }

    /// Number of samples per treatment.
    pub fn treatment_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for s in &self.samples {
            counts[s.t] += 1;
        }
        counts
    }
}

/// Empirical treatment frequencies.
pub fn assignment_stats<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::invalid("assignment_stats of an empty dataset"));
    }
    let n = ds.len() as f64;
    Ok(ds.treatment_counts().into_iter().map(|c| c as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(id: u64, x: Vec<f64>, t: usize, y: f64) -> Sample<f64> {
        Sample {
            id,
            x,
            t,
            y_factual: y,
            y_all: None,
        }
    }

    #[test]
    fn stats_all_one_treatment() {
        let ds = Dataset::new((0..5).map(|i| sample(i, vec![0.0], 0, 1.0)).collect(), 1, 2).unwrap();
        assert_eq!(assignment_stats(&ds).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn stats_balanced() {
        let ds = Dataset::new((0..6).map(|i| sample(i, vec![0.0], (i % 2) as usize, 1.0)).collect(), 1, 2).unwrap();
        assert_eq!(assignment_stats(&ds).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn stats_of_empty_rejected() {
        let ds = Dataset::<f64>::new(vec![], 1, 2).unwrap();
        assert!(matches!(assignment_stats(&ds), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn validation_catches_bad_samples() {
        assert!(Dataset::new(vec![sample(0, vec![0.0], 2, 0.0)], 1, 2).is_err());
        assert!(Dataset::new(vec![sample(0, vec![0.0, 1.0], 0, 0.0)], 1, 2).is_err());
        assert!(Dataset::new(vec![sample(0, vec![0.0], 0, 0.0), sample(0, vec![1.0], 1, 0.0)], 1, 2).is_err());
        let mut s = sample(0, vec![0.0], 1, 3.0);
        s.y_all = Some(vec![1.0, 2.0]);
        assert!(Dataset::new(vec![s], 1, 2).is_err());
    }
}
