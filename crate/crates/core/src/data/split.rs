use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SHUFFLE_ATTEMPTS: usize = 100;

/// Fractions for (propensity fit, train, validation, test).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub gps_fit: f64,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            gps_fit: 0.25,
            train: 0.5,
            validation: 0.125,
            test: 0.125,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("split fractions must be positive"));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn fractions(&self) -> [f64; 4] {
        [self.gps_fit, self.train, self.validation, self.test]
    }

    /// Part sizes for `n` samples; boundaries are rounded cumulative fractions.
    pub fn sizes(&self, n: usize) -> [usize; 4] {
        let f = self.fractions();
        let mut sizes = [0; 4];
        let mut acc = 0.0;
        let mut prev = 0usize;
        for i in 0..4 {
            acc += f[i];
            let end = if i == 3 { n } else { ((acc * n as f64).round() as usize).min(n) };
            sizes[i] = end - prev;
            prev = end;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub gps_fit: Dataset<T>,
    pub train: Dataset<T>,
    pub validation: Dataset<T>,
    pub test: Dataset<T>,
}

/// Seeded disjoint partition. Reshuffles until every treatment appears in `train`.
pub fn split<T: Scalar>(ds: &Dataset<T>, spec: &SplitSpec, seed: u64) -> Result<Splits<T>> {
    spec.validate()?;
    let sizes = spec.sizes(ds.len());
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::degenerate(format!(
            "{} samples give an empty part under split sizes {sizes:?}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..MAX_SHUFFLE_ATTEMPTS {
        order.shuffle(&mut rng);
        let train_range = sizes[0]..sizes[0] + sizes[1];
        let mut seen = vec![false; ds.k()];
        for &i in &order[train_range] {
            seen[ds.samples()[i].t] = true;
        }
        if seen.iter().all(|s| *s) {
            let mut parts = Vec::with_capacity(4);
            let mut start = 0;
            for s in sizes {
                parts.push(ds.subset(&order[start..start + s]));
                start += s;
            }
            let test = parts.pop().unwrap();
            let validation = parts.pop().unwrap();
            let train = parts.pop().unwrap();
            let gps_fit = parts.pop().unwrap();
            return Ok(Splits {
                gps_fit,
                train,
                validation,
                test,
            });
        }
    }
    Err(Error::degenerate(format!(
        "no shuffle in {MAX_SHUFFLE_ATTEMPTS} attempts put every treatment in the training part"
    )))
}
