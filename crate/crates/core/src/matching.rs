//! GPS / PS nearest-neighbour matching and minibatch augmentation.
//!
//! For every training unit `i` and every treatment `k != t_i` the index keeps
//! the `l` units of treatment `k` closest to `i`. Candidate lists are built
//! once; each time a minibatch is formed one candidate per slot is drawn
//! uniformly at random.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::propensity::{GpsTable, GpsVector};
use crate::scalar::{format_exact, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    /// L1 distance between full GPS vectors.
    Gps,
    /// Distance between the propensities of the candidate's treatment only.
    Ps,
}

/// `sum_k |p_i[k] - p_j[k]|`
pub fn d_gps<T: Scalar>(p_i: &GpsVector<T>, p_j: &GpsVector<T>) -> Result<T> {
    if p_i.k() != p_j.k() {
        return Err(Error::invalid(format!("GPS widths differ: {} vs {}", p_i.k(), p_j.k())));
    }
    Ok(l1(p_i.as_slice(), p_j.as_slice()))
}

/// `|p_i[t_j] - p_j[t_j]|`
pub fn d_ps<T: Scalar>(p_i: &GpsVector<T>, p_j: &GpsVector<T>, t_j: usize) -> Result<T> {
    if p_i.k() != p_j.k() {
        return Err(Error::invalid(format!("GPS widths differ: {} vs {}", p_i.k(), p_j.k())));
    }
    if t_j >= p_i.k() {
        return Err(Error::invalid(format!("treatment {t_j} outside [0, {})", p_i.k())));
    }
    Ok((p_i.as_slice()[t_j] - p_j.as_slice()[t_j]).abs())
}

#[inline]
fn l1<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<T> {
    pub id: u64,
    /// Position of the candidate in the indexed dataset.
    pub position: usize,
    pub distance: T,
}

#[derive(Debug, Clone)]
pub struct MatchIndex<T> {
    strategy: MatchStrategy,
    l: usize,
    train: Dataset<T>,
    positions: HashMap<u64, usize>,
    /// `lists[i][k]`: candidates of treatment `k` for unit `i`; empty when `k == t_i`.
    lists: Vec<Vec<Vec<Candidate<T>>>>,
}

/// Slots left unfilled by augmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentStats {
    pub skipped: usize,
}

impl<T: Scalar> MatchIndex<T> {
    pub fn strategy(&self) -> MatchStrategy {
        self.strategy
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn dataset(&self) -> &Dataset<T> {
        &self.train
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    /// Candidate list for unit `id` and treatment `k`.
    pub fn candidates(&self, id: u64, k: usize) -> Option<&[Candidate<T>]> {
        let i = self.position(id)?;
        self.lists[i].get(k).map(Vec::as_slice)
    }

    pub fn candidates_at(&self, position: usize, k: usize) -> &[Candidate<T>] {
        &self.lists[position][k]
    }

    /// Appends one random match per counterfactual treatment to a batch of
    /// dataset positions. Matches follow the original batch, in batch order
    /// and ascending treatment.
    pub fn augment_positions<R: Rng + ?Sized>(
        &self,
        batch: &[usize],
        rng: &mut R,
        stats: &mut AugmentStats,
    ) -> Vec<usize> {
        let k = self.train.k();
        let mut out = Vec::with_capacity(batch.len() * k);
        out.extend_from_slice(batch);
        for &i in batch {
            let t = self.train.samples()[i].t;
            for kk in (0..k).filter(|kk| *kk != t) {
                let list = &self.lists[i][kk];
                if list.is_empty() {
                    stats.skipped += 1;
                    continue;
                }
                let pick = if list.len() == 1 { 0 } else { rng.random_range(0..list.len()) };
                out.push(list[pick].position);
            }
        }
        out
    }

    /// Audit dump: `query_id,treatment,candidate_id,distance,rank`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["query_id", "treatment", "candidate_id", "distance", "rank"])?;
        for (i, per_k) in self.lists.iter().enumerate() {
            let qid = self.train.samples()[i].id.to_string();
            for (k, list) in per_k.iter().enumerate() {
                for (rank, c) in list.iter().enumerate() {
                    w.write_record([
                        qid.as_str(),
                        &k.to_string(),
                        &c.id.to_string(),
                        &format_exact(c.distance),
                        &rank.to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::io::write_atomic(path, &bytes)
    }
}

/// Exhaustive `l`-nearest-neighbour search per (unit, counterfactual treatment).
///
/// Ties in distance go to the smaller sample id.
pub fn build_match_index<T: Scalar>(
    train: &Dataset<T>,
    gps: &GpsTable<T>,
    l: usize,
    strategy: MatchStrategy,
) -> Result<MatchIndex<T>> {
    if l == 0 {
        return Err(Error::invalid("l must be at least 1"));
    }
    let k = train.k();
    let counts = train.treatment_counts();
    if let Some(missing) = counts.iter().position(|c| *c == 0) {
        return Err(Error::degenerate(format!("treatment {missing} has no training samples to match")));
    }
    let probs: Vec<&[T]> = train
        .samples()
        .iter()
        .map(|s| {
            let p = gps
                .get(&s.id)
                .ok_or_else(|| Error::invalid(format!("no GPS for sample {}", s.id)))?;
            if p.k() != k {
                return Err(Error::invalid(format!("GPS for sample {} has width {}, expected {k}", s.id, p.k())));
            }
            Ok(p.as_slice())
        })
        .collect::<Result<_>>()?;

    let samples = train.samples();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, s) in samples.iter().enumerate() {
        groups[s.t].push(pos);
    }

    let lists: Vec<Vec<Vec<Candidate<T>>>> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let pi = probs[i];
            (0..k)
                .map(|kk| {
                    if kk == samples[i].t {
                        return Vec::new();
                    }
                    let mut all: Vec<Candidate<T>> = groups[kk]
                        .iter()
                        .map(|&j| Candidate {
                            id: samples[j].id,
                            position: j,
                            distance: match strategy {
                                MatchStrategy::Gps => l1(pi, probs[j]),
                                MatchStrategy::Ps => (pi[kk] - probs[j][kk]).abs(),
                            },
                        })
                        .collect();
                    let cmp = |a: &Candidate<T>, b: &Candidate<T>| {
                        a.distance
                            .partial_cmp(&b.distance)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.id.cmp(&b.id))
                    };
                    if all.len() > l {
                        all.select_nth_unstable_by(l - 1, cmp);
                        all.truncate(l);
                    }
                    all.sort_by(cmp);
                    all
                })
                .collect()
        })
        .collect();

    Ok(MatchIndex {
        strategy,
        l,
        positions: samples.iter().enumerate().map(|(p, s)| (s.id, p)).collect(),
        train: train.clone(),
        lists,
    })
}

/// Augments a batch of samples with randomly drawn matches from `idx`.
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(
    batch: &[Sample<T>],
    idx: &MatchIndex<T>,
    rng: &mut R,
) -> Result<(Vec<Sample<T>>, AugmentStats)> {
    let positions = batch
        .iter()
        .map(|s| {
            idx.position(s.id)
                .ok_or_else(|| Error::invalid(format!("sample {} is not in the match index", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = AugmentStats::default();
    let out = idx.augment_positions(&positions, rng, &mut stats);
    let samples = idx.dataset().samples();
    let mut result = batch.to_vec();
    result.extend(out[batch.len()..].iter().map(|&p| samples[p].clone()));
    Ok((result, stats))
}
