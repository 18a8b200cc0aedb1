//! Agreement statistics over vote tensors.
//!
//! Every observable the estimators consume is the mean of a product of
//! non-abstaining votes. Products of values in {-1, +1} are accumulated as
//! integers and partial counts are merged by addition, so results are
//! bit-identical regardless of thread count or scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::VoteTensor;

/// A product observable: the mean of `prod(lambda_{j,s})` over sequences
/// where every named vote is non-abstaining. Terms are `(source, slot)`
/// pairs addressing columns of a [`VoteTensor`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProductRequest {
    pub terms: Vec<(usize, usize)>,
}

impl ProductRequest {
    pub fn new(terms: Vec<(usize, usize)>) -> Self {
        Self { terms }
    }

    /// Order-insensitive identity used to deduplicate planned requests.
    pub fn key(&self) -> Vec<(usize, usize)> {
        let mut k = self.terms.clone();
        k.sort_unstable();
        k
    }
}

/// Exact integer tallies for one request.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RawProduct {
    /// Sum of vote products over supporting sequences; each addend is ±1.
    pub sum: i64,
    /// Number of sequences where every term voted.
    pub support: u64,
}

impl RawProduct {
    pub fn merge(self, other: Self) -> Self {
        Self {
            sum: self.sum + other.sum,
            support: self.support + other.support,
        }
    }

    pub fn stats(self, context: &str) -> Result<ProductStats> {
        if self.support == 0 {
            return Err(Error::InsufficientData(format!(
                "no jointly voting sequences for {context}"
            )));
        }
        Ok(ProductStats {
            value: self.sum as f64 / self.support as f64,
            support: self.support,
        })
    }
}

/// A finished estimate of one product observable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductStats {
    pub value: f64,
    pub support: u64,
}

/// Support-weighted combination of estimates of observables that are equal
/// under parameter tying.
pub fn pool_stats(parts: &[ProductStats], context: &str) -> Result<ProductStats> {
    let mut weighted = 0.0;
    let mut support = 0u64;
    for p in parts {
        weighted += p.value * p.support as f64;
        support += p.support;
    }
    if support == 0 {
        return Err(Error::InsufficientData(format!(
            "no jointly voting sequences for {context}"
        )));
    }
    Ok(ProductStats {
        value: weighted / support as f64,
        support,
    })
}

const CHUNK: usize = 2048;

/// Accumulates every requested product in one parallel pass over sequences.
pub fn accumulate(votes: &VoteTensor, requests: &[ProductRequest]) -> Vec<RawProduct> {
    let n = votes.n();
    if n == 0 || requests.is_empty() {
        return vec![RawProduct::default(); requests.len()];
    }
    let n_chunks = n.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = n.min(lo + CHUNK);
            let mut acc = vec![RawProduct::default(); requests.len()];
            for seq in lo..hi {
                for (slot, req) in requests.iter().enumerate() {
                    let mut prod: i64 = 1;
                    let mut voting = true;
                    for &(j, s) in &req.terms {
                        let v = votes.get(seq, j, s);
                        if v == 0 {
                            voting = false;
                            break;
                        }
                        prod *= i64::from(v);
                    }
                    if voting {
                        acc[slot].sum += prod;
                        acc[slot].support += 1;
                    }
                }
            }
            acc
        })
        .reduce(
            || vec![RawProduct::default(); requests.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = x.merge(y);
                }
                a
            },
        )
}

/// Mean of `lambda_j * lambda_k` over sequences where both vote.
pub fn pair_expectation(
    votes: &VoteTensor,
    j: usize,
    slot_j: usize,
    k: usize,
    slot_k: usize,
) -> Result<ProductStats> {
    let req = ProductRequest::new(vec![(j, slot_j), (k, slot_k)]);
    accumulate(votes, std::slice::from_ref(&req))[0]
        .stats(&format!("pair ({j}:{slot_j}, {k}:{slot_k})"))
}

/// Mean of a single source's non-abstaining votes.
pub fn source_mean(votes: &VoteTensor, j: usize, slot: usize) -> Result<ProductStats> {
    let req = ProductRequest::new(vec![(j, slot)]);
    accumulate(votes, std::slice::from_ref(&req))[0].stats(&format!("source {j} slot {slot}"))
}

/// Fraction of sequences where the source abstains on the given slot.
pub fn abstain_rate(votes: &VoteTensor, j: usize, slot: usize) -> Result<f64> {
    let n = votes.n();
    if n == 0 {
        return Err(Error::InsufficientData(format!(
            "no sequences to estimate abstention of source {j}"
        )));
    }
    let zeros = votes.column(j)[slot..]
        .iter()
        .step_by(votes.arity(j))
        .filter(|&&v| v == 0)
        .count();
    Ok(zeros as f64 / n as f64)
}

/// Uniform access to product observables, satisfied both by sampled vote
/// tensors and by analytic population distributions.
pub trait ProductOracle: Sync {
    fn products(&self, requests: &[ProductRequest]) -> Result<Vec<ProductStats>>;
    fn abstain_rate(&self, source: usize, slot: usize) -> Result<f64>;
    /// Number of sequences behind the estimates, if they are sampled.
    fn n(&self) -> Option<usize>;
}

/// Sampled statistics backed by a vote tensor.
pub struct VotesOracle<'a> {
    votes: &'a VoteTensor,
}

impl<'a> VotesOracle<'a> {
    pub fn new(votes: &'a VoteTensor) -> Self {
        Self { votes }
    }
}

impl ProductOracle for VotesOracle<'_> {
    fn products(&self, requests: &[ProductRequest]) -> Result<Vec<ProductStats>> {
        let raw = accumulate(self.votes, requests);
        raw.into_iter()
            .zip(requests)
            .map(|(r, req)| r.stats(&format!("product over {:?}", req.terms)))
            .collect()
    }

    fn abstain_rate(&self, source: usize, slot: usize) -> Result<f64> {
        abstain_rate(self.votes, source, slot)
    }

    fn n(&self) -> Option<usize> {
        Some(self.votes.n())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AggregationRule, SourceSpec, TaskLayout, VoteTensor};
    use approx::assert_abs_diff_eq;

    fn elements(t: usize) -> TaskLayout {
        TaskLayout::new(t, AggregationRule::AnyPositive, &[]).unwrap()
    }

    fn two_source_votes() -> (Vec<SourceSpec>, VoteTensor) {
        let layout = elements(1);
        let sources = vec![
            SourceSpec::new(0, 1, vec![0], "a", &layout).unwrap(),
            SourceSpec::new(1, 1, vec![0], "b", &layout).unwrap(),
        ];
        let mut votes = VoteTensor::new(10, &sources);
        let col_a = [1, 1, 1, -1, -1, 0, 1, -1, 1, 1];
        let col_b = [1, -1, 1, -1, 1, 1, 0, -1, 1, -1];
        for (i, (&a, &b)) in col_a.iter().zip(&col_b).enumerate() {
            votes.set(i, 0, 0, a).unwrap();
            votes.set(i, 1, 0, b).unwrap();
        }
        (sources, votes)
    }

    #[test]
    fn pair_expectation_matches_hand_count() {
        let (_, votes) = two_source_votes();
        let got = pair_expectation(&votes, 0, 0, 1, 0).unwrap();
        // joint voters: rows 0,1,2,3,4,7,8,9 -> products 1,-1,1,1,-1,1,1,-1
        assert_eq!(got.support, 8);
        assert_abs_diff_eq!(got.value, 2.0 / 8.0);
    }

    #[test]
    fn pair_expectation_is_symmetric() {
        let (_, votes) = two_source_votes();
        let ab = pair_expectation(&votes, 0, 0, 1, 0).unwrap();
        let ba = pair_expectation(&votes, 1, 0, 0, 0).unwrap();
        assert_eq!(ab.value.to_bits(), ba.value.to_bits());
        assert_eq!(ab.support, ba.support);
    }

    #[test]
    fn source_mean_and_abstain() {
        let (_, votes) = two_source_votes();
        let mean = source_mean(&votes, 0, 0).unwrap();
        assert_eq!(mean.support, 9);
        assert_abs_diff_eq!(mean.value, 3.0 / 9.0);
        assert_abs_diff_eq!(abstain_rate(&votes, 0, 0).unwrap(), 0.1);
    }

    #[test]
    fn triple_product_counts_joint_support_only() {
        let layout = elements(1);
        let sources = vec![
            SourceSpec::new(0, 1, vec![0], "a", &layout).unwrap(),
            SourceSpec::new(1, 1, vec![0], "b", &layout).unwrap(),
            SourceSpec::new(2, 1, vec![0], "c", &layout).unwrap(),
        ];
        let mut votes = VoteTensor::new(4, &sources);
        let table = [[1, 1, 1], [1, -1, -1], [0, 1, 1], [-1, -1, 1]];
        for (i, row) in table.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                votes.set(i, j, 0, v).unwrap();
            }
        }
        let req = ProductRequest::new(vec![(0, 0), (1, 0), (2, 0)]);
        let raw = accumulate(&votes, &[req]);
        assert_eq!(raw[0], RawProduct { sum: 3, support: 3 });
    }

    #[test]
    fn accumulate_is_exact_across_pool_sizes() {
        let layout = elements(1);
        let sources = vec![
            SourceSpec::new(0, 1, vec![0], "a", &layout).unwrap(),
            SourceSpec::new(1, 1, vec![0], "b", &layout).unwrap(),
        ];
        let mut votes = VoteTensor::new(10_000, &sources);
        for i in 0..10_000 {
            let a = [1i8, -1, 1, 0, -1][i % 5];
            let b = [1i8, 1, -1, 1, 0][(i * 7 + 3) % 5];
            votes.set(i, 0, 0, a).unwrap();
            votes.set(i, 1, 0, b).unwrap();
        }
        let reqs = vec![
            ProductRequest::new(vec![(0, 0)]),
            ProductRequest::new(vec![(0, 0), (1, 0)]),
        ];
        let mut outputs = Vec::new();
        for threads in [1usize, 2, 7] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            outputs.push(pool.install(|| accumulate(&votes, &reqs)));
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[1], outputs[2]);
    }

    #[test]
    fn pooling_weights_by_support() {
        let parts = [
            ProductStats { value: 0.5, support: 100 },
            ProductStats { value: -0.5, support: 300 },
        ];
        let pooled = pool_stats(&parts, "test").unwrap();
        assert_abs_diff_eq!(pooled.value, -0.25);
        assert_eq!(pooled.support, 400);
    }

    #[test]
    fn zero_support_is_an_error() {
        let parts = [ProductStats { value: 0.0, support: 0 }];
        assert!(matches!(
            pool_stats(&parts, "x"),
            Err(Error::InsufficientData(_))
        ));
        let (_, votes) = two_source_votes();
        let req = ProductRequest::new(vec![(0, 0)]);
        let raw = RawProduct::default();
        assert!(raw.stats("x").is_err());
        let _ = (votes, req);
    }
}
