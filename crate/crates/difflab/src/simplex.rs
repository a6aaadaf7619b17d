//! Probability vectors over finite alphabets and dense distributions over
//! product spaces, plus the sequence index arithmetic used everywhere.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Default cap on dense representations of `K^d` state spaces.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Absolute ceiling for the dense cap, even when overridden.
pub const MAX_DENSE_CAP: usize = 65536;

/// Dense cap, overridable through the `DIFFLAB_DENSE_CAP` environment
/// variable. Values above [`MAX_DENSE_CAP`] still hard-error.
pub fn dense_cap() -> usize {
    match std::env::var("DIFFLAB_DENSE_CAP") {
        Ok(v) => v.parse::<usize>().unwrap_or(DEFAULT_DENSE_CAP).min(MAX_DENSE_CAP),
        Err(_) => DEFAULT_DENSE_CAP,
    }
}

pub fn check_dense_cap(states: usize, what: &str) -> Result<()> {
    let cap = dense_cap();
    if states > cap {
        return Err(Error::Capacity(format!(
            "{what}: {states} states exceeds dense cap {cap}"
        )));
    }
    Ok(())
}

/// A probability vector over a finite alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexVector {
    probs: Vec<f64>,
}

impl SimplexVector {
    /// Validates non-negativity and unit mass (within [`SIMPLEX_TOL`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Argument("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < -SIMPLEX_TOL {
                return Err(Error::Argument(format!("invalid simplex entry {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Argument(format!("simplex sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes a non-negative weight vector. Errors when the total mass
    /// vanishes (a zero-probability conditioning event).
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for &w in &weights {
            if !w.is_finite() || w < -SIMPLEX_TOL {
                return Err(Error::Argument(format!("invalid weight {w}")));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::Conditioning("total weight is zero".into()));
        }
        let probs = weights.iter().map(|&w| (w / sum).max(0.0)).collect();
        Ok(Self { probs })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        Self { probs: vec![1.0 / len as f64; len] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn as_array(&self) -> Array1<f64> {
        Array1::from_vec(self.probs.clone())
    }

    /// Half the L1 distance to `other`.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Draws an index from this distribution.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Converts a sequence over `{0..k-1}^d` to its dense index. Coordinate 0 is
/// the most significant digit, matching the Kronecker stacking convention.
pub fn seq_to_index(seq: &[usize], k: usize) -> usize {
    seq.iter().fold(0, |acc, &s| acc * k + s)
}

/// Inverse of [`seq_to_index`].
pub fn index_to_seq(mut index: usize, k: usize, d: usize) -> Vec<usize> {
    let mut seq = vec![0; d];
    for slot in seq.iter_mut().rev() {
        *slot = index % k;
        index /= k;
    }
    seq
}

/// A dense distribution over `k^d` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    k: usize,
    d: usize,
    probs: Vec<f64>,
}

impl SequenceDistribution {
    pub fn new(k: usize, d: usize, probs: Vec<f64>) -> Result<Self> {
        let states = k.checked_pow(d as u32).ok_or_else(|| {
            Error::Capacity(format!("state space k={k}, d={d} overflows"))
        })?;
        check_dense_cap(states, "SequenceDistribution")?;
        if probs.len() != states {
            return Err(Error::Argument(format!(
                "expected {states} probabilities, got {}",
                probs.len()
            )));
        }
        SimplexVector::new(probs.clone())?;
        Ok(Self { k, d, probs })
    }

    /// Product distribution of identical or distinct per-coordinate marginals.
    pub fn product(marginals: &[SimplexVector]) -> Result<Self> {
        let d = marginals.len();
        if d == 0 {
            return Err(Error::Argument("empty marginal list".into()));
        }
        let k = marginals[0].len();
        if marginals.iter().any(|m| m.len() != k) {
            return Err(Error::Argument("marginals of unequal length".into()));
        }
        let states = k.pow(d as u32);
        check_dense_cap(states, "SequenceDistribution::product")?;
        let mut probs = vec![1.0; states];
        for (idx, p) in probs.iter_mut().enumerate() {
            let seq = index_to_seq(idx, k, d);
            for (c, m) in seq.iter().zip(marginals) {
                *p *= m.probs()[*c];
            }
        }
        Ok(Self { k, d, probs })
    }

    pub fn point_mass(k: usize, d: usize, seq: &[usize]) -> Result<Self> {
        let states = k.pow(d as u32);
        check_dense_cap(states, "SequenceDistribution::point_mass")?;
        let mut probs = vec![0.0; states];
        probs[seq_to_index(seq, k)] = 1.0;
        Self::new(k, d, probs)
    }

    pub fn alphabet(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn states(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob_of(&self, seq: &[usize]) -> f64 {
        self.probs[seq_to_index(seq, self.k)]
    }

    pub fn tv_distance(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Marginal of coordinate `coord` (the S_k marginalization operator).
    pub fn coordinate_marginal(&self, coord: usize) -> SimplexVector {
        let mut marg = vec![0.0; self.k];
        for (idx, &p) in self.probs.iter().enumerate() {
            let seq = index_to_seq(idx, self.k, self.d);
            marg[seq[coord]] += p;
        }
        SimplexVector::from_unnormalized(marg).expect("valid marginal")
    }

    /// Embeds a distribution over a `k`-letter alphabet into a larger
    /// `k_total`-letter alphabet (extra symbols get probability zero).
    pub fn embed(&self, k_total: usize) -> Result<Self> {
        if k_total < self.k {
            return Err(Error::Argument("target alphabet smaller than source".into()));
        }
        let states = k_total.pow(self.d as u32);
        check_dense_cap(states, "SequenceDistribution::embed")?;
        let mut probs = vec![0.0; states];
        for (idx, &p) in self.probs.iter().enumerate() {
            let seq = index_to_seq(idx, self.k, self.d);
            probs[seq_to_index(&seq, k_total)] = p;
        }
        Self::new(k_total, self.d, probs)
    }
}
