//! Discrete-state discrete-time kernels: interpolation transition matrices
//! (uniform / masking / mixtures), Woodbury inverses and windowed
//! transitions, and the reverse-posterior family.
//!
//! Matrix convention throughout: destination = row, source = column, so
//! marginals evolve by left-multiplication, q_t = Q_t q_0.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::SimplexVector;

/// Dense alphabet cap for this module; sequence-level structure lives in
/// the CTMC machinery.
pub const MAX_ALPHABET: usize = 64;

/// Floor applied inside logarithms only, never inside normalizations.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Uniform,
    Mask,
    Mixture,
}

/// Reference noise distribution over the (possibly mask-augmented) alphabet.
/// When masking is involved, MASK is always the last index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseSpec", into = "NoiseSpec")]
pub struct NoiseDistribution {
    kind: NoiseKind,
    probs: SimplexVector,
}

/// Wire format: {"kind": ..., "k_total": ..., "uniform_weight": ...}.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSpec {
    kind: NoiseKind,
    k_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uniform_weight: Option<f64>,
}

impl TryFrom<NoiseSpec> for NoiseDistribution {
    type Error = String;
    fn try_from(spec: NoiseSpec) -> std::result::Result<Self, String> {
        let built = match spec.kind {
            NoiseKind::Uniform => NoiseDistribution::uniform(spec.k_total),
            NoiseKind::Mask => NoiseDistribution::mask(spec.k_total),
            NoiseKind::Mixture => NoiseDistribution::mixture(
                spec.k_total,
                spec.uniform_weight.ok_or("mixture requires uniform_weight")?,
            ),
        };
        built.map_err(|e| e.to_string())
    }
}

impl From<NoiseDistribution> for NoiseSpec {
    fn from(n: NoiseDistribution) -> Self {
        let uniform_weight = match n.kind {
            NoiseKind::Mixture => {
                // Recover the uniform weight from the shared component mass.
                Some(n.probs.probs()[0] * n.k_total() as f64)
            }
            _ => None,
        };
        NoiseSpec { kind: n.kind, k_total: n.k_total(), uniform_weight }
    }
}

impl NoiseDistribution {
    /// Uniform resampling over all `k_total` symbols.
    pub fn uniform(k_total: usize) -> Result<Self> {
        check_alphabet(k_total)?;
        Ok(Self { kind: NoiseKind::Uniform, probs: SimplexVector::uniform(k_total) })
    }

    /// Absorbing process: point mass on MASK = index `k_total - 1`.
    pub fn mask(k_total: usize) -> Result<Self> {
        check_alphabet(k_total)?;
        if k_total < 2 {
            return Err(Error::Argument("mask alphabet needs at least 2 symbols".into()));
        }
        Ok(Self { kind: NoiseKind::Mask, probs: SimplexVector::one_hot(k_total, k_total - 1) })
    }

    /// Convex mixture of the uniform law over the shared alphabet (including
    /// MASK) and the MASK point mass.
    pub fn mixture(k_total: usize, uniform_weight: f64) -> Result<Self> {
        check_alphabet(k_total)?;
        if k_total < 2 {
            return Err(Error::Argument("mixture alphabet needs at least 2 symbols".into()));
        }
        if !(0.0..=1.0).contains(&uniform_weight) {
            return Err(Error::Argument(format!(
                "mixture weight {uniform_weight} outside [0, 1]"
            )));
        }
        let u = 1.0 / k_total as f64;
        let mut probs = vec![uniform_weight * u; k_total];
        probs[k_total - 1] += 1.0 - uniform_weight;
        Ok(Self { kind: NoiseKind::Mixture, probs: SimplexVector::new(probs)? })
    }

    /// Arbitrary user-supplied noise simplex.
    pub fn custom(probs: SimplexVector) -> Result<Self> {
        check_alphabet(probs.len())?;
        Ok(Self { kind: NoiseKind::Mixture, probs })
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn k_total(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        self.probs.probs()
    }

    pub fn mask_index(&self) -> Option<usize> {
        match self.kind {
            NoiseKind::Mask => Some(self.k_total() - 1),
            _ => None,
        }
    }
}

fn check_alphabet(k_total: usize) -> Result<()> {
    if k_total == 0 {
        return Err(Error::Argument("empty alphabet".into()));
    }
    if k_total > MAX_ALPHABET {
        return Err(Error::Capacity(format!(
            "alphabet size {k_total} exceeds the dense cap {MAX_ALPHABET}"
        )));
    }
    Ok(())
}

/// A column-stochastic transition operator.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: Array2<f64>,
}

impl TransitionMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(Error::Argument("transition matrix must be square".into()));
        }
        for col in 0..n {
            let sum: f64 = entries.column(col).sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Argument(format!("column {col} sums to {sum}")));
            }
            if entries.column(col).iter().any(|&v| v < -1e-15) {
                return Err(Error::Argument(format!("column {col} has negative entries")));
            }
        }
        Ok(Self { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn apply(&self, q: &SimplexVector) -> Result<SimplexVector> {
        if q.len() != self.dim() {
            return Err(Error::Argument("dimension mismatch".into()));
        }
        SimplexVector::from_unnormalized(self.entries.dot(&q.as_array()).to_vec())
    }

    /// self âˆ˜ other (apply `other` first).
    pub fn compose(&self, other: &TransitionMatrix) -> Result<TransitionMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::Argument("dimension mismatch".into()));
        }
        TransitionMatrix::new(self.entries.dot(&other.entries))
    }
}

/// Q = alpha I + (1 - alpha) p_noise 1^T.
pub fn interpolation_matrix(alpha: f64, noise: &NoiseDistribution) -> Result<TransitionMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let k = noise.k_total();
    let mut m = Array2::zeros((k, k));
    for col in 0..k {
        for row in 0..k {
            let mut v = (1.0 - alpha) * noise.probs()[row];
            if row == col {
                v += alpha;
            }
            m[(row, col)] = v;
        }
    }
    TransitionMatrix::new(m)
}

/// Woodbury inverse (1/alpha)(I - (1 - alpha) p_noise 1^T). Not stochastic;
/// returned as a raw operator.
pub fn inverse_interpolation(alpha: f64, noise: &NoiseDistribution) -> Result<Array2<f64>> {
    if alpha <= 0.0 {
        return Err(Error::Singular(format!(
            "interpolation matrix with alpha = {alpha} is not invertible"
        )));
    }
    if alpha > 1.0 {
        return Err(Error::Argument(format!("alpha {alpha} outside (0, 1]")));
    }
    let k = noise.k_total();
    let mut m = Array2::zeros((k, k));
    for col in 0..k {
        for row in 0..k {
            let mut v = -(1.0 - alpha) * noise.probs()[row];
            if row == col {
                v += 1.0;
            }
            m[(row, col)] = v / alpha;
        }
    }
    Ok(m)
}

/// Window transition Q_{t|s} = (alpha_t/alpha_s) I + (1 - alpha_t/alpha_s) p 1^T,
/// satisfying Q_{t|s} Q_s = Q_t.
pub fn window_matrix(
    alpha_s: f64,
    alpha_t: f64,
    noise: &NoiseDistribution,
) -> Result<TransitionMatrix> {
    check_window(alpha_s, alpha_t)?;
    interpolation_matrix(alpha_t / alpha_s, noise)
}

fn check_window(alpha_s: f64, alpha_t: f64) -> Result<()> {
    if !(alpha_t > 0.0 && alpha_t <= alpha_s && alpha_s <= 1.0) {
        return Err(Error::Argument(format!(
            "need 0 < alpha_t <= alpha_s <= 1, got alpha_s = {alpha_s}, alpha_t = {alpha_t}"
        )));
    }
    Ok(())
}

/// Marginal alpha_t x0 + (1 - alpha_t) p_noise.
pub fn forward_marginal(
    x0: &SimplexVector,
    alpha_t: f64,
    noise: &NoiseDistribution,
) -> Result<SimplexVector> {
    if !(0.0..=1.0).contains(&alpha_t) {
        return Err(Error::Argument(format!("alpha {alpha_t} outside [0, 1]")));
    }
    if x0.len() != noise.k_total() {
        return Err(Error::Argument("x0 and noise alphabet mismatch".into()));
    }
    let probs = x0
        .probs()
        .iter()
        .zip(noise.probs())
        .map(|(x, p)| alpha_t * x + (1.0 - alpha_t) * p)
        .collect();
    SimplexVector::new(probs)
}

/// Forward probability q(x_t = x | x_0 = x0) under the interpolation kernel.
pub fn forward_prob(x: usize, x0: usize, alpha_t: f64, noise: &NoiseDistribution) -> f64 {
    let base = (1.0 - alpha_t) * noise.probs()[x];
    if x == x0 {
        alpha_t + base
    } else {
        base
    }
}

/// Exact posterior q(x_s | x_t, x_0) proportional to
/// (Q_{t|s}^T e_{x_t}) âŠ™ (Q_s e_{x_0}).
pub fn reverse_posterior(
    x_t: usize,
    x0: usize,
    alpha_s: f64,
    alpha_t: f64,
    noise: &NoiseDistribution,
) -> Result<SimplexVector> {
    check_window(alpha_s, alpha_t)?;
    let k = noise.k_total();
    check_state(x_t, k)?;
    check_state(x0, k)?;
    let a_ts = alpha_t / alpha_s;
    let mut weights = vec![0.0; k];
    for z in 0..k {
        // Q_{t|s}[x_t, z] * Q_s[z, x0]
        let lik = forward_prob(x_t, z, a_ts, noise);
        let prior = forward_prob(z, x0, alpha_s, noise);
        weights[z] = lik * prior;
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Conditioning(format!(
            "x_t = {x_t} has probability zero given x0 = {x0}"
        )));
    }
    SimplexVector::from_unnormalized(weights)
}

/// Masking shortcut: x_t != MASK is kept; x_t = MASK splits between staying
/// masked and jumping to x0.
pub fn reverse_posterior_masked(
    x_t: usize,
    x0: usize,
    alpha_s: f64,
    alpha_t: f64,
    k_total: usize,
) -> Result<SimplexVector> {
    check_window(alpha_s, alpha_t)?;
    check_state(x_t, k_total)?;
    check_state(x0, k_total)?;
    let mask = k_total - 1;
    if x_t != mask {
        return Ok(SimplexVector::one_hot(k_total, x_t));
    }
    if alpha_t >= 1.0 {
        return Err(Error::Conditioning(
            "x_t = MASK has probability zero at alpha_t = 1".into(),
        ));
    }
    let denom = 1.0 - alpha_t;
    let mut probs = vec![0.0; k_total];
    probs[mask] = (1.0 - alpha_s) / denom;
    probs[x0] += (alpha_s - alpha_t) / denom;
    SimplexVector::new(probs)
}

/// Case-split reparameterisation of the interpolation posterior:
/// a lambda-mixture when x_t = x0, a mu-mixture of {x0, x_t, noise} otherwise.
pub fn zheng_reparameterized_posterior(
    x_t: usize,
    x0: usize,
    alpha_s: f64,
    alpha_t: f64,
    noise: &NoiseDistribution,
) -> Result<SimplexVector> {
    check_window(alpha_s, alpha_t)?;
    let k = noise.k_total();
    check_state(x_t, k)?;
    check_state(x0, k)?;
    let a_ts = alpha_t / alpha_s;
    let p_xt = noise.probs()[x_t];
    let mut probs = vec![0.0; k];
    if x_t == x0 {
        let denom = alpha_t + (1.0 - alpha_t) * p_xt;
        if denom <= 0.0 {
            return Err(Error::Conditioning(format!(
                "x_t = {x_t} has probability zero given x0 = {x0}"
            )));
        }
        let lambda = (1.0 - alpha_s) * (1.0 - a_ts) * p_xt / denom;
        for (z, p) in probs.iter_mut().enumerate() {
            *p = lambda * noise.probs()[z];
            if z == x_t {
                *p += 1.0 - lambda;
            }
        }
    } else {
        if alpha_t >= 1.0 || p_xt <= 0.0 {
            return Err(Error::Conditioning(format!(
                "x_t = {x_t} has probability zero given x0 = {x0}"
            )));
        }
        let mu = (1.0 - alpha_s) / (1.0 - alpha_t);
        for (z, p) in probs.iter_mut().enumerate() {
            *p = mu * (1.0 - a_ts) * noise.probs()[z];
            if z == x0 {
                *p += 1.0 - mu;
            }
            if z == x_t {
                *p += mu * a_ts;
            }
        }
    }
    SimplexVector::new(probs)
}

/// Reverse transition under a soft clean-data prediction, in the
/// marginalised-posterior (sum) form:
/// p(x_s = z | x_t) = q(x_t | x_s = z) sum_{x0} [q(z|x0)/q(x_t|x0)] x0_dist(x0).
/// With a one-hot `x0_dist` this reduces to [`reverse_posterior`], and with
/// the exact Bayes posterior it reproduces the true reverse marginal.
///
/// Model mass on clean values incompatible with the observation (masking
/// kernels: a revealed token pins x0) is conditioned away: the prediction is
/// restricted to {x0 : q(x_t | x0) > 0} and renormalized, which is the
/// carry-over convention for revealed tokens.
pub fn posterior_from_denoiser(
    x_t: usize,
    x0_dist: &SimplexVector,
    alpha_s: f64,
    alpha_t: f64,
    noise: &NoiseDistribution,
) -> Result<SimplexVector> {
    check_window(alpha_s, alpha_t)?;
    let k = noise.k_total();
    check_state(x_t, k)?;
    if x0_dist.len() != k {
        return Err(Error::Argument("x0_dist and alphabet mismatch".into()));
    }
    let a_ts = alpha_t / alpha_s;
    let support_mass: f64 = (0..k)
        .filter(|&x0| forward_prob(x_t, x0, alpha_t, noise) > 0.0)
        .map(|x0| x0_dist.probs()[x0])
        .sum();
    if support_mass <= 0.0 {
        return Err(Error::Conditioning(format!(
            "x0_dist has no mass on the support of q(x_t = {x_t} | .)"
        )));
    }
    let mut tilt = 0.0; // sum_x0 q(z|x0)/q(x_t|x0) x0_dist(x0), z-independent part handled below
    let mut weights = vec![0.0; k];
    // Split q(z|x0) = alpha_s delta_{z,x0} + (1-alpha_s) p(z); the delta part
    // contributes only at z = x0, the rest is shared across z.
    for x0 in 0..k {
        let denom = forward_prob(x_t, x0, alpha_t, noise);
        if denom <= 0.0 {
            continue;
        }
        let w = x0_dist.probs()[x0] / support_mass;
        if w == 0.0 {
            continue;
        }
        weights[x0] += alpha_s * w / denom;
        tilt += w / denom;
    }
    for (z, wz) in weights.iter_mut().enumerate() {
        let sum_ratio = *wz + (1.0 - alpha_s) * noise.probs()[z] * tilt;
        *wz = forward_prob(x_t, z, a_ts, noise) * sum_ratio;
    }
    SimplexVector::from_unnormalized(weights)
}

/// Matrix form of the denoiser posterior:
/// (Q_{t|s}^T e_{x_t}) âŠ™ (Q_s x0_dist) / (e_{x_t}^T Q_t x0_dist).
/// Coincides with the sum form on one-hot predictions; differs on soft ones.
pub fn posterior_from_denoiser_matrix_form(
    x_t: usize,
    x0_dist: &SimplexVector,
    alpha_s: f64,
    alpha_t: f64,
    noise: &NoiseDistribution,
) -> Result<SimplexVector> {
    check_window(alpha_s, alpha_t)?;
    let k = noise.k_total();
    check_state(x_t, k)?;
    if x0_dist.len() != k {
        return Err(Error::Argument("x0_dist and alphabet mismatch".into()));
    }
    let a_ts = alpha_t / alpha_s;
    let prior = forward_marginal(x0_dist, alpha_s, noise)?;
    let denom: f64 = (0..k)
        .map(|x0| forward_prob(x_t, x0, alpha_t, noise) * x0_dist.probs()[x0])
        .sum();
    if denom <= 0.0 {
        return Err(Error::Conditioning(format!(
            "e_{{x_t}}^T Q_t x0_dist vanished at x_t = {x_t}"
        )));
    }
    let weights = (0..k)
        .map(|z| forward_prob(x_t, z, a_ts, noise) * prior.probs()[z])
        .collect();
    SimplexVector::from_unnormalized(weights)
}

fn check_state(x: usize, k: usize) -> Result<()> {
    if x >= k {
        return Err(Error::Argument(format!("state {x} outside alphabet of size {k}")));
    }
    Ok(())
}
