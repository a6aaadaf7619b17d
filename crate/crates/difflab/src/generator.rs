//! Finite-state instantiation of the operator formalism: generator and
//! adjoint action, Dynkin's identity, the reversed-generator formula, the
//! generator-based ELBO integrand, and Girsanov path weights.
//!
//! The abstract operator language becomes plain linear algebra here: a
//! generator is a rate matrix, its action on a test function is R^T phi, and
//! its adjoint drives the marginals as R q.

use ndarray::{Array1, Array2};

use crate::ctmc::{JumpPath, RateMatrix, SequenceRateSpec};
use crate::error::{Error, Result};
use crate::oracle;
use crate::simplex::SimplexVector;

/// Generator of a finite-state Markov process.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteGenerator {
    rate: RateMatrix,
}

impl FiniteGenerator {
    pub fn new(rate: RateMatrix) -> Self {
        Self { rate }
    }

    /// Dense sequence-level generator from per-dimension rates.
    pub fn from_sequence_spec(spec: &SequenceRateSpec) -> Result<Self> {
        Ok(Self { rate: crate::ctmc::kron_sum_dense(spec)? })
    }

    pub fn dim(&self) -> usize {
        self.rate.dim()
    }

    pub fn rate(&self) -> &RateMatrix {
        &self.rate
    }

    /// Generator action (L phi)(x) = sum_y R(y, x) phi(y) = (R^T phi)(x).
    pub fn apply(&self, phi: &Array1<f64>) -> Result<Array1<f64>> {
        if phi.len() != self.dim() {
            return Err(Error::Argument("test function dimension mismatch".into()));
        }
        Ok(self.rate.entries().t().dot(phi))
    }

    /// Adjoint action (L* q)(x) = sum_y R(x, y) q(y) = (R q)(x).
    pub fn adjoint_apply(&self, q: &Array1<f64>) -> Result<Array1<f64>> {
        if q.len() != self.dim() {
            return Err(Error::Argument("density dimension mismatch".into()));
        }
        Ok(self.rate.entries().dot(q))
    }
}

/// |E_{q_tau}[phi] - E_{q_0}[phi] - int_0^tau E_{q_t}[L_t phi] dt| with RK4
/// marginals on a shared grid and Simpson quadrature over the same nodes.
/// `steps` must be even.
pub fn dynkin_residual<F>(
    gen_fn: F,
    phi: &Array1<f64>,
    q0: &SimplexVector,
    tau: f64,
    steps: usize,
) -> Result<f64>
where
    F: Fn(f64) -> Result<FiniteGenerator>,
{
    if tau == 0.0 {
        return Ok(0.0);
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Argument(format!("tau {tau} outside [0, 1]")));
    }
    if steps == 0 || steps % 2 != 0 {
        return Err(Error::Argument("need an even positive step count".into()));
    }
    let h = tau / steps as f64;
    // Marginals at every grid node via one RK4 sweep.
    let mut marginals = Vec::with_capacity(steps + 1);
    let mut q = q0.clone();
    marginals.push(q.clone());
    for i in 0..steps {
        let t = i as f64 * h;
        q = crate::ctmc::integrate_master(
            |s| Ok(gen_fn(s)?.rate().clone()),
            &q,
            t,
            t + h,
            1,
        )?;
        marginals.push(q.clone());
    }
    let expect = |q: &SimplexVector, v: &Array1<f64>| -> f64 {
        q.probs().iter().zip(v.iter()).map(|(&p, &x)| p * x).sum()
    };
    // Simpson over the grid nodes of E_{q_t}[L_t phi].
    let mut integral = 0.0;
    for (i, q_i) in marginals.iter().enumerate() {
        let t = i as f64 * h;
        let l_phi = gen_fn(t)?.apply(phi)?;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += w * expect(q_i, &l_phi);
    }
    integral *= h / 3.0;
    let lhs = expect(marginals.last().unwrap(), phi) - expect(&marginals[0], phi);
    Ok((lhs - integral).abs())
}

/// Reversed generator via the operator formula
/// L_hat phi = (1/q)[ L*(q phi) - phi L* q ], materialized by applying the
/// adjoint to the q-weighted basis functions. Coincides with the reverse
/// rate matrix construction.
pub fn reversed_generator(gen: &FiniteGenerator, q: &SimplexVector) -> Result<FiniteGenerator> {
    let n = gen.dim();
    if q.len() != n {
        return Err(Error::Argument("dimension mismatch".into()));
    }
    if q.probs().iter().any(|&p| p <= 0.0) {
        return Err(Error::Support("q must be strictly positive".into()));
    }
    let q_arr = q.as_array();
    let l_star_q = gen.adjoint_apply(&q_arr)?;
    // Column j of the reversed rate matrix in generator convention:
    // (L_hat e_j)(x) contributes R_hat(j, x).
    let mut m = Array2::zeros((n, n));
    for j in 0..n {
        let mut qe = Array1::zeros(n);
        qe[j] = q_arr[j];
        let l_star_qe = gen.adjoint_apply(&qe)?;
        for x in 0..n {
            // (L_hat e_j)(x) = (1/q(x)) [ (L*(q e_j))(x) - e_j(x) (L* q)(x) ]
            let val = (l_star_qe[x] - if x == j { l_star_q[x] } else { 0.0 }) / q_arr[x];
            m[(j, x)] = val;
        }
    }
    Ok(FiniteGenerator::new(RateMatrix::new(m)?))
}

/// Local ELBO discrepancy (L_hat alpha / alpha - L_hat log alpha)(x) with
/// alpha = p_theta / q: nonnegative, zero when the p-ratios match the
/// q-ratios on every reachable neighbor.
pub fn generator_elbo_integrand(
    gen_reversed: &FiniteGenerator,
    q: &SimplexVector,
    p_theta: &SimplexVector,
    x: usize,
) -> Result<f64> {
    let n = gen_reversed.dim();
    if q.len() != n || p_theta.len() != n || x >= n {
        return Err(Error::Argument("dimension mismatch".into()));
    }
    if q.probs().iter().any(|&v| v <= 0.0) || p_theta.probs().iter().any(|&v| v <= 0.0) {
        return Err(Error::Support("q and p_theta must be strictly positive".into()));
    }
    let alpha: Array1<f64> = q
        .probs()
        .iter()
        .zip(p_theta.probs())
        .map(|(&qi, &pi)| pi / qi)
        .collect();
    let log_alpha = alpha.mapv(f64::ln);
    let l_alpha = gen_reversed.apply(&alpha)?;
    let l_log_alpha = gen_reversed.apply(&log_alpha)?;
    Ok(l_alpha[x] / alpha[x] - l_log_alpha[x])
}

/// Girsanov weight of one jump path:
/// M_1 = (alpha_h(x_h)/alpha_0(x_0)) exp{ -int_0^h (d_t + L_t) alpha / alpha dt },
/// with the time derivative by fourth-order finite differences and Simpson
/// integration between jumps. `alpha_fn(t, state_index)` must be strictly
/// positive and smooth in t.
pub fn girsanov_weight<FG, FA>(
    gen_fn: FG,
    alpha_fn: FA,
    path: &JumpPath,
    horizon: f64,
    state_index: impl Fn(&[usize]) -> usize,
) -> Result<f64>
where
    FG: Fn(f64) -> Result<FiniteGenerator>,
    FA: Fn(f64, usize) -> f64,
{
    let n = gen_fn(0.0)?.dim();
    let alpha_vec = |t: f64| -> Array1<f64> {
        Array1::from_iter((0..n).map(|x| alpha_fn(t, x)))
    };
    let check_positive = |v: f64, t: f64| -> Result<f64> {
        if v <= 0.0 || !v.is_finite() {
            return Err(Error::Domain(format!("alpha must be positive, got {v} at t = {t}")));
        }
        Ok(v)
    };
    let mut segments = Vec::new();
    let mut state = path.initial.clone();
    let mut start = 0.0;
    for e in &path.events {
        segments.push((start, e.time, state_index(&state)));
        state[e.coord] = e.symbol;
        start = e.time;
    }
    segments.push((start, horizon, state_index(&state)));

    let mut log_weight = 0.0;
    for &(a, b, x) in &segments {
        if b <= a {
            continue;
        }
        let integrand = |t: f64| -> Result<f64> {
            let dt_alpha = oracle::finite_diff(|s| alpha_fn(s, x), t, 1, 1e-6)?;
            let l_alpha = gen_fn(t)?.apply(&alpha_vec(t))?;
            let denom = check_positive(alpha_fn(t, x), t)?;
            Ok((dt_alpha + l_alpha[x]) / denom)
        };
        // Simpson with 33 nodes per inter-jump segment.
        let nodes = 33;
        let h = (b - a) / (nodes - 1) as f64;
        let mut sum = 0.0;
        for i in 0..nodes {
            let t = if i == nodes - 1 { b } else { a + i as f64 * h };
            let w = if i == 0 || i == nodes - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            sum += w * integrand(t)?;
        }
        log_weight -= sum * h / 3.0;
    }
    let x0 = state_index(&path.initial);
    let x1 = state_index(&path.final_state(horizon));
    let a0 = check_positive(alpha_fn(0.0, x0), 0.0)?;
    let a1 = check_positive(alpha_fn(horizon, x1), horizon)?;
    Ok(a1 / a0 * log_weight.exp())
}
