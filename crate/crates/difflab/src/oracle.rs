//! Brute-force reference implementations backing derived test values:
//! enumerated Bayes posteriors over dense chains, composite Simpson
//! quadrature, and high-order finite differences.
//!
//! Everything here is deliberately slow and simple, and shares no code with
//! the fast paths it validates (this module depends on `schedule` only).

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::simplex::{check_dense_cap, SimplexVector};

/// A fully materialized Markov chain on a finite state space: `steps[i]`
/// is the column-stochastic operator carrying the marginal at `times[i]`
/// to the marginal at `times[i+1]`.
#[derive(Debug, Clone)]
pub struct DenseChain {
    times: Vec<f64>,
    steps: Vec<Array2<f64>>,
}

impl DenseChain {
    pub fn new(times: Vec<f64>, steps: Vec<Array2<f64>>) -> Result<Self> {
        if times.len() != steps.len() + 1 {
            return Err(Error::Argument(format!(
                "{} times requires {} step operators, got {}",
                times.len(),
                times.len().saturating_sub(1),
                steps.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("times must be strictly increasing".into()));
        }
        let mut dim = None;
        for (i, m) in steps.iter().enumerate() {
            let n = m.nrows();
            check_dense_cap(n, "DenseChain")?;
            if m.ncols() != n || *dim.get_or_insert(n) != n {
                return Err(Error::Argument("inconsistent operator shapes".into()));
            }
            for col in 0..n {
                let s: f64 = m.column(col).sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Argument(format!(
                        "step {i} column {col} sums to {s}"
                    )));
                }
                if m.column(col).iter().any(|&v| v < -1e-15) {
                    return Err(Error::Argument(format!("step {i} has negative entries")));
                }
            }
        }
        Ok(Self { times, steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].nrows()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Product of the step operators from grid index `from` to `to`.
    pub fn operator(&self, from: usize, to: usize) -> Result<Array2<f64>> {
        if to < from || to >= self.times.len() {
            return Err(Error::Argument(format!("bad window [{from}, {to}]")));
        }
        let mut op = Array2::eye(self.dim());
        for step in &self.steps[from..to] {
            op = step.dot(&op);
        }
        Ok(op)
    }

    /// Marginal at grid index `at`, starting from `q0` at index 0.
    pub fn marginal(&self, q0: &SimplexVector, at: usize) -> Result<SimplexVector> {
        let op = self.operator(0, at)?;
        let q = op.dot(&q0.as_array());
        SimplexVector::from_unnormalized(q.to_vec())
    }
}

/// Posterior q(x_s | x_t, x_0) over states at grid index `s_index`, by
/// literal enumeration: prior slice forward from x0, likelihood slice
/// backward from x_t.
pub fn bayes_posterior(
    chain: &DenseChain,
    s_index: usize,
    t_index: usize,
    x_t: usize,
    x0: usize,
) -> Result<SimplexVector> {
    if s_index > t_index || t_index >= chain.times.len() {
        return Err(Error::Argument(format!(
            "bad indices s={s_index}, t={t_index}"
        )));
    }
    let prior = chain.operator(0, s_index)?; // q(x_s | x_0)
    let lik = chain.operator(s_index, t_index)?; // q(x_t | x_s)
    let n = chain.dim();
    let mut weights = vec![0.0; n];
    for z in 0..n {
        weights[z] = lik[(x_t, z)] * prior[(z, x0)];
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Conditioning(format!(
            "event x_t = {x_t} at index {t_index} has probability zero given x0 = {x0}"
        )));
    }
    SimplexVector::from_unnormalized(weights)
}

/// Composite Simpson quadrature on [a, b] with an odd number of nodes.
pub fn quadrature(f: impl Fn(f64) -> f64, a: f64, b: f64, nodes: usize) -> Result<f64> {
    if nodes < 3 || nodes % 2 == 0 {
        return Err(Error::Argument(format!("Simpson needs an odd node count >= 3, got {nodes}")));
    }
    let h = (b - a) / (nodes - 1) as f64;
    let mut sum = 0.0;
    for i in 0..nodes {
        let x = if i == nodes - 1 { b } else { a + i as f64 * h };
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("integrand non-finite at x = {x}")));
        }
        let w = if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * v;
    }
    Ok(sum * h / 3.0)
}

/// Fourth-order central finite differences for first and second derivatives.
pub fn finite_diff(f: impl Fn(f64) -> f64, x: f64, order: u8, h: f64) -> Result<f64> {
    let stencil = [f(x - 2.0 * h), f(x - h), f(x), f(x + h), f(x + 2.0 * h)];
    if stencil.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("stencil around x = {x} left the domain")));
    }
    match order {
        1 => Ok((stencil[0] - 8.0 * stencil[1] + 8.0 * stencil[3] - stencil[4]) / (12.0 * h)),
        2 => Ok(
            (-stencil[0] + 16.0 * stencil[1] - 30.0 * stencil[2] + 16.0 * stencil[3]
                - stencil[4])
                / (12.0 * h * h),
        ),
        _ => Err(Error::Argument(format!("derivative order {order} not supported"))),
    }
}

/// Simpson quadrature of a vector-valued integrand; used for time integrals
/// of expectations over finite state spaces.
pub fn quadrature_vec(
    f: impl Fn(f64) -> Result<Array1<f64>>,
    a: f64,
    b: f64,
    nodes: usize,
) -> Result<Array1<f64>> {
    if nodes < 3 || nodes % 2 == 0 {
        return Err(Error::Argument(format!("Simpson needs an odd node count >= 3, got {nodes}")));
    }
    let h = (b - a) / (nodes - 1) as f64;
    let mut acc: Option<Array1<f64>> = None;
    for i in 0..nodes {
        let x = if i == nodes - 1 { b } else { a + i as f64 * h };
        let v = f(x)?;
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric(format!("integrand non-finite at x = {x}")));
        }
        let w = if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        match &mut acc {
            None => acc = Some(v * w),
            Some(a) => *a = &*a + &(v * w),
        }
    }
    Ok(acc.expect("nodes >= 3") * (h / 3.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_polynomial() {
        let v = quadrature(|x| x * x, 0.0, 1.0, 65).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn simpson_constant_exact() {
        let v = quadrature(|_| 2.5, -1.0, 3.0, 5).unwrap();
        assert!((v - 10.0).abs() < 1e-14);
    }

    #[test]
    fn simpson_fourth_order_on_exp() {
        let exact = 1f64.exp() - 1.0;
        let e1 = (quadrature(f64::exp, 0.0, 1.0, 9).unwrap() - exact).abs();
        let e2 = (quadrature(f64::exp, 0.0, 1.0, 17).unwrap() - exact).abs();
        let ratio = e1 / e2;
        assert!((8.0..32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn simpson_rejects_even_nodes() {
        assert!(quadrature(|x| x, 0.0, 1.0, 4).is_err());
    }

    #[test]
    fn finite_diff_cubic() {
        let d = finite_diff(|x| x * x * x, 2.0, 1, 1e-3).unwrap();
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_gaussian_second_derivative() {
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let x = 0.7;
        let analytic = f(x) * (x * x - 1.0);
        let fd = finite_diff(f, x, 2, 1e-3).unwrap();
        assert!((fd - analytic).abs() < 1e-6 * analytic.abs().max(1.0));
    }

    #[test]
    fn finite_diff_linear_second_derivative_zero() {
        // h large enough that f64 cancellation stays below the bound.
        let d = finite_diff(|x| 3.0 * x + 1.0, 0.3, 2, 1e-2).unwrap();
        assert!(d.abs() < 1e-10);
    }

    #[test]
    fn one_step_chain_posterior_is_column_slice() {
        let step = ndarray::array![[0.9, 0.2], [0.1, 0.8]];
        let chain = DenseChain::new(vec![0.0, 1.0], vec![step.clone()]).unwrap();
        // s = 0: posterior over x_0 given x_1; prior is the identity slice at x0.
        let post = bayes_posterior(&chain, 0, 1, 0, 1).unwrap();
        assert!((post.probs()[1] - 1.0).abs() < 1e-15);
        // s index = t index: point mass at x_t.
        let post = bayes_posterior(&chain, 1, 1, 0, 1).unwrap();
        assert!((post.probs()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_chain_posteriors_one_hot() {
        // Permutation chain: 0 -> 1 -> 0.
        let swap = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
        let chain =
            DenseChain::new(vec![0.0, 0.5, 1.0], vec![swap.clone(), swap.clone()]).unwrap();
        let post = bayes_posterior(&chain, 1, 2, 0, 0).unwrap();
        assert_eq!(post.probs(), &[0.0, 1.0]);
        // Impossible event errors.
        assert!(bayes_posterior(&chain, 1, 2, 1, 0).is_err());
    }
}
