//! Continuous-state continuous-time engine on analytic 1-D Gaussian-mixture
//! data: forward/reverse Euler-Maruyama, the probability-flow ODE, exact
//! likelihood via divergence integration, and the score identity.
//!
//! Mixtures are closed under the linear-Gaussian pushforward, so every
//! marginal quantity (density, score, CDF) stays available in closed form.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream_rng};
use crate::schedule::NoiseSchedule;

/// Reverse-time integrations stop here; the final stretch is replaced by the
/// exact Gaussian posterior mean.
pub const REVERSE_T_MIN: f64 = 1e-3;

const SQRT_TWO_PI: f64 = 2.5066282746310002;

/// A 1-D Gaussian mixture with analytic density, score, and log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct MixtureDensity {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl TryFrom<MixtureSpec> for MixtureDensity {
    type Error = String;
    fn try_from(s: MixtureSpec) -> std::result::Result<Self, String> {
        MixtureDensity::new(s.weights, s.means, s.variances).map_err(|e| e.to_string())
    }
}

impl From<MixtureDensity> for MixtureSpec {
    fn from(m: MixtureDensity) -> Self {
        MixtureSpec { weights: m.weights, means: m.means, variances: m.variances }
    }
}

impl MixtureDensity {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != variances.len()
        {
            return Err(Error::Argument("component lists must be equal and non-empty".into()));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("weights sum to {sum}, need 1")));
        }
        if variances.iter().any(|&v| v <= 0.0) {
            return Err(Error::Argument("variances must be strictly positive".into()));
        }
        Ok(Self { weights, means, variances })
    }

    pub fn standard_normal() -> Self {
        Self { weights: vec![1.0], means: vec![0.0], variances: vec![1.0] }
    }

    pub fn components(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, &m), &v)| (w, m, v))
    }

    pub fn density(&self, x: f64) -> f64 {
        self.components()
            .map(|(w, m, v)| w * (-(x - m) * (x - m) / (2.0 * v)).exp() / (v.sqrt() * SQRT_TWO_PI))
            .sum()
    }

    pub fn log_density(&self, x: f64) -> Result<f64> {
        let d = self.density(x);
        if d < 1e-300 {
            return Err(Error::Numeric(format!("density underflow at x = {x}")));
        }
        Ok(d.ln())
    }

    /// First derivative of the density.
    fn density_prime(&self, x: f64) -> f64 {
        self.components()
            .map(|(w, m, v)| {
                let n = w * (-(x - m) * (x - m) / (2.0 * v)).exp() / (v.sqrt() * SQRT_TWO_PI);
                n * (-(x - m) / v)
            })
            .sum()
    }

    /// Second derivative of the density.
    fn density_second(&self, x: f64) -> f64 {
        self.components()
            .map(|(w, m, v)| {
                let n = w * (-(x - m) * (x - m) / (2.0 * v)).exp() / (v.sqrt() * SQRT_TWO_PI);
                n * ((x - m) * (x - m) / (v * v) - 1.0 / v)
            })
            .sum()
    }

    /// Score d/dx log density.
    pub fn score(&self, x: f64) -> Result<f64> {
        let d = self.density(x);
        if d < 1e-300 {
            return Err(Error::Numeric(format!("density underflow at x = {x}")));
        }
        Ok(self.density_prime(x) / d)
    }

    /// Derivative of the score (needed for the analytic divergence).
    pub fn score_derivative(&self, x: f64) -> Result<f64> {
        let d = self.density(x);
        if d < 1e-300 {
            return Err(Error::Numeric(format!("density underflow at x = {x}")));
        }
        let s = self.density_prime(x) / d;
        Ok(self.density_second(x) / d - s * s)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components()
            .map(|(w, m, v)| w * 0.5 * (1.0 + erf((x - m) / (2.0 * v).sqrt())))
            .sum()
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        self.means[idx] + self.variances[idx].sqrt() * standard_normal(rng)
    }

    /// Range containing essentially all mass, for quadrature oracles.
    pub fn support_hint(&self, n_sd: f64) -> (f64, f64) {
        let lo = self
            .components()
            .map(|(_, m, v)| m - n_sd * v.sqrt())
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .components()
            .map(|(_, m, v)| m + n_sd * v.sqrt())
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Marginal q_t of the noising SDE started from `data`: component means scale
/// by alpha_t, variances become alpha_t^2 v + sigma_t^2, weights unchanged.
pub fn pushforward_mixture(
    data: &MixtureDensity,
    schedule: &NoiseSchedule,
    t: f64,
) -> Result<MixtureDensity> {
    let (alpha, sigma, _) = schedule.eval(t)?;
    MixtureDensity::new(
        data.weights.clone(),
        data.means.iter().map(|m| alpha * m).collect(),
        data.variances.iter().map(|v| alpha * alpha * v + sigma * sigma).collect(),
    )
}

/// Analytic marginal score d/dx log q_t(x).
pub fn marginal_score(
    data: &MixtureDensity,
    schedule: &NoiseSchedule,
    t: f64,
    x: f64,
) -> Result<f64> {
    pushforward_mixture(data, schedule, t)?.score(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

/// A discretized trajectory; times are an increasing grid in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    times: Vec<f64>,
    states: Vec<f64>,
}

impl SdePath {
    fn new(times: Vec<f64>, states: Vec<f64>) -> Result<Self> {
        if times.len() != states.len() || times.is_empty() {
            return Err(Error::Argument("times/states mismatch".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("times must be strictly increasing".into()));
        }
        if times[0] < 0.0 || *times.last().unwrap() > 1.0 {
            return Err(Error::Argument("grid must lie in [0, 1]".into()));
        }
        Ok(Self { times, states })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// State at t = 1 for forward paths, t = 0 for reverse paths.
    pub fn terminal(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Forward => *self.states.last().unwrap(),
            Direction::Reverse => self.states[0],
        }
    }
}

/// Fixed-step Euler-Maruyama. Forward runs 0 -> 1 from `x_init` = x_0 drawn
/// by the caller. Reverse runs 1 -> REVERSE_T_MIN from `x_init` = x_1 using
/// the analytic marginal score, then replaces the last stretch with the exact
/// posterior mean E[x_0 | x_t] (Tweedie).
pub fn euler_maruyama(
    direction: Direction,
    data: &MixtureDensity,
    schedule: &NoiseSchedule,
    x_init: f64,
    n_steps: usize,
    seed: u64,
    stream: u64,
) -> Result<SdePath> {
    if n_steps == 0 {
        return Err(Error::Argument("need at least one step".into()));
    }
    let mut rng = stream_rng(seed, stream);
    match direction {
        Direction::Forward => {
            let h = 1.0 / n_steps as f64;
            let mut times = Vec::with_capacity(n_steps + 1);
            let mut states = Vec::with_capacity(n_steps + 1);
            let mut x = x_init;
            times.push(0.0);
            states.push(x);
            for i in 0..n_steps {
                let t_mid = (i as f64 + 0.5) * h;
                let (drift, g2) = schedule.sde_coefficients(t_mid)?;
                x += drift * x * h + (g2 * h).sqrt() * standard_normal(&mut rng);
                times.push((i + 1) as f64 * h);
                states.push(x);
            }
            SdePath::new(times, states)
        }
        Direction::Reverse => {
            let t_lo = REVERSE_T_MIN;
            let h = (1.0 - t_lo) / n_steps as f64;
            let mut rev_times = Vec::with_capacity(n_steps + 2);
            let mut rev_states = Vec::with_capacity(n_steps + 2);
            let mut x = x_init;
            rev_times.push(1.0);
            rev_states.push(x);
            for i in 0..n_steps {
                let t = 1.0 - i as f64 * h;
                let t_mid = t - 0.5 * h;
                let (drift, g2) = schedule.sde_coefficients(t_mid)?;
                let score = marginal_score(data, schedule, t_mid, x).map_err(|e| {
                    Error::Numeric(format!("score failed at (t = {t_mid}, x = {x}): {e}"))
                })?;
                x += -(drift * x - g2 * score) * h + (g2 * h).sqrt() * standard_normal(&mut rng);
                rev_times.push(t - h);
                rev_states.push(x);
            }
            // Exact posterior-mean jump to t = 0: E[x0 | x_t] = (x + sigma^2 s)/alpha.
            let (alpha, sigma, _) = schedule.eval(t_lo)?;
            let score = marginal_score(data, schedule, t_lo, x)?;
            rev_times.push(0.0);
            rev_states.push((x + sigma * sigma * score) / alpha);
            rev_times.reverse();
            rev_states.reverse();
            SdePath::new(rev_times, rev_states)
        }
    }
}

/// Probability-flow velocity u_t(x) = f_t(x) - (g_t^2/2) d/dx log q_t(x).
pub fn probability_flow_velocity(
    data: &MixtureDensity,
    schedule: &NoiseSchedule,
    t: f64,
    x: f64,
) -> Result<f64> {
    let (drift, g2) = schedule.sde_coefficients(t)?;
    Ok(drift * x - 0.5 * g2 * marginal_score(data, schedule, t, x)?)
}

/// Analytic spatial divergence d/dx u_t(x) of the probability-flow velocity.
pub fn velocity_divergence(
    data: &MixtureDensity,
    schedule: &NoiseSchedule,
    t: f64,
    x: f64,
) -> Result<f64> {
    let (drift, g2) = schedule.sde_coefficients(t)?;
    let q_t = pushforward_mixture(data, schedule, t)?;
    Ok(drift - 0.5 * g2 * q_t.score_derivative(x)?)
}

/// Exact log-likelihood of `x0` under the probability-flow ODE:
/// log q_0(x_0) = log q_1(x_1) + int_0^1 d/dx u_t(x_t) dt, integrated with
/// RK4 on the augmented (state, accumulated divergence) system.
pub fn exact_loglik(
    data: &MixtureDensity,
    schedule: &NoiseSchedule,
    x0: f64,
    n_steps: usize,
) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::Argument("need at least one step".into()));
    }
    if data.density(x0) < 1e-300 {
        return Err(Error::Numeric(format!("x0 = {x0} outside the density support")));
    }
    let h = 1.0 / n_steps as f64;
    let mut x = x0;
    let mut div_acc = 0.0;
    let rhs = |t: f64, x: f64| -> Result<(f64, f64)> {
        Ok((
            probability_flow_velocity(data, schedule, t, x)?,
            velocity_divergence(data, schedule, t, x)?,
        ))
    };
    for i in 0..n_steps {
        let t = i as f64 * h;
        let (k1x, k1d) = rhs(t, x)?;
        let (k2x, k2d) = rhs(t + 0.5 * h, x + 0.5 * h * k1x)?;
        let (k3x, k3d) = rhs(t + 0.5 * h, x + 0.5 * h * k2x)?;
        let (k4x, k4d) = rhs(t + h, x + h * k3x)?;
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        div_acc += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        if !x.is_finite() {
            return Err(Error::Numeric(format!("trajectory diverged at step {i}")));
        }
    }
    let q1 = pushforward_mixture(data, schedule, 1.0)?;
    Ok(q1.log_density(x)? + div_acc)
}

/// Two-sample-free Kolmogorov-Smirnov statistic of draws against an analytic CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut worst: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        worst = worst.max((c - i as f64 / n).abs());
        worst = worst.max(((i + 1) as f64 / n - c).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn two_component() -> MixtureDensity {
        MixtureDensity::new(vec![0.4, 0.6], vec![-1.5, 1.2], vec![0.3, 0.5]).unwrap()
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear_alpha()
    }

    /// Forward Euler-Maruyama and the likelihood ODE need bounded SDE
    /// coefficients; this family keeps g^2 <= 35 with faithful boundaries.
    fn bounded_schedule() -> NoiseSchedule {
        NoiseSchedule::log_linear_snr_clipped(13.0, -22.0, 2e-5).unwrap()
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let mix = two_component();
        for &x in &[-2.0, -0.5, 0.0, 0.7, 2.5] {
            let analytic = mix.score(x).unwrap();
            let fd = oracle::finite_diff(|y| mix.log_density(y).unwrap(), x, 1, 1e-5).unwrap();
            assert!((analytic - fd).abs() < 1e-8, "x = {x}");
            let analytic2 = mix.score_derivative(x).unwrap();
            let fd2 = oracle::finite_diff(|y| mix.score(y).unwrap(), x, 1, 1e-5).unwrap();
            assert!((analytic2 - fd2).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn pushforward_identity_at_zero() {
        let mix = two_component();
        let sch = schedule().with_clip_eps(0.0).unwrap();
        let p0 = pushforward_mixture(&mix, &sch, 0.0).unwrap();
        assert_eq!(p0, mix);
    }

    #[test]
    fn pushforward_point_mass_component() {
        // A single near-point component becomes N(alpha m, sigma^2 + tiny).
        let data = MixtureDensity::new(vec![1.0], vec![2.0], vec![1e-12]).unwrap();
        let sch = schedule();
        let t = 0.4;
        let (alpha, sigma, _) = sch.eval(t).unwrap();
        let p = pushforward_mixture(&data, &sch, t).unwrap();
        assert!((p.means[0] - alpha * 2.0).abs() < 1e-12);
        assert!((p.variances[0] - sigma * sigma).abs() < 1e-10);
    }

    #[test]
    fn pushforward_matches_quadrature_convolution() {
        // q_t(x) = int q(x | x0) q_data(x0) dx0 by 2049-node Simpson.
        let mix = two_component();
        let sch = schedule();
        let t = 0.5;
        let (alpha, sigma, _) = sch.eval(t).unwrap();
        let p_t = pushforward_mixture(&mix, &sch, t).unwrap();
        let (lo, hi) = mix.support_hint(10.0);
        for &x in &[-1.0, 0.0, 0.8, 1.5] {
            let direct = p_t.density(x);
            let quad = oracle::quadrature(
                |x0| {
                    let m = alpha * x0;
                    (-(x - m) * (x - m) / (2.0 * sigma * sigma)).exp()
                        / (sigma * SQRT_TWO_PI)
                        * mix.density(x0)
                },
                lo,
                hi,
                2049,
            )
            .unwrap();
            assert!((direct - quad).abs() < 1e-8, "x = {x}: {direct} vs {quad}");
        }
    }

    #[test]
    fn single_gaussian_score_closed_form() {
        let data = MixtureDensity::new(vec![1.0], vec![0.7], vec![0.4]).unwrap();
        let sch = schedule();
        let t = 0.6;
        let (alpha, sigma, _) = sch.eval(t).unwrap();
        let var = alpha * alpha * 0.4 + sigma * sigma;
        for &x in &[-1.0, 0.2, 1.4] {
            let s = marginal_score(&data, &sch, t, x).unwrap();
            let expect = -(x - alpha * 0.7) / var;
            assert!((s - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_mixture_score_zero_at_origin() {
        let data = MixtureDensity::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.3, 0.3]).unwrap();
        let s = marginal_score(&data, &schedule(), 0.5, 0.0).unwrap();
        assert!(s.abs() < 1e-14);
    }

    #[test]
    fn tweedie_identity_by_quadrature() {
        // Marginal score equals E_{q(x0 | x_t)}[conditional score].
        let mix = two_component();
        let sch = schedule();
        let mut rng = stream_rng(31, 0);
        let (lo, hi) = mix.support_hint(10.0);
        for i in 0..50 {
            let t = 0.1 + 0.8 * rand::Rng::gen::<f64>(&mut rng);
            let x = -3.0 + 6.0 * rand::Rng::gen::<f64>(&mut rng);
            let (alpha, sigma, _) = sch.eval(t).unwrap();
            let joint = |x0: f64| {
                let m = alpha * x0;
                (-(x - m) * (x - m) / (2.0 * sigma * sigma)).exp() / (sigma * SQRT_TWO_PI)
                    * mix.density(x0)
            };
            let num = oracle::quadrature(
                |x0| joint(x0) * (-(x - alpha * x0) / (sigma * sigma)),
                lo,
                hi,
                2049,
            )
            .unwrap();
            let den = oracle::quadrature(joint, lo, hi, 2049).unwrap();
            let tweedie = num / den;
            let analytic = marginal_score(&mix, &sch, t, x).unwrap();
            assert!((analytic - tweedie).abs() <= 1e-6, "sample {i}: t={t} x={x}");
        }
    }

    #[test]
    fn forward_paths_match_terminal_moments() {
        // Point-mass data: terminal law is N(alpha_1 x0, sigma_1^2).
        let data = MixtureDensity::new(vec![1.0], vec![1.8], vec![1e-12]).unwrap();
        let sch = bounded_schedule();
        let n_paths = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for stream in 0..n_paths {
            let p = euler_maruyama(Direction::Forward, &data, &sch, 1.8, 512, 5, stream as u64)
                .unwrap();
            let x1 = p.terminal(Direction::Forward);
            sum += x1;
            sumsq += x1 * x1;
        }
        let n = n_paths as f64;
        let mean = sum / n;
        let var = sumsq / n - mean * mean;
        let (a1, s1, _) = sch.eval(1.0).unwrap();
        let expect_mean = a1 * 1.8;
        let expect_var = s1 * s1;
        let se_mean = (expect_var / n).sqrt();
        let se_var = expect_var * (2.0 / n).sqrt();
        assert!((mean - expect_mean).abs() <= 3.0 * se_mean, "mean {mean} vs {expect_mean}");
        assert!((var - expect_var).abs() <= 3.0 * se_var + 0.01, "var {var} vs {expect_var}");
    }

    #[test]
    fn constant_path_when_coefficients_vanish() {
        // Clamped segment: drift and diffusion are zero, path is frozen.
        let sch = NoiseSchedule::linear_alpha().with_clip_eps(0.2).unwrap();
        let data = two_component();
        let p = euler_maruyama(Direction::Forward, &data, &sch, 0.5, 8, 1, 0).unwrap();
        // First steps sit inside the clamp window (alpha raw > 1 - 0.2 until t = 0.2).
        assert_eq!(p.states()[0], 0.5);
        assert_eq!(p.states()[1], 0.5);
    }

    #[test]
    fn reverse_sde_recovers_data_distribution() {
        let data = two_component();
        let sch = schedule();
        let n = 20_000;
        let mut samples = Vec::with_capacity(n);
        let q1 = pushforward_mixture(&data, &sch, 1.0).unwrap();
        for stream in 0..n {
            let mut rng = stream_rng(606, stream as u64);
            let x1 = q1.sample(&mut rng);
            let p = euler_maruyama(
                Direction::Reverse,
                &data,
                &sch,
                x1,
                512,
                707,
                stream as u64,
            )
            .unwrap();
            samples.push(p.terminal(Direction::Reverse));
        }
        let ks = ks_statistic(&mut samples, |x| data.cdf(x));
        assert!(ks <= 0.02, "KS statistic {ks}");
    }

    #[test]
    fn velocity_reduces_to_drift_at_gaussian_mean() {
        // Single Gaussian at its mean: score = 0, so u = f.
        let data = MixtureDensity::new(vec![1.0], vec![0.0], vec![0.5]).unwrap();
        let sch = schedule();
        let t = 0.5;
        let (drift, _) = sch.sde_coefficients(t).unwrap();
        let u = probability_flow_velocity(&data, &sch, t, 0.0).unwrap();
        assert!((u - drift * 0.0).abs() < 1e-14);
        assert!(u.abs() < 1e-14);
    }

    #[test]
    fn velocity_odd_symmetry() {
        let data = MixtureDensity::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.4, 0.4]).unwrap();
        let u = probability_flow_velocity(&data, &schedule(), 0.45, 0.0).unwrap();
        assert!(u.abs() < 1e-13);
    }

    #[test]
    fn continuity_equation_residual_small() {
        // d/dt q_t + d/dx (u q_t) = 0 on a (t, x) grid, all derivatives by
        // finite differences of analytic quantities.
        let data = two_component();
        let sch = schedule();
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            let t = 0.15 + 0.7 * i as f64 / 63.0;
            for j in 0..64 {
                let x = -3.0 + 6.0 * j as f64 / 63.0;
                let dq_dt = oracle::finite_diff(
                    |s| pushforward_mixture(&data, &sch, s).unwrap().density(x),
                    t,
                    1,
                    1e-5,
                )
                .unwrap();
                let dflux_dx = oracle::finite_diff(
                    |y| {
                        probability_flow_velocity(&data, &sch, t, y).unwrap()
                            * pushforward_mixture(&data, &sch, t).unwrap().density(y)
                    },
                    x,
                    1,
                    1e-5,
                )
                .unwrap();
                worst = worst.max((dq_dt + dflux_dx).abs());
            }
        }
        assert!(worst <= 1e-4, "continuity residual {worst}");
    }

    #[test]
    fn reverse_fokker_planck_residual_small() {
        // d/ds q_hat = -d/dx([g^2 s - f] q_hat) + (g^2/2) q_hat'' with
        // q_hat_s = q_{1-s}; time derivative by finite differences, spatial
        // terms analytic.
        let data = two_component();
        let sch = schedule();
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let s = 0.2 + 0.6 * i as f64 / 19.0;
            let t = 1.0 - s;
            let q_t = pushforward_mixture(&data, &sch, t).unwrap();
            let (drift, g2) = sch.sde_coefficients(t).unwrap();
            for j in 0..20 {
                let x = -2.5 + 5.0 * j as f64 / 19.0;
                let dq_ds = oracle::finite_diff(
                    |s_probe| {
                        pushforward_mixture(&data, &sch, 1.0 - s_probe).unwrap().density(x)
                    },
                    s,
                    1,
                    1e-5,
                )
                .unwrap();
                let flux = |y: f64| {
                    let q = q_t.density(y);
                    (g2 * q_t.score(y).unwrap() - drift * y) * q
                };
                let dflux_dx = oracle::finite_diff(flux, x, 1, 1e-5).unwrap();
                let q_second = q_t.density_second(x);
                let rhs = -dflux_dx + 0.5 * g2 * q_second;
                worst = worst.max((dq_ds - rhs).abs());
            }
        }
        assert!(worst <= 1e-3, "reverse FPE residual {worst}");
    }

    #[test]
    fn exact_loglik_standard_normal() {
        // N(0,1) data is stationary under the variance-preserving SDE; the
        // likelihood identity must reproduce the analytic log-density.
        let data = MixtureDensity::standard_normal();
        let sch = schedule();
        for &x0 in &[-1.2, 0.0, 0.9] {
            let ll = exact_loglik(&data, &sch, x0, 512).unwrap();
            let expect = -0.5 * x0 * x0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
            assert!((ll - expect).abs() <= 1e-3, "x0 = {x0}: {ll} vs {expect}");
        }
    }

    #[test]
    fn exact_loglik_two_component_mixture() {
        let data = two_component();
        let sch = bounded_schedule();
        let mut rng = stream_rng(17, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let x0 = -3.0 + 6.0 * rand::Rng::gen::<f64>(&mut rng);
            if data.density(x0) < 1e-6 {
                continue;
            }
            let ll = exact_loglik(&data, &sch, x0, 512).unwrap();
            let expect = data.log_density(x0).unwrap();
            worst = worst.max((ll - expect).abs());
        }
        assert!(worst <= 1e-3, "max abs error {worst}");
    }

    #[test]
    fn exact_loglik_improves_with_steps() {
        let data = two_component();
        let sch = schedule();
        let x0 = 0.9;
        let expect = data.log_density(x0).unwrap();
        let errs: Vec<f64> = [64, 128, 256]
            .iter()
            .map(|&n| (exact_loglik(&data, &sch, x0, n).unwrap() - expect).abs())
            .collect();
        assert!(errs[1] <= errs[0] && errs[2] <= errs[1], "errors {errs:?}");
    }

    #[test]
    fn reverse_drift_invariant_across_parameterisations() {
        // Substituting noise/clean/velocity conversions of the score leaves
        // the reverse drift unchanged.
        use crate::gaussian::{convert, ParamKind};
        use ndarray::array;
        let data = two_component();
        let sch = schedule();
        let (t, x) = (0.55, 0.4);
        let score = marginal_score(&data, &sch, t, x).unwrap();
        let (drift, g2) = sch.sde_coefficients(t).unwrap();
        let reference = drift * x - g2 * score;
        let x_t = array![x];
        let s = array![score];
        for kind in [ParamKind::Clean, ParamKind::Noise, ParamKind::Velocity] {
            let enc = convert(&sch, ParamKind::Score, &s, &x_t, t, kind).unwrap();
            let dec = convert(&sch, kind, &enc, &x_t, t, ParamKind::Score).unwrap();
            let drift_alt = drift * x - g2 * dec[0];
            assert!((drift_alt - reference).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_empirical_matches_pushforward_ks() {
        let data = two_component();
        let sch = bounded_schedule();
        let n = 20_000;
        let mut samples = Vec::with_capacity(n);
        for stream in 0..n {
            let mut rng = stream_rng(808, stream as u64);
            let x0 = data.sample(&mut rng);
            let p =
                euler_maruyama(Direction::Forward, &data, &sch, x0, 256, 909, stream as u64)
                    .unwrap();
            samples.push(p.terminal(Direction::Forward));
        }
        let q1 = pushforward_mixture(&data, &sch, 1.0).unwrap();
        let ks = ks_statistic(&mut samples, |x| q1.cdf(x));
        assert!(ks <= 0.02, "KS statistic {ks}");
    }
}
