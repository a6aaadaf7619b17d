//! Continuous-state discrete-time Gaussian kernels: forward marginals,
//! closed-form reverse posteriors, and the four-way parameterisation
//! conversions (clean data, noise, score, velocity).

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Times below this are treated as the data boundary for operations that
/// divide by sigma_t.
pub const T_MIN: f64 = 1e-4;

/// Forward Gaussian noising process with i.i.d. noise across `dim` coordinates:
/// q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I).
#[derive(Debug, Clone)]
pub struct GaussianForward {
    schedule: NoiseSchedule,
    dim: usize,
}

/// Exact reverse transition q(x_s | x_t, x_0) for s < t:
/// mean = coeff_xt * x_t + coeff_x0 * x_0, standard deviation `std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseGaussianKernel {
    pub coeff_xt: f64,
    pub coeff_x0: f64,
    pub std: f64,
    pub from_time: f64,
    pub to_time: f64,
}

impl ReverseGaussianKernel {
    pub fn mean(&self, x_t: &Array1<f64>, x0: &Array1<f64>) -> Array1<f64> {
        x_t * self.coeff_xt + x0 * self.coeff_x0
    }
}

/// The four interchangeable prediction targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Clean,
    Noise,
    Score,
    Velocity,
}

impl GaussianForward {
    pub fn new(schedule: NoiseSchedule, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("dimension must be positive".into()));
        }
        Ok(Self { schedule, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Mean vector alpha_t x_0 and shared per-coordinate variance sigma_t^2.
    pub fn forward_marginal(&self, x0: &Array1<f64>, t: f64) -> Result<(Array1<f64>, f64)> {
        self.check_dim(x0)?;
        let (alpha, sigma, _) = self.schedule.eval(t)?;
        Ok((x0 * alpha, sigma * sigma))
    }

    /// Exact Gaussian posterior coefficients for the window s < t.
    pub fn reverse_posterior(&self, s: f64, t: f64) -> Result<ReverseGaussianKernel> {
        if !(s < t) {
            return Err(Error::Argument(format!("need s < t, got s = {s}, t = {t}")));
        }
        let (a_s, sig_s, _) = self.schedule.eval(s)?;
        let (a_t, sig_t, _) = self.schedule.eval(t)?;
        let a_ts = a_t / a_s;
        let var_ts = (sig_t * sig_t - a_ts * a_ts * sig_s * sig_s).max(0.0);
        let var_t = sig_t * sig_t;
        if var_t <= 0.0 {
            return Err(Error::Singular(format!("sigma_t = 0 at t = {t}")));
        }
        Ok(ReverseGaussianKernel {
            coeff_xt: a_ts * sig_s * sig_s / var_t,
            coeff_x0: a_s * var_ts / var_t,
            std: (var_ts * sig_s * sig_s / var_t).sqrt(),
            from_time: t,
            to_time: s,
        })
    }

    /// One ancestral denoising step: posterior mean at the model's clean-data
    /// estimate plus the posterior noise scale times a caller-supplied draw.
    pub fn reverse_step_from_denoiser(
        &self,
        x_t: &Array1<f64>,
        x0_hat: &Array1<f64>,
        s: f64,
        t: f64,
        noise: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_dim(x_t)?;
        self.check_dim(x0_hat)?;
        self.check_dim(noise)?;
        let kernel = self.reverse_posterior(s, t)?;
        Ok(kernel.mean(x_t, x0_hat) + noise * kernel.std)
    }

    fn check_dim(&self, v: &Array1<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Argument(format!(
                "expected dimension {}, got {}",
                self.dim,
                v.len()
            )));
        }
        Ok(())
    }
}

/// Converts between the four prediction targets at time t, given the noisy
/// state x_t. All conversions route through the clean-data target:
///   x_0 = (x_t - sigma eps)/alpha = (sigma^2 s + x_t)/alpha
///       = (alpha x_t - sigma v)/(alpha^2 + sigma^2).
pub fn convert(
    schedule: &NoiseSchedule,
    kind_in: ParamKind,
    value: &Array1<f64>,
    x_t: &Array1<f64>,
    t: f64,
    kind_out: ParamKind,
) -> Result<Array1<f64>> {
    let (alpha, sigma, _) = schedule.eval(t)?;
    let needs_sigma = |k: ParamKind| k != ParamKind::Clean;
    if sigma == 0.0 && (needs_sigma(kind_in) || needs_sigma(kind_out)) {
        return Err(Error::Singular(format!(
            "sigma_t = 0 at t = {t}: noise/score/velocity undefined"
        )));
    }
    if alpha == 0.0 {
        return Err(Error::Singular(format!("alpha_t = 0 at t = {t}")));
    }
    if value.len() != x_t.len() {
        return Err(Error::Argument("value and x_t dimension mismatch".into()));
    }
    let clean = match kind_in {
        ParamKind::Clean => value.clone(),
        ParamKind::Noise => (x_t - &(value * sigma)) / alpha,
        ParamKind::Score => (value * (sigma * sigma) + x_t) / alpha,
        ParamKind::Velocity => {
            (&(x_t * alpha) - &(value * sigma)) / (alpha * alpha + sigma * sigma)
        }
    };
    Ok(match kind_out {
        ParamKind::Clean => clean,
        ParamKind::Noise => (x_t - &(&clean * alpha)) / sigma,
        ParamKind::Score => (&(&clean * alpha) - x_t) / (sigma * sigma),
        ParamKind::Velocity => {
            (&(x_t * alpha) - &(&clean * (alpha * alpha + sigma * sigma))) / sigma
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream_rng};
    use ndarray::array;

    fn sharp() -> NoiseSchedule {
        // Exact boundaries for closed-form checks.
        NoiseSchedule::linear_alpha().with_clip_eps(0.0).unwrap()
    }

    #[test]
    fn forward_marginal_identity_at_zero() {
        let fwd = GaussianForward::new(sharp(), 3).unwrap();
        let x0 = array![0.3, -1.2, 5.0];
        let (mean, var) = fwd.forward_marginal(&x0, 0.0).unwrap();
        assert!(mean.iter().zip(x0.iter()).all(|(m, x)| (m - x).abs() < 1e-15));
        assert!(var.abs() < 1e-15);
    }

    #[test]
    fn forward_marginal_zero_data() {
        let fwd = GaussianForward::new(sharp(), 2).unwrap();
        let (mean, var) = fwd.forward_marginal(&array![0.0, 0.0], 0.37).unwrap();
        assert!(mean.iter().all(|&m| m == 0.0));
        let sig = sharp().sigma(0.37).unwrap();
        assert!((var - sig * sig).abs() < 1e-15);
    }

    #[test]
    fn forward_marginal_midpoint_matches_step_composition() {
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let (mean, var) = fwd.forward_marginal(&array![2.0], 0.5).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-12);
        assert!((var - 0.75).abs() < 1e-12);
        // Compose 64 per-step pairs up to the grid midpoint.
        let steps = sharp().per_step_coefficients(64).unwrap();
        let (mut a, mut v) = (1.0, 0.0);
        for (ai, si) in &steps[..32] {
            a *= ai;
            v = ai * ai * v + si * si;
        }
        assert!((a * 2.0 - mean[0]).abs() < 1e-12);
        assert!((v - var).abs() < 1e-12);
    }

    #[test]
    fn reverse_posterior_degenerates_at_s_near_t() {
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let t = 0.6;
        let k = fwd.reverse_posterior(t - 1e-9, t).unwrap();
        assert!((k.coeff_xt - 1.0).abs() < 1e-6);
        assert!(k.coeff_x0.abs() < 1e-6);
        assert!(k.std < 1e-4);
    }

    #[test]
    fn reverse_posterior_collapses_to_x0_at_s_zero() {
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let k = fwd.reverse_posterior(0.0, 0.5).unwrap();
        assert!((k.coeff_x0 - 1.0).abs() < 1e-12);
        assert!(k.coeff_xt.abs() < 1e-12);
        assert!(k.std.abs() < 1e-12);
    }

    #[test]
    fn reverse_posterior_matches_direct_bayes() {
        // Oracle: complete the square numerically on
        // N(x_t; a_{t|s} x_s, var_{t|s}) * N(x_s; a_s x0, var_s).
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let (s, t) = (0.25, 0.5);
        let k = fwd.reverse_posterior(s, t).unwrap();
        let sch = sharp();
        let (a_s, sig_s, _) = sch.eval(s).unwrap();
        let (a_t, sig_t, _) = sch.eval(t).unwrap();
        let a_ts = a_t / a_s;
        let var_ts = sig_t * sig_t - a_ts * a_ts * sig_s * sig_s;
        let prec = a_ts * a_ts / var_ts + 1.0 / (sig_s * sig_s);
        let var_post = 1.0 / prec;
        for (x_t, x0) in [(0.7, -0.3), (-1.1, 2.0), (0.0, 0.4)] {
            let mean_post = var_post * (a_ts * x_t / var_ts + a_s * x0 / (sig_s * sig_s));
            let mean_kernel = k.coeff_xt * x_t + k.coeff_x0 * x0;
            assert!((mean_kernel - mean_post).abs() < 1e-10);
            assert!((k.std * k.std - var_post).abs() < 1e-10);
        }
    }

    #[test]
    fn reverse_posterior_rejects_bad_ordering() {
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        assert!(fwd.reverse_posterior(0.5, 0.5).is_err());
        assert!(fwd.reverse_posterior(0.7, 0.3).is_err());
    }

    #[test]
    fn self_consistency_mean_preserves_forward_marginal() {
        // Plugging x_t = alpha_t x0 into the posterior mean gives alpha_s x0.
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let sch = sharp();
        for (s, t) in [(0.1, 0.4), (0.3, 0.9), (0.5, 0.6)] {
            let k = fwd.reverse_posterior(s, t).unwrap();
            let (a_s, _, _) = sch.eval(s).unwrap();
            let (a_t, _, _) = sch.eval(t).unwrap();
            let x0 = 1.7;
            let mean = k.coeff_xt * (a_t * x0) + k.coeff_x0 * x0;
            assert!((mean - a_s * x0).abs() < 1e-12);
        }
    }

    #[test]
    fn chapman_kolmogorov_on_random_triples() {
        // Composing (s,r) after (r,t) matches (s,t) in both moments when the
        // intermediate state is integrated out of the joint Gaussian.
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let mut rng = stream_rng(42, 0);
        for _ in 0..100 {
            let mut times: Vec<f64> =
                (0..3).map(|_| 0.02 + 0.96 * rand::Rng::gen::<f64>(&mut rng)).collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (s, r, t) = (times[0], times[1], times[2]);
            if r - s < 1e-3 || t - r < 1e-3 {
                continue;
            }
            let k_rt = fwd.reverse_posterior(r, t).unwrap();
            let k_sr = fwd.reverse_posterior(s, r).unwrap();
            let k_st = fwd.reverse_posterior(s, t).unwrap();
            // Composite map x_s = c_sr (c_rt x_t + d_rt x0 + std_rt z) + d_sr x0 + std_sr z'.
            let coeff_xt = k_sr.coeff_xt * k_rt.coeff_xt;
            let coeff_x0 = k_sr.coeff_xt * k_rt.coeff_x0 + k_sr.coeff_x0;
            let var = k_sr.coeff_xt * k_sr.coeff_xt * k_rt.std * k_rt.std
                + k_sr.std * k_sr.std;
            assert!((coeff_xt - k_st.coeff_xt).abs() < 1e-9, "s={s} r={r} t={t}");
            assert!((coeff_x0 - k_st.coeff_x0).abs() < 1e-9);
            assert!((var - k_st.std * k_st.std).abs() < 1e-9);
        }
    }

    #[test]
    fn marginal_consistency_through_reverse_kernel() {
        // Pushing N(alpha_t x0, sigma_t^2) through the (s,t) kernel gives
        // N(alpha_s x0, sigma_s^2).
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let sch = sharp();
        let x0 = -0.8;
        for (s, t) in [(0.15, 0.45), (0.4, 0.95), (0.01, 0.99)] {
            let k = fwd.reverse_posterior(s, t).unwrap();
            let (a_s, sig_s, _) = sch.eval(s).unwrap();
            let (a_t, sig_t, _) = sch.eval(t).unwrap();
            let mean = k.coeff_xt * a_t * x0 + k.coeff_x0 * x0;
            let var = k.coeff_xt * k.coeff_xt * sig_t * sig_t + k.std * k.std;
            assert!((mean - a_s * x0).abs() < 1e-9);
            assert!((var - sig_s * sig_s).abs() < 1e-9);
        }
    }

    #[test]
    fn convert_clean_identity() {
        let sch = NoiseSchedule::linear_alpha();
        let v = array![1.0, -2.0];
        let x_t = array![0.5, 0.5];
        let out =
            convert(&sch, ParamKind::Clean, &v, &x_t, 0.5, ParamKind::Clean).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn zero_noise_gives_zero_score() {
        let sch = NoiseSchedule::linear_alpha();
        let t = 0.3;
        let eps = array![0.0];
        let x_t = array![0.42];
        let score = convert(&sch, ParamKind::Noise, &eps, &x_t, t, ParamKind::Score).unwrap();
        assert!(score[0].abs() < 1e-15);
    }

    #[test]
    fn round_trips_are_identity() {
        let sch = NoiseSchedule::linear_alpha();
        let mut rng = stream_rng(3, 0);
        let kinds = [ParamKind::Clean, ParamKind::Noise, ParamKind::Score, ParamKind::Velocity];
        for _ in 0..50 {
            let t = 0.05 + 0.9 * rand::Rng::gen::<f64>(&mut rng);
            let v = array![standard_normal(&mut rng), standard_normal(&mut rng)];
            let x_t = array![standard_normal(&mut rng), standard_normal(&mut rng)];
            for a in kinds {
                for b in kinds {
                    let there = convert(&sch, a, &v, &x_t, t, b).unwrap();
                    let back = convert(&sch, b, &there, &x_t, t, a).unwrap();
                    for (orig, r) in v.iter().zip(back.iter()) {
                        assert!((orig - r).abs() <= 1e-12, "{a:?}->{b:?} at t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn all_parameterisations_give_identical_reverse_means() {
        let sch = NoiseSchedule::linear_alpha();
        let fwd = GaussianForward::new(sch.clone(), 1).unwrap();
        let mut rng = stream_rng(9, 0);
        for _ in 0..50 {
            let t = 0.1 + 0.85 * rand::Rng::gen::<f64>(&mut rng);
            let s = t - 0.05;
            let x_t = array![standard_normal(&mut rng)];
            let x0_hat = array![standard_normal(&mut rng)];
            let k = fwd.reverse_posterior(s, t).unwrap();
            let reference = k.mean(&x_t, &x0_hat)[0];
            for kind in [ParamKind::Noise, ParamKind::Score, ParamKind::Velocity] {
                let enc = convert(&sch, ParamKind::Clean, &x0_hat, &x_t, t, kind).unwrap();
                let dec = convert(&sch, kind, &enc, &x_t, t, ParamKind::Clean).unwrap();
                let mean = k.mean(&x_t, &dec)[0];
                assert!((mean - reference).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn singularity_at_exact_boundary() {
        let sch = sharp();
        let v = array![1.0];
        let x_t = array![1.0];
        assert!(convert(&sch, ParamKind::Noise, &v, &x_t, 0.0, ParamKind::Clean).is_err());
        assert!(convert(&sch, ParamKind::Clean, &v, &x_t, 0.0, ParamKind::Clean).is_ok());
    }

    #[test]
    fn iterated_denoising_recovers_point_mass() {
        // With the true x0 supplied and zero noise, ancestral steps from t=1
        // telescope onto x0.
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let x0 = array![1.25];
        let steps = 64;
        let mut x = array![0.9];
        let zero = array![0.0];
        for i in (1..=steps).rev() {
            let t = i as f64 / steps as f64;
            let s = (i - 1) as f64 / steps as f64;
            x = fwd.reverse_step_from_denoiser(&x, &x0, s, t, &zero).unwrap();
        }
        assert!((x[0] - x0[0]).abs() < 1e-6, "final {x}");
    }

    #[test]
    fn step_matches_posterior_mean_plus_noise() {
        let fwd = GaussianForward::new(sharp(), 1).unwrap();
        let (s, t) = (0.2, 0.5);
        let k = fwd.reverse_posterior(s, t).unwrap();
        let (x_t, x0_hat, z) = (array![0.3], array![-0.7], array![1.3]);
        let step = fwd.reverse_step_from_denoiser(&x_t, &x0_hat, s, t, &z).unwrap();
        let expect = k.mean(&x_t, &x0_hat)[0] + k.std * z[0];
        assert_eq!(step[0], expect);
    }
}
