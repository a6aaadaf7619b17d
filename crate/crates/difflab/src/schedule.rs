//! Noise schedules: the signal/noise coefficient pair (alpha_t, sigma_t) on
//! t in [0,1], their analytic derivatives, per-step discretizations, and the
//! induced SDE coefficients.
//!
//! Conventions: data lives at t = 0, noise at t = 1, alpha is non-increasing,
//! and the variance-preserving pairing sigma_t^2 = 1 - alpha_t^2 is used for
//! every family. `clip_eps` clamps alpha into [clip_eps, 1 - clip_eps] so
//! that log-derivatives and ratios stay finite downstream.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLIP_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Family {
    LinearAlpha,
    Cosine,
    LogLinearSnr { lambda_start: f64, lambda_end: f64 },
}

/// A differentiable signal/noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    family: Family,
    clip_eps: f64,
}

impl NoiseSchedule {
    /// alpha_t = 1 - t.
    pub fn linear_alpha() -> Self {
        Self { family: Family::LinearAlpha, clip_eps: DEFAULT_CLIP_EPS }
    }

    /// alpha_t = cos(pi t / 2).
    pub fn cosine() -> Self {
        Self { family: Family::Cosine, clip_eps: DEFAULT_CLIP_EPS }
    }

    /// Log-linear signal-to-noise ratio: log SNR(t) interpolates linearly from
    /// `lambda_start` (t=0) to `lambda_end` (t=1) and alpha_t^2 = sigmoid(SNR).
    pub fn log_linear_snr(lambda_start: f64, lambda_end: f64) -> Result<Self> {
        Self::with_family_and_clip(
            Family::LogLinearSnr { lambda_start, lambda_end },
            DEFAULT_CLIP_EPS,
        )
    }

    /// Log-linear SNR with endpoints wide enough for the default clip.
    pub fn log_linear_snr_default() -> Self {
        Self::log_linear_snr(13.0, -27.0).expect("default endpoints are valid")
    }

    /// Log-linear SNR validated against a caller-chosen clamp. Narrow lambda
    /// ranges keep the SDE coefficients bounded but need a wider clip window.
    pub fn log_linear_snr_clipped(
        lambda_start: f64,
        lambda_end: f64,
        clip_eps: f64,
    ) -> Result<Self> {
        Self::with_family_and_clip(Family::LogLinearSnr { lambda_start, lambda_end }, clip_eps)
    }

    /// Same family, different clamp. Re-validates the boundary conditions.
    pub fn with_clip_eps(&self, clip_eps: f64) -> Result<Self> {
        Self::with_family_and_clip(self.family, clip_eps)
    }

    fn with_family_and_clip(family: Family, clip_eps: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&clip_eps) {
            return Err(Error::Argument(format!("clip_eps {clip_eps} outside [0, 0.5)")));
        }
        let s = Self { family, clip_eps };
        let tol = 1e-12;
        if s.alpha_raw(0.0) < 1.0 - clip_eps - tol {
            return Err(Error::Argument(format!(
                "alpha(0) = {} violates the 1 - clip_eps boundary",
                s.alpha_raw(0.0)
            )));
        }
        if s.alpha_raw(1.0) > clip_eps + tol {
            return Err(Error::Argument(format!(
                "alpha(1) = {} violates the clip_eps boundary",
                s.alpha_raw(1.0)
            )));
        }
        if let Family::LogLinearSnr { lambda_start, lambda_end } = family {
            if lambda_start <= lambda_end {
                return Err(Error::Argument(
                    "lambda_start must exceed lambda_end (alpha non-increasing)".into(),
                ));
            }
        }
        Ok(s)
    }

    pub fn clip_eps(&self) -> f64 {
        self.clip_eps
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::LinearAlpha => "linear-alpha",
            Family::Cosine => "cosine",
            Family::LogLinearSnr { .. } => "log-linear-snr",
        }
    }

    fn alpha_raw(&self, t: f64) -> f64 {
        match self.family {
            Family::LinearAlpha => 1.0 - t,
            Family::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
            Family::LogLinearSnr { lambda_start, lambda_end } => {
                let lambda = lambda_start + t * (lambda_end - lambda_start);
                sigmoid(lambda).sqrt()
            }
        }
    }

    fn dalpha_raw(&self, t: f64) -> f64 {
        match self.family {
            Family::LinearAlpha => -1.0,
            Family::Cosine => {
                -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
            }
            Family::LogLinearSnr { lambda_start, lambda_end } => {
                let dlambda = lambda_end - lambda_start;
                let lambda = lambda_start + t * dlambda;
                let s = sigmoid(lambda);
                // d sqrt(s)/dt = s(1-s) dlambda / (2 sqrt(s))
                0.5 * s.sqrt() * (1.0 - s) * dlambda
            }
        }
    }

    /// True when the raw alpha at `t` lies outside the clamp window, i.e. the
    /// effective (clamped) alpha is locally constant there.
    pub fn is_clamped(&self, t: f64) -> bool {
        let a = self.alpha_raw(t);
        a > 1.0 - self.clip_eps || a < self.clip_eps
    }

    /// Clamped alpha_t, sigma_t = sqrt(1 - alpha_t^2), and the analytic
    /// family derivative d alpha/dt.
    pub fn eval(&self, t: f64) -> Result<(f64, f64, f64)> {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let alpha = self.alpha_raw(t).clamp(self.clip_eps, 1.0 - self.clip_eps);
        let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
        let dalpha = self.dalpha_raw(t);
        if !alpha.is_finite() || !sigma.is_finite() || !dalpha.is_finite() {
            return Err(Error::Numeric(format!("non-finite schedule value at t = {t}")));
        }
        Ok((alpha, sigma, dalpha))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.eval(t)?.0)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.eval(t)?.1)
    }

    /// Per-step pairs (alpha_i, sigma_i) on the grid t_i = i/T:
    /// alpha_i = alpha(t_i)/alpha(t_{i-1}) and
    /// sigma_i^2 = sigma^2(t_i) - alpha_i^2 sigma^2(t_{i-1}).
    /// Composing the steps reconstructs the cumulative pair exactly.
    pub fn per_step_coefficients(&self, t_steps: usize) -> Result<Vec<(f64, f64)>> {
        if t_steps == 0 {
            return Err(Error::Argument("step count must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(t_steps);
        let (mut a_prev, mut s_prev, _) = self.eval(0.0)?;
        for i in 1..=t_steps {
            let (a, s, _) = self.eval(i as f64 / t_steps as f64)?;
            let a_step = a / a_prev;
            let s2_step = (s * s - a_step * a_step * s_prev * s_prev).max(0.0);
            out.push((a_step, s2_step.sqrt()));
            a_prev = a;
            s_prev = s;
        }
        Ok(out)
    }

    /// Drift factor d log alpha_t/dt and squared diffusion coefficient
    /// g_t^2 = alpha_t^2 d/dt [sigma_t^2 / alpha_t^2] of the induced SDE.
    /// Inside the clamp window the effective alpha is constant, so both are 0.
    pub fn sde_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        let (alpha, _, dalpha) = self.eval(t)?;
        if self.is_clamped(t) {
            return Ok((0.0, 0.0));
        }
        let drift = dalpha / alpha;
        // Variance-preserving: sigma^2/alpha^2 = alpha^{-2} - 1, whose time
        // derivative gives g^2 = -2 alpha'/alpha.
        let g2 = -2.0 * dalpha / alpha;
        if !drift.is_finite() || !g2.is_finite() {
            return Err(Error::Numeric(format!("non-finite SDE coefficient at t = {t}")));
        }
        Ok((drift, g2.max(0.0)))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Wire format: {"family": ..., "params": {...}, "clip_eps": ...}.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSpec {
    family: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default = "default_clip")]
    clip_eps: f64,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP_EPS
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = String;

    fn try_from(spec: ScheduleSpec) -> std::result::Result<Self, String> {
        let family = match spec.family.as_str() {
            "linear-alpha" => {
                if !spec.params.is_empty() {
                    return Err("linear-alpha takes no params".into());
                }
                Family::LinearAlpha
            }
            "cosine" => {
                if !spec.params.is_empty() {
                    return Err("cosine takes no params".into());
                }
                Family::Cosine
            }
            "log-linear-snr" => {
                let ls = *spec.params.get("lambda_start").ok_or("missing lambda_start")?;
                let le = *spec.params.get("lambda_end").ok_or("missing lambda_end")?;
                if spec.params.len() != 2 {
                    return Err("log-linear-snr takes exactly lambda_start, lambda_end".into());
                }
                Family::LogLinearSnr { lambda_start: ls, lambda_end: le }
            }
            other => return Err(format!("unknown schedule family '{other}'")),
        };
        NoiseSchedule::with_family_and_clip(family, spec.clip_eps).map_err(|e| e.to_string())
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        let mut params = BTreeMap::new();
        if let Family::LogLinearSnr { lambda_start, lambda_end } = s.family {
            params.insert("lambda_start".into(), lambda_start);
            params.insert("lambda_end".into(), lambda_end);
        }
        ScheduleSpec { family: s.family_name().into(), params, clip_eps: s.clip_eps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn families() -> Vec<NoiseSchedule> {
        vec![
            NoiseSchedule::linear_alpha(),
            NoiseSchedule::cosine(),
            NoiseSchedule::log_linear_snr_default(),
        ]
    }

    #[test]
    fn linear_alpha_boundaries() {
        let s = NoiseSchedule::linear_alpha();
        let (a0, s0, d0) = s.eval(0.0).unwrap();
        assert_eq!(a0, 1.0 - DEFAULT_CLIP_EPS);
        // sigma(0)^2 is at the clamp scale under the variance-preserving pairing.
        assert!(s0 * s0 <= 2.0 * DEFAULT_CLIP_EPS);
        assert_eq!(d0, -1.0);

        let (a1, s1, _) = s.eval(1.0).unwrap();
        assert_eq!(a1, DEFAULT_CLIP_EPS);
        assert!((s1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_alpha_midpoint() {
        let s = NoiseSchedule::linear_alpha();
        let (a, sg, d) = s.eval(0.5).unwrap();
        assert_eq!(a, 0.5);
        assert!((sg - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(d, -1.0);
    }

    #[test]
    fn cosine_terminal() {
        let s = NoiseSchedule::cosine();
        let (a, sg, d) = s.eval(1.0).unwrap();
        assert_eq!(a, DEFAULT_CLIP_EPS);
        assert!((sg - 1.0).abs() < 1e-9);
        assert!((d + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn eval_rejects_out_of_range() {
        let s = NoiseSchedule::cosine();
        assert!(s.eval(-0.1).is_err());
        assert!(s.eval(1.1).is_err());
        assert!(s.eval(f64::NAN).is_err());
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for s in families() {
            for &t in &[0.11, 0.3, 0.52, 0.77, 0.9] {
                let (_, _, da) = s.eval(t).unwrap();
                let fd = oracle::finite_diff(|x| s.eval(x).unwrap().0, t, 1, 1e-4).unwrap();
                assert!(
                    (da - fd).abs() <= 1e-6 * (1.0 + da.abs()),
                    "{} t={t}: analytic {da} vs fd {fd}",
                    s.family_name()
                );
            }
        }
    }

    #[test]
    fn per_step_reconstructs_cumulative() {
        for s in families() {
            for &t_steps in &[1usize, 4, 16, 64] {
                let steps = s.per_step_coefficients(t_steps).unwrap();
                let (mut a, s0, _) = s.eval(0.0).unwrap();
                let mut v = s0 * s0;
                for (i, (ai, si)) in steps.iter().enumerate() {
                    a *= ai;
                    v = ai * ai * v + si * si;
                    let t = (i + 1) as f64 / t_steps as f64;
                    let (a_ref, s_ref, _) = s.eval(t).unwrap();
                    assert!((a - a_ref).abs() < 1e-12, "{} alpha at t={t}", s.family_name());
                    assert!(
                        (v - s_ref * s_ref).abs() < 1e-12,
                        "{} sigma^2 at t={t}",
                        s.family_name()
                    );
                }
            }
        }
    }

    #[test]
    fn one_step_chain_is_terminal_pair() {
        let s = NoiseSchedule::linear_alpha();
        let steps = s.per_step_coefficients(1).unwrap();
        assert_eq!(steps.len(), 1);
        let (a1, s1, _) = s.eval(1.0).unwrap();
        assert!((steps[0].0 - a1).abs() < 1e-4);
        assert!((steps[0].1 - s1).abs() < 1e-4);
    }

    #[test]
    fn step_variances_nonnegative() {
        for s in families() {
            for (_, si) in s.per_step_coefficients(37).unwrap() {
                assert!(si >= 0.0);
            }
        }
    }

    #[test]
    fn refinement_improves_product_consistency() {
        // With exact grid-ratio steps the reconstruction is exact; check the
        // max deviation does not grow under refinement.
        let s = NoiseSchedule::cosine();
        let mut prev = f64::INFINITY;
        for &t_steps in &[8usize, 16, 32] {
            let steps = s.per_step_coefficients(t_steps).unwrap();
            let mut worst: f64 = 0.0;
            let (mut a, _, _) = s.eval(0.0).unwrap();
            for (i, (ai, _)) in steps.iter().enumerate() {
                a *= ai;
                let t = (i + 1) as f64 / t_steps as f64;
                worst = worst.max((a - s.eval(t).unwrap().0).abs());
            }
            assert!(worst <= prev + 1e-15);
            prev = worst;
        }
    }

    #[test]
    fn sde_drift_at_midpoint() {
        let s = NoiseSchedule::linear_alpha();
        let (drift, g2) = s.sde_coefficients(0.5).unwrap();
        assert!((drift + 2.0).abs() < 1e-12);
        assert!((g2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sde_drift_zero_on_clamped_segment() {
        let s = NoiseSchedule::linear_alpha().with_clip_eps(1e-3).unwrap();
        let (drift, g2) = s.sde_coefficients(0.9995).unwrap();
        assert_eq!(drift, 0.0);
        assert_eq!(g2, 0.0);
    }

    #[test]
    fn sde_coefficients_match_finite_differences() {
        for s in families() {
            for &t in &[0.2, 0.5, 0.8] {
                let (drift, g2) = s.sde_coefficients(t).unwrap();
                let fd_drift =
                    oracle::finite_diff(|x| s.eval(x).unwrap().0.ln(), t, 1, 1e-5).unwrap();
                assert!(
                    (drift - fd_drift).abs() <= 1e-6 * (1.0 + drift.abs()),
                    "{} drift at t={t}",
                    s.family_name()
                );
                let fd_g2 = oracle::finite_diff(
                    |x| {
                        let (a, sg, _) = s.eval(x).unwrap();
                        sg * sg / (a * a)
                    },
                    t,
                    1,
                    1e-5,
                )
                .unwrap() * s.eval(t).unwrap().0.powi(2);
                assert!(
                    (g2 - fd_g2).abs() <= 1e-6 * (1.0 + g2.abs()),
                    "{} g^2 at t={t}: {g2} vs {fd_g2}",
                    s.family_name()
                );
            }
        }
    }

    #[test]
    fn g2_matches_per_step_variance_rate() {
        // sigma^2_{t|t-delta}/delta approaches g^2 at first order: halving
        // delta roughly halves the error.
        let s = NoiseSchedule::cosine();
        let t = 0.6;
        let (_, g2) = s.sde_coefficients(t).unwrap();
        let estimate = |delta: f64| {
            let (a_t, s_t, _) = s.eval(t).unwrap();
            let (a_p, s_p, _) = s.eval(t - delta).unwrap();
            let a_step = a_t / a_p;
            (s_t * s_t - a_step * a_step * s_p * s_p) / delta
        };
        let e1 = (estimate(1e-3) - g2).abs();
        let e2 = (estimate(5e-4) - g2).abs();
        assert!(e1 < 0.1 && e2 < 0.05, "e1={e1} e2={e2}");
        let ratio = e2 / e1;
        assert!((0.4..0.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn g2_nonnegative_on_dense_grid() {
        for s in families() {
            for i in 0..=1000 {
                let t = i as f64 / 1000.0;
                let (_, g2) = s.sde_coefficients(t).unwrap();
                assert!(g2 >= -1e-12, "{} g2 at t={t}", s.family_name());
            }
        }
    }

    #[test]
    fn alpha_monotone_sigma2_monotone() {
        for s in families() {
            let mut prev_a = f64::INFINITY;
            let mut prev_s2 = -f64::INFINITY;
            for i in 0..=500 {
                let (a, sg, _) = s.eval(i as f64 / 500.0).unwrap();
                assert!(a <= prev_a + 1e-15);
                assert!(sg * sg >= prev_s2 - 1e-15);
                prev_a = a;
                prev_s2 = sg * sg;
            }
        }
    }

    #[test]
    fn json_round_trip() {
        for s in families() {
            let json = serde_json::to_string(&s).unwrap();
            let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
            assert_eq!(s, back);
        }
        let parsed: NoiseSchedule = serde_json::from_str(
            r#"{"family":"log-linear-snr","params":{"lambda_start":13.0,"lambda_end":-27.0}}"#,
        )
        .unwrap();
        assert_eq!(parsed.family_name(), "log-linear-snr");
        assert!(serde_json::from_str::<NoiseSchedule>(r#"{"family":"bogus"}"#).is_err());
    }
}
