//! Named property suites behind `difflab verify`: each module's invariants
//! run as individual checks with a measured value and a tolerance, reported
//! as machine-readable JSON. Exit-code semantics live in the CLI.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::categorical::{
    forward_prob, interpolation_matrix, inverse_interpolation, reverse_posterior,
    reverse_posterior_masked, window_matrix, zheng_reparameterized_posterior,
    NoiseDistribution,
};
use crate::ctmc::{
    detailed_balance_candidate, detailed_balance_family, integrate_master,
    integrate_master_raw, kron_sum_dense, rate_finite_difference, rate_from_schedule,
    reverse_rate, reverse_rate_factorized, simulate_exact_batch, RateMatrix,
    SequenceRateSpec,
};
use crate::error::Result;
use crate::gaussian::{convert, GaussianForward, ParamKind};
use crate::generator::{
    dynkin_residual, generator_elbo_integrand, girsanov_weight, reversed_generator,
    FiniteGenerator,
};
use crate::losses::{
    discrete_time_elbo_discrete, discrete_to_continuous_discrete,
    discrete_to_continuous_gaussian, dse_loss, dse_loss_dense, masking_dse_mlm_constant,
    mlm_loss, CheatingDenoiser, DiscreteDenoiser, DiscreteKernel,
};
use crate::oracle;
use crate::rng::{standard_normal, stream_rng};
use crate::schedule::NoiseSchedule;
use crate::sde::{
    euler_maruyama, exact_loglik, ks_statistic, marginal_score, probability_flow_velocity,
    pushforward_mixture, Direction, MixtureDensity,
};
use crate::simplex::{index_to_seq, seq_to_index, SequenceDistribution, SimplexVector};
use crate::trainer::{
    exact_model_marginal, sample, train, ExactPosteriorDenoiser, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Schedule,
    Gaussian,
    Categorical,
    Ctmc,
    Sde,
    Losses,
    Generator,
    Trainer,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "all" => Suite::All,
            "schedule" => Suite::Schedule,
            "gaussian" => Suite::Gaussian,
            "categorical" => Suite::Categorical,
            "ctmc" => Suite::Ctmc,
            "sde" => Suite::Sde,
            "losses" => Suite::Losses,
            "generator" => Suite::Generator,
            "trainer" => Suite::Trainer,
            other => return Err(format!("unknown suite '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: String,
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    /// Pass when |measured| <= tolerance.
    fn bound(name: &str, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            status: if measured.abs() <= tolerance && measured.is_finite() {
                "pass".into()
            } else {
                "fail".into()
            },
            measured,
            tolerance,
        }
    }

    /// Pass when measured >= threshold (for lower-bounded quantities).
    fn at_least(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            status: if measured >= threshold && measured.is_finite() {
                "pass".into()
            } else {
                "fail".into()
            },
            measured,
            tolerance: threshold,
        }
    }

    /// Pass when measured lies in [lo, hi]; tolerance records hi.
    fn in_range(name: &str, measured: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            status: if (lo..=hi).contains(&measured) { "pass".into() } else { "fail".into() },
            measured,
            tolerance: hi,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// Runs the requested suites; `All` expands to every module suite.
pub fn run_suite(suite: Suite) -> Result<Vec<SuiteReport>> {
    let suites: Vec<Suite> = match suite {
        Suite::All => vec![
            Suite::Schedule,
            Suite::Gaussian,
            Suite::Categorical,
            Suite::Ctmc,
            Suite::Sde,
            Suite::Losses,
            Suite::Generator,
            Suite::Trainer,
        ],
        s => vec![s],
    };
    suites
        .into_iter()
        .map(|s| {
            let (name, checks) = match s {
                Suite::Schedule => ("schedule", schedule_checks()?),
                Suite::Gaussian => ("gaussian", gaussian_checks()?),
                Suite::Categorical => ("categorical", categorical_checks()?),
                Suite::Ctmc => ("ctmc", ctmc_checks()?),
                Suite::Sde => ("sde", sde_checks()?),
                Suite::Losses => ("losses", losses_checks()?),
                Suite::Generator => ("generator", generator_checks()?),
                Suite::Trainer => ("trainer", trainer_checks()?),
                Suite::All => unreachable!(),
            };
            Ok(SuiteReport { suite: name.into(), checks })
        })
        .collect()
}

fn families() -> Vec<NoiseSchedule> {
    vec![
        NoiseSchedule::linear_alpha(),
        NoiseSchedule::cosine(),
        NoiseSchedule::log_linear_snr_default(),
    ]
}

fn schedule_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();

    // Grid refinement: the reconstructed cumulative pair stays exact.
    let mut worst: f64 = 0.0;
    for s in families() {
        for &t_steps in &[8usize, 16, 32] {
            let steps = s.per_step_coefficients(t_steps)?;
            let (mut a, s0, _) = s.eval(0.0)?;
            let mut v = s0 * s0;
            for (i, (ai, si)) in steps.iter().enumerate() {
                a *= ai;
                v = ai * ai * v + si * si;
                let t = (i + 1) as f64 / t_steps as f64;
                let (a_ref, s_ref, _) = s.eval(t)?;
                worst = worst.max((a - a_ref).abs()).max((v - s_ref * s_ref).abs());
            }
        }
    }
    checks.push(CheckResult::bound("per-step-reconstruction", worst, 1e-12));

    let mut min_g2 = f64::INFINITY;
    for s in families() {
        for i in 0..=1000 {
            min_g2 = min_g2.min(s.sde_coefficients(i as f64 / 1000.0)?.1);
        }
    }
    checks.push(CheckResult::at_least("g2-nonnegative-1000-grid", min_g2, -1e-12));

    let mut worst_drift: f64 = 0.0;
    let mut worst_g2: f64 = 0.0;
    for s in families() {
        for &t in &[0.2, 0.5, 0.8] {
            let (drift, g2) = s.sde_coefficients(t)?;
            let fd_drift = oracle::finite_diff(|x| s.eval(x).unwrap().0.ln(), t, 1, 1e-5)?;
            worst_drift =
                worst_drift.max((drift - fd_drift).abs() / (1.0 + drift.abs()));
            let a = s.eval(t)?.0;
            let fd_g2 = a
                * a
                * oracle::finite_diff(
                    |x| {
                        let (a, sg, _) = s.eval(x).unwrap();
                        sg * sg / (a * a)
                    },
                    t,
                    1,
                    1e-5,
                )?;
            worst_g2 = worst_g2.max((g2 - fd_g2).abs() / (1.0 + g2.abs()));
        }
    }
    checks.push(CheckResult::bound("drift-finite-difference", worst_drift, 1e-6));
    checks.push(CheckResult::bound("g2-finite-difference", worst_g2, 1e-6));
    Ok(checks)
}

fn gaussian_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let sch = NoiseSchedule::linear_alpha().with_clip_eps(0.0)?;
    let fwd = GaussianForward::new(sch.clone(), 1)?;

    // Chapman-Kolmogorov moment matching on 100 random triples.
    let mut rng = stream_rng(42, 0);
    let mut worst: f64 = 0.0;
    let mut tried = 0;
    while tried < 100 {
        let mut times: Vec<f64> =
            (0..3).map(|_| 0.02 + 0.96 * rand::Rng::gen::<f64>(&mut rng)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (s, r, t) = (times[0], times[1], times[2]);
        if r - s < 1e-3 || t - r < 1e-3 {
            continue;
        }
        let k_rt = fwd.reverse_posterior(r, t)?;
        let k_sr = fwd.reverse_posterior(s, r)?;
        let k_st = fwd.reverse_posterior(s, t)?;
        worst = worst.max((k_sr.coeff_xt * k_rt.coeff_xt - k_st.coeff_xt).abs());
        worst = worst
            .max((k_sr.coeff_xt * k_rt.coeff_x0 + k_sr.coeff_x0 - k_st.coeff_x0).abs());
        let var = k_sr.coeff_xt * k_sr.coeff_xt * k_rt.std * k_rt.std + k_sr.std * k_sr.std;
        worst = worst.max((var - k_st.std * k_st.std).abs());
        tried += 1;
    }
    checks.push(CheckResult::bound("chapman-kolmogorov-moments", worst, 1e-9));

    // Marginal consistency through the reverse kernel.
    let mut worst: f64 = 0.0;
    for (s, t) in [(0.15, 0.45), (0.4, 0.95), (0.01, 0.99)] {
        let k = fwd.reverse_posterior(s, t)?;
        let (a_s, sig_s, _) = sch.eval(s)?;
        let (a_t, sig_t, _) = sch.eval(t)?;
        let x0 = -0.8;
        worst = worst.max((k.coeff_xt * a_t * x0 + k.coeff_x0 * x0 - a_s * x0).abs());
        let var = k.coeff_xt * k.coeff_xt * sig_t * sig_t + k.std * k.std;
        worst = worst.max((var - sig_s * sig_s).abs());
    }
    checks.push(CheckResult::bound("marginal-consistency", worst, 1e-9));

    // All four parameterisations produce identical reverse means.
    let sch = NoiseSchedule::linear_alpha();
    let fwd = GaussianForward::new(sch.clone(), 1)?;
    let mut rng = stream_rng(9, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = 0.1 + 0.85 * rand::Rng::gen::<f64>(&mut rng);
        let s = t - 0.05;
        let x_t = Array1::from_vec(vec![standard_normal(&mut rng)]);
        let x0_hat = Array1::from_vec(vec![standard_normal(&mut rng)]);
        let k = fwd.reverse_posterior(s, t)?;
        let reference = k.mean(&x_t, &x0_hat)[0];
        for kind in [ParamKind::Noise, ParamKind::Score, ParamKind::Velocity] {
            let enc = convert(&sch, ParamKind::Clean, &x0_hat, &x_t, t, kind)?;
            let dec = convert(&sch, kind, &enc, &x_t, t, ParamKind::Clean)?;
            worst = worst.max((k.mean(&x_t, &dec)[0] - reference).abs());
        }
    }
    checks.push(CheckResult::bound("parameterisation-equivalence", worst, 1e-12));
    Ok(checks)
}

fn categorical_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let mut rng = stream_rng(5, 0);

    // Kernel exactness against the enumeration oracle: 500 random queries
    // per noise family, every closed form, alphabets up to 6.
    let mut worst: f64 = 0.0;
    for kind in 0..3 {
        let mut checked = 0;
        while checked < 500 {
            let k = 2 + (rand::Rng::gen::<u64>(&mut rng) as usize) % 5; // 2..=6
            let noise = match kind {
                0 => NoiseDistribution::uniform(k)?,
                1 => NoiseDistribution::mask(k)?,
                _ => NoiseDistribution::mixture(k, 0.4)?,
            };
            let t_steps = 12;
            let (alphas, chain) = alpha_grid_and_chain(&noise, t_steps)?;
            let x0 = rand::Rng::gen_range(&mut rng, 0..k);
            let s_idx = rand::Rng::gen_range(&mut rng, 1..t_steps);
            let t_idx = rand::Rng::gen_range(&mut rng, s_idx + 1..=t_steps);
            let (a_s, a_t) = (alphas[s_idx], alphas[t_idx]);
            let x_t = rand::Rng::gen_range(&mut rng, 0..k);
            if forward_prob(x_t, x0, a_t, &noise) <= 0.0 {
                continue;
            }
            let slow = oracle::bayes_posterior(&chain, s_idx, t_idx, x_t, x0)?;
            let fast = reverse_posterior(x_t, x0, a_s, a_t, &noise)?;
            worst = worst.max(max_abs_diff(fast.probs(), slow.probs()));
            let zheng = zheng_reparameterized_posterior(x_t, x0, a_s, a_t, &noise)?;
            worst = worst.max(max_abs_diff(zheng.probs(), slow.probs()));
            if kind == 1 {
                let masked = reverse_posterior_masked(x_t, x0, a_s, a_t, k)?;
                worst = worst.max(max_abs_diff(masked.probs(), slow.probs()));
            }
            checked += 1;
        }
    }
    checks.push(CheckResult::bound("kernel-exactness-vs-oracle", worst, 1e-12));

    // Woodbury and window identities on 100 random (alpha_s, alpha_t, noise).
    let mut worst_inv: f64 = 0.0;
    let mut worst_window: f64 = 0.0;
    for _ in 0..100 {
        let k = 2 + (rand::Rng::gen::<u64>(&mut rng) as usize) % 5;
        let noise = match rand::Rng::gen_range(&mut rng, 0..3) {
            0 => NoiseDistribution::uniform(k)?,
            1 => NoiseDistribution::mask(k)?,
            _ => NoiseDistribution::mixture(k, rand::Rng::gen::<f64>(&mut rng))?,
        };
        let a_t = 0.02 + 0.9 * rand::Rng::gen::<f64>(&mut rng);
        let a_s = a_t + (1.0 - a_t) * rand::Rng::gen::<f64>(&mut rng);
        let q = interpolation_matrix(a_s, &noise)?;
        let qinv = inverse_interpolation(a_s, &noise)?;
        let prod = q.entries().dot(&qinv);
        worst_inv = worst_inv.max(max_abs_diff_iter(
            prod.iter().cloned(),
            Array2::<f64>::eye(k).iter().cloned(),
        ));
        let w = window_matrix(a_s, a_t, &noise)?;
        let qt = interpolation_matrix(a_t, &noise)?;
        let composed = w.compose(&q)?;
        worst_window = worst_window.max(max_abs_diff_iter(
            composed.entries().iter().cloned(),
            qt.entries().iter().cloned(),
        ));
    }
    checks.push(CheckResult::bound("woodbury-inverse", worst_inv, 1e-10));
    checks.push(CheckResult::bound("window-composition", worst_window, 1e-10));

    // Marginal consistency of the reverse posteriors, K <= 6.
    let mut worst: f64 = 0.0;
    for k in [2usize, 4, 6] {
        for noise in [
            NoiseDistribution::uniform(k)?,
            NoiseDistribution::mask(k)?,
            NoiseDistribution::mixture(k, 0.3)?,
        ] {
            for _ in 0..30 {
                let a_t = 0.05 + 0.9 * rand::Rng::gen::<f64>(&mut rng);
                let a_s = a_t + (1.0 - a_t - 1e-9) * rand::Rng::gen::<f64>(&mut rng);
                let x0 = rand::Rng::gen_range(&mut rng, 0..k);
                let mut acc = vec![0.0; k];
                for x_t in 0..k {
                    let w = forward_prob(x_t, x0, a_t, &noise);
                    if w <= 0.0 {
                        continue;
                    }
                    let post = reverse_posterior(x_t, x0, a_s, a_t, &noise)?;
                    for z in 0..k {
                        acc[z] += w * post.probs()[z];
                    }
                }
                for (z, &a) in acc.iter().enumerate() {
                    worst = worst.max((a - forward_prob(z, x0, a_s, &noise)).abs());
                }
            }
        }
    }
    checks.push(CheckResult::bound("reverse-marginal-consistency", worst, 1e-12));

    // Mixture kernels reduce to the corners.
    let k = 5;
    let mix_u = NoiseDistribution::mixture(k, 1.0)?;
    let mix_m = NoiseDistribution::mixture(k, 0.0)?;
    let worst = max_abs_diff(mix_u.probs(), NoiseDistribution::uniform(k)?.probs())
        .max(max_abs_diff(mix_m.probs(), NoiseDistribution::mask(k)?.probs()));
    checks.push(CheckResult::bound("mixture-corner-weights", worst, 1e-15));
    Ok(checks)
}

/// Cumulative alpha grid starting at exactly one, plus its dense chain.
fn alpha_grid_and_chain(
    noise: &NoiseDistribution,
    t_steps: usize,
) -> Result<(Vec<f64>, oracle::DenseChain)> {
    let mut alphas = vec![1.0];
    let mut times = vec![0.0];
    let mut steps = Vec::new();
    for i in 1..=t_steps {
        let t = i as f64 / t_steps as f64;
        let a = 1.0 - 0.95 * t;
        steps.push(interpolation_matrix(a / alphas[i - 1], noise)?.entries().clone());
        alphas.push(a);
        times.push(t);
    }
    Ok((alphas, oracle::DenseChain::new(times, steps)?))
}

fn ctmc_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let schedule = NoiseSchedule::linear_alpha().with_clip_eps(0.0)?;
    let noise = NoiseDistribution::uniform(4)?;

    // Continuous-time limit: finite-difference rate converges at order one.
    let smooth = NoiseSchedule::cosine();
    let exact = rate_from_schedule(&smooth, &noise, 0.5)?;
    let err = |delta: f64| -> Result<f64> {
        let est = rate_finite_difference(&smooth, &noise, 0.5, delta)?;
        Ok(max_abs_diff_iter(est.iter().cloned(), exact.entries().iter().cloned()))
    };
    let e_small = err(1e-4)?;
    checks.push(CheckResult::bound("rate-fd-error-at-1e-4", e_small, 1e-3));
    let ratio = err(5e-4)? / err(1e-3)?;
    checks.push(CheckResult::in_range("rate-fd-halving-ratio", ratio, 0.4, 0.6));

    // Probability conservation without renormalization on [0, 0.9].
    let q0 = SimplexVector::uniform(5);
    let noise5 = NoiseDistribution::uniform(5)?;
    let raw = integrate_master_raw(
        |t| rate_from_schedule(&schedule, &noise5, t),
        &q0,
        0.0,
        0.9,
        256,
    )?;
    checks.push(CheckResult::bound("mass-conservation-raw", raw.sum() - 1.0, 1e-9));

    // Forward-then-reverse marginal round trip, K <= 6.
    let mut worst: f64 = 0.0;
    for k in [3usize, 6] {
        let noise = NoiseDistribution::uniform(k)?;
        let raw: Vec<f64> =
            (0..k).map(|i| 0.05 + 0.9 * ((i * 37 % 11) as f64 / 11.0)).collect();
        let q_data = SimplexVector::from_unnormalized(raw)?;
        let t_hi = 0.9;
        let q_hi = integrate_master(
            |t| rate_from_schedule(&schedule, &noise, t),
            &q_data,
            0.0,
            t_hi,
            256,
        )?;
        let rev = integrate_master(
            |u| {
                let t = t_hi - u;
                let marg = crate::categorical::forward_marginal(
                    &q_data,
                    schedule.alpha(t)?,
                    &noise,
                )?;
                reverse_rate(&rate_from_schedule(&schedule, &noise, t)?, &marg)
            },
            &q_hi,
            0.0,
            t_hi,
            256,
        )?;
        worst = worst.max(rev.tv_distance(&q_data));
    }
    checks.push(CheckResult::bound("reverse-round-trip-tv", worst, 1e-6));

    // Detailed-balance family: gamma in {0, 1, 2} preserves the round trip.
    let k = 4;
    let noise4 = NoiseDistribution::uniform(k)?;
    let q_data = SimplexVector::new(vec![0.4, 0.3, 0.2, 0.1])?;
    let t_hi = 0.9;
    let q_hi = integrate_master(
        |t| rate_from_schedule(&schedule, &noise4, t),
        &q_data,
        0.0,
        t_hi,
        256,
    )?;
    let mut m = Array2::zeros((k, k));
    for x in 0..k {
        for y in 0..k {
            if x != y {
                m[(x, y)] = 0.3 + 0.1 * ((x + y) as f64);
            }
        }
    }
    let mut worst: f64 = 0.0;
    for gamma in [0.0, 1.0, 2.0] {
        let rev = integrate_master(
            |u| {
                let t = t_hi - u;
                let marg = crate::categorical::forward_marginal(
                    &q_data,
                    schedule.alpha(t)?,
                    &noise4,
                )?;
                let r_hat = reverse_rate(&rate_from_schedule(&schedule, &noise4, t)?, &marg)?;
                let c = detailed_balance_candidate(&marg, &m)?;
                detailed_balance_family(&r_hat, &marg, gamma, &c)
            },
            &q_hi,
            0.0,
            t_hi,
            256,
        )?;
        worst = worst.max(rev.tv_distance(&q_data));
    }
    checks.push(CheckResult::bound("detailed-balance-round-trip-tv", worst, 1e-5));

    // Kronecker sum: dense vs factorized evolution and Hamming-2 zeros.
    let k = 3;
    let d = 3;
    let noise3 = NoiseDistribution::uniform(k)?;
    let marginals: Vec<SimplexVector> = vec![
        SimplexVector::new(vec![0.5, 0.3, 0.2])?,
        SimplexVector::new(vec![0.1, 0.6, 0.3])?,
        SimplexVector::new(vec![0.25, 0.25, 0.5])?,
    ];
    let joint0 = SequenceDistribution::product(&marginals)?;
    let t1 = 0.6;
    let q0 = SimplexVector::new(joint0.probs().to_vec())?;
    let joint_t = integrate_master(
        |t| {
            let r = rate_from_schedule(&schedule, &noise3, t)?;
            kron_sum_dense(&SequenceRateSpec::iid(r, d)?)
        },
        &q0,
        0.0,
        t1,
        128,
    )?;
    let joint_t = SequenceDistribution::new(k, d, joint_t.probs().to_vec())?;
    let mut worst: f64 = 0.0;
    for coord in 0..d {
        let marg_t = integrate_master(
            |t| rate_from_schedule(&schedule, &noise3, t),
            &marginals[coord],
            0.0,
            t1,
            128,
        )?;
        worst = worst.max(joint_t.coordinate_marginal(coord).tv_distance(&marg_t));
    }
    checks.push(CheckResult::bound("kron-dense-vs-factorized-evolution", worst, 1e-9));

    let dense = kron_sum_dense(&SequenceRateSpec::iid(
        rate_from_schedule(&schedule, &noise3, 0.5)?,
        d,
    )?)?;
    let mut worst_h2: f64 = 0.0;
    for col in 0..dense.dim() {
        let from = index_to_seq(col, k, d);
        for row in 0..dense.dim() {
            let to = index_to_seq(row, k, d);
            if from.iter().zip(&to).filter(|(a, b)| a != b).count() >= 2 {
                worst_h2 = worst_h2.max(dense.entries()[(row, col)].abs());
            }
        }
    }
    checks.push(CheckResult::bound("kron-hamming-2-zeros", worst_h2, 0.0));

    // Factorized reverse rates agree with the dense reversal.
    let mut rng = stream_rng(21, 0);
    let mut per_dim = Vec::new();
    for _ in 0..d {
        let mut m = Array2::zeros((k, k));
        for x in 0..k {
            for y in 0..k {
                if x != y {
                    m[(x, y)] = 0.2 + rand::Rng::gen::<f64>(&mut rng);
                }
            }
        }
        per_dim.push(RateMatrix::from_off_diagonal(m)?);
    }
    let spec = SequenceRateSpec::new(per_dim)?;
    let states = spec.states()?;
    let raw: Vec<f64> = (0..states).map(|_| 0.05 + rand::Rng::gen::<f64>(&mut rng)).collect();
    let probs = SimplexVector::from_unnormalized(raw)?;
    let seq_dist = SequenceDistribution::new(k, d, probs.probs().to_vec())?;
    let dense_rev = reverse_rate(&kron_sum_dense(&spec)?, &probs)?;
    let mut worst: f64 = 0.0;
    for col in 0..states {
        let x = index_to_seq(col, k, d);
        let fact = reverse_rate_factorized(&spec, &seq_dist, &x)?;
        for coord in 0..d {
            for y in 0..k {
                if y == x[coord] {
                    continue;
                }
                let mut dest = x.clone();
                dest[coord] = y;
                let row = seq_to_index(&dest, k);
                worst = worst.max((fact[coord][y] - dense_rev.entries()[(row, col)]).abs());
            }
        }
    }
    checks.push(CheckResult::bound("factorized-reverse-vs-dense", worst, 1e-12));

    // Exact simulation marginals at Monte Carlo resolution (3 SE bands).
    let mc_schedule = NoiseSchedule::linear_alpha().with_clip_eps(1e-3)?;
    let k = 4;
    let noise_mc = NoiseDistribution::uniform(k)?;
    let d = 2;
    let x0 = [1usize, 3];
    let paths = 50_000;
    let mut counts = vec![vec![0usize; k]; d];
    let all = simulate_exact_batch(
        |t| rate_from_schedule(&mc_schedule, &noise_mc, t),
        d,
        &x0,
        1.0,
        2024,
        0,
        paths,
    )?;
    for path in &all {
        for (coord, &s) in path.final_state(1.0).iter().enumerate() {
            counts[coord][s] += 1;
        }
    }
    let a1 = mc_schedule.alpha(1.0)?;
    let mut worst_z: f64 = 0.0;
    for coord in 0..d {
        for sym in 0..k {
            let p = forward_prob(sym, x0[coord], a1, &noise_mc);
            let emp = counts[coord][sym] as f64 / paths as f64;
            let se = (p * (1.0 - p) / paths as f64).sqrt().max(1e-12);
            worst_z = worst_z.max((emp - p).abs() / se);
        }
    }
    checks.push(CheckResult::bound("gillespie-marginal-z-score", worst_z, 3.0));
    Ok(checks)
}

fn sde_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let data = MixtureDensity::new(vec![0.4, 0.6], vec![-1.5, 1.2], vec![0.3, 0.5])?;
    let schedule = NoiseSchedule::linear_alpha();
    let bounded = NoiseSchedule::log_linear_snr_clipped(13.0, -22.0, 2e-5)?;

    // Tweedie: analytic marginal score vs the posterior-expectation quadrature.
    let mut rng = stream_rng(31, 0);
    let (lo, hi) = data.support_hint(10.0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let t = 0.1 + 0.8 * rand::Rng::gen::<f64>(&mut rng);
        let x = -3.0 + 6.0 * rand::Rng::gen::<f64>(&mut rng);
        let (alpha, sigma, _) = schedule.eval(t)?;
        let joint = |x0: f64| {
            let m = alpha * x0;
            (-(x - m) * (x - m) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                * data.density(x0)
        };
        let num = oracle::quadrature(
            |x0| joint(x0) * (-(x - alpha * x0) / (sigma * sigma)),
            lo,
            hi,
            2049,
        )?;
        let den = oracle::quadrature(joint, lo, hi, 2049)?;
        worst = worst.max((marginal_score(&data, &schedule, t, x)? - num / den).abs());
    }
    checks.push(CheckResult::bound("tweedie-quadrature", worst, 1e-6));

    // Probability-flow exact likelihood vs the analytic log-density.
    let mut worst: f64 = 0.0;
    let mut rng = stream_rng(17, 0);
    for _ in 0..20 {
        let x0 = -3.0 + 6.0 * rand::Rng::gen::<f64>(&mut rng);
        if data.density(x0) < 1e-6 {
            continue;
        }
        worst = worst
            .max((exact_loglik(&data, &bounded, x0, 512)? - data.log_density(x0)?).abs());
    }
    checks.push(CheckResult::bound("exact-likelihood", worst, 1e-3));

    // Reverse SDE sampling: KS against the analytic data CDF.
    let n = 20_000;
    let q1 = pushforward_mixture(&data, &schedule, 1.0)?;
    let mut samples = Vec::with_capacity(n);
    for stream in 0..n {
        let mut rng = stream_rng(606, stream as u64);
        let x1 = q1.sample(&mut rng);
        let p = euler_maruyama(Direction::Reverse, &data, &schedule, x1, 512, 707, stream as u64)?;
        samples.push(p.terminal(Direction::Reverse));
    }
    let ks = ks_statistic(&mut samples, |x| data.cdf(x));
    checks.push(CheckResult::bound("reverse-sde-ks", ks, 0.02));

    // Forward EM empirical terminal distribution vs the pushforward.
    let mut samples = Vec::with_capacity(n);
    for stream in 0..n {
        let mut rng = stream_rng(808, stream as u64);
        let x0 = data.sample(&mut rng);
        let p = euler_maruyama(Direction::Forward, &data, &bounded, x0, 256, 909, stream as u64)?;
        samples.push(p.terminal(Direction::Forward));
    }
    let q1b = pushforward_mixture(&data, &bounded, 1.0)?;
    let ks = ks_statistic(&mut samples, |x| q1b.cdf(x));
    checks.push(CheckResult::bound("forward-em-ks", ks, 0.02));

    // Continuity-equation residual of the probability-flow velocity.
    let mut worst: f64 = 0.0;
    for i in 0..32 {
        let t = 0.15 + 0.7 * i as f64 / 31.0;
        for j in 0..32 {
            let x = -3.0 + 6.0 * j as f64 / 31.0;
            let dq_dt = oracle::finite_diff(
                |s| pushforward_mixture(&data, &schedule, s).unwrap().density(x),
                t,
                1,
                1e-5,
            )?;
            let dflux_dx = oracle::finite_diff(
                |y| {
                    probability_flow_velocity(&data, &schedule, t, y).unwrap()
                        * pushforward_mixture(&data, &schedule, t).unwrap().density(y)
                },
                x,
                1,
                1e-5,
            )?;
            worst = worst.max((dq_dt + dflux_dx).abs());
        }
    }
    checks.push(CheckResult::bound("continuity-equation-residual", worst, 1e-4));
    Ok(checks)
}

fn losses_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let mask_kernel = DiscreteKernel::new(
        NoiseSchedule::linear_alpha(),
        NoiseDistribution::mask(4)?,
    );
    let uniform_kernel = DiscreteKernel::new(
        NoiseSchedule::linear_alpha(),
        NoiseDistribution::uniform(3)?,
    );

    // (a) Diffusion KL vanishes at the exact posterior.
    let mut worst: f64 = 0.0;
    for kernel in [&uniform_kernel, &mask_kernel] {
        let x0 = [0usize, 2];
        let model = CheatingDenoiser { x0: x0.to_vec(), k_data: kernel.k_data() };
        let report = discrete_time_elbo_discrete(&x0, kernel, &model, 8)?;
        worst = worst.max(report.diffusion_term.abs());
    }
    checks.push(CheckResult::bound("elbo-diffusion-zero-at-posterior", worst, 1e-10));

    // (b) Token-level DSE equals sequence-level DSE on dense instances.
    let wavy = WavyCheck { k_data: uniform_kernel.k_data(), phase: 0.4 };
    let x0 = [0usize, 2, 1];
    let gap = (dse_loss(&x0, &uniform_kernel, &wavy, 65)?
        - dse_loss_dense(&x0, &uniform_kernel, &wavy, 65)?)
    .abs();
    let wavy_m = WavyCheck { k_data: mask_kernel.k_data(), phase: 0.8 };
    let x0m = [0usize, 1, 2];
    let gap_m = (dse_loss(&x0m, &mask_kernel, &wavy_m, 65)?
        - dse_loss_dense(&x0m, &mask_kernel, &wavy_m, 65)?)
    .abs();
    checks.push(CheckResult::bound("dse-token-vs-sequence", gap.max(gap_m), 1e-9));

    // (c) DSE(masking) minus the model-independent constant equals MLM.
    let x0 = [1usize, 3];
    let constant = masking_dse_mlm_constant(&x0, &mask_kernel, 513)?;
    let mut worst: f64 = 0.0;
    for phase in [0.0, 1.3] {
        let model = WavyCheck { k_data: mask_kernel.k_data(), phase };
        let dse = dse_loss(&x0, &mask_kernel, &model, 513)?;
        let mlm = mlm_loss(&x0, &mask_kernel, &model, 513)?;
        worst = worst.max((dse - constant - mlm).abs());
    }
    checks.push(CheckResult::bound("dse-minus-constant-equals-mlm", worst, 1e-8));

    // (d) Discrete-time diffusion terms converge at first order.
    let bounded = NoiseSchedule::log_linear_snr_clipped(13.0, -22.0, 2e-5)?;
    let table = discrete_to_continuous_gaussian(&bounded, 0.8, &[64, 128, 256, 512])?;
    let ratios = table.halving_ratios();
    let worst_ratio = ratios
        .iter()
        .map(|r| (r - 0.5).abs())
        .fold(0.0f64, f64::max);
    checks.push(CheckResult::bound("d2c-gaussian-ratio-offset", worst_ratio, 0.2));

    let smooth_mask = DiscreteKernel::new(bounded.clone(), NoiseDistribution::mask(4)?);
    let model = WavyCheck { k_data: smooth_mask.k_data(), phase: 0.5 };
    let x0 = [1usize, 2];
    let table =
        discrete_to_continuous_discrete(&x0, &smooth_mask, &model, &[256, 512, 1024], 513)?;
    let l512 = table.rows[1].diffusion_term;
    let l1024 = table.rows[2].diffusion_term;
    checks.push(CheckResult::bound(
        "d2c-discrete-extrapolated-limit",
        2.0 * l1024 - l512 - table.limit,
        1e-3,
    ));
    Ok(checks)
}

/// Deterministic softmax test model shared by the loss checks.
struct WavyCheck {
    k_data: usize,
    phase: f64,
}

impl DiscreteDenoiser for WavyCheck {
    fn k_data(&self) -> usize {
        self.k_data
    }
    fn predict(&self, x_t: &[usize], t: f64) -> Vec<Array1<f64>> {
        let idx = seq_to_index(x_t, self.k_data + 2) as f64;
        (0..x_t.len())
            .map(|coord| {
                let mut logits = Array1::zeros(self.k_data);
                for c in 0..self.k_data {
                    logits[c] = (self.phase
                        + 7.3 * idx
                        + 3.1 * coord as f64
                        + 13.7 * c as f64
                        + t)
                        .sin();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut out = logits.mapv(|v| (v - m).exp());
                let s = out.sum();
                out.mapv_inplace(|v| v / s);
                out
            })
            .collect()
    }
}

fn generator_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let mut rng = stream_rng(100, 0);
    let random_rate = |rng: &mut rand_chacha::ChaCha12Rng, k: usize| -> Result<RateMatrix> {
        let mut m = Array2::zeros((k, k));
        for x in 0..k {
            for y in 0..k {
                if x != y {
                    m[(x, y)] = 0.1 + rand::Rng::gen::<f64>(rng);
                }
            }
        }
        RateMatrix::from_off_diagonal(m)
    };

    // ||L 1||_inf.
    let gen = FiniteGenerator::new(random_rate(&mut rng, 6)?);
    let out = gen.apply(&Array1::from_elem(6, 1.0))?;
    let worst = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    checks.push(CheckResult::bound("annihilates-constants", worst, 1e-10));

    // Reversed generator equals the reverse rate matrix.
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let rate = random_rate(&mut rng, 5)?;
        let q = SimplexVector::from_unnormalized(
            (0..5).map(|_| 0.1 + rand::Rng::gen::<f64>(&mut rng)).collect(),
        )?;
        let via_op = reversed_generator(&FiniteGenerator::new(rate.clone()), &q)?;
        let via_rate = reverse_rate(&rate, &q)?;
        worst = worst.max(max_abs_diff_iter(
            via_op.rate().entries().iter().cloned(),
            via_rate.entries().iter().cloned(),
        ));
    }
    checks.push(CheckResult::bound("reversed-generator-vs-reverse-rate", worst, 1e-12));

    // Dynkin residual on the masking chain.
    let schedule = NoiseSchedule::linear_alpha().with_clip_eps(0.0)?;
    let noise = NoiseDistribution::mask(3)?;
    let mut phi = Array1::zeros(3);
    phi[2] = 1.0;
    let q0 = SimplexVector::new(vec![0.6, 0.4, 0.0])?;
    let residual = dynkin_residual(
        |t| Ok(FiniteGenerator::new(rate_from_schedule(&schedule, &noise, t)?)),
        &phi,
        &q0,
        0.9,
        256,
    )?;
    checks.push(CheckResult::bound("dynkin-residual", residual, 1e-6));

    // ELBO integrand nonnegativity on random inputs.
    let mut minval = f64::INFINITY;
    for _ in 0..20 {
        let rate = random_rate(&mut rng, 6)?;
        let q = SimplexVector::from_unnormalized(
            (0..6).map(|_| 0.1 + rand::Rng::gen::<f64>(&mut rng)).collect(),
        )?;
        let p = SimplexVector::from_unnormalized(
            (0..6).map(|_| 0.1 + rand::Rng::gen::<f64>(&mut rng)).collect(),
        )?;
        let rev = reversed_generator(&FiniteGenerator::new(rate), &q)?;
        for x in 0..6 {
            minval = minval.min(generator_elbo_integrand(&rev, &q, &p, x)?);
        }
    }
    checks.push(CheckResult::at_least("elbo-integrand-nonnegative", minval, -1e-12));

    // Girsanov: unit-mean weights and reweighted marginals.
    let k = 3;
    let rate = random_rate(&mut rng, k)?;
    let alpha_fn = |t: f64, x: usize| {
        (0.4 * (std::f64::consts::PI * t).sin() * (x as f64 + 1.0) / 3.0 + 0.2 * x as f64)
            .exp()
    };
    let n_paths = 50_000;
    let paths = simulate_exact_batch(|_t| Ok(rate.clone()), 1, &[0], 1.0, 77, 0, n_paths)?;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut weighted = vec![0.0; k];
    for path in &paths {
        let w = girsanov_weight(
            |_t| Ok(FiniteGenerator::new(rate.clone())),
            alpha_fn,
            path,
            1.0,
            |s| s[0],
        )?;
        sum += w;
        sumsq += w * w;
        weighted[path.final_state(1.0)[0]] += w;
    }
    let n = n_paths as f64;
    let mean = sum / n;
    let sd = ((sumsq / n - mean * mean).max(0.0) / n).sqrt();
    checks.push(CheckResult::bound("girsanov-mean-offset-z", (mean - 1.0) / sd, 3.0));
    let transformed = |t: f64| -> Result<RateMatrix> {
        let mut m = Array2::zeros((k, k));
        for x in 0..k {
            for y in 0..k {
                if x != y {
                    m[(y, x)] = rate.entries()[(y, x)] * alpha_fn(t, y) / alpha_fn(t, x);
                }
            }
        }
        RateMatrix::from_off_diagonal(m)
    };
    let q1 = integrate_master(transformed, &SimplexVector::one_hot(k, 0), 0.0, 1.0, 256)?;
    let empirical = SimplexVector::from_unnormalized(weighted)?;
    checks.push(CheckResult::bound(
        "girsanov-reweighted-marginal-tv",
        empirical.tv_distance(&q1),
        0.02,
    ));
    Ok(checks)
}

fn trainer_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let kernel = DiscreteKernel::new(
        NoiseSchedule::linear_alpha(),
        NoiseDistribution::mask(5)?,
    );

    // Ground-truth factorized denoiser on product data: exact pushforward.
    let sharp = DiscreteKernel::new(
        NoiseSchedule::linear_alpha().with_clip_eps(1e-8)?,
        NoiseDistribution::mask(5)?,
    );
    let m0 = SimplexVector::new(vec![0.4, 0.3, 0.2, 0.1])?;
    let m1 = SimplexVector::new(vec![0.1, 0.2, 0.3, 0.4])?;
    let product = SequenceDistribution::product(&[m0, m1])?;
    let denoiser = ExactPosteriorDenoiser::new(product.clone(), sharp.clone())?;
    let marginal = exact_model_marginal(&denoiser, &sharp, 2, 256)?;
    checks.push(CheckResult::bound(
        "ground-truth-pushforward-tv",
        marginal.tv_distance(&product.embed(5)?),
        1e-6,
    ));

    // Training on the structured bundled distribution.
    let q_data = crate::trainer::demo_distribution();
    let cfg = TrainConfig {
        epochs: 2000,
        lr: 10.0,
        bins: 32,
        quad_nodes: 65,
        eval_steps: 256,
        elbo_check_interval: 500,
        seed: 3,
    };
    let (model, report) = train(&q_data, &kernel, &cfg)?;
    checks.push(CheckResult::bound("train-final-tv", report.final_tv, 0.02));
    checks.push(CheckResult::at_least("train-elbo-slack", report.elbo_gap, -1e-6));
    let monotone = report
        .loss_curve
        .windows(2)
        .map(|w| (w[1] - w[0]).max(0.0))
        .fold(0.0f64, f64::max);
    checks.push(CheckResult::bound("train-loss-monotone", monotone, 1e-12));

    // Gradient vs central finite differences at convergence.
    let (_, grad) =
        crate::trainer::expected_loss_grad(&q_data, &kernel, &model, 65)?;
    let mut rng = stream_rng(779, 0);
    let mut worst_rel: f64 = 0.0;
    let mut checked = 0;
    while checked < 20 {
        let i = rand::Rng::gen_range(&mut rng, 0..model.n_params());
        if grad[i].abs() < 1e-8 {
            continue;
        }
        let h = 1e-5;
        let mut plus = model.clone();
        plus.logits_mut()[i] += h;
        let mut minus = model.clone();
        minus.logits_mut()[i] -= h;
        let fd = (crate::trainer::expected_loss(&q_data, &kernel, &plus, 65)?
            - crate::trainer::expected_loss(&q_data, &kernel, &minus, 65)?)
            / (2.0 * h);
        worst_rel = worst_rel.max((grad[i] - fd).abs() / grad[i].abs().max(1e-8));
        checked += 1;
    }
    checks.push(CheckResult::bound("gradient-vs-finite-difference", worst_rel, 1e-4));

    // Identifiability: fully masked prediction approaches the data marginal.
    let preds = model.predict(&[4, 4], 0.97);
    let mut worst: f64 = 0.0;
    for coord in 0..2 {
        let marginal = q_data.coordinate_marginal(coord);
        let learned = SimplexVector::new(preds[coord].to_vec())?;
        worst = worst.max(learned.tv_distance(&marginal));
    }
    checks.push(CheckResult::bound("masked-marginal-identifiability", worst, 0.02));

    // Sampling determinism and consistency with the dense pushforward.
    let (s1, _) = sample(&model, &kernel, 2, 2000, 64, 99)?;
    let (s2, _) = sample(&model, &kernel, 2, 2000, 64, 99)?;
    checks.push(CheckResult::bound(
        "sample-determinism",
        if s1 == s2 { 0.0 } else { 1.0 },
        0.0,
    ));
    let (_, tv) = sample(&model, &kernel, 2, 100_000, 64, 100)?;
    checks.push(CheckResult::bound("sample-vs-pushforward-tv", tv, 0.01));
    Ok(checks)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs_diff_iter(
    a: impl Iterator<Item = f64>,
    b: impl Iterator<Item = f64>,
) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
