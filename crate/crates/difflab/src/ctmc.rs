//! Continuous-time discrete-state machinery: rate matrices, master-equation
//! integration (fixed-step RK4), exact jump simulation by thinning, time
//! reversal, detailed-balance perturbations, and the Kronecker-sum structure
//! of sequence-level generators.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::categorical::NoiseDistribution;
use crate::error::{Error, Result};
use crate::rng::{exponential, stream_rng};
use crate::schedule::NoiseSchedule;
use crate::simplex::{check_dense_cap, index_to_seq, seq_to_index, SequenceDistribution, SimplexVector};

/// Default fixed-step count for RK4 integrations on [0, 1].
pub const DEFAULT_RK_STEPS: usize = 256;

/// Reverse-time integrations and samplers stop at this distance from the
/// data endpoint; the last stretch is handled by an exact posterior jump.
pub const REVERSE_T_MIN: f64 = 1e-3;

/// Off-diagonal tolerance when validating rate matrices.
pub const OFFDIAG_TOL: f64 = 1e-12;

/// Column-sum tolerance when validating rate matrices.
pub const COLSUM_TOL: f64 = 1e-10;

/// A K x K rate matrix: nonnegative off-diagonals, columns summing to zero
/// (destination = row, source = column).
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    entries: Array2<f64>,
}

impl RateMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n || n == 0 {
            return Err(Error::Argument("rate matrix must be square and non-empty".into()));
        }
        for col in 0..n {
            let mut sum = 0.0;
            for row in 0..n {
                let v = entries[(row, col)];
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite rate at ({row}, {col})")));
                }
                if row != col && v < -OFFDIAG_TOL {
                    return Err(Error::Argument(format!(
                        "negative off-diagonal rate {v} at ({row}, {col})"
                    )));
                }
                sum += v;
            }
            if sum.abs() > COLSUM_TOL {
                return Err(Error::Argument(format!("column {col} sums to {sum}, not 0")));
            }
        }
        Ok(Self { entries })
    }

    /// Builds from off-diagonal entries only; diagonals close each column.
    pub fn from_off_diagonal(mut entries: Array2<f64>) -> Result<Self> {
        let n = entries.nrows();
        for col in 0..n {
            entries[(col, col)] = 0.0;
            let exit: f64 = entries.column(col).sum();
            entries[(col, col)] = -exit;
        }
        Self::new(entries)
    }

    pub fn zero(n: usize) -> Self {
        Self { entries: Array2::zeros((n, n)) }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Total exit rate out of state `x` (the negated diagonal).
    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.entries[(x, x)]
    }

    pub fn scaled_add(&self, gamma: f64, other: &RateMatrix) -> Result<RateMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::Argument("dimension mismatch".into()));
        }
        RateMatrix::new(&self.entries + &(&other.entries * gamma))
    }
}

/// Rate matrix induced by the interpolation kernel:
/// R_t = (alpha'_t/alpha_t)(I - p_noise 1^T).
/// Inside the schedule's clamp window the effective alpha is constant and the
/// rate vanishes.
pub fn rate_from_schedule(
    schedule: &NoiseSchedule,
    noise: &NoiseDistribution,
    t: f64,
) -> Result<RateMatrix> {
    let (alpha, _, dalpha) = schedule.eval(t)?;
    let ratio = if schedule.is_clamped(t) { 0.0 } else { dalpha / alpha };
    if !ratio.is_finite() {
        return Err(Error::Numeric(format!("alpha ratio non-finite at t = {t}")));
    }
    let k = noise.k_total();
    let mut m = Array2::zeros((k, k));
    for col in 0..k {
        for row in 0..k {
            let mut v = -noise.probs()[row];
            if row == col {
                v += 1.0;
            }
            m[(row, col)] = ratio * v;
        }
    }
    RateMatrix::new(m)
}

/// Finite-difference estimate (Q_{t | t-delta} - I)/delta of the rate matrix.
/// First-order accurate; returned raw (not validated as a RateMatrix).
pub fn rate_finite_difference(
    schedule: &NoiseSchedule,
    noise: &NoiseDistribution,
    t: f64,
    delta: f64,
) -> Result<Array2<f64>> {
    if delta <= 0.0 || t - delta < 0.0 {
        return Err(Error::Argument(format!("bad delta {delta} at t = {t}")));
    }
    let a_t = schedule.alpha(t)?;
    let a_prev = schedule.alpha(t - delta)?;
    let window = crate::categorical::window_matrix(a_prev, a_t, noise)?;
    let mut m = window.entries().clone();
    for i in 0..m.nrows() {
        m[(i, i)] -= 1.0;
    }
    Ok(m / delta)
}

/// Fixed-step RK4 integration of the master equation dq/dt = R_t q from `t0`
/// to `t1` (either direction). The state is renormalized after every step;
/// drift beyond 1e-6 before renormalization is a stability error.
pub fn integrate_master<F>(
    rate_fn: F,
    q0: &SimplexVector,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<SimplexVector>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    let q = integrate_master_impl(rate_fn, q0, t0, t1, steps, true)?;
    SimplexVector::from_unnormalized(q.to_vec())
}

/// RK4 without renormalization or simplex guards; exposes raw conservation
/// behaviour for the probability-conservation property checks.
pub fn integrate_master_raw<F>(
    rate_fn: F,
    q0: &SimplexVector,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Array1<f64>>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    integrate_master_impl(rate_fn, q0, t0, t1, steps, false)
}

fn integrate_master_impl<F>(
    rate_fn: F,
    q0: &SimplexVector,
    t0: f64,
    t1: f64,
    steps: usize,
    renormalize: bool,
) -> Result<Array1<f64>>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    if steps == 0 {
        return Err(Error::Argument("need at least one step".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut q = q0.as_array();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let r1 = rate_fn(t)?;
        let r2 = rate_fn(t + 0.5 * h)?;
        let r4 = rate_fn(t + h)?;
        let k1 = r1.entries().dot(&q);
        let k2 = r2.entries().dot(&(&q + &(&k1 * (0.5 * h))));
        let k3 = r2.entries().dot(&(&q + &(&k2 * (0.5 * h))));
        let k4 = r4.entries().dot(&(&q + &(&k3 * h)));
        q = &q + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
        if renormalize {
            let sum: f64 = q.sum();
            let min = q.iter().cloned().fold(f64::INFINITY, f64::min);
            if (sum - 1.0).abs() > 1e-6 || min < -1e-6 {
                return Err(Error::Stability(format!(
                    "state left the simplex at step {i}: sum = {sum}, min = {min}"
                )));
            }
            q.mapv_inplace(|v| v.max(0.0) / sum);
        }
    }
    Ok(q)
}

/// Reverse rate matrix: off-diagonals R_hat(x, z) = R(z, x) q(x)/q(z),
/// diagonals closing each column to zero. Requires strictly positive q.
pub fn reverse_rate(rate: &RateMatrix, q: &SimplexVector) -> Result<RateMatrix> {
    let n = rate.dim();
    if q.len() != n {
        return Err(Error::Argument("dimension mismatch".into()));
    }
    if q.probs().iter().any(|&p| p <= 0.0) {
        return Err(Error::Support("marginal has zero entries; restrict to the support".into()));
    }
    let mut m = Array2::zeros((n, n));
    for x in 0..n {
        for z in 0..n {
            if x != z {
                m[(x, z)] = rate.entries()[(z, x)] * q.probs()[x] / q.probs()[z];
            }
        }
    }
    RateMatrix::from_off_diagonal(m)
}

/// Validates that `c` satisfies detailed balance w.r.t. `q` and returns the
/// marginal-preserving perturbation R_hat + gamma C.
pub fn detailed_balance_family(
    rate_hat: &RateMatrix,
    q: &SimplexVector,
    gamma: f64,
    c: &RateMatrix,
) -> Result<RateMatrix> {
    if gamma < 0.0 {
        return Err(Error::Argument(format!("gamma {gamma} must be nonnegative")));
    }
    check_detailed_balance(c, q, 1e-10)?;
    rate_hat.scaled_add(gamma, c)
}

/// |q(x) C(y,x) - q(y) C(x,y)| <= tol for all pairs.
pub fn check_detailed_balance(c: &RateMatrix, q: &SimplexVector, tol: f64) -> Result<()> {
    let n = c.dim();
    if q.len() != n {
        return Err(Error::Argument("dimension mismatch".into()));
    }
    for x in 0..n {
        for y in (x + 1)..n {
            let flow = q.probs()[x] * c.entries()[(y, x)];
            let back = q.probs()[y] * c.entries()[(x, y)];
            if (flow - back).abs() > tol {
                return Err(Error::Argument(format!(
                    "detailed balance violated at ({x}, {y}): {flow} vs {back}"
                )));
            }
        }
    }
    Ok(())
}

/// Detailed-balance candidate built by symmetrization: C(y, x) = m(y, x)/q(x)
/// with a symmetric nonnegative `m` (diagonal ignored).
pub fn detailed_balance_candidate(q: &SimplexVector, m: &Array2<f64>) -> Result<RateMatrix> {
    let n = q.len();
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Argument("dimension mismatch".into()));
    }
    if q.probs().iter().any(|&p| p <= 0.0) {
        return Err(Error::Support("q must be strictly positive".into()));
    }
    let mut c = Array2::zeros((n, n));
    for x in 0..n {
        for y in 0..n {
            if x == y {
                continue;
            }
            if (m[(y, x)] - m[(x, y)]).abs() > 1e-12 || m[(y, x)] < 0.0 {
                return Err(Error::Argument("m must be symmetric with nonnegative entries".into()));
            }
            c[(y, x)] = m[(y, x)] / q.probs()[x];
        }
    }
    RateMatrix::from_off_diagonal(c)
}

/// One event of a jump path: at `time`, coordinate `coord` switched to `symbol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    #[serde(rename = "t")]
    pub time: f64,
    #[serde(rename = "k")]
    pub coord: usize,
    #[serde(rename = "sym")]
    pub symbol: usize,
}

/// A simulated trajectory of the sequence-level CTMC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpPath {
    pub initial: Vec<usize>,
    pub events: Vec<JumpEvent>,
}

impl JumpPath {
    /// State just before `time` (events at exactly `time` are included).
    pub fn state_at(&self, time: f64) -> Vec<usize> {
        let mut state = self.initial.clone();
        for e in &self.events {
            if e.time <= time {
                state[e.coord] = e.symbol;
            } else {
                break;
            }
        }
        state
    }

    pub fn final_state(&self, _horizon: f64) -> Vec<usize> {
        let mut state = self.initial.clone();
        for e in &self.events {
            state[e.coord] = e.symbol;
        }
        state
    }
}

/// Exact simulation of the time-inhomogeneous CTMC with i.i.d. per-coordinate
/// rates, by thinning. The horizon is scanned on a 1024-cell grid; each cell
/// carries its own bound, 1.1 x the larger endpoint total exit rate.
/// Interpolation-kernel exit rates climb like 1/(1-t) near the noise
/// endpoint, so per-cell bounds are required both for correctness (the rate
/// is monotone inside a cell, a global grid max is not safe) and to keep the
/// proposal count proportional to the integrated rate.
pub fn simulate_exact<F>(
    rate_fn: F,
    d: usize,
    x0: &[usize],
    horizon: f64,
    seed: u64,
    stream: u64,
) -> Result<JumpPath>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    let cells = thinning_cells(&rate_fn, d, horizon)?;
    simulate_with_cells(&rate_fn, d, x0, &cells, seed, stream)
}

/// Batch variant: the bound scan runs once and path `i` uses RNG stream
/// `first_stream + i`, so each path is reproducible in isolation.
pub fn simulate_exact_batch<F>(
    rate_fn: F,
    d: usize,
    x0: &[usize],
    horizon: f64,
    seed: u64,
    first_stream: u64,
    n_paths: usize,
) -> Result<Vec<JumpPath>>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    let cells = thinning_cells(&rate_fn, d, horizon)?;
    (0..n_paths)
        .map(|i| simulate_with_cells(&rate_fn, d, x0, &cells, seed, first_stream + i as u64))
        .collect()
}

/// Precomputed proposal cells, reusable across paths and threads.
#[derive(Debug, Clone)]
pub struct ThinningPlan {
    cells: Vec<(f64, f64, f64)>,
}

pub fn thinning_plan<F>(rate_fn: F, d: usize, horizon: f64) -> Result<ThinningPlan>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    Ok(ThinningPlan { cells: thinning_cells(&rate_fn, d, horizon)? })
}

/// One exact path under a precomputed plan.
pub fn simulate_exact_planned<F>(
    rate_fn: F,
    d: usize,
    x0: &[usize],
    plan: &ThinningPlan,
    seed: u64,
    stream: u64,
) -> Result<JumpPath>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    simulate_with_cells(&rate_fn, d, x0, &plan.cells, seed, stream)
}

/// Proposal cells for thinning: 1024 base cells on [0, horizon], each
/// bisected until the scanned total exit rate varies by at most 5% inside
/// (or the cell is negligibly thin), so the 1.1 factor is a true envelope
/// for piecewise-monotone rates. Interpolation-kernel exit rates climb like
/// 1/(1-t) toward the noise endpoint; a single global bound would be both
/// unsound on a coarse grid and proposal-count prohibitive.
fn thinning_cells<F>(rate_fn: &F, d: usize, horizon: f64) -> Result<Vec<(f64, f64, f64)>>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Argument(format!("bad horizon {horizon}")));
    }
    let scan = |t: f64| -> Result<f64> {
        let r = rate_fn(t)?;
        let worst = (0..r.dim()).map(|x| r.exit_rate(x)).fold(0.0f64, f64::max);
        if !worst.is_finite() {
            return Err(Error::Numeric(format!("non-finite rate during bound scan at t = {t}")));
        }
        Ok(worst * d as f64)
    };
    let grid = 1024usize;
    let mut cells: Vec<(f64, f64, f64)> = Vec::with_capacity(grid);
    let mut stack: Vec<(f64, f64)> = (0..grid)
        .rev()
        .map(|i| {
            (horizon * i as f64 / grid as f64, horizon * (i + 1) as f64 / grid as f64)
        })
        .collect();
    let min_width = horizon * 1e-10;
    while let Some((a, b)) = stack.pop() {
        let probes = [a, 0.75 * a + 0.25 * b, 0.5 * (a + b), 0.25 * a + 0.75 * b, b];
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for &t in &probes {
            let v = scan(t)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == 0.0 {
            continue;
        }
        if b - a <= min_width || hi <= 1.05 * lo.max(1e-300) {
            cells.push((a, b, 1.1 * hi));
        } else {
            let mid = 0.5 * (a + b);
            stack.push((mid, b));
            stack.push((a, mid));
        }
    }
    cells.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    Ok(cells)
}

fn simulate_with_cells<F>(
    rate_fn: &F,
    d: usize,
    x0: &[usize],
    cells: &[(f64, f64, f64)],
    seed: u64,
    stream: u64,
) -> Result<JumpPath>
where
    F: Fn(f64) -> Result<RateMatrix>,
{
    if x0.len() != d || d == 0 {
        return Err(Error::Argument("initial state length must equal d".into()));
    }
    let mut path = JumpPath { initial: x0.to_vec(), events: Vec::new() };
    let mut rng = stream_rng(seed, stream);
    let mut state = x0.to_vec();
    for &(cell_start, cell_end, bound) in cells {
        // Memorylessness lets the proposal clock restart at each cell start.
        let mut t = cell_start;
        loop {
            t += exponential(&mut rng, bound);
            if t >= cell_end {
                break;
            }
            let r = rate_fn(t)?;
            let exits: Vec<f64> = state.iter().map(|&x| r.exit_rate(x)).collect();
            let total: f64 = exits.iter().sum();
            if total > bound * (1.0 + 1e-9) {
                return Err(Error::Numeric(format!(
                    "thinning bound violated at t = {t}: {total} > {bound}"
                )));
            }
            let u: f64 = rand::Rng::gen(&mut rng);
            if u * bound >= total {
                continue; // thinned proposal
            }
            // Pick the jumping coordinate proportional to its exit rate.
            let mut pick: f64 = rand::Rng::gen::<f64>(&mut rng) * total;
            let mut coord = 0;
            for (k, &e) in exits.iter().enumerate() {
                if pick < e {
                    coord = k;
                    break;
                }
                pick -= e;
                coord = k;
            }
            // Pick the destination symbol proportional to the off-diagonal rates.
            let from = state[coord];
            let col_total = exits[coord];
            if col_total <= 0.0 {
                continue;
            }
            let mut pick: f64 = rand::Rng::gen::<f64>(&mut rng) * col_total;
            let mut symbol = from;
            for y in 0..r.dim() {
                if y == from {
                    continue;
                }
                let rate = r.entries()[(y, from)].max(0.0);
                if pick < rate {
                    symbol = y;
                    break;
                }
                pick -= rate;
            }
            if symbol == from {
                continue;
            }
            state[coord] = symbol;
            path.events.push(JumpEvent { time: t, coord, symbol });
        }
    }
    Ok(path)
}

/// Identical-or-distinct per-dimension rate matrices for a d-coordinate chain.
#[derive(Debug, Clone)]
pub struct SequenceRateSpec {
    per_dim: Vec<RateMatrix>,
}

impl SequenceRateSpec {
    pub fn new(per_dim: Vec<RateMatrix>) -> Result<Self> {
        if per_dim.is_empty() {
            return Err(Error::Argument("need at least one dimension".into()));
        }
        let k = per_dim[0].dim();
        if per_dim.iter().any(|r| r.dim() != k) {
            return Err(Error::Argument("per-dimension alphabets differ".into()));
        }
        Ok(Self { per_dim })
    }

    pub fn iid(rate: RateMatrix, d: usize) -> Result<Self> {
        Self::new(vec![rate; d.max(1)])
    }

    pub fn dims(&self) -> usize {
        self.per_dim.len()
    }

    pub fn alphabet(&self) -> usize {
        self.per_dim[0].dim()
    }

    pub fn per_dim(&self) -> &[RateMatrix] {
        &self.per_dim
    }

    pub fn states(&self) -> Result<usize> {
        self.alphabet()
            .checked_pow(self.dims() as u32)
            .ok_or_else(|| Error::Capacity("K^d overflows".into()))
    }
}

/// Dense Kronecker sum over K^d states: Hamming-1 pairs carry the
/// per-dimension rate, Hamming >= 2 pairs are zero, diagonals close columns.
pub fn kron_sum_dense(spec: &SequenceRateSpec) -> Result<RateMatrix> {
    let states = spec.states()?;
    check_dense_cap(states, "kron_sum_dense")?;
    let k = spec.alphabet();
    let d = spec.dims();
    let mut m = Array2::zeros((states, states));
    for col in 0..states {
        let seq = index_to_seq(col, k, d);
        for (coord, rate) in spec.per_dim().iter().enumerate() {
            let from = seq[coord];
            for y in 0..k {
                if y == from {
                    continue;
                }
                let mut dest = seq.clone();
                dest[coord] = y;
                m[(seq_to_index(&dest, k), col)] += rate.entries()[(y, from)];
            }
        }
    }
    RateMatrix::from_off_diagonal(m)
}

/// Reverse rates out of sequence `x`, factorized over coordinates: entry
/// `[k][y]` is the reverse rate of switching coordinate k to symbol y,
/// equal to R^(k)(x^(k), y) q(swap_k(x, y))/q(x). The y = x^(k) slot is zero.
pub fn reverse_rate_factorized(
    spec: &SequenceRateSpec,
    seq_dist: &SequenceDistribution,
    x: &[usize],
) -> Result<Vec<Array1<f64>>> {
    let k = spec.alphabet();
    let d = spec.dims();
    if seq_dist.alphabet() != k || seq_dist.dims() != d || x.len() != d {
        return Err(Error::Argument("shape mismatch".into()));
    }
    let qx = seq_dist.prob_of(x);
    if qx <= 0.0 {
        return Err(Error::Support(format!("q({x:?}) = 0")));
    }
    let mut out = Vec::with_capacity(d);
    for (coord, rate) in spec.per_dim().iter().enumerate() {
        let mut rates = Array1::zeros(k);
        for y in 0..k {
            if y == x[coord] {
                continue;
            }
            let mut swapped = x.to_vec();
            swapped[coord] = y;
            // Forward rate of the opposite move (y -> x^(k)), tilted by the
            // marginal ratio of the swapped sequence.
            rates[y] = rate.entries()[(x[coord], y)] * seq_dist.prob_of(&swapped) / qx;
        }
        out.push(rates);
    }
    Ok(out)
}
