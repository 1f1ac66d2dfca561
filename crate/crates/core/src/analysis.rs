//! Closed-form predictors: decodable-slot probability, density evolution of
//! the peeling decoder, rate threshold, decoder complexity and channel
//! coherence time.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use statrs::function::factorial::ln_binomial;

use crate::config::SystemConfig;
use crate::error::{Error, Result};

/// `Z` at or below this counts as a fully peeled graph.
pub const CONVERGENCE_Z: f64 = 1e-5;

/// Tail mass allowed beyond the truncated degree series.
pub const SERIES_TAIL: f64 = 1e-12;

/// `P(Binomial(n, p) = m)`, evaluated in log space.
pub fn binomial_pmf(n: usize, p: f64, m: usize) -> f64 {
    if m > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if m == n { 1.0 } else { 0.0 };
    }
    let ln = ln_binomial(n as u64, m as u64) + m as f64 * p.ln() + (n - m) as f64 * (-p).ln_1p();
    ln.exp()
}

/// `P(Poisson(lambda) = j)`.
pub fn poisson_pmf(lambda: f64, j: usize) -> f64 {
    if lambda <= 0.0 {
        return if j == 0 { 1.0 } else { 0.0 };
    }
    (j as f64 * lambda.ln() - lambda - statrs::function::gamma::ln_gamma(j as f64 + 1.0)).exp()
}

/// Users still undecoded at the start of iteration `t` (1-based).
fn remaining(n_active: usize, t: usize) -> usize {
    (n_active + 1).saturating_sub(t)
}

/// Probability that a slot holds exactly `m` of the users remaining at
/// iteration `t`, each present independently with probability `K / N_slot`.
pub fn beta(n_active: usize, k: usize, n_slots: usize, m: usize, t: usize) -> f64 {
    binomial_pmf(remaining(n_active, t), k as f64 / n_slots as f64, m)
}

/// `ln(1 - gamma_t)`, exact where `gamma_t` rounds to one.
pub fn ln_undecodable(n_active: usize, k: usize, n_slots: usize, m: usize, t: usize) -> f64 {
    let s: f64 = (1..=m).map(|j| beta(n_active, k, n_slots, j, t)).sum();
    n_slots as f64 * (-s.min(1.0)).ln_1p()
}

/// Probability that at least one slot holds between 1 and `M` codewords at
/// iteration `t`.
pub fn decodable_probability(n_active: usize, k: usize, n_slots: usize, m: usize, t: usize) -> f64 {
    -ln_undecodable(n_active, k, n_slots, m, t).exp_m1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodabilityCurve {
    pub n_active: usize,
    pub repetitions: usize,
    pub n_slots: usize,
    pub antennas: usize,
    /// `beta[t - 1][m]` for `m` in `0..=M`.
    pub beta: Vec<Vec<f64>>,
    /// `gamma[t - 1]`.
    pub gamma: Vec<f64>,
}

impl DecodabilityCurve {
    pub fn new(n_active: usize, k: usize, n_slots: usize, m: usize, t_max: usize) -> Self {
        let beta = (1..=t_max)
            .map(|t| (0..=m).map(|j| beta(n_active, k, n_slots, j, t)).collect())
            .collect();
        let gamma = (1..=t_max)
            .map(|t| decodable_probability(n_active, k, n_slots, m, t))
            .collect();
        Self { n_active, repetitions: k, n_slots, antennas: m, beta, gamma }
    }

    /// `t,gamma_t` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,gamma_t\n");
        for (i, g) in self.gamma.iter().enumerate() {
            let _ = writeln!(out, "{},{g:.12}", i + 1);
        }
        out
    }
}

/// Monte-Carlo estimate of `gamma_t` and its standard error under independent
/// per-slot occupancy.
pub fn gamma_monte_carlo<R: Rng + ?Sized>(
    n_active: usize,
    k: usize,
    n_slots: usize,
    m: usize,
    t: usize,
    draws: usize,
    rng: &mut R,
) -> (f64, f64) {
    let n = remaining(n_active, t) as u64;
    let occupancy = Binomial::new(n, (k as f64 / n_slots as f64).min(1.0)).expect("probability in [0, 1]");
    let hits = (0..draws)
        .filter(|_| (0..n_slots).any(|_| (1..=m as u64).contains(&occupancy.sample(rng))))
        .count();
    let p = hits as f64 / draws as f64;
    (p, (p * (1.0 - p) / draws as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonotonicityReport {
    /// False when `K N_a <= M N_slot`; nothing else is filled in then.
    pub applicable: bool,
    /// Iterations `t` with `gamma_{t+1} < gamma_t`.
    pub iteration_violations: Vec<usize>,
    /// `(t, N_slot)` with `gamma_t(N_slot + 1) < gamma_t(N_slot)`.
    pub slot_violations: Vec<(usize, usize)>,
    /// `m` with `beta_m^(1) / beta_m^(2) >= 1`.
    pub ratio_violations: Vec<usize>,
    /// `beta_m^(1) / beta_m^(2)` for `m` in `1..=M`.
    pub ratios: Vec<f64>,
}

impl MonotonicityReport {
    pub fn holds(&self) -> bool {
        self.applicable
            && self.iteration_violations.is_empty()
            && self.slot_violations.is_empty()
            && self.ratio_violations.is_empty()
    }
}

/// Checks that `gamma_t` grows with `t` over `t_range` and with `N_slot`
/// wherever `K N_a > M N_slot`, and that the one-step ratio of `beta_m` is
/// below one.
pub fn check_proposition1(
    n_active: usize,
    k: usize,
    n_slots: usize,
    m: usize,
    t_range: RangeInclusive<usize>,
) -> MonotonicityReport {
    if k * n_active <= m * n_slots {
        return MonotonicityReport::default();
    }
    let mut report = MonotonicityReport { applicable: true, ..Default::default() };
    let (lo, hi) = (*t_range.start(), *t_range.end());
    // compared in log space so saturated values near one still order
    let lu = |s: usize, t: usize| ln_undecodable(n_active, k, s, m, t);
    for t in lo..hi {
        if lu(n_slots, t + 1) > lu(n_slots, t) {
            report.iteration_violations.push(t);
        }
    }
    for t in t_range {
        for s in k.max(1)..n_slots {
            if k * remaining(n_active, t) > m * (s + 1) && lu(s + 1, t) > lu(s, t) {
                report.slot_violations.push((t, s));
            }
        }
    }
    for j in 1..=m {
        let r0 = beta(n_active, k, n_slots, j, 1) / beta(n_active, k, n_slots, j, 2);
        report.ratios.push(r0);
        if !(r0 < 1.0) {
            report.ratio_violations.push(j);
        }
    }
    report
}

/// Smallest `j` with `P(Poisson(lambda) > j) < tol`.
pub fn poisson_truncation(lambda: f64, tol: f64) -> usize {
    let mut cdf = 0.0;
    let mut j = 0;
    loop {
        cdf += poisson_pmf(lambda, j);
        if 1.0 - cdf < tol {
            return j;
        }
        j += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEvolutionState {
    pub rate: f64,
    pub repetitions: usize,
    pub antennas: usize,
    pub j_max: usize,
    /// Check-node degree distribution, `pi[j]` for `j` in `0..=j_max`.
    pub pi: Vec<f64>,
    /// Edge-perspective check-node degrees; `rho[0] = 0`.
    pub rho: Vec<f64>,
    /// `q[t - 1][m - 1]`: probability an edge sits on a check node left with
    /// `m` unpruned edges, including itself.
    pub q: Vec<Vec<f64>>,
    /// `z[t]`, probability an edge survives `t` iterations; `z[0] = 1`.
    pub z: Vec<f64>,
    /// Predicted throughput `r (1 - Z_{t_max})`.
    pub throughput: f64,
}

impl DensityEvolutionState {
    pub fn z_final(&self) -> f64 {
        *self.z.last().expect("z[0] always present")
    }
}

/// Density evolution with the degree series truncated where the Poisson tail
/// drops below [`SERIES_TAIL`].
pub fn density_evolution(rate: f64, k: usize, m: usize, t_max: usize) -> DensityEvolutionState {
    let j_max = poisson_truncation(k as f64 * rate, SERIES_TAIL).max(m);
    density_evolution_truncated(rate, k, m, t_max, j_max).expect("truncation chosen to meet the tail bound")
}

/// Density evolution over degrees `0..=j_max`; rejects a truncation whose
/// neglected tail exceeds [`SERIES_TAIL`].
pub fn density_evolution_truncated(
    rate: f64,
    k: usize,
    m: usize,
    t_max: usize,
    j_max: usize,
) -> Result<DensityEvolutionState> {
    if !(rate > 0.0) || k == 0 {
        return Err(Error::Dimension(format!("density evolution needs r > 0 and K >= 1, got r = {rate}, K = {k}")));
    }
    let lambda = k as f64 * rate;
    let pi: Vec<f64> = (0..=j_max).map(|j| poisson_pmf(lambda, j)).collect();
    let tail = 1.0 - pi.iter().sum::<f64>();
    if tail >= SERIES_TAIL {
        return Err(Error::Dimension(format!("degree truncation at {j_max} leaves tail mass {tail:e}")));
    }
    let rho: Vec<f64> = (0..=j_max).map(|j| pi[j] * j as f64 / lambda).collect();
    let mut z = vec![1.0];
    let mut q = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        let prev = *z.last().unwrap();
        let qt: Vec<f64> = (1..=m)
            .map(|mm| {
                (mm..=j_max)
                    .map(|j| rho[j] * binomial_pmf(j - 1, prev, mm - 1))
                    .sum()
            })
            .collect();
        let pruned: f64 = qt.iter().sum();
        z.push((1.0 - pruned).max(0.0).powi(k as i32 - 1));
        q.push(qt);
    }
    let z_final = *z.last().unwrap();
    Ok(DensityEvolutionState {
        rate,
        repetitions: k,
        antennas: m,
        j_max,
        pi,
        rho,
        q,
        z,
        throughput: rate * (1.0 - z_final),
    })
}

/// Number of peeling iterations granted at a given rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationBudget {
    /// One iteration per active user, `max(1, round(r N_slot))`.
    TiedToUsers { n_slots: usize },
    Fixed(usize),
}

impl IterationBudget {
    pub fn iterations(&self, rate: f64) -> usize {
        match *self {
            IterationBudget::TiedToUsers { n_slots } => ((rate * n_slots as f64).round() as usize).max(1),
            IterationBudget::Fixed(t) => t,
        }
    }
}

/// Largest rate on the grid `step, 2 step, ...` reached by increasing `r`
/// while `Z_{t_max} <= 1e-5`; zero if the first grid point already fails.
pub fn rate_threshold(k: usize, m: usize, budget: IterationBudget, step: f64) -> f64 {
    assert!(step > 0.0, "rate step must be positive");
    // Z never converges beyond r = M, the average per-slot capacity
    let limit = ((m.max(1) as f64 + 1.0) / step).ceil() as usize;
    let mut passed = 0;
    for i in 1..=limit {
        let r = i as f64 * step;
        if density_evolution(r, k, m, budget.iterations(r)).z_final() > CONVERGENCE_Z {
            break;
        }
        passed = i;
    }
    passed as f64 * step
}

/// `r,Z_final,T_r` rows.
pub fn de_csv(states: &[DensityEvolutionState]) -> String {
    let mut out = String::from("r,Z_final,T_r\n");
    for s in states {
        let _ = writeln!(out, "{},{:.6e},{:.6}", s.rate, s.z_final(), s.throughput);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityEstimate {
    /// Pilot activity detection, `2^{L_bp} L_p^2 N_slot`.
    pub sensing: f64,
    /// Payload decomposition, `(K r)^{3.5} N_slot L_bd`.
    pub payload: f64,
}

impl ComplexityEstimate {
    pub fn total(&self) -> f64 {
        self.sensing + self.payload
    }
}

/// Operation-count estimate of one frame's decoding at rate `r`.
pub fn decoder_complexity(cfg: &SystemConfig, rate: f64) -> ComplexityEstimate {
    let n_slots = cfg.n_slots as f64;
    let sensing = 2f64.powi(cfg.pilot_bits as i32) * (cfg.pilot_len as f64).powi(2) * n_slots;
    let payload = (cfg.repetitions as f64 * rate).powf(3.5) * n_slots * cfg.bpsk_bits() as f64;
    ComplexityEstimate { sensing, payload }
}

pub const CARRIER_HZ: f64 = 2e9;
pub const BANDWIDTH_HZ: f64 = 5e5;
const LIGHT_SPEED: f64 = 3e8;

/// Channel coherence time in symbols at speed `v_kmh`:
/// `B_c / (4 f_max)` with Doppler `f_max = v f_c / c`.
pub fn coherence_duration(v_kmh: f64, carrier_hz: f64, bandwidth_hz: f64) -> f64 {
    // grouped so the Table values come out exact in floating point
    bandwidth_hz * LIGHT_SPEED * 3.6 / (4.0 * v_kmh * carrier_hz)
}
