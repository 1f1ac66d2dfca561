//! Per-sub-slot pilot activity detection and channel estimation.
//!
//! Activity detection fits the covariance model
//! `Sigma = A diag(xi) A^T + sigma2 I` to the sample covariance of the pilot
//! part by exact coordinate minimization of
//! `log det Sigma + tr(Sigma^-1 Sigma_y)`, one pilot at a time, keeping
//! `Sigma^-1` current through Sherman-Morrison updates.
//!
//! The codebook is real, so `Sigma` is real symmetric and only the real part of
//! the sample covariance enters the objective. Coordinates sitting at zero
//! whose unclamped step is non-positive leave the state untouched; the
//! screened sweep finds those in bulk with one Walsh-Hadamard transform and
//! only visits coordinates that can move. Both sweeps visit the same
//! coordinates in the same order and apply identical updates.

use nalgebra::{DMatrix, DMatrixView};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::{fwht, hadamard_entry, PilotCodebook};
use crate::encoder::bin;
use crate::error::{Error, Result};

/// Coordinate visiting order within a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordinateOrder {
    #[default]
    Ascending,
    /// A fixed random permutation drawn from the seed.
    Shuffled(u64),
}

/// Default relative diagonal loading.
pub const DEFAULT_LOADING: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CbmlOptions {
    pub passes: usize,
    /// Activity threshold as a multiple of the effective noise variance.
    pub threshold: f64,
    /// Diagonal loading: the noise variance is floored at this fraction of
    /// the mean sample power per pilot symbol. Keeps the model well
    /// conditioned at very high SNR.
    pub loading: f64,
    pub order: CoordinateOrder,
    /// Applied updates between full re-inversions of `Sigma`.
    pub refactor_every: usize,
    /// Fruitless exact visits tolerated before re-screening.
    pub lookahead: usize,
}

impl CbmlOptions {
    pub fn new(passes: usize, threshold: f64) -> Self {
        Self {
            passes,
            threshold,
            loading: DEFAULT_LOADING,
            order: CoordinateOrder::Ascending,
            refactor_every: 4096,
            lookahead: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbmlOutput {
    /// Activity coefficients on the unit-norm-column scale, one per pilot.
    pub gamma: Vec<f64>,
    /// Pilots with `gamma > threshold * noise_variance`, ascending.
    pub active: Vec<usize>,
    /// Coordinate updates that changed the state.
    pub applied_updates: usize,
    /// Coordinates evaluated exactly.
    pub visits: usize,
    /// Full Walsh-Hadamard screens computed.
    pub screens: usize,
    /// Noise variance the model was fitted with, after loading.
    pub noise_variance: f64,
}

/// Detector state visible to an observer after each applied update.
#[derive(Debug)]
pub struct CbmlSnapshot<'a> {
    pub coordinate: usize,
    pub step: f64,
    pub gamma: &'a [f64],
    /// Row-major `L_p x L_p` model covariance.
    pub sigma: &'a [f64],
    /// Row-major `L_p x L_p` inverse model covariance.
    pub sigma_inv: &'a [f64],
    pub neg_log_likelihood: f64,
}

/// Real part of `(1/M) Y_p^H Y_p`, row-major `L_p x L_p`.
pub fn sample_covariance(y_pilot: &DMatrixView<'_, Complex64>) -> Vec<f64> {
    let (m, l) = y_pilot.shape();
    let mut s = vec![0.0; l * l];
    for i in 0..l {
        for j in i..l {
            let mut acc = 0.0;
            for a in 0..m {
                let (x, y) = (y_pilot[(a, i)], y_pilot[(a, j)]);
                acc += x.re * y.re + x.im * y.im;
            }
            s[i * l + j] = acc / m as f64;
            s[j * l + i] = acc / m as f64;
        }
    }
    s
}

fn matvec(mat: &[f64], v: &[f64], out: &mut [f64]) {
    let l = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &mat[i * l..(i + 1) * l];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverse, log-determinant via Cholesky of a row-major SPD matrix.
fn spd_inverse(mat: &[f64], l: usize) -> Option<(Vec<f64>, f64)> {
    let m = DMatrix::from_row_slice(l, l, mat);
    let chol = m.cholesky()?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = chol.inverse();
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            out[i * l + j] = inv[(i, j)];
        }
    }
    Some((out, logdet))
}

/// `B S B` for row-major symmetric matrices.
fn sandwich(b: &[f64], s: &[f64], l: usize) -> Vec<f64> {
    let mut bs = vec![0.0; l * l];
    for i in 0..l {
        for k in 0..l {
            let bik = b[i * l + k];
            if bik == 0.0 {
                continue;
            }
            for j in 0..l {
                bs[i * l + j] += bik * s[k * l + j];
            }
        }
    }
    let mut w = vec![0.0; l * l];
    for i in 0..l {
        for k in 0..l {
            let v = bs[i * l + k];
            for j in 0..l {
                w[i * l + j] += v * b[k * l + j];
            }
        }
    }
    w
}

struct CovarianceModel {
    l: usize,
    sigma2: f64,
    s: Vec<f64>,
    sigma: Vec<f64>,
    b: Vec<f64>,
    /// `B S B`.
    w: Vec<f64>,
    since_refactor: usize,
    u: Vec<f64>,
    z: Vec<f64>,
}

impl CovarianceModel {
    fn new(s: Vec<f64>, l: usize, sigma2: f64) -> Self {
        let mut sigma = vec![0.0; l * l];
        let mut b = vec![0.0; l * l];
        for i in 0..l {
            sigma[i * l + i] = sigma2;
            b[i * l + i] = 1.0 / sigma2;
        }
        let w = sandwich(&b, &s, l);
        Self { l, sigma2, s, sigma, b, w, since_refactor: 0, u: vec![0.0; l], z: vec![0.0; l] }
    }

    /// Exact coordinate step for unit-norm column `a` currently at `xi`.
    ///
    /// Returns the step and an upper bound on the spectral norm of the change
    /// it made to `W - B`.
    fn step(&mut self, coordinate: usize, a: &[f64], xi: f64) -> Result<(f64, f64)> {
        let l = self.l;
        matvec(&self.b, a, &mut self.u);
        matvec(&self.w, a, &mut self.z);
        let q = dot(a, &self.u);
        let p = dot(a, &self.z);
        let d0 = ((p - q) / (q * q)).max(-xi);
        if d0 == 0.0 {
            return Ok((0.0, 0.0));
        }
        let denom = 1.0 + d0 * q;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::NumericBreakdown { coordinate, denominator: denom });
        }
        let c = d0 / denom;
        let (u, z) = (&self.u, &self.z);
        let cross = c * c * p;
        for i in 0..l {
            let (ui, zi, ai) = (u[i], z[i], a[i]);
            let row = i * l;
            for j in 0..l {
                self.b[row + j] -= c * ui * u[j];
                self.w[row + j] += -c * (ui * z[j] + zi * u[j]) + cross * ui * u[j];
                self.sigma[row + j] += d0 * ai * a[j];
            }
        }
        self.since_refactor += 1;
        let (nu, nz) = (dot(u, u).sqrt(), dot(z, z).sqrt());
        Ok((d0, 2.0 * c.abs() * nu * nz + (cross + c).abs() * nu * nu))
    }

    fn refactor(&mut self) -> Result<()> {
        let (b, _) = spd_inverse(&self.sigma, self.l).ok_or(Error::NumericBreakdown {
            coordinate: usize::MAX,
            denominator: f64::NAN,
        })?;
        self.b = b;
        self.w = sandwich(&self.b, &self.s, self.l);
        self.since_refactor = 0;
        Ok(())
    }

    fn neg_log_likelihood(&self) -> f64 {
        match spd_inverse(&self.sigma, self.l) {
            Some((inv, logdet)) => logdet + dot(&inv, &self.s),
            None => f64::INFINITY,
        }
    }

    /// `a_t^T (W - B) a_t` for every unit-norm column `t`, via one transform.
    fn screen(&self, rows: &[usize], scale2: f64, buf: &mut [f64]) {
        buf.iter_mut().for_each(|v| *v = 0.0);
        let l = self.l;
        for i in 0..l {
            for j in 0..l {
                buf[rows[i] ^ rows[j]] += self.w[i * l + j] - self.b[i * l + j];
            }
        }
        fwht(buf);
        buf.iter_mut().for_each(|v| *v *= scale2);
    }

    /// `a_t^T (W - B) a_t` for `t` in `base..base + buf.len()`, where `base` is
    /// a multiple of the (power-of-two) block length.
    fn screen_block(&self, rows: &[usize], base: usize, scale2: f64, signs: &mut [f64], buf: &mut [f64]) {
        let mask = buf.len() - 1;
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (s, &r) in signs.iter_mut().zip(rows) {
            *s = hadamard_entry(r, base);
        }
        let l = self.l;
        for i in 0..l {
            let (ri, si) = (rows[i], signs[i]);
            for j in 0..l {
                let e = self.w[i * l + j] - self.b[i * l + j];
                buf[(ri ^ rows[j]) & mask] += si * signs[j] * e;
            }
        }
        fwht(buf);
        buf.iter_mut().for_each(|v| *v *= scale2);
    }

    /// Slack below which a screened value still triggers an exact visit.
    fn screen_slack(&self) -> f64 {
        // both matrices are positive semidefinite, so the diagonal bounds
        // every entry
        let l = self.l;
        let scale = (0..l).fold(0.0f64, |m, i| m.max(self.w[i * l + i]).max(self.b[i * l + i]));
        1e-9 * scale * l as f64 + 1e-12 / self.sigma2
    }
}

fn visiting_order(n: usize, order: CoordinateOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let CoordinateOrder::Shuffled(seed) = order {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx
}

fn check_inputs(y_pilot: &DMatrixView<'_, Complex64>, codebook: &PilotCodebook, sigma2: f64) -> Result<()> {
    if y_pilot.ncols() != codebook.pilot_len() {
        return Err(Error::Dimension(format!(
            "pilot block has {} columns, codebook pilots have length {}",
            y_pilot.ncols(),
            codebook.pilot_len()
        )));
    }
    if sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(Error::Dimension(format!("noise variance must be positive, got {sigma2}")));
    }
    Ok(())
}

fn unit_column(codebook: &PilotCodebook, t: usize, out: &mut [f64]) {
    let scale = codebook.unit_scale();
    for (o, v) in out.iter_mut().zip(codebook.column(t)) {
        *o = v * scale;
    }
}

fn finish(
    gamma: Vec<f64>,
    opts: &CbmlOptions,
    noise_variance: f64,
    applied_updates: usize,
    visits: usize,
    screens: usize,
) -> CbmlOutput {
    let threshold = opts.threshold * noise_variance;
    let active = gamma
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > threshold)
        .map(|(i, _)| i)
        .collect();
    CbmlOutput { gamma, active, applied_updates, visits, screens, noise_variance }
}

/// `max(sigma2, loading * tr(S) / L)`.
pub fn effective_noise_variance(s: &[f64], l: usize, sigma2: f64, loading: f64) -> f64 {
    let mean_power = (0..l).map(|i| s[i * l + i]).sum::<f64>() / l as f64;
    sigma2.max(loading * mean_power)
}

fn initial_model(y_pilot: &DMatrixView<'_, Complex64>, l: usize, sigma2: f64, opts: &CbmlOptions) -> CovarianceModel {
    let s = sample_covariance(y_pilot);
    let noise = effective_noise_variance(&s, l, sigma2, opts.loading);
    CovarianceModel::new(s, l, noise)
}

/// Covariance-based activity detection on one sub-slot's pilot block
/// (`M x L_p`).
pub fn cbml_detect(
    y_pilot: &DMatrixView<'_, Complex64>,
    codebook: &PilotCodebook,
    sigma2: f64,
    opts: &CbmlOptions,
) -> Result<CbmlOutput> {
    check_inputs(y_pilot, codebook, sigma2)?;
    let l = codebook.pilot_len();
    let n = codebook.n_pilots();
    let mut model = initial_model(y_pilot, l, sigma2, opts);
    if opts.order == CoordinateOrder::Ascending {
        return sweep_blocks(&mut model, codebook, opts);
    }
    let order = visiting_order(n, opts.order);
    let scale2 = codebook.unit_scale().powi(2);
    let mut gamma = vec![0.0; n];
    let mut screened = vec![0.0; n];
    let mut a = vec![0.0; l];
    let mut applied = 0;

    // Screened values are exact up to `drift`, a bound on how far the
    // state has moved since the last transform; infinite means no screen.
    let (mut visits, mut screens) = (0, 0);
    let mut drift = f64::INFINITY;
    let mut slack = 0.0;
    let mut wasted = 0;
    for _ in 0..opts.passes {
        let mut pos = 0;
        while pos < n {
            if drift.is_infinite() || wasted >= opts.lookahead {
                model.screen(codebook.rows(), scale2, &mut screened);
                screens += 1;
                slack = model.screen_slack();
                drift = 0.0;
                wasted = 0;
            }
            let bar = -slack - drift;
            let Some(k) = (pos..n).find(|&k| gamma[order[k]] > 0.0 || screened[order[k]] > bar) else {
                break;
            };
            let t = order[k];
            visits += 1;
            unit_column(codebook, t, &mut a);
            let (d0, moved) = model.step(t, &a, gamma[t])?;
            if d0 != 0.0 {
                gamma[t] = (gamma[t] + d0).max(0.0);
                applied += 1;
                drift += moved;
                if model.since_refactor >= opts.refactor_every {
                    model.refactor()?;
                    drift = f64::INFINITY;
                }
            } else if gamma[t] == 0.0 {
                wasted += 1;
            }
            pos = k + 1;
        }
    }
    Ok(finish(gamma, opts, model.sigma2, applied, visits, screens))
}

/// Pilots per screened block in ascending sweeps.
const BLOCK_BITS: usize = 8;

/// Ascending sweep screening one block of consecutive pilots at a time; a
/// block's screen is recomputed after every applied update inside it.
fn sweep_blocks(model: &mut CovarianceModel, codebook: &PilotCodebook, opts: &CbmlOptions) -> Result<CbmlOutput> {
    let n = codebook.n_pilots();
    let block = 1usize << BLOCK_BITS.min(codebook.pilot_bits());
    let scale2 = codebook.unit_scale().powi(2);
    let rows = codebook.rows();
    let mut gamma = vec![0.0; n];
    let mut screened = vec![0.0; block];
    let mut signs = vec![0.0; rows.len()];
    let mut a = vec![0.0; model.l];
    let (mut applied, mut visits, mut screens) = (0, 0, 0);
    for _ in 0..opts.passes {
        for base in (0..n).step_by(block) {
            let mut k = 0;
            let mut fresh = false;
            let mut slack = 0.0;
            while k < block {
                if !fresh {
                    model.screen_block(rows, base, scale2, &mut signs, &mut screened);
                    slack = model.screen_slack();
                    screens += 1;
                    fresh = true;
                }
                let Some(next) = (k..block).find(|&j| gamma[base + j] > 0.0 || screened[j] > -slack) else {
                    break;
                };
                let t = base + next;
                visits += 1;
                unit_column(codebook, t, &mut a);
                let (d0, _) = model.step(t, &a, gamma[t])?;
                if d0 != 0.0 {
                    gamma[t] = (gamma[t] + d0).max(0.0);
                    applied += 1;
                    if model.since_refactor >= opts.refactor_every {
                        model.refactor()?;
                    }
                    fresh = false;
                }
                k = next + 1;
            }
        }
    }
    Ok(finish(gamma, opts, model.sigma2, applied, visits, screens))
}

/// Plain sweep evaluating every coordinate directly; `observer` sees the state
/// after each applied update.
pub fn cbml_detect_reference(
    y_pilot: &DMatrixView<'_, Complex64>,
    codebook: &PilotCodebook,
    sigma2: f64,
    opts: &CbmlOptions,
    mut observer: Option<&mut dyn FnMut(&CbmlSnapshot<'_>)>,
) -> Result<CbmlOutput> {
    check_inputs(y_pilot, codebook, sigma2)?;
    let l = codebook.pilot_len();
    let n = codebook.n_pilots();
    let mut model = initial_model(y_pilot, l, sigma2, opts);
    let order = visiting_order(n, opts.order);
    let mut gamma = vec![0.0; n];
    let mut a = vec![0.0; l];
    let mut applied = 0;
    let passes_visits = opts.passes * n;
    for _ in 0..opts.passes {
        for &t in &order {
            unit_column(codebook, t, &mut a);
            let (d0, _) = model.step(t, &a, gamma[t])?;
            if d0 == 0.0 {
                continue;
            }
            gamma[t] = (gamma[t] + d0).max(0.0);
            applied += 1;
            if model.since_refactor >= opts.refactor_every {
                model.refactor()?;
            }
            if let Some(obs) = observer.as_mut() {
                obs(&CbmlSnapshot {
                    coordinate: t,
                    step: d0,
                    gamma: &gamma,
                    sigma: &model.sigma,
                    sigma_inv: &model.b,
                    neg_log_likelihood: model.neg_log_likelihood(),
                });
            }
        }
    }
    Ok(finish(gamma, opts, model.sigma2, applied, passes_visits, 0))
}

/// Condition number above which a pilot design counts as singular.
pub const MAX_DESIGN_CONDITION: f64 = 1e10;

/// Least-squares channel estimates `((A^T A)^-1 A^T Y_p^T)^T`, `M x |active|`,
/// columns in the order of `active`.
pub fn estimate_channels(
    y_pilot: &DMatrixView<'_, Complex64>,
    codebook: &PilotCodebook,
    active: &[usize],
) -> Result<DMatrix<Complex64>> {
    let (m, l) = y_pilot.shape();
    if l != codebook.pilot_len() {
        return Err(Error::Dimension(format!(
            "pilot block has {l} columns, codebook pilots have length {}",
            codebook.pilot_len()
        )));
    }
    let k = active.len();
    if k == 0 {
        return Ok(DMatrix::zeros(m, 0));
    }
    if k > l {
        return Err(Error::SingularDesign { condition: f64::INFINITY });
    }
    let design = DMatrix::from_fn(l, k, |r, c| codebook.column(active[c])[r]);
    let gram = design.transpose() * &design;
    let eig = gram.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition > MAX_DESIGN_CONDITION {
        return Err(Error::SingularDesign { condition });
    }
    let chol = gram.cholesky().ok_or(Error::SingularDesign { condition })?;
    // A^T Y_p^T, split into real and imaginary parts
    let proj_re = DMatrix::from_fn(k, m, |c, a| {
        (0..l).map(|r| design[(r, c)] * y_pilot[(a, r)].re).sum::<f64>()
    });
    let proj_im = DMatrix::from_fn(k, m, |c, a| {
        (0..l).map(|r| design[(r, c)] * y_pilot[(a, r)].im).sum::<f64>()
    });
    let x_re = chol.solve(&proj_re);
    let x_im = chol.solve(&proj_im);
    Ok(DMatrix::from_fn(m, k, |a, c| Complex64::new(x_re[(c, a)], x_im[(c, a)])))
}

/// Pilot-segment bits of each detected (0-based) pilot index.
pub fn decode_pilot_bits(active: &[usize], pilot_bits: usize) -> Result<Vec<Vec<u8>>> {
    active.iter().map(|&i| bin(i as u64, pilot_bits)).collect()
}

/// Detection outcome of one sub-slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDetection {
    pub slot: usize,
    /// Detected pilots, ascending.
    pub active: Vec<usize>,
    pub gamma: Vec<f64>,
    /// `M x |active|` channel estimates; `None` when the design was singular.
    pub g_hat: Option<DMatrix<Complex64>>,
}

impl SlotDetection {
    pub fn empty(slot: usize, n_pilots: usize, antennas: usize) -> Self {
        Self {
            slot,
            active: Vec::new(),
            gamma: vec![0.0; n_pilots],
            g_hat: Some(DMatrix::zeros(antennas, 0)),
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Position of `pilot` within `active`.
    pub fn position(&self, pilot: usize) -> Option<usize> {
        self.active.binary_search(&pilot).ok()
    }
}

/// Detects the pilots of one sub-slot given its `M x L_p` pilot block and
/// estimates their channels.
pub fn detect_slot(
    slot: usize,
    y_pilot: &DMatrixView<'_, Complex64>,
    codebook: &PilotCodebook,
    sigma2: f64,
    opts: &CbmlOptions,
) -> Result<SlotDetection> {
    let out = cbml_detect(y_pilot, codebook, sigma2, opts)?;
    let g_hat = match estimate_channels(y_pilot, codebook, &out.active) {
        Ok(g) => Some(g),
        Err(Error::SingularDesign { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(SlotDetection { slot, active: out.active, gamma: out.gamma, g_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::complex_gaussian;
    use rand::Rng;

    fn pilot_block(
        codebook: &PilotCodebook,
        users: &[(usize, Vec<Complex64>)],
        sigma2: f64,
        rng: &mut ChaCha8Rng,
    ) -> DMatrix<Complex64> {
        let m = users.first().map_or(4, |u| u.1.len());
        let l = codebook.pilot_len();
        DMatrix::from_fn(m, l, |a, r| {
            let signal: Complex64 = users
                .iter()
                .map(|(p, g)| g[a] * codebook.column(*p)[r])
                .sum();
            signal + if sigma2 > 0.0 { complex_gaussian(rng, sigma2) } else { Complex64::new(0.0, 0.0) }
        })
    }

    fn random_gain(rng: &mut ChaCha8Rng, m: usize) -> Vec<Complex64> {
        (0..m).map(|_| complex_gaussian(rng, 1.0)).collect()
    }

    #[test]
    fn empty_slot_stays_inactive() {
        let cb = PilotCodebook::build(8, 16, 1).unwrap();
        let y = DMatrix::<Complex64>::zeros(4, 16);
        let out = cbml_detect(&y.as_view(), &cb, 1.0, &CbmlOptions::new(5, 0.05)).unwrap();
        assert!(out.active.is_empty());
        assert!(out.gamma.iter().all(|&g| g == 0.0));
        assert_eq!(out.applied_updates, 0);
    }

    #[test]
    fn high_snr_users_are_not_split() {
        // without loading, residual fit error far above sigma2 showed up as
        // extra active pilots once the noise became negligible
        let cb = PilotCodebook::build(14, 23, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for snr_db in [30.0, 50.0, 70.0] {
            let sigma2 = 10f64.powf(-snr_db / 10.0);
            let users = [(101, random_gain(&mut rng, 4)), (9000, random_gain(&mut rng, 4))];
            let y = pilot_block(&cb, &users, sigma2, &mut rng);
            let out = cbml_detect(&y.as_view(), &cb, sigma2, &CbmlOptions::new(5, 8.0)).unwrap();
            assert_eq!(out.active, vec![101, 9000], "{snr_db} dB");
            assert!(out.noise_variance >= sigma2);
        }
    }

    #[test]
    fn single_pilot_noiseless_is_found() {
        let cb = PilotCodebook::build(8, 16, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_gain(&mut rng, 4);
        let energy: f64 = g.iter().map(|v| v.norm_sqr()).sum::<f64>() / 4.0;
        let y = pilot_block(&cb, &[(77, g)], 0.0, &mut rng);
        // sigma2 acts as a small regularizer; the fitted activity approaches
        // L_p |g|^2 / M for the true pilot
        let sigma2 = 1e-3;
        let out = cbml_detect(&y.as_view(), &cb, sigma2, &CbmlOptions::new(5, 0.5 * energy / sigma2)).unwrap();
        assert_eq!(out.active, vec![77]);
        let expected = 16.0 * energy;
        assert!((out.gamma[77] - expected).abs() / expected < 0.01, "{} vs {expected}", out.gamma[77]);
    }

    #[test]
    fn screened_sweep_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (bits, len, users, sigma2) in [(8, 12, 3, 0.1), (10, 16, 5, 0.05), (9, 14, 0, 0.2)] {
            let cb = PilotCodebook::build(bits, len, 4).unwrap();
            let mut taken = Vec::new();
            while taken.len() < users {
                let p = rng.random_range(0..cb.n_pilots());
                if !taken.contains(&p) {
                    taken.push(p);
                }
            }
            let us: Vec<_> = taken.iter().map(|&p| (p, random_gain(&mut rng, 4))).collect();
            let y = pilot_block(&cb, &us, sigma2, &mut rng);
            for order in [CoordinateOrder::Ascending, CoordinateOrder::Shuffled(5)] {
                let opts = CbmlOptions { order, ..CbmlOptions::new(4, 0.05) };
                let fast = cbml_detect(&y.as_view(), &cb, sigma2, &opts).unwrap();
                let slow = cbml_detect_reference(&y.as_view(), &cb, sigma2, &opts, None).unwrap();
                assert_eq!(fast.applied_updates, slow.applied_updates);
                for (a, b) in fast.gamma.iter().zip(&slow.gamma) {
                    assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
                }
                assert_eq!(fast.active, slow.active);
            }
        }
    }

    #[test]
    fn coordinate_invariants_hold_along_the_sweep() {
        let cb = PilotCodebook::build(7, 12, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let us: Vec<_> = [3usize, 40, 99].iter().map(|&p| (p, random_gain(&mut rng, 4))).collect();
        let sigma2 = 0.3;
        let y = pilot_block(&cb, &us, sigma2, &mut rng);
        let l = cb.pilot_len();
        let mut last = f64::INFINITY;
        let mut checks = 0;
        let mut observer = |snap: &CbmlSnapshot<'_>| {
            assert!(snap.gamma.iter().all(|&g| g >= 0.0));
            let s = DMatrix::from_row_slice(l, l, snap.sigma);
            let b = DMatrix::from_row_slice(l, l, snap.sigma_inv);
            assert!((&s - s.transpose()).amax() < 1e-12);
            let eye = &s * &b;
            assert!((eye - DMatrix::<f64>::identity(l, l)).amax() < 1e-6);
            assert!(s.symmetric_eigen().eigenvalues.min() > 0.0);
            assert!(snap.neg_log_likelihood <= last + 1e-9 * last.abs().max(1.0));
            last = snap.neg_log_likelihood;
            checks += 1;
        };
        let opts = CbmlOptions { refactor_every: 7, ..CbmlOptions::new(5, 0.05) };
        cbml_detect_reference(&y.as_view(), &cb, sigma2, &opts, Some(&mut observer)).unwrap();
        assert!(checks > 3);
    }

    #[test]
    fn channel_estimates_exact_for_orthogonal_pilots() {
        let cb = PilotCodebook::build(4, 16, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let us: Vec<_> = [2usize, 9, 13].iter().map(|&p| (p, random_gain(&mut rng, 4))).collect();
        let y = pilot_block(&cb, &us, 0.0, &mut rng);
        let g = estimate_channels(&y.as_view(), &cb, &[2, 9, 13]).unwrap();
        for (c, (_, gain)) in us.iter().enumerate() {
            for a in 0..4 {
                assert!((g[(a, c)] - gain[a]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn least_squares_residual_is_orthogonal() {
        let cb = PilotCodebook::build(8, 10, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // pick a full-rank set of L_p columns
        let mut active: Vec<usize> = Vec::new();
        let mut cand = 0;
        while active.len() < 10 {
            let mut trial = active.clone();
            trial.push(cand);
            let design = DMatrix::from_fn(10, trial.len(), |r, c| cb.column(trial[c])[r]);
            if design.rank(1e-9) == trial.len() {
                active = trial;
            }
            cand += 1;
        }
        let y = DMatrix::from_fn(4, 10, |_, _| complex_gaussian(&mut rng, 1.0));
        let g = estimate_channels(&y.as_view(), &cb, &active).unwrap();
        for a in 0..4 {
            for (c, &p) in active.iter().enumerate() {
                let _ = c;
                let resid_dot: Complex64 = (0..10)
                    .map(|r| {
                        let fit: Complex64 = active
                            .iter()
                            .enumerate()
                            .map(|(k, &q)| g[(a, k)] * cb.column(q)[r])
                            .sum();
                        (y[(a, r)] - fit) * cb.column(p)[r]
                    })
                    .sum();
                assert!(resid_dot.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_design_reported() {
        let cb = PilotCodebook::build(6, 12, 1).unwrap();
        let y = DMatrix::<Complex64>::zeros(2, 12);
        let too_many: Vec<usize> = (0..13).collect();
        assert!(matches!(
            estimate_channels(&y.as_view(), &cb, &too_many),
            Err(Error::SingularDesign { .. })
        ));
    }

    #[test]
    fn pilot_bits_boundaries() {
        let bits = decode_pilot_bits(&[0, 15], 4).unwrap();
        assert_eq!(bits[0], vec![0, 0, 0, 0]);
        assert_eq!(bits[1], vec![1, 1, 1, 1]);
        assert_eq!(crate::encoder::dec(&decode_pilot_bits(&[11], 4).unwrap()[0]), 11);
    }

    #[test]
    fn bad_inputs_rejected() {
        let cb = PilotCodebook::build(6, 8, 1).unwrap();
        let y = DMatrix::<Complex64>::zeros(4, 7);
        assert!(cbml_detect(&y.as_view(), &cb, 1.0, &CbmlOptions::new(1, 0.1)).is_err());
        let y = DMatrix::<Complex64>::zeros(4, 8);
        assert!(cbml_detect(&y.as_view(), &cb, 0.0, &CbmlOptions::new(1, 0.1)).is_err());
    }
}
