//! Superposed codeword decomposition: recovering the BPSK symbols of the
//! codewords sharing a sub-slot, one payload column at a time.

use nalgebra::{DMatrix, DMatrixView, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::DecomposerKind;
use crate::error::{Error, Result};

/// One received payload column and the channels of the codewords in it.
#[derive(Debug, Clone, PartialEq)]
pub struct BitSliceProblem {
    /// Length `M`.
    pub y: DVector<Complex64>,
    /// `M x N`.
    pub g: DMatrix<Complex64>,
}

impl BitSliceProblem {
    pub fn new(y: DVector<Complex64>, g: DMatrix<Complex64>) -> Result<Self> {
        if g.ncols() == 0 {
            return Err(Error::Dimension("bit-slice problem needs at least one codeword".into()));
        }
        if g.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "channel matrix has {} rows for a length-{} observation",
                g.nrows(),
                y.len()
            )));
        }
        Ok(Self { y, g })
    }

    pub fn users(&self) -> usize {
        self.g.ncols()
    }

    /// `||y - G s||^2`.
    pub fn residual(&self, s: &[f64]) -> f64 {
        (0..self.y.len())
            .map(|a| {
                let fit: Complex64 = s.iter().enumerate().map(|(u, &v)| self.g[(a, u)] * v).sum();
                (self.y[a] - fit).norm_sqr()
            })
            .sum()
    }
}

/// Default enumeration cap for exhaustive decomposition.
pub const DEFAULT_ML_CAP: usize = 16;

/// The `i`-th sign vector in lexicographic order with `+1` before `-1`.
fn sign_vector(index: usize, n: usize, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = if (index >> (n - 1 - k)) & 1 == 0 { 1.0 } else { -1.0 };
    }
}

/// Exhaustive minimum-distance decomposition; the first minimizer in
/// lexicographic order (`+1` before `-1`) wins ties.
pub fn ml_decompose(p: &BitSliceProblem, cap: usize) -> Result<Vec<f64>> {
    let n = p.users();
    if n > cap {
        return Err(Error::CapExceeded { users: n, cap });
    }
    let mut best = vec![1.0; n];
    let mut best_cost = f64::INFINITY;
    let mut s = vec![0.0; n];
    for idx in 0..1usize << n {
        sign_vector(idx, n, &mut s);
        let cost = p.residual(&s);
        if cost < best_cost {
            best_cost = cost;
            best.copy_from_slice(&s);
        }
    }
    Ok(best)
}

/// Exhaustive decomposition of every column of an `M x L` payload block.
/// Candidate superpositions are formed once and shared across columns.
/// Returns one sign row per codeword.
pub fn ml_decompose_block(
    y: &DMatrixView<'_, Complex64>,
    g: &DMatrix<Complex64>,
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = g.ncols();
    if n > cap {
        return Err(Error::CapExceeded { users: n, cap });
    }
    if g.nrows() != y.nrows() {
        return Err(Error::Dimension("channel and payload antenna counts differ".into()));
    }
    let m = y.nrows();
    let count = 1usize << n;
    let mut s = vec![0.0; n];
    let mut signs = Vec::with_capacity(count);
    let mut fits = Vec::with_capacity(count * m);
    for idx in 0..count {
        sign_vector(idx, n, &mut s);
        signs.push(s.clone());
        for a in 0..m {
            fits.push((0..n).map(|u| g[(a, u)] * s[u]).sum::<Complex64>());
        }
    }
    let mut out = vec![vec![0.0; y.ncols()]; n];
    for col in 0..y.ncols() {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for idx in 0..count {
            let cost: f64 = (0..m).map(|a| (y[(a, col)] - fits[idx * m + a]).norm_sqr()).sum();
            if cost < best_cost {
                best_cost = cost;
                best = idx;
            }
        }
        for (u, row) in out.iter_mut().enumerate() {
            row[col] = signs[best][u];
        }
    }
    Ok(out)
}

/// Matched-filter decision `sign(Re(g_u^H y))`, per codeword. Poor at few
/// antennas; kept as a diagnostic baseline.
pub fn mrc_decompose(p: &BitSliceProblem) -> Vec<f64> {
    (0..p.users())
        .map(|u| {
            let corr: f64 = (0..p.y.len()).map(|a| (p.g[(a, u)].conj() * p.y[a]).re).sum();
            if corr >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Homogenized semidefinite relaxation of one bit-slice problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SdrInstance {
    /// `(N + 1) x (N + 1)`, last coordinate is the slack.
    pub g_tilde: DMatrix<f64>,
    pub samples: usize,
}

impl SdrInstance {
    pub fn dim(&self) -> usize {
        self.g_tilde.nrows()
    }

    /// `c^T G~ c`.
    pub fn quadratic(&self, c: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.g_tilde[(i, j)] * c[j];
            }
            acc += c[i] * row;
        }
        acc
    }

    /// `[s; 1]^T G~ [s; 1]`.
    pub fn homogenized(&self, s: &[f64]) -> f64 {
        let mut c = s.to_vec();
        c.push(1.0);
        self.quadratic(&c)
    }
}

/// Real-stacks the problem and forms
/// `G~ = [[Gr^T Gr, -Gr^T yr], [-yr^T Gr, 0]]`, so that
/// `[s; 1]^T G~ [s; 1] = ||yr - Gr s||^2 - ||yr||^2`.
pub fn build_sdr_instance(p: &BitSliceProblem, samples: usize) -> SdrInstance {
    let (m, n) = p.g.shape();
    let gr = DMatrix::from_fn(2 * m, n, |r, c| if r < m { p.g[(r, c)].re } else { p.g[(r - m, c)].im });
    let yr = DVector::from_fn(2 * m, |r, _| if r < m { p.y[r].re } else { p.y[r - m].im });
    let gram = gr.transpose() * &gr;
    let lin = gr.transpose() * &yr;
    let mut g_tilde = DMatrix::zeros(n + 1, n + 1);
    g_tilde.view_mut((0, 0), (n, n)).copy_from(&gram);
    for i in 0..n {
        g_tilde[(i, n)] = -lin[i];
        g_tilde[(n, i)] = -lin[i];
    }
    SdrInstance { g_tilde, samples }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    /// Unit-diagonal positive semidefinite optimizer.
    pub c: DMatrix<f64>,
    /// Factor with `c = v v^T` and unit-norm rows.
    pub v: DMatrix<f64>,
    /// `Tr(G~ C)`.
    pub objective: f64,
    /// Certified lower bound on the relaxation optimum.
    pub lower_bound: f64,
    pub iterations: usize,
}

pub const DEFAULT_SDP_TOL: f64 = 1e-7;
const SDP_MAX_SWEEPS: usize = 20_000;

/// Dual bound from `y_i = (G~ C)_ii`: `sum y + n min(0, lambda_min(G~ - Diag y))`.
fn dual_bound(g: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let gc = g * c;
    let y: Vec<f64> = (0..n).map(|i| gc[(i, i)]).collect();
    let mut slack = g.clone();
    for i in 0..n {
        slack[(i, i)] -= y[i];
    }
    let lmin = slack.symmetric_eigen().eigenvalues.min();
    y.iter().sum::<f64>() + n as f64 * lmin.min(0.0)
}

/// Solves `min Tr(G~ C)` over unit-diagonal PSD `C` by block-coordinate
/// descent on a full-rank factor `C = V V^T`: each row is replaced by the
/// unit vector minimizing the objective with the others fixed. Stops once the
/// duality gap is within `tol * (1 + |objective|)`.
pub fn sdp_solve(inst: &SdrInstance, tol: f64) -> Result<SdpSolution> {
    let g = &inst.g_tilde;
    let n = g.nrows();
    if (g - g.transpose()).amax() > 1e-9 * (1.0 + g.amax()) {
        return Err(Error::Dimension("relaxation matrix is not symmetric".into()));
    }
    let k = n;
    let mut v = DMatrix::<f64>::identity(n, k);
    let mut grad = vec![0.0; k];
    let mut last_gap = f64::INFINITY;
    for sweep in 1..=SDP_MAX_SWEEPS {
        for i in 0..n {
            grad.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..n {
                if j != i {
                    let gij = g[(i, j)];
                    if gij != 0.0 {
                        for (d, gd) in grad.iter_mut().enumerate() {
                            *gd += gij * v[(j, d)];
                        }
                    }
                }
            }
            let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (d, gd) in grad.iter().enumerate() {
                    v[(i, d)] = -gd / norm;
                }
            }
        }
        if sweep % 4 == 0 || sweep == 1 {
            let c = &v * v.transpose();
            let objective = g.component_mul(&c).sum();
            let lower = dual_bound(g, &c);
            last_gap = objective - lower;
            if last_gap <= tol * (1.0 + objective.abs()) {
                return Ok(SdpSolution { c, v, objective, lower_bound: lower, iterations: sweep });
            }
        }
    }
    Err(Error::NoConvergence { iterations: SDP_MAX_SWEEPS, gap: last_gap })
}

/// `sign` with zero mapped to `+1`.
pub fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Gaussian randomization of an SDP solution: draws `samples` vectors with
/// covariance `C`, takes signs, keeps the first candidate of least
/// `c^T G~ c`, and flips it so the slack entry is `+1`. Returns the `N`
/// decision entries.
pub fn round_solution<R: Rng + ?Sized>(inst: &SdrInstance, sol: &SdpSolution, rng: &mut R) -> Vec<f64> {
    let n = inst.dim();
    let k = sol.v.ncols();
    let mut w = vec![0.0; k];
    let mut cand = vec![0.0; n];
    let mut best = vec![1.0; n];
    let mut best_cost = f64::INFINITY;
    for _ in 0..inst.samples.max(1) {
        for x in w.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for (i, c) in cand.iter_mut().enumerate() {
            *c = sign((0..k).map(|d| sol.v[(i, d)] * w[d]).sum());
        }
        let cost = inst.quadratic(&cand);
        if cost < best_cost {
            best_cost = cost;
            best.copy_from_slice(&cand);
        }
    }
    let slack = best[n - 1];
    best.truncate(n - 1);
    best.iter_mut().for_each(|b| *b *= slack);
    best
}

/// Relaxation-based decomposition with `samples` randomized roundings drawn
/// from a generator seeded with `seed`.
pub fn sdr_decompose(p: &BitSliceProblem, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let inst = build_sdr_instance(p, samples);
    let sol = sdp_solve(&inst, DEFAULT_SDP_TOL)?;
    Ok(round_solution(&inst, &sol, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScdSettings {
    pub kind: DecomposerKind,
    pub samples: usize,
    pub ml_cap: usize,
}

/// Payload decomposition of one sub-slot. Each column draws its rounding
/// samples from its own stream of a generator seeded with `seed`; a relaxation
/// that fails to converge falls back to exhaustive search.
pub fn decompose_payload(
    y: &DMatrixView<'_, Complex64>,
    g: &DMatrix<Complex64>,
    settings: &ScdSettings,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    match settings.kind {
        DecomposerKind::Ml => ml_decompose_block(y, g, settings.ml_cap),
        DecomposerKind::Sdr => {
            let n = g.ncols();
            let mut out = vec![vec![0.0; y.ncols()]; n];
            for col in 0..y.ncols() {
                let p = BitSliceProblem::new(y.column(col).into_owned(), g.clone())?;
                let inst = build_sdr_instance(&p, settings.samples);
                let signs = match sdp_solve(&inst, DEFAULT_SDP_TOL) {
                    Ok(sol) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(col as u64);
                        round_solution(&inst, &sol, &mut rng)
                    }
                    Err(Error::NoConvergence { .. }) if n <= settings.ml_cap => ml_decompose(&p, settings.ml_cap)?,
                    Err(e) => return Err(e),
                };
                for (u, row) in out.iter_mut().enumerate() {
                    row[col] = signs[u];
                }
            }
            Ok(out)
        }
    }
}
