//! Block-fading Rayleigh channel with additive white Gaussian noise.

use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(scale * re, scale * im)
}

/// One frame's channel: a gain vector per user, constant over all sub-slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `M x N_a`; column `u` is user `u`'s gain vector.
    pub gains: DMatrix<Complex64>,
    pub sigma2: f64,
}

impl ChannelRealization {
    /// i.i.d. `CN(0, 1)` gains.
    pub fn rayleigh<R: Rng + ?Sized>(rng: &mut R, antennas: usize, users: usize, sigma2: f64) -> Self {
        let gains = DMatrix::from_fn(antennas, users, |_, _| complex_gaussian(rng, 1.0));
        Self { gains, sigma2 }
    }

    pub fn antennas(&self) -> usize {
        self.gains.nrows()
    }

    pub fn users(&self) -> usize {
        self.gains.ncols()
    }
}

/// `sum_u g_u x_u^T` without noise.
pub fn superimpose(signals: &[Vec<f64>], gains: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    if signals.len() != gains.ncols() {
        return Err(Error::Dimension(format!(
            "{} signals for {} channel vectors",
            signals.len(),
            gains.ncols()
        )));
    }
    let len = signals.first().map_or(0, Vec::len);
    if signals.iter().any(|x| x.len() != len) {
        return Err(Error::Dimension("transmitted signals differ in length".into()));
    }
    let mut y = DMatrix::zeros(gains.nrows(), len);
    for (u, x) in signals.iter().enumerate() {
        let g = gains.column(u);
        for (j, &v) in x.iter().enumerate() {
            if v != 0.0 {
                let mut col = y.column_mut(j);
                col.axpy(Complex64::new(v, 0.0), &g, Complex64::new(1.0, 0.0));
            }
        }
    }
    Ok(y)
}

/// Adds `CN(0, sigma2)` noise to every entry.
pub fn add_noise<R: Rng + ?Sized>(y: &mut DMatrix<Complex64>, sigma2: f64, rng: &mut R) {
    if sigma2 <= 0.0 {
        return;
    }
    for v in y.iter_mut() {
        *v += complex_gaussian(rng, sigma2);
    }
}

/// Received frame `Y = sum_u g_u x_u^T + N`.
pub fn transmit<R: Rng + ?Sized>(
    signals: &[Vec<f64>],
    realization: &ChannelRealization,
    rng: &mut R,
) -> Result<DMatrix<Complex64>> {
    let mut y = superimpose(signals, &realization.gains)?;
    add_noise(&mut y, realization.sigma2, rng);
    Ok(y)
}

/// Columns of sub-slot `slot` (0-based) within the frame.
pub fn slot_columns(slot: usize, codeword_len: usize) -> Range<usize> {
    slot * codeword_len..(slot + 1) * codeword_len
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = ChannelRealization::rayleigh(&mut rng, 4, 1, 0.0);
        let mut x = vec![0.0; 12];
        x[5] = -1.5;
        let y = transmit(&[x], &real, &mut rng).unwrap();
        for j in 0..12 {
            for m in 0..4 {
                let expected = if j == 5 { real.gains[(m, 0)] * -1.5 } else { Complex64::new(0.0, 0.0) };
                assert_eq!(y[(m, j)], expected);
            }
        }
    }

    #[test]
    fn disjoint_supports_do_not_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real = ChannelRealization::rayleigh(&mut rng, 3, 2, 0.0);
        let a = vec![1.0, -1.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0, 1.0];
        let y = transmit(&[a, b], &real, &mut rng).unwrap();
        for m in 0..3 {
            assert_eq!(y[(m, 1)], -real.gains[(m, 0)]);
            assert_eq!(y[(m, 3)], real.gains[(m, 1)]);
        }
    }

    #[test]
    fn noise_power_per_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma2 = 0.7;
        let mut y = DMatrix::zeros(4, 10_000);
        add_noise(&mut y, sigma2, &mut rng);
        let mean_col_energy = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / 10_000.0;
        let expected = 4.0 * sigma2;
        assert!((mean_col_energy - expected).abs() / expected < 0.03, "{mean_col_energy}");
    }

    #[test]
    fn linearity_of_superposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real = ChannelRealization::rayleigh(&mut rng, 2, 2, 0.0);
        let a = vec![1.0, 0.5, -2.0];
        let b = vec![0.25, -1.0, 3.0];
        let both = superimpose(&[a.clone(), b.clone()], &real.gains).unwrap();
        let sa = superimpose(&[a, vec![0.0; 3]], &real.gains).unwrap();
        let sb = superimpose(&[vec![0.0; 3], b], &real.gains).unwrap();
        assert!((both - sa - sb).norm() < 1e-12);
    }

    #[test]
    fn slot_ranges_partition_frame() {
        let cols: Vec<usize> = (0..33).flat_map(|s| slot_columns(s, 71)).collect();
        assert_eq!(cols, (0..2343).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_signals_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = ChannelRealization::rayleigh(&mut rng, 2, 2, 0.1);
        assert!(transmit(&[vec![1.0; 4]], &real, &mut rng).is_err());
        assert!(transmit(&[vec![1.0; 4], vec![1.0; 3]], &real, &mut rng).is_err());
    }
}
