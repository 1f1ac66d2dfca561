//! The common pilot codebook and the access-pattern pool.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// In-place unnormalized fast Walsh-Hadamard transform (Sylvester order).
///
/// `data.len()` must be a power of two.
pub fn fwht(data: &mut [f64]) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in data.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// Entry `(row, col)` of the Sylvester Hadamard matrix.
#[inline]
pub fn hadamard_entry(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Pilot codebook built from selected rows of a Sylvester Hadamard matrix.
///
/// Columns have entries in `{+1, -1}`, so every column has squared norm
/// `pilot_len`; the detector works on the unit-norm scaling
/// [`PilotCodebook::unit_scale`].
#[derive(Debug, Clone, PartialEq)]
pub struct PilotCodebook {
    pilot_bits: usize,
    seed: u64,
    rows: Vec<usize>,
    /// Column-major: column `i` is `entries[i * pilot_len..(i + 1) * pilot_len]`.
    entries: Vec<f64>,
    coherence: f64,
}

const MAX_DRAWS: usize = 64;
const MAGIC: &[u8; 4] = b"URPC";
const FORMAT_VERSION: u8 = 1;

impl PilotCodebook {
    /// Draws `pilot_len` distinct Hadamard rows (never the all-ones row unless
    /// every row is needed) and redraws while two columns coincide up to sign.
    pub fn build(pilot_bits: usize, pilot_len: usize, seed: u64) -> Result<Self> {
        let order = 1usize << pilot_bits;
        if pilot_len == 0 || pilot_len > order {
            return Err(Error::Dimension(format!(
                "pilot length {pilot_len} must lie in [1, {order}]"
            )));
        }
        if pilot_len == order {
            return Self::from_rows(pilot_bits, seed, (0..order).collect());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last = None;
        for _ in 0..MAX_DRAWS {
            let mut rows: Vec<usize> = sample(&mut rng, order - 1, pilot_len)
                .into_iter()
                .map(|r| r + 1)
                .collect();
            rows.sort_unstable();
            let cb = Self::from_rows(pilot_bits, seed, rows)?;
            if cb.coherence < 1.0 - 1e-12 {
                return Ok(cb);
            }
            last = Some(cb.coherence);
        }
        Err(Error::Dimension(format!(
            "no row selection with coherence below 1 found in {MAX_DRAWS} draws (last {:?})",
            last
        )))
    }

    /// Rebuilds a codebook from an explicit row selection.
    pub fn from_rows(pilot_bits: usize, seed: u64, rows: Vec<usize>) -> Result<Self> {
        let order = 1usize << pilot_bits;
        if rows.is_empty() || rows.iter().any(|&r| r >= order) {
            return Err(Error::Dimension(format!(
                "row selection must be nonempty with indices below {order}"
            )));
        }
        let mut sorted = rows.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != rows.len() {
            return Err(Error::Dimension("row selection has duplicates".into()));
        }
        let len = rows.len();
        let mut entries = Vec::with_capacity(order * len);
        for col in 0..order {
            entries.extend(rows.iter().map(|&r| hadamard_entry(r, col)));
        }
        let coherence = selection_coherence(order, &rows);
        Ok(Self { pilot_bits, seed, rows, entries, coherence })
    }

    pub fn pilot_bits(&self) -> usize {
        self.pilot_bits
    }

    pub fn pilot_len(&self) -> usize {
        self.rows.len()
    }

    pub fn n_pilots(&self) -> usize {
        1 << self.pilot_bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Largest normalized inner product between two distinct columns.
    pub fn coherence(&self) -> f64 {
        self.coherence
    }

    /// Column `index` (0-based) with `+-1` entries.
    pub fn column(&self, index: usize) -> &[f64] {
        let l = self.pilot_len();
        &self.entries[index * l..(index + 1) * l]
    }

    /// Factor turning a stored column into a unit-norm column.
    pub fn unit_scale(&self) -> f64 {
        1.0 / (self.pilot_len() as f64).sqrt()
    }

    /// Serializes the row selection with its `(pilot_bits, seed)` header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.rows.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.pilot_bits as u8);
        out.extend_from_slice(&(self.rows.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for &r in &self.rows {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing codebook header".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let pilot_bits = bytes[5] as usize;
        if pilot_bits == 0 || pilot_bits > 30 {
            return Err(Error::Format(format!("invalid pilot bit count {pilot_bits}")));
        }
        let len = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let seed = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
        let body = &bytes[16..];
        if body.len() != 4 * len {
            return Err(Error::Format(format!(
                "expected {} row bytes, found {}",
                4 * len,
                body.len()
            )));
        }
        let rows = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
            .collect();
        Self::from_rows(pilot_bits, seed, rows)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Column inner products depend only on `i ^ j`, so all of them come out of a
/// single transform of the row indicator.
fn selection_coherence(order: usize, rows: &[usize]) -> f64 {
    if order == 1 {
        return 0.0;
    }
    let mut spectrum = vec![0.0; order];
    for &r in rows {
        spectrum[r] = 1.0;
    }
    fwht(&mut spectrum);
    let peak = spectrum[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    peak / rows.len() as f64
}

/// All `K`-of-`N_slot` access patterns in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPatternPool {
    n_slots: usize,
    repetitions: usize,
    /// Occupied sub-slots of each pattern, 0-based and ascending.
    patterns: Vec<Vec<usize>>,
    usable: usize,
}

impl AccessPatternPool {
    pub fn build(n_slots: usize, repetitions: usize) -> Result<Self> {
        if repetitions < 1 || repetitions >= n_slots {
            return Err(Error::InconsistentLengths(format!(
                "1 <= K < N_slot violated (K = {repetitions}, N_slot = {n_slots})"
            )));
        }
        let mut patterns = Vec::new();
        let mut current: Vec<usize> = (0..repetitions).collect();
        loop {
            patterns.push(current.clone());
            // advance to the next combination in lexicographic order
            let mut i = repetitions;
            loop {
                if i == 0 {
                    let usable = 1usize << (usize::BITS - 1 - patterns.len().leading_zeros());
                    return Ok(Self { n_slots, repetitions, patterns, usable });
                }
                i -= 1;
                if current[i] < n_slots - repetitions + i {
                    break;
                }
            }
            current[i] += 1;
            for j in i + 1..repetitions {
                current[j] = current[j - 1] + 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Rows addressable by `L_bI` bits: the largest power of two in the pool.
    pub fn usable_rows(&self) -> usize {
        self.usable
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn repetitions(&self) -> usize {
        self.repetitions
    }

    /// Occupied sub-slots of row `index` (0-based).
    pub fn slots(&self, index: usize) -> &[usize] {
        &self.patterns[index]
    }

    /// Row `index` as a binary vector of length `N_slot`.
    pub fn row(&self, index: usize) -> Vec<u8> {
        let mut v = vec![0; self.n_slots];
        for &s in &self.patterns[index] {
            v[s] = 1;
        }
        v
    }

    /// Row index of an ascending slot set, if it is a pool row.
    pub fn index_of(&self, slots: &[usize]) -> Option<usize> {
        self.patterns
            .binary_search_by(|p| p.as_slice().cmp(slots))
            .ok()
    }
}
