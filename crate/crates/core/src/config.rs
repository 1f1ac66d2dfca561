//! Scheme parameters, their derived lengths, and the `key = value` config file.
//!
//! A frame spans `n_slots` sub-slots of `stream_bits + 1` channel uses each.
//! Every codeword is a pilot column of `pilot_len` symbols followed by
//! `bpsk_bits` antipodal symbols, and the pilot, BPSK and index-modulation
//! segments together carry `stream_bits + 1` information bits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How a nominal SNR in dB is turned into a noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SnrConvention {
    /// SNR of a single codeword measured at one receive antenna, averaged over
    /// the frame: `sigma2 = K / (snr * n_slots)`.
    #[default]
    PerCodeword,
    /// Total received energy of all users summed over the array:
    /// `sigma2 = N_a * M * K / (snr * n_slots)`.
    TotalReceived,
}

impl FromStr for SnrConvention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "per-codeword" => Ok(Self::PerCodeword),
            "total-received" => Ok(Self::TotalReceived),
            other => Err(format!("unknown snr convention `{other}`")),
        }
    }
}

impl fmt::Display for SnrConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerCodeword => "per-codeword",
            Self::TotalReceived => "total-received",
        })
    }
}

/// Which superposed-codeword decomposer the decoder runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecomposerKind {
    /// Exhaustive search over all sign vectors.
    Ml,
    /// Semidefinite relaxation with Gaussian randomized rounding.
    #[default]
    Sdr,
}

impl FromStr for DecomposerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ml" => Ok(Self::Ml),
            "sdr" => Ok(Self::Sdr),
            other => Err(format!("unknown decomposer `{other}` (expected ml or sdr)")),
        }
    }
}

impl fmt::Display for DecomposerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ml => "ml",
            Self::Sdr => "sdr",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// Transmitted bit-stream length; a codeword spans `stream_bits + 1` symbols.
    pub stream_bits: usize,
    /// Bits mapped onto the pilot index.
    pub pilot_bits: usize,
    /// Bits conveyed by the access pattern.
    pub im_bits: usize,
    /// Pilot length in symbols.
    pub pilot_len: usize,
    pub n_slots: usize,
    /// Number of sub-slots each user transmits in.
    pub repetitions: usize,
    pub antennas: usize,
    pub active_users: usize,
    pub snr_db: f64,
    pub snr_convention: SnrConvention,
    /// Idle-slot energy threshold.
    pub energy_threshold: f64,
    /// SIC iteration cap; `None` means one iteration per active user.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    /// Full coordinate passes of the activity detector.
    pub detector_passes: usize,
    /// Activity threshold as a multiple of the noise variance.
    pub activity_threshold: f64,
    pub decomposer: DecomposerKind,
    pub sdr_samples: usize,
    pub ml_cap: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            stream_bits: 70,
            pilot_bits: 14,
            im_bits: 9,
            pilot_len: 23,
            n_slots: 33,
            repetitions: 2,
            antennas: 4,
            active_users: 40,
            snr_db: 0.0,
            snr_convention: SnrConvention::PerCodeword,
            energy_threshold: 500.0,
            max_iterations: None,
            seed: 0,
            detector_passes: 5,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            decomposer: DecomposerKind::Sdr,
            sdr_samples: 150,
            ml_cap: 16,
        }
    }
}

/// Default activity threshold, in units of the noise variance, on the
/// unit-norm-column scale. Noise-only sweeps leave coefficients up to about
/// `3 sigma2`; an active user sits near `L_p` times its mean channel power.
pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 8.0;

/// Exact binomial coefficient, `None` on overflow.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// `floor(log2(n))` for `n >= 1`.
fn floor_log2(n: u128) -> usize {
    (127 - n.leading_zeros()) as usize
}

impl SystemConfig {
    /// The Table I operating point.
    pub fn table_one() -> Self {
        Self::default()
    }

    pub fn codeword_len(&self) -> usize {
        self.stream_bits + 1
    }

    /// BPSK payload length: the codeword minus the pilot.
    pub fn bpsk_bits(&self) -> usize {
        self.codeword_len()
            .saturating_sub(self.pilot_bits + self.im_bits)
    }

    /// Information bits per user (pilot, BPSK and IM segments).
    pub fn message_bits(&self) -> usize {
        self.pilot_bits + self.bpsk_bits() + self.im_bits
    }

    pub fn channel_uses(&self) -> usize {
        self.n_slots * self.codeword_len()
    }

    pub fn n_pilots(&self) -> usize {
        1usize << self.pilot_bits
    }

    pub fn usable_patterns(&self) -> usize {
        1usize << self.im_bits
    }

    pub fn iteration_cap(&self) -> usize {
        self.max_iterations.unwrap_or(self.active_users)
    }

    /// Checks every length relation of the scheme.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InconsistentLengths(msg));
        if self.repetitions < 1 || self.repetitions >= self.n_slots {
            return bad(format!(
                "1 <= K < N_slot violated (K = {}, N_slot = {})",
                self.repetitions, self.n_slots
            ));
        }
        if self.pilot_bits < 1 {
            return bad("L_bp >= 1 violated".into());
        }
        if self.pilot_bits > 30 {
            return bad(format!("L_bp = {} is too large for a dense codebook", self.pilot_bits));
        }
        if self.antennas < 1 {
            return bad("M >= 1 violated".into());
        }
        let pool = binomial(self.n_slots, self.repetitions).ok_or_else(|| {
            Error::InconsistentLengths("binomial(N_slot, K) overflows".into())
        })?;
        let expected_im = floor_log2(pool);
        if self.im_bits != expected_im {
            return bad(format!(
                "L_bI = floor(log2(binomial(N_slot, K))) violated: floor(log2({pool})) = {expected_im} != {}",
                self.im_bits
            ));
        }
        if self.pilot_bits + self.im_bits >= self.codeword_len() {
            return bad(format!(
                "L_bd = L_bs + 1 - L_bp - L_bI must be positive (L_bs = {}, L_bp = {}, L_bI = {})",
                self.stream_bits, self.pilot_bits, self.im_bits
            ));
        }
        let expected_pilot = self.codeword_len() - self.bpsk_bits();
        if self.pilot_len != expected_pilot {
            return bad(format!(
                "L_p = L_bs + 1 - L_bd violated: {} != {expected_pilot}",
                self.pilot_len
            ));
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite".into());
        }
        if self.detector_passes == 0 {
            return bad("detector_passes must be positive".into());
        }
        if self.sdr_samples == 0 {
            return bad("sdr_samples must be positive".into());
        }
        Ok(())
    }

    /// Noise variance for the configured SNR.
    pub fn sigma2(&self) -> f64 {
        sigma2_from_snr(
            self.snr_db,
            self.snr_convention,
            self.active_users,
            self.antennas,
            self.repetitions,
            self.n_slots,
        )
    }

    pub fn with_snr_db(&self, snr_db: f64) -> Self {
        Self { snr_db, ..self.clone() }
    }

    pub fn with_active_users(&self, active_users: usize) -> Self {
        Self { active_users, ..self.clone() }
    }

    /// Reads a `key = value` file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|message| Error::Parse { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value `{value}` for `{key}`"))
        }
        match key {
            "stream_bits" => self.stream_bits = num(key, value)?,
            "pilot_bits" => self.pilot_bits = num(key, value)?,
            "im_bits" => self.im_bits = num(key, value)?,
            "pilot_len" => self.pilot_len = num(key, value)?,
            "n_slots" => self.n_slots = num(key, value)?,
            "repetitions" => self.repetitions = num(key, value)?,
            "antennas" => self.antennas = num(key, value)?,
            "active_users" => self.active_users = num(key, value)?,
            "snr_db" => self.snr_db = num(key, value)?,
            "snr_convention" => self.snr_convention = value.parse()?,
            "energy_threshold" => self.energy_threshold = num(key, value)?,
            "max_iterations" => self.max_iterations = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "detector_passes" => self.detector_passes = num(key, value)?,
            "activity_threshold" => self.activity_threshold = num(key, value)?,
            "decomposer" => self.decomposer = value.parse()?,
            "sdr_samples" => self.sdr_samples = num(key, value)?,
            "ml_cap" => self.ml_cap = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Serializes to the same `key = value` format [`SystemConfig::parse`] reads.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("stream_bits", self.stream_bits.to_string());
        kv("pilot_bits", self.pilot_bits.to_string());
        kv("im_bits", self.im_bits.to_string());
        kv("pilot_len", self.pilot_len.to_string());
        kv("n_slots", self.n_slots.to_string());
        kv("repetitions", self.repetitions.to_string());
        kv("antennas", self.antennas.to_string());
        kv("active_users", self.active_users.to_string());
        kv("snr_db", self.snr_db.to_string());
        kv("snr_convention", self.snr_convention.to_string());
        kv("energy_threshold", self.energy_threshold.to_string());
        if let Some(t) = self.max_iterations {
            kv("max_iterations", t.to_string());
        }
        kv("seed", self.seed.to_string());
        kv("detector_passes", self.detector_passes.to_string());
        kv("activity_threshold", self.activity_threshold.to_string());
        kv("decomposer", self.decomposer.to_string());
        kv("sdr_samples", self.sdr_samples.to_string());
        kv("ml_cap", self.ml_cap.to_string());
        out
    }
}

/// Inverts the SNR definition for the noise variance.
///
/// Under [`SnrConvention::TotalReceived`] each user contributes
/// `E|g|^2 * |x|^2 = M * K * (L_bs + 1)` and the `(L_bs + 1)` factors cancel.
pub fn sigma2_from_snr(
    snr_db: f64,
    convention: SnrConvention,
    active_users: usize,
    antennas: usize,
    repetitions: usize,
    n_slots: usize,
) -> f64 {
    let snr = 10f64.powf(snr_db / 10.0);
    let energy = match convention {
        SnrConvention::PerCodeword => repetitions as f64,
        SnrConvention::TotalReceived => (active_users * antennas * repetitions) as f64,
    };
    energy / (snr * n_slots as f64)
}
