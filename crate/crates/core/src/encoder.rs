//! Message split, BPSK mapping and index-modulated spreading.

use rand::Rng;

use crate::codebook::{AccessPatternPool, PilotCodebook};
use crate::config::SystemConfig;
use crate::error::{Error, Result};

/// Big-endian binary-to-integer conversion (first bit most significant).
pub fn dec(bits: &[u8]) -> u64 {
    assert!(bits.len() <= 64, "dec supports at most 64 bits");
    bits.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b & 1))
}

/// Big-endian `width`-bit representation of `value`.
pub fn bin(value: u64, width: usize) -> Result<Vec<u8>> {
    if width < 64 && value >> width != 0 {
        return Err(Error::Overflow { value, width });
    }
    Ok((0..width)
        .rev()
        .map(|i| if i >= 64 { 0 } else { ((value >> i) & 1) as u8 })
        .collect())
}

/// Segment lengths of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageLayout {
    pub pilot_bits: usize,
    pub bpsk_bits: usize,
    pub im_bits: usize,
}

impl MessageLayout {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self {
            pilot_bits: cfg.pilot_bits,
            bpsk_bits: cfg.bpsk_bits(),
            im_bits: cfg.im_bits,
        }
    }

    pub fn total(&self) -> usize {
        self.pilot_bits + self.bpsk_bits + self.im_bits
    }
}

/// A user's information bits, laid out as pilot ‖ BPSK ‖ IM segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Message {
    bits: Vec<u8>,
    layout_key: (usize, usize, usize),
}

impl Message {
    pub fn new(bits: Vec<u8>, layout: MessageLayout) -> Result<Self> {
        if bits.len() != layout.total() {
            return Err(Error::Dimension(format!(
                "message has {} bits, layout needs {}",
                bits.len(),
                layout.total()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Dimension("message bits must be 0 or 1".into()));
        }
        Ok(Self {
            bits,
            layout_key: (layout.pilot_bits, layout.bpsk_bits, layout.im_bits),
        })
    }

    pub fn from_parts(pilot: &[u8], bpsk: &[u8], im: &[u8]) -> Result<Self> {
        let layout = MessageLayout {
            pilot_bits: pilot.len(),
            bpsk_bits: bpsk.len(),
            im_bits: im.len(),
        };
        Self::new([pilot, bpsk, im].concat(), layout)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, layout: MessageLayout) -> Self {
        let bits = (0..layout.total()).map(|_| rng.random_range(0..2u8)).collect();
        Self::new(bits, layout).expect("random bits match layout")
    }

    pub fn layout(&self) -> MessageLayout {
        let (pilot_bits, bpsk_bits, im_bits) = self.layout_key;
        MessageLayout { pilot_bits, bpsk_bits, im_bits }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn pilot_part(&self) -> &[u8] {
        &self.bits[..self.layout_key.0]
    }

    pub fn bpsk_part(&self) -> &[u8] {
        let start = self.layout_key.0;
        &self.bits[start..start + self.layout_key.1]
    }

    pub fn im_part(&self) -> &[u8] {
        &self.bits[self.layout_key.0 + self.layout_key.1..]
    }
}

/// The per-user codeword and its access pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    /// 0-based pilot column, `dec(b_p)`.
    pub pilot: usize,
    /// Antipodal payload `2 b_d - 1`.
    pub bpsk: Vec<f64>,
    /// 0-based row of the access-pattern pool.
    pub pattern: usize,
    /// Occupied sub-slots, ascending.
    pub slots: Vec<usize>,
    /// Pilot column followed by the BPSK payload.
    pub symbols: Vec<f64>,
}

/// `2 b - 1` elementwise.
pub fn bpsk_modulate(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| 2.0 * f64::from(b) - 1.0).collect()
}

/// Hard decision back to bits; `+1 -> 1`, `-1 -> 0`.
pub fn bpsk_demodulate(signs: &[f64]) -> Vec<u8> {
    signs.iter().map(|&s| u8::from(s > 0.0)).collect()
}

/// Builds the codeword of `msg` without spreading it.
pub fn build_codeword(
    msg: &Message,
    codebook: &PilotCodebook,
    pool: &AccessPatternPool,
) -> Result<Codeword> {
    let pilot = dec(msg.pilot_part()) as usize;
    if pilot >= codebook.n_pilots() {
        return Err(Error::Dimension(format!(
            "pilot index {pilot} outside codebook of {} columns",
            codebook.n_pilots()
        )));
    }
    let pattern = dec(msg.im_part()) as usize;
    if pattern >= pool.usable_rows() {
        return Err(Error::IndexOutOfPool { index: pattern, usable: pool.usable_rows() });
    }
    let bpsk = bpsk_modulate(msg.bpsk_part());
    let mut symbols = codebook.column(pilot).to_vec();
    symbols.extend_from_slice(&bpsk);
    Ok(Codeword {
        pilot,
        bpsk,
        pattern,
        slots: pool.slots(pattern).to_vec(),
        symbols,
    })
}

/// Spreads a codeword over its access pattern: `x = s_AP ⊗ c`.
pub fn spread(codeword: &Codeword, n_slots: usize) -> Vec<f64> {
    let len = codeword.symbols.len();
    let mut x = vec![0.0; n_slots * len];
    for &s in &codeword.slots {
        x[s * len..(s + 1) * len].copy_from_slice(&codeword.symbols);
    }
    x
}

/// Encodes one user: its codeword and transmitted signal of length `N_cu`.
pub fn encode_user(
    msg: &Message,
    codebook: &PilotCodebook,
    pool: &AccessPatternPool,
) -> Result<(Codeword, Vec<f64>)> {
    let cw = build_codeword(msg, codebook, pool)?;
    let x = spread(&cw, pool.n_slots());
    Ok((cw, x))
}

/// Reassembles message bits from decoded segments.
pub fn assemble_message(
    pilot: usize,
    bpsk_signs: &[f64],
    pattern: usize,
    layout: MessageLayout,
) -> Result<Message> {
    let mut bits = bin(pilot as u64, layout.pilot_bits)?;
    bits.extend(bpsk_demodulate(bpsk_signs));
    bits.extend(bin(pattern as u64, layout.im_bits)?);
    Message::new(bits, layout)
}
