//! Index-modulation demodulation, pilot-collision resolution, interference
//! cancellation and the frame decoding loop.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{DMatrix, DMatrixView, DVector};
use num_complex::Complex64;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::channel::slot_columns;
use crate::codebook::{AccessPatternPool, PilotCodebook};
use crate::config::SystemConfig;
use crate::detector::{detect_slot, CbmlOptions, SlotDetection};
use crate::encoder::{assemble_message, Message, MessageLayout};
use crate::error::{Error, Result};
use crate::scd::{decompose_payload, ScdSettings};

/// Pilot index to the ascending list of sub-slots it was detected in.
pub type PilotOccurrenceMap = BTreeMap<usize, Vec<usize>>;

/// Inverts per-slot active sets.
pub fn match_pilots(detections: &[SlotDetection]) -> PilotOccurrenceMap {
    let mut map = PilotOccurrenceMap::new();
    for det in detections {
        for &p in &det.active {
            map.entry(p).or_default().push(det.slot);
        }
    }
    for slots in map.values_mut() {
        slots.sort_unstable();
        slots.dedup();
    }
    map
}

/// Sub-slots where `pilot` is currently detected.
fn occurrences(detections: &[SlotDetection], pilot: usize) -> Vec<usize> {
    detections.iter().filter(|d| d.position(pilot).is_some()).map(|d| d.slot).collect()
}

/// Number of differing entries.
pub fn hamming_distance(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Outcome of a collision resolution; `tie` flags an exact tie broken by
/// taking the first candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution<T> {
    pub choice: T,
    pub tie: bool,
}

/// Pairs four payload copies of one pilot into two users by least total
/// Hamming distance. Pairings are tried in the order
/// `{0,1}{2,3}`, `{0,2}{1,3}`, `{0,3}{1,2}`.
pub fn resolve_no_overlap(payloads: [&[f64]; 4]) -> Resolution<[(usize, usize); 2]> {
    const PAIRINGS: [[(usize, usize); 2]; 3] = [[(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]];
    let cost = |p: &[(usize, usize); 2]| {
        p.iter().map(|&(i, j)| hamming_distance(payloads[i], payloads[j])).sum::<usize>()
    };
    let costs: Vec<usize> = PAIRINGS.iter().map(cost).collect();
    let best = (0..3).min_by_key(|&i| costs[i]).expect("three pairings");
    let tie = costs.iter().filter(|&&c| c == costs[best]).count() > 1;
    Resolution { choice: PAIRINGS[best], tie }
}

/// Finds which of three codeword estimates is the superposition of the other
/// two: the index `i3` minimizing `||c_i1 + c_i2 - c_i3||^2`.
pub fn resolve_partial_overlap(codewords: [&[Complex64]; 3]) -> Resolution<usize> {
    let cost = |k: usize| {
        let (i1, i2) = match k {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        codewords[i1]
            .iter()
            .zip(codewords[i2])
            .zip(codewords[k])
            .map(|((a, b), c)| (a + b - c).norm_sqr())
            .sum::<f64>()
    };
    let costs = [cost(0), cost(1), cost(2)];
    let best = (0..3).fold(0, |b, k| if costs[k] < costs[b] { k } else { b });
    let tie = costs.iter().filter(|&&c| c == costs[best]).count() > 1;
    Resolution { choice: best, tie }
}

/// Subtracts `g c^T` from the columns of every listed sub-slot.
pub fn sic_subtract(y: &mut DMatrix<Complex64>, channel: &DVector<Complex64>, symbols: &[f64], slots: &[usize]) {
    let len = symbols.len();
    for &s in slots {
        for (k, col) in slot_columns(s, len).enumerate() {
            let c = symbols[k];
            if c != 0.0 {
                for a in 0..y.nrows() {
                    y[(a, col)] -= channel[a] * c;
                }
            }
        }
    }
}

/// Least-squares amplitude of `g c^T` in sub-slot `slot`: about 1 when the
/// codeword is present there and about 0 otherwise.
pub fn codeword_amplitude(y: &DMatrix<Complex64>, channel: &DVector<Complex64>, symbols: &[f64], slot: usize) -> f64 {
    let mut num = 0.0;
    for (k, col) in slot_columns(slot, symbols.len()).enumerate() {
        for a in 0..y.nrows() {
            num += (channel[a].conj() * y[(a, col)]).re * symbols[k];
        }
    }
    let den = channel.norm_squared() * symbols.iter().map(|c| c * c).sum::<f64>();
    if den > 0.0 { num / den } else { 0.0 }
}

/// Amplitude a candidate partner slot must reach, and the most any other
/// candidate may reach, for a singly-seen pilot to be paired.
pub const PARTNER_AMPLITUDE: f64 = 0.5;

/// `(2 / sigma2) ||Y_slot||_F^2 / M`: the per-antenna energy statistic.
pub fn energy_statistic(y_slot: &DMatrixView<'_, Complex64>, sigma2: f64) -> f64 {
    let m = y_slot.nrows().max(1);
    2.0 / sigma2 * y_slot.iter().map(|v| v.norm_sqr()).sum::<f64>() / m as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotActivity {
    Idle,
    Busy,
}

/// Idle iff the energy statistic does not exceed `tau_e`.
pub fn idle_detect(y_slot: &DMatrixView<'_, Complex64>, sigma2: f64, tau_e: f64) -> SlotActivity {
    if energy_statistic(y_slot, sigma2) <= tau_e {
        SlotActivity::Idle
    } else {
        SlotActivity::Busy
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}

/// Gaussian approximation of the idle-detection probability for a noise-only
/// slot of `codeword_len` symbols.
pub fn idle_detection_approx(tau_e: f64, codeword_len: usize) -> f64 {
    let l = codeword_len as f64;
    std_normal_cdf((tau_e - 2.0 * l) / (2.0 * l.sqrt()))
}

/// Gaussian approximation of the probability that a slot carrying one
/// codeword at per-symbol signal-to-noise ratio `snr` tests idle.
pub fn busy_miss_approx(tau_e: f64, codeword_len: usize, snr: f64) -> f64 {
    let l = codeword_len as f64;
    std_normal_cdf((tau_e - 2.0 * l * (1.0 + snr)) / (2.0 * (1.0 + snr) * l.sqrt()))
}

/// A message recovered by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedUser {
    /// 0-based pilot index.
    pub pilot: usize,
    /// Occupied sub-slots, ascending.
    pub slots: Vec<usize>,
    /// Row of the access-pattern pool.
    pub pattern: usize,
    pub bpsk: Vec<f64>,
    pub channel: DVector<Complex64>,
    /// Sub-slot the payload and channel were taken from.
    pub source_slot: usize,
    pub message: Message,
}

impl DecodedUser {
    /// Pilot column followed by the payload.
    pub fn symbols(&self, codebook: &PilotCodebook) -> Vec<f64> {
        let mut s = codebook.column(self.pilot).to_vec();
        s.extend_from_slice(&self.bpsk);
        s
    }
}

/// Why the decoding loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Termination {
    #[default]
    AllIdle,
    /// No sub-slot holds between 1 and `M` detected pilots.
    NoDecodableSlot,
    /// The sparsest busy sub-slot holds more than `M` pilots.
    Overloaded,
    IterationCap,
}

/// Per-frame diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeReport {
    pub users: Vec<DecodedUser>,
    pub iterations: usize,
    pub termination: Termination,
    /// Detected pilots per sub-slot before any cancellation.
    pub initial_active: Vec<usize>,
    /// Detected pilots per sub-slot when decoding stopped.
    pub final_active: Vec<usize>,
    pub redetections: usize,
    /// Pilots skipped because they were seen in fewer or more slots than a
    /// pattern allows.
    pub unmatched_pilots: usize,
    pub no_overlap_resolved: usize,
    pub partial_overlap_resolved: usize,
    pub resolution_ties: usize,
    /// Pilots seen in one slot only and paired by codeword amplitude.
    pub partners_found: usize,
    /// Matched patterns outside the usable part of the pool.
    pub invalid_patterns: usize,
    pub singular_slots: usize,
}

impl DecodeReport {
    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.users.iter().map(|u| &u.message)
    }
}

/// A transmitted user, for perfect-cancellation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownUser {
    pub message: Message,
    pub channel: DVector<Complex64>,
    pub symbols: Vec<f64>,
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecodeOptions<'a> {
    pub sic: bool,
    /// When set, correctly decoded users are cancelled with their true
    /// channel and codeword.
    pub genie: Option<&'a [KnownUser]>,
    /// Seeds the randomized rounding of the payload decomposer.
    pub seed: u64,
    /// Once no slot with at most `M` detected pilots is left, slots with up
    /// to `M + overload_margin` are still attempted; spurious detections
    /// then fail pilot matching. Zero stops at the first overloaded slot.
    pub overload_margin: usize,
}

pub const DEFAULT_OVERLOAD_MARGIN: usize = 1;

impl Default for DecodeOptions<'_> {
    fn default() -> Self {
        Self { sic: true, genie: None, seed: 0, overload_margin: DEFAULT_OVERLOAD_MARGIN }
    }
}

/// Fixed frame parameters the decoder reads from the configuration.
#[derive(Debug, Clone)]
struct Geometry {
    codeword_len: usize,
    pilot_len: usize,
    n_slots: usize,
    repetitions: usize,
    antennas: usize,
    /// Most detected pilots a slot may hold and still be decoded.
    slot_limit: usize,
    sigma2: f64,
    energy_threshold: f64,
    iteration_cap: usize,
    layout: MessageLayout,
    cbml: CbmlOptions,
    scd: ScdSettings,
}

impl Geometry {
    fn new(cfg: &SystemConfig) -> Self {
        let sigma2 = cfg.sigma2();
        Self {
            codeword_len: cfg.codeword_len(),
            pilot_len: cfg.pilot_len,
            n_slots: cfg.n_slots,
            repetitions: cfg.repetitions,
            antennas: cfg.antennas,
            slot_limit: cfg.antennas,
            sigma2,
            energy_threshold: cfg.energy_threshold,
            iteration_cap: cfg.iteration_cap(),
            layout: MessageLayout::from_config(cfg),
            cbml: CbmlOptions::new(cfg.detector_passes, cfg.activity_threshold),
            scd: ScdSettings { kind: cfg.decomposer, samples: cfg.sdr_samples, ml_cap: cfg.ml_cap },
        }
    }
}

fn mix_seed(seed: u64, slot: usize, generation: usize) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let mut z = seed ^ ((slot as u64) << 40) ^ (generation as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct FrameState<'a> {
    geo: Geometry,
    codebook: &'a PilotCodebook,
    pool: &'a AccessPatternPool,
    residual: DMatrix<Complex64>,
    detections: Vec<SlotDetection>,
    /// Payload signs per detected pilot, computed on demand.
    payloads: Vec<Option<Vec<Vec<f64>>>>,
    generation: Vec<usize>,
    seed: u64,
}

impl FrameState<'_> {
    fn detect(&mut self, slot: usize) -> Result<()> {
        let cols = slot_columns(slot, self.geo.codeword_len);
        let view = self.residual.columns(cols.start, self.geo.pilot_len);
        self.detections[slot] = detect_slot(slot, &view, self.codebook, self.geo.sigma2, &self.geo.cbml)?;
        self.payloads[slot] = None;
        self.generation[slot] += 1;
        Ok(())
    }

    fn is_idle(&self, slot: usize) -> bool {
        let cols = slot_columns(slot, self.geo.codeword_len);
        let view = self.residual.columns(cols.start, self.geo.codeword_len);
        idle_detect(&view, self.geo.sigma2, self.geo.energy_threshold) == SlotActivity::Idle
    }

    fn decodable(&self, slot: usize) -> bool {
        let d = &self.detections[slot];
        !d.is_empty() && d.len() <= self.geo.slot_limit && d.g_hat.is_some()
    }

    fn payload(&mut self, slot: usize) -> Result<&[Vec<f64>]> {
        if self.payloads[slot].is_none() {
            let det = &self.detections[slot];
            let g = det.g_hat.as_ref().ok_or(Error::SingularDesign { condition: f64::INFINITY })?;
            let start = slot_columns(slot, self.geo.codeword_len).start + self.geo.pilot_len;
            let view = self.residual.columns(start, self.geo.codeword_len - self.geo.pilot_len);
            let seed = mix_seed(self.seed, slot, self.generation[slot]);
            self.payloads[slot] = Some(decompose_payload(&view, g, &self.geo.scd, seed)?);
        }
        Ok(self.payloads[slot].as_deref().expect("filled above"))
    }

    /// Payload and channel estimate of `pilot` as seen in `slot`.
    fn estimate(&mut self, slot: usize, pilot: usize) -> Result<(Vec<f64>, DVector<Complex64>)> {
        let pos = self.detections[slot].position(pilot).expect("pilot detected in slot");
        let bpsk = self.payload(slot)?[pos].clone();
        let g = self.detections[slot].g_hat.as_ref().expect("decodable slot").column(pos).into_owned();
        Ok((bpsk, g))
    }

    fn user(
        &self,
        pilot: usize,
        mut slots: Vec<usize>,
        source_slot: usize,
        bpsk: Vec<f64>,
        channel: DVector<Complex64>,
    ) -> Result<Option<DecodedUser>> {
        slots.sort_unstable();
        let Some(pattern) = self.pool.index_of(&slots) else {
            return Ok(None);
        };
        if pattern >= self.pool.usable_rows() {
            return Ok(None);
        }
        let message = assemble_message(pilot, &bpsk, pattern, self.geo.layout)?;
        Ok(Some(DecodedUser { pilot, slots, pattern, bpsk, channel, source_slot, message }))
    }
}

/// Decodes one received frame (`M x N_cu`).
pub fn decode_frame(
    y: &DMatrix<Complex64>,
    codebook: &PilotCodebook,
    pool: &AccessPatternPool,
    cfg: &SystemConfig,
    opts: &DecodeOptions<'_>,
) -> Result<DecodeReport> {
    let mut geo = Geometry::new(cfg);
    geo.slot_limit = geo.antennas + opts.overload_margin;
    if y.nrows() != geo.antennas || y.ncols() != geo.codeword_len * geo.n_slots {
        return Err(Error::Dimension(format!(
            "received frame is {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            geo.antennas,
            geo.codeword_len * geo.n_slots
        )));
    }
    if codebook.pilot_len() != geo.pilot_len || pool.n_slots() != geo.n_slots || pool.repetitions() != geo.repetitions {
        return Err(Error::Dimension("codebook or pattern pool does not match the configuration".into()));
    }
    let n_slots = geo.n_slots;
    let genie: HashMap<&Message, &KnownUser> =
        opts.genie.map(|g| g.iter().map(|u| (&u.message, u)).collect()).unwrap_or_default();
    let mut st = FrameState {
        detections: (0..n_slots).map(|s| SlotDetection::empty(s, codebook.n_pilots(), geo.antennas)).collect(),
        payloads: vec![None; n_slots],
        generation: vec![0; n_slots],
        residual: y.clone(),
        seed: opts.seed,
        geo,
        codebook,
        pool,
    };
    let mut report = DecodeReport::default();
    for s in 0..n_slots {
        st.detect(s)?;
    }
    report.initial_active = st.detections.iter().map(SlotDetection::len).collect();
    report.singular_slots = st.detections.iter().filter(|d| d.g_hat.is_none()).count();

    let mut stalled = vec![false; n_slots];
    let mut decoded: HashSet<Message> = HashSet::new();
    loop {
        if report.iterations >= st.geo.iteration_cap {
            report.termination = Termination::IterationCap;
            break;
        }
        if (0..n_slots).all(|s| st.is_idle(s)) {
            report.termination = Termination::AllIdle;
            break;
        }
        let pick = (0..n_slots)
            .filter(|&s| !stalled[s] && !st.detections[s].is_empty())
            .min_by_key(|&s| (st.detections[s].len(), s));
        let Some(slot) = pick else {
            report.termination = Termination::NoDecodableSlot;
            break;
        };
        if st.detections[slot].len() > st.geo.slot_limit {
            report.termination = Termination::Overloaded;
            break;
        }
        report.iterations += 1;
        if st.detections[slot].g_hat.is_none() {
            stalled[slot] = true;
            continue;
        }

        let mut found: Vec<DecodedUser> = Vec::new();
        for pilot in st.detections[slot].active.clone() {
            let occ = occurrences(&st.detections, pilot);
            let k = st.geo.repetitions;
            if occ.len() == k {
                let (bpsk, g) = st.estimate(slot, pilot)?;
                match st.user(pilot, occ, slot, bpsk, g)? {
                    Some(u) => found.push(u),
                    None => report.invalid_patterns += 1,
                }
            } else if k == 2 && occ.len() == 4 && occ.iter().all(|&s| st.decodable(s)) {
                let mut est = Vec::with_capacity(4);
                for &s in &occ {
                    est.push(st.estimate(s, pilot)?);
                }
                let res = resolve_no_overlap([&est[0].0, &est[1].0, &est[2].0, &est[3].0]);
                report.no_overlap_resolved += 1;
                report.resolution_ties += usize::from(res.tie);
                for (i, j) in res.choice {
                    // payload and channel from the slot being processed when
                    // it belongs to the pair
                    let src = if occ[j] == slot { j } else { i };
                    let (bpsk, g) = est[src].clone();
                    match st.user(pilot, vec![occ[i], occ[j]], occ[src], bpsk, g)? {
                        Some(u) => found.push(u),
                        None => report.invalid_patterns += 1,
                    }
                }
            } else if k == 2 && occ.len() == 3 && occ.iter().all(|&s| st.decodable(s)) {
                let mut est = Vec::with_capacity(3);
                for &s in &occ {
                    est.push(st.estimate(s, pilot)?);
                }
                let pilot_col = codebook.column(pilot);
                let signals: Vec<Vec<Complex64>> = est
                    .iter()
                    .map(|(bpsk, g)| {
                        pilot_col
                            .iter()
                            .chain(bpsk)
                            .flat_map(|&c| g.iter().map(move |&ga| ga * c))
                            .collect()
                    })
                    .collect();
                let res = resolve_partial_overlap([&signals[0], &signals[1], &signals[2]]);
                report.partial_overlap_resolved += 1;
                report.resolution_ties += usize::from(res.tie);
                let shared = res.choice;
                for single in (0..3).filter(|&i| i != shared) {
                    let (bpsk, g) = est[single].clone();
                    match st.user(pilot, vec![occ[single], occ[shared]], occ[single], bpsk, g)? {
                        Some(u) => found.push(u),
                        None => report.invalid_patterns += 1,
                    }
                }
            } else if k == 2 && occ.len() == 1 {
                // the partner copy may be buried in a crowded slot; the
                // channel is common to both copies, so look for it directly
                let (bpsk, g) = st.estimate(slot, pilot)?;
                let mut symbols = codebook.column(pilot).to_vec();
                symbols.extend_from_slice(&bpsk);
                let mut amps: Vec<(f64, usize)> = (0..n_slots)
                    .filter(|&s| s != slot)
                    .map(|s| (codeword_amplitude(&st.residual, &g, &symbols, s), s))
                    .collect();
                amps.sort_by(|a, b| b.0.total_cmp(&a.0));
                match amps[..] {
                    [(best, partner), (second, _), ..]
                        if best >= PARTNER_AMPLITUDE && second < PARTNER_AMPLITUDE =>
                    {
                        report.partners_found += 1;
                        match st.user(pilot, vec![slot, partner], slot, bpsk, g)? {
                            Some(u) => found.push(u),
                            None => report.invalid_patterns += 1,
                        }
                    }
                    _ => report.unmatched_pilots += 1,
                }
            } else {
                report.unmatched_pilots += 1;
            }
        }

        let mut touched: Vec<usize> = Vec::new();
        let mut progress = false;
        for user in found {
            if !decoded.insert(user.message.clone()) {
                continue;
            }
            progress = true;
            if opts.sic {
                match genie.get(&user.message) {
                    Some(truth) => sic_subtract(&mut st.residual, &truth.channel, &truth.symbols, &truth.slots),
                    None => sic_subtract(&mut st.residual, &user.channel, &user.symbols(codebook), &user.slots),
                }
                touched.extend_from_slice(&user.slots);
            }
            report.users.push(user);
        }

        if !opts.sic {
            stalled[slot] = true;
            continue;
        }
        if !progress {
            stalled[slot] = true;
            continue;
        }
        touched.sort_unstable();
        touched.dedup();
        let mut changed: HashSet<usize> = HashSet::new();
        for &s in &touched {
            changed.extend(st.detections[s].active.iter().copied());
            st.detect(s)?;
            changed.extend(st.detections[s].active.iter().copied());
            report.redetections += 1;
            if st.detections[s].g_hat.is_none() {
                report.singular_slots += 1;
            }
        }
        // a slot's outcome depends only on its own detection and on the
        // slots sharing its pilots, so only those can have been unblocked
        for (s, flag) in stalled.iter_mut().enumerate() {
            if touched.binary_search(&s).is_ok() || st.detections[s].active.iter().any(|p| changed.contains(p)) {
                *flag = false;
            }
        }
    }
    report.final_active = st.detections.iter().map(SlotDetection::len).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{add_noise, complex_gaussian, superimpose};
    use crate::encoder::encode_user;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pilots_matched_to_slots() {
        let mut dets: Vec<SlotDetection> = (0..12).map(|s| SlotDetection::empty(s, 64, 4)).collect();
        dets[3].active = vec![5, 17];
        dets[9].active = vec![17];
        dets[1].active = vec![5, 40];
        let map = match_pilots(&dets);
        assert_eq!(map[&17], vec![3, 9]);
        assert_eq!(map[&5], vec![1, 3]);
        assert_eq!(map[&40], vec![1]);
    }

    #[test]
    fn no_overlap_pairs_identical_payloads() {
        let p = vec![1.0, 1.0, -1.0, -1.0];
        let q = vec![1.0, -1.0, 1.0, -1.0];
        let r = resolve_no_overlap([&p, &q, &p, &q]);
        assert_eq!(r.choice, [(0, 2), (1, 3)]);
        assert!(!r.tie);
        let mut noisy = q.clone();
        noisy[0] = -1.0;
        let r = resolve_no_overlap([&p, &p, &q, &noisy]);
        assert_eq!(r.choice, [(0, 1), (2, 3)]);
        let r = resolve_no_overlap([&p, &p, &p, &p]);
        assert!(r.tie);
        assert_eq!(r.choice, [(0, 1), (2, 3)]);
    }

    #[test]
    fn partial_overlap_finds_superposition() {
        let a = vec![Complex64::new(1.0, 0.5), Complex64::new(-0.2, 1.0)];
        let b = vec![Complex64::new(0.3, -1.0), Complex64::new(0.7, 0.1)];
        let sum: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(resolve_partial_overlap([&sum, &a, &b]).choice, 0);
        let r = resolve_partial_overlap([&a, &b, &sum]);
        assert_eq!(r.choice, 2);
        assert!(!r.tie);
        assert!(resolve_partial_overlap([&a, &a, &a]).tie);
    }

    #[test]
    fn partial_overlap_noisy_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let sigma2 = 0.1; // 10 dB per entry
        let mut correct = 0;
        for _ in 0..200 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Complex64> { (0..71 * 4).map(|_| complex_gaussian(rng, 1.0)).collect() };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let noisy = |v: &[Complex64], rng: &mut ChaCha8Rng| -> Vec<Complex64> {
                v.iter().map(|x| x + complex_gaussian(rng, sigma2)).collect()
            };
            let sum: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let slot = rng.random_range(0..3);
            let mut cw = vec![noisy(&a, &mut rng), noisy(&b, &mut rng)];
            cw.insert(slot, noisy(&sum, &mut rng));
            if resolve_partial_overlap([&cw[0], &cw[1], &cw[2]]).choice == slot {
                correct += 1;
            }
        }
        assert!(correct >= 198, "{correct}");
    }

    #[test]
    fn sic_cancels_exact_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let g = DVector::from_fn(4, |_, _| complex_gaussian(&mut rng, 1.0));
        let symbols: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut x = vec![0.0; 30];
        for s in [1, 3] {
            x[s * 6..(s + 1) * 6].copy_from_slice(&symbols);
        }
        let gm = DMatrix::from_column_slice(4, 1, g.as_slice());
        let mut y = superimpose(&[x], &gm).unwrap();
        sic_subtract(&mut y, &g, &symbols, &[1, 3]);
        assert_eq!(y.iter().map(|v| v.norm_sqr()).sum::<f64>(), 0.0);
    }

    #[test]
    fn sic_residual_equals_channel_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = DVector::from_fn(4, |_, _| complex_gaussian(&mut rng, 1.0));
        let err = DVector::from_fn(4, |_, _| complex_gaussian(&mut rng, 0.01));
        let symbols: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let mut x = vec![0.0; 40];
        for s in [0, 4] {
            x[s * 8..(s + 1) * 8].copy_from_slice(&symbols);
        }
        let gm = DMatrix::from_column_slice(4, 1, g.as_slice());
        let mut y = superimpose(&[x], &gm).unwrap();
        sic_subtract(&mut y, &(&g + &err), &symbols, &[0, 4]);
        let per_slot: f64 = y.columns(0, 8).iter().map(|v| v.norm_sqr()).sum();
        let expected = err.norm_squared() * 8.0;
        assert!((per_slot - expected).abs() < 1e-9);
    }

    #[test]
    fn energy_detector_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut y = DMatrix::zeros(4, 71);
        add_noise(&mut y, 1.0, &mut rng);
        assert_eq!(idle_detect(&y.as_view(), 1.0, 500.0), SlotActivity::Idle);
        assert_eq!(idle_detect(&y.as_view(), 1.0, 0.0), SlotActivity::Busy);
        assert!(idle_detection_approx(500.0, 71) > 1.0 - 1e-12);
        assert!(busy_miss_approx(500.0, 71, 10.0) < 1e-6);
        assert!(busy_miss_approx(500.0, 71, 0.0) > 0.999);
    }

    fn toy_config() -> SystemConfig {
        // 64 pilots of length 9, 6 slots, K = 2: 15 patterns, 8 usable
        SystemConfig {
            stream_bits: 24,
            pilot_bits: 6,
            im_bits: 3,
            pilot_len: 9,
            n_slots: 6,
            repetitions: 2,
            antennas: 4,
            active_users: 2,
            snr_db: 20.0,
            decomposer: crate::config::DecomposerKind::Ml,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn noiseless_disjoint_pair_recovered() {
        let cfg = toy_config();
        cfg.validate().unwrap();
        let cb = PilotCodebook::build(cfg.pilot_bits, cfg.pilot_len, 1).unwrap();
        let pool = AccessPatternPool::build(cfg.n_slots, cfg.repetitions).unwrap();
        let layout = MessageLayout::from_config(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        // patterns {0, 2} and {1, 3}
        let m1 = assemble_message(3, &[1.0; 16], 1, layout).unwrap();
        let m2 = assemble_message(12, &[-1.0; 16], 6, layout).unwrap();
        assert!(pool.slots(1).iter().all(|s| !pool.slots(6).contains(s)));
        let (_, x1) = encode_user(&m1, &cb, &pool).unwrap();
        let (_, x2) = encode_user(&m2, &cb, &pool).unwrap();
        let gains = DMatrix::from_fn(4, 2, |_, _| complex_gaussian(&mut rng, 1.0));
        let y = superimpose(&[x1, x2], &gains).unwrap();
        let report = decode_frame(&y, &cb, &pool, &cfg, &DecodeOptions::default()).unwrap();
        let got: HashSet<&Message> = report.messages().collect();
        assert_eq!(got, [&m1, &m2].into_iter().collect());
        assert_eq!(report.iterations, 2);
    }

    #[test]
    fn overloaded_frame_breaks_immediately() {
        // every user transmits in slots {0, 1}; 5 users exceed M = 4
        let cfg = SystemConfig { antennas: 4, active_users: 5, ..toy_config() };
        let cb = PilotCodebook::build(cfg.pilot_bits, cfg.pilot_len, 1).unwrap();
        let pool = AccessPatternPool::build(cfg.n_slots, cfg.repetitions).unwrap();
        let layout = MessageLayout::from_config(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let xs: Vec<Vec<f64>> = [1, 14, 27, 40, 53]
            .iter()
            .map(|&p| {
                let bpsk: Vec<f64> = (0..16).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                encode_user(&assemble_message(p, &bpsk, 0, layout).unwrap(), &cb, &pool).unwrap().1
            })
            .collect();
        let gains = DMatrix::from_fn(4, 5, |_, _| complex_gaussian(&mut rng, 1.0));
        let y = superimpose(&xs, &gains).unwrap();
        let strict = DecodeOptions { overload_margin: 0, ..DecodeOptions::default() };
        let report = decode_frame(&y, &cb, &pool, &cfg, &strict).unwrap();
        assert!(report.users.is_empty());
        assert_eq!(report.termination, Termination::Overloaded);
    }

    #[test]
    fn codeword_amplitude_locates_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let symbols: Vec<f64> = (0..30).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let g = DVector::from_fn(4, |_, _| complex_gaussian(&mut rng, 1.0));
        let mut y = DMatrix::zeros(4, 30 * 5);
        sic_subtract(&mut y, &(-&g), &symbols, &[1, 3]);
        add_noise(&mut y, 0.05, &mut rng);
        for s in 0..5 {
            let a = codeword_amplitude(&y, &g, &symbols, s);
            let want = if s == 1 || s == 3 { 1.0 } else { 0.0 };
            assert!((a - want).abs() < 0.1, "slot {s}: {a}");
        }
        assert_eq!(codeword_amplitude(&y, &DVector::zeros(4), &symbols, 1), 0.0);
    }

    #[test]
    fn empty_frame_is_idle() {
        let cfg = toy_config();
        let cb = PilotCodebook::build(cfg.pilot_bits, cfg.pilot_len, 1).unwrap();
        let pool = AccessPatternPool::build(cfg.n_slots, cfg.repetitions).unwrap();
        let y = DMatrix::zeros(4, cfg.channel_uses());
        let report = decode_frame(&y, &cb, &pool, &cfg, &DecodeOptions::default()).unwrap();
        assert!(report.users.is_empty());
        assert_eq!(report.termination, Termination::AllIdle);
    }
}
