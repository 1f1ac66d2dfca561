//! Monte-Carlo experiment driver.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{transmit, ChannelRealization};
use crate::codebook::{AccessPatternPool, PilotCodebook};
use crate::config::SystemConfig;
use crate::decoder::{decode_frame, DecodeOptions, DecodeReport, KnownUser, DEFAULT_OVERLOAD_MARGIN};
use crate::encoder::{encode_user, Message, MessageLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    SnrDb,
    ActiveUsers,
    /// Users per sub-slot, `N_a = round(r N_slot)`.
    Rate,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::SnrDb => "snr_db",
            SweepVariable::ActiveUsers => "active_users",
            SweepVariable::Rate => "rate",
        }
    }

    /// Configuration at one sweep point.
    pub fn apply(&self, cfg: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let users = |n: f64| -> Result<usize> {
            if !(n >= 1.0) || n.fract() != 0.0 {
                return Err(Error::Dimension(format!("active user count must be a positive integer, got {n}")));
            }
            Ok(n as usize)
        };
        Ok(match self {
            SweepVariable::SnrDb => cfg.with_snr_db(value),
            SweepVariable::ActiveUsers => cfg.with_active_users(users(value)?),
            SweepVariable::Rate => cfg.with_active_users(users((value * cfg.n_slots as f64).round())?),
        })
    }
}

impl FromStr for SweepVariable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" | "snr_db" => Ok(SweepVariable::SnrDb),
            "users" | "active_users" | "na" => Ok(SweepVariable::ActiveUsers),
            "rate" | "r" => Ok(SweepVariable::Rate),
            other => Err(Error::Format(format!("unknown sweep variable `{other}`"))),
        }
    }
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub variable: SweepVariable,
    /// Sorted ascending.
    pub values: Vec<f64>,
    pub trials: usize,
    pub sic: bool,
    /// Cancel correctly decoded users with their true contribution.
    pub perfect_sic: bool,
    /// Extra detected pilots tolerated in the sparsest slot.
    pub overload_margin: usize,
    pub master_seed: u64,
    pub output: Option<PathBuf>,
    /// Adds a wall-time column, which makes output run-dependent.
    pub timing: bool,
}

impl ExperimentSpec {
    pub fn new(variable: SweepVariable, values: Vec<f64>, trials: usize, master_seed: u64) -> Self {
        Self {
            variable,
            values,
            trials,
            sic: true,
            perfect_sic: false,
            overload_margin: DEFAULT_OVERLOAD_MARGIN,
            master_seed,
            output: None,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Dimension("at least one trial per point is required".into()));
        }
        if self.values.is_empty() || self.values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Dimension("sweep values must be nonempty and strictly increasing".into()));
        }
        Ok(())
    }
}

/// Scores of one simulated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub users: usize,
    /// Transmitted messages present in the decoder output.
    pub recovered: usize,
    /// Output messages that were never transmitted.
    pub false_positives: usize,
    /// `sum ||g_hat - g||^2` over decoded users matched by pilot.
    pub nse_error: f64,
    /// `sum ||g||^2` over the same users.
    pub nse_energy: f64,
}

impl TrialOutcome {
    pub fn fer(&self) -> f64 {
        (self.users - self.recovered) as f64 / self.users as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub value: f64,
    pub trials: usize,
    pub fer: f64,
    /// Standard error of the per-trial error fraction.
    pub fer_se: f64,
    /// False outputs per transmitted message.
    pub false_rate: f64,
    /// Mean per-frame normalized squared channel error, in dB.
    pub nse_db: f64,
    /// Recovered messages per sub-slot.
    pub throughput: f64,
    pub wall_time: Option<f64>,
}

impl MetricRow {
    /// 95% normal-approximation interval for the FER.
    pub fn fer_interval(&self) -> (f64, f64) {
        (self.fer - 1.96 * self.fer_se, self.fer + 1.96 * self.fer_se)
    }
}

/// `N_a` distinct uniformly random messages.
pub fn draw_messages(rng: &mut ChaCha8Rng, layout: MessageLayout, count: usize) -> Vec<Message> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let m = Message::random(rng, layout);
        if seen.insert(m.clone()) {
            out.push(m);
        }
    }
    out
}

/// Transmitted users of one frame and the received signal.
pub struct Frame {
    pub users: Vec<KnownUser>,
    pub received: nalgebra::DMatrix<num_complex::Complex64>,
}

/// Draws messages, channels and noise for one frame.
pub fn generate_frame(
    cfg: &SystemConfig,
    codebook: &PilotCodebook,
    pool: &AccessPatternPool,
    rng: &mut ChaCha8Rng,
) -> Result<Frame> {
    let layout = MessageLayout::from_config(cfg);
    let messages = draw_messages(rng, layout, cfg.active_users);
    let mut signals = Vec::with_capacity(messages.len());
    let mut coded = Vec::with_capacity(messages.len());
    for m in &messages {
        let (cw, x) = encode_user(m, codebook, pool)?;
        signals.push(x);
        coded.push(cw);
    }
    let channel = ChannelRealization::rayleigh(rng, cfg.antennas, messages.len(), cfg.sigma2());
    let received = transmit(&signals, &channel, rng)?;
    let users = messages
        .into_iter()
        .zip(coded)
        .enumerate()
        .map(|(u, (message, cw))| KnownUser {
            message,
            channel: channel.gains.column(u).into_owned(),
            symbols: cw.symbols,
            slots: cw.slots,
        })
        .collect();
    Ok(Frame { users, received })
}

/// Scores a decoder report against the transmitted users. Channel errors are
/// taken over decoded users whose pilot matches a transmitted one, preferring
/// the user with the identical message.
pub fn score(users: &[KnownUser], report: &DecodeReport) -> TrialOutcome {
    let sent: HashSet<&Message> = users.iter().map(|u| &u.message).collect();
    let out: HashSet<&Message> = report.messages().collect();
    let recovered = out.iter().filter(|m| sent.contains(*m)).count();
    let (mut nse_error, mut nse_energy) = (0.0, 0.0);
    for d in &report.users {
        let pilot_match = |u: &&KnownUser| crate::encoder::dec(u.message.pilot_part()) as usize == d.pilot;
        let truth = users
            .iter()
            .find(|u| u.message == d.message)
            .or_else(|| users.iter().find(pilot_match));
        if let Some(t) = truth {
            nse_error += (&d.channel - &t.channel).norm_squared();
            nse_energy += t.channel.norm_squared();
        }
    }
    TrialOutcome {
        users: users.len(),
        recovered,
        false_positives: out.len() - recovered,
        nse_error,
        nse_energy,
    }
}

/// Deterministic generator of trial `trial` at sweep point `point`.
pub fn trial_rng(master_seed: u64, point: usize, trial: usize) -> ChaCha8Rng {
    let mut z = master_seed ^ (point as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    let mut rng = ChaCha8Rng::seed_from_u64(z ^ (z >> 31));
    rng.set_stream(trial as u64);
    rng
}

/// Simulates and decodes one frame.
pub fn run_trial(
    cfg: &SystemConfig,
    codebook: &PilotCodebook,
    pool: &AccessPatternPool,
    spec: &ExperimentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TrialOutcome> {
    let frame = generate_frame(cfg, codebook, pool, rng)?;
    let opts = DecodeOptions {
        sic: spec.sic,
        genie: spec.perfect_sic.then_some(frame.users.as_slice()),
        seed: rand::Rng::random(rng),
        overload_margin: spec.overload_margin,
    };
    let report = decode_frame(&frame.received, codebook, pool, cfg, &opts)?;
    Ok(score(&frame.users, &report))
}

/// Aggregates trial outcomes in order.
pub fn summarize(value: f64, outcomes: &[TrialOutcome], n_slots: usize) -> MetricRow {
    let n = outcomes.len() as f64;
    let fers: Vec<f64> = outcomes.iter().map(TrialOutcome::fer).collect();
    let fer = fers.iter().sum::<f64>() / n;
    let var = if outcomes.len() > 1 {
        fers.iter().map(|f| (f - fer).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let users: usize = outcomes.iter().map(|o| o.users).sum();
    let false_pos: usize = outcomes.iter().map(|o| o.false_positives).sum();
    let nse: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.nse_energy > 0.0)
        .map(|o| o.nse_error / o.nse_energy)
        .collect();
    let nse_db = if nse.is_empty() {
        f64::NAN
    } else {
        10.0 * (nse.iter().sum::<f64>() / nse.len() as f64).log10()
    };
    let throughput = outcomes.iter().map(|o| o.recovered as f64).sum::<f64>() / n / n_slots as f64;
    MetricRow {
        value,
        trials: outcomes.len(),
        fer,
        fer_se: (var / n).sqrt(),
        false_rate: false_pos as f64 / users as f64,
        nse_db,
        throughput,
        wall_time: None,
    }
}

/// Runs every sweep point; trials run in parallel, each on its own stream.
pub fn run_experiment(spec: &ExperimentSpec, cfg: &SystemConfig) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    cfg.validate()?;
    let codebook = PilotCodebook::build(cfg.pilot_bits, cfg.pilot_len, cfg.seed)?;
    let pool = AccessPatternPool::build(cfg.n_slots, cfg.repetitions)?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for (point, &value) in spec.values.iter().enumerate() {
        let point_cfg = spec.variable.apply(cfg, value)?;
        point_cfg.validate()?;
        let start = Instant::now();
        let outcomes = (0..spec.trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(spec.master_seed, point, trial);
                run_trial(&point_cfg, &codebook, &pool, spec, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut row = summarize(value, &outcomes, point_cfg.n_slots);
        if spec.timing {
            row.wall_time = Some(start.elapsed().as_secs_f64());
        }
        rows.push(row);
    }
    if let Some(path) = &spec.output {
        fs::write(path, to_csv(spec.variable, &rows))?;
    }
    Ok(rows)
}

/// CSV with a header row, one line per sweep point.
pub fn to_csv(variable: SweepVariable, rows: &[MetricRow]) -> String {
    let timing = rows.iter().any(|r| r.wall_time.is_some());
    let mut out = format!("{},trials,fer,fer_se,false_rate,nse_db,throughput", variable.name());
    if timing {
        out.push_str(",wall_time_s");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.3},{:.6}",
            r.value, r.trials, r.fer, r.fer_se, r.false_rate, r.nse_db, r.throughput
        );
        if let Some(t) = r.wall_time {
            let _ = write!(out, ",{t:.3}");
        }
        out.push('\n');
    }
    out
}

/// True gains of the users of a frame, for diagnostics.
pub fn channels(users: &[KnownUser]) -> Vec<DVector<num_complex::Complex64>> {
    users.iter().map(|u| u.channel.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_perfect_trials() {
        let o = TrialOutcome { users: 10, recovered: 10, false_positives: 0, nse_error: 0.01, nse_energy: 10.0 };
        let row = summarize(20.0, &[o.clone(), o], 33);
        assert_eq!(row.fer, 0.0);
        assert_eq!(row.fer_se, 0.0);
        assert!((row.nse_db + 30.0).abs() < 1e-9);
        assert!((row.throughput - 10.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn fer_standard_error_from_trials() {
        let mk = |r| TrialOutcome { users: 4, recovered: r, false_positives: 0, nse_error: 0.0, nse_energy: 0.0 };
        let row = summarize(1.0, &[mk(4), mk(2)], 10);
        assert!((row.fer - 0.25).abs() < 1e-12);
        // sample sd of {0, 0.5} is 0.3536, over sqrt(2)
        assert!((row.fer_se - 0.25).abs() < 1e-12);
        assert!(row.nse_db.is_nan());
    }

    #[test]
    fn sweep_specs_validated() {
        assert!(ExperimentSpec::new(SweepVariable::SnrDb, vec![0.0, -1.0], 1, 0).validate().is_err());
        assert!(ExperimentSpec::new(SweepVariable::SnrDb, vec![0.0], 0, 0).validate().is_err());
        let cfg = SystemConfig::default();
        assert_eq!(SweepVariable::Rate.apply(&cfg, 3.0).unwrap().active_users, 99);
        assert!(SweepVariable::ActiveUsers.apply(&cfg, 2.5).is_err());
    }

    #[test]
    fn trial_streams_are_distinct_and_stable() {
        use rand::Rng;
        let a: u64 = trial_rng(1, 0, 0).random();
        let b: u64 = trial_rng(1, 0, 1).random();
        let c: u64 = trial_rng(1, 1, 0).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, trial_rng(1, 0, 0).random::<u64>());
    }
}
