use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ura_core::analysis::{
    coherence_duration, de_csv, decoder_complexity, density_evolution, rate_threshold, DecodabilityCurve,
    IterationBudget, BANDWIDTH_HZ, CARRIER_HZ,
};
use ura_core::config::{DecomposerKind, SystemConfig};
use ura_core::decoder::DEFAULT_OVERLOAD_MARGIN;
use ura_core::harness::{run_experiment, to_csv, ExperimentSpec, SweepVariable};

#[derive(Parser)]
#[command(name = "ura", version, about = "Unsourced random access simulator and analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo FER, channel-estimation error and throughput.
    Sim(SimArgs),
    /// Density-evolution sweep over the transmission rate.
    AnalyzeDe(DeArgs),
    /// Decodable-slot probability per SIC iteration.
    AnalyzeGamma(GammaArgs),
    /// Rate threshold of the peeling decoder.
    Threshold(ThresholdArgs),
    /// Channel coherence time in symbols.
    Coherence(CoherenceArgs),
    /// Decoder operation-count estimate.
    Complexity(ComplexityArgs),
}

#[derive(Args)]
struct SimArgs {
    /// `key = value` configuration file; defaults to the Table I parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["ml", "sdr"])]
    decoder: Option<String>,
    #[arg(long)]
    no_sic: bool,
    /// Cancel correctly decoded users with their true signals.
    #[arg(long)]
    perfect_sic: bool,
    /// Extra detected pilots tolerated in the sparsest slot; 0 stops at the
    /// first slot holding more than M.
    #[arg(long, default_value_t = DEFAULT_OVERLOAD_MARGIN)]
    overload_margin: usize,
    /// Add a wall-time column.
    #[arg(long)]
    timing: bool,
    /// One of snr, users, rate.
    #[arg(long, default_value = "users")]
    sweep: String,
    /// Comma-separated sweep values; defaults to the configured value.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

#[derive(Args)]
struct DeArgs {
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    #[arg(long = "M", default_value_t = 4)]
    m: usize,
    #[arg(long = "Nslot", default_value_t = 33)]
    n_slots: usize,
    #[arg(long, default_value_t = 0.1)]
    r_min: f64,
    #[arg(long, default_value_t = 5.0)]
    r_max: f64,
    #[arg(long, default_value_t = 0.1)]
    r_step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GammaArgs {
    #[arg(long = "Na", default_value_t = 100)]
    n_active: usize,
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    #[arg(long = "M", default_value_t = 4)]
    m: usize,
    #[arg(long = "Nslot", default_value_t = 33)]
    n_slots: usize,
    #[arg(long, default_value_t = 50)]
    t_max: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    #[arg(long = "M", default_value_t = 4)]
    m: usize,
    #[arg(long = "Nslot", default_value_t = 33)]
    n_slots: usize,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Fixed iteration budget instead of one iteration per user.
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Args)]
struct CoherenceArgs {
    /// Speeds in km/h.
    #[arg(long, value_delimiter = ',', default_values_t = [3.0, 30.0, 60.0, 120.0])]
    v: Vec<f64>,
    #[arg(long, default_value_t = CARRIER_HZ)]
    fc: f64,
    #[arg(long, default_value_t = BANDWIDTH_HZ)]
    bc: f64,
}

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
    rates: Vec<f64>,
}

fn load_config(path: &Option<PathBuf>) -> ura_core::Result<SystemConfig> {
    match path {
        Some(p) => SystemConfig::from_file(p),
        None => Ok(SystemConfig::table_one()),
    }
}

fn emit(text: &str, out: &Option<PathBuf>) -> ura_core::Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn sim(args: SimArgs) -> ura_core::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(d) = &args.decoder {
        cfg.decomposer = d.parse::<DecomposerKind>().map_err(ura_core::Error::Format)?;
    }
    let variable: SweepVariable = args.sweep.parse()?;
    let values = if args.values.is_empty() {
        vec![match variable {
            SweepVariable::SnrDb => cfg.snr_db,
            SweepVariable::ActiveUsers => cfg.active_users as f64,
            SweepVariable::Rate => cfg.active_users as f64 / cfg.n_slots as f64,
        }]
    } else {
        args.values
    };
    let mut spec = ExperimentSpec::new(variable, values, args.trials, args.seed);
    spec.sic = !args.no_sic;
    spec.perfect_sic = args.perfect_sic;
    spec.overload_margin = args.overload_margin;
    spec.timing = args.timing;
    let rows = run_experiment(&spec, &cfg)?;
    emit(&to_csv(variable, &rows), &args.out)
}

fn run(cli: Cli) -> ura_core::Result<()> {
    match cli.command {
        Command::Sim(args) => sim(args),
        Command::AnalyzeDe(a) => {
            if !(a.r_step > 0.0) || !(a.r_min > 0.0) || a.r_max < a.r_min {
                return Err(ura_core::Error::Dimension("rate grid needs 0 < r_min <= r_max and r_step > 0".into()));
            }
            let budget = IterationBudget::TiedToUsers { n_slots: a.n_slots };
            let n = ((a.r_max - a.r_min) / a.r_step + 1e-9).floor() as usize;
            let states: Vec<_> = (0..=n)
                .map(|i| {
                    let r = a.r_min + i as f64 * a.r_step;
                    density_evolution(r, a.k, a.m, budget.iterations(r))
                })
                .collect();
            emit(&de_csv(&states), &a.out)
        }
        Command::AnalyzeGamma(a) => {
            let curve = DecodabilityCurve::new(a.n_active, a.k, a.n_slots, a.m, a.t_max.min(a.n_active));
            emit(&curve.to_csv(), &a.out)
        }
        Command::Threshold(a) => {
            if !(a.step > 0.0) {
                return Err(ura_core::Error::Dimension("step must be positive".into()));
            }
            let budget = match a.t_max {
                Some(t) => IterationBudget::Fixed(t),
                None => IterationBudget::TiedToUsers { n_slots: a.n_slots },
            };
            let r = rate_threshold(a.k, a.m, budget, a.step);
            let decimals = (-a.step.log10()).ceil().max(0.0) as usize;
            println!("{r:.decimals$}");
            Ok(())
        }
        Command::Coherence(a) => {
            if a.v.iter().any(|&v| !(v > 0.0)) {
                return Err(ura_core::Error::Dimension("speeds must be positive".into()));
            }
            if let [v] = a.v[..] {
                println!("{}", coherence_duration(v, a.fc, a.bc).round());
            } else {
                println!("v_kmh,n_cd");
                for v in a.v {
                    println!("{v},{}", coherence_duration(v, a.fc, a.bc).round());
                }
            }
            Ok(())
        }
        Command::Complexity(a) => {
            let cfg = load_config(&a.config)?;
            println!("r,sensing,payload,total");
            for r in a.rates {
                let c = decoder_complexity(&cfg, r);
                println!("{r},{:.6e},{:.6e},{:.6e}", c.sensing, c.payload, c.total());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
